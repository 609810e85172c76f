"""Immutable on-disk feature cache with random access and integrity checking.

Container layout (little-endian):

    magic      8 bytes   b"PSFARCH1"
    u64        header length, then header JSON:
               {"version": 1, "encoder": {...}, "split": str, "entries": N}
    N blocks   u32 meta length, meta JSON
               {"key": str, "image_id": int, "shape": [C, Hp, Wp],
                "image_size": [H, W], "flipped": bool}
               u64 payload length, zlib-compressed float32 C-order bytes
    u64        index length, then index JSON {key: block offset}
    u64        offset of the index length field
    32 bytes   sha256 over every preceding byte

Entries are keyed "<image_id>" for the canonical extraction and
"<image_id>:flip" for the optional horizontal-flip extraction. The digest
covers everything up to itself, so any flipped byte is detected on open.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .encoder import EncoderSpec, PatchFeatureMap

MAGIC = b"PSFARCH1"
VERSION = 1
_DIGEST_SIZE = 32


class ArchiveError(RuntimeError):
    pass


class ArchiveFormatError(ArchiveError):
    """File is not a feature archive or uses an unknown layout version."""


class ArchiveCorruptError(ArchiveError):
    """Stored digest does not match the file contents."""


class ArchiveKeyError(ArchiveError, KeyError):
    """Requested image id is not in the archive index."""


def _entry_key(image_id: int, flipped: bool) -> str:
    return f"{image_id}:flip" if flipped else str(image_id)


def write_archive(
    path: str | Path,
    maps: Iterable[PatchFeatureMap],
    spec: EncoderSpec,
    split: str,
    flipped_maps: Iterable[PatchFeatureMap] = (),
) -> Path:
    """Write feature maps to a new archive; returns the path.

    All maps must share the spec's channel count. ``flipped_maps`` are stored
    under the same image ids with the ``:flip`` key suffix.
    """
    path = Path(path)
    entries: list[tuple[str, PatchFeatureMap]] = []
    for fmap in maps:
        entries.append((_entry_key(fmap.image_id, False), fmap))
    for fmap in flipped_maps:
        entries.append((_entry_key(fmap.image_id, True), fmap))
    for key, fmap in entries:
        if fmap.data.shape[0] != spec.embed_dim:
            raise ArchiveError(
                f"entry {key}: channel count {fmap.data.shape[0]} does not "
                f"match encoder dim {spec.embed_dim}"
            )
    seen: set[str] = set()
    for key, _ in entries:
        if key in seen:
            raise ArchiveError(f"duplicate entry key {key}")
        seen.add(key)

    header = {
        "version": VERSION,
        "encoder": spec.to_dict(),
        "split": split,
        "entries": len(entries),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<Q", len(header_bytes))
    buf += header_bytes

    index: dict[str, int] = {}
    for key, fmap in entries:
        index[key] = len(buf)
        meta = {
            "key": key,
            "image_id": fmap.image_id,
            "shape": list(fmap.data.shape),
            "image_size": list(fmap.image_size),
            "flipped": key.endswith(":flip"),
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        payload = zlib.compress(
            np.ascontiguousarray(fmap.data, dtype=np.float32).tobytes(), level=6
        )
        buf += struct.pack("<I", len(meta_bytes))
        buf += meta_bytes
        buf += struct.pack("<Q", len(payload))
        buf += payload

    index_offset = len(buf)
    index_bytes = json.dumps(index, sort_keys=True).encode("utf-8")
    buf += struct.pack("<Q", len(index_bytes))
    buf += index_bytes
    buf += struct.pack("<Q", index_offset)
    buf += hashlib.sha256(bytes(buf)).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    return path


class FeatureArchive:
    """Read-side view of an archive; verifies the content digest on open."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        raw = self.path.read_bytes()
        if len(raw) < len(MAGIC) + 8 + 8 + _DIGEST_SIZE:
            raise ArchiveFormatError(f"{self.path}: too short to be an archive")
        if raw[: len(MAGIC)] != MAGIC:
            raise ArchiveFormatError(f"{self.path}: bad magic, not a feature archive")
        stored_digest = raw[-_DIGEST_SIZE:]
        actual_digest = hashlib.sha256(raw[:-_DIGEST_SIZE]).digest()
        if stored_digest != actual_digest:
            raise ArchiveCorruptError(f"{self.path}: content digest mismatch")

        self._raw = raw
        pos = len(MAGIC)
        header_len = struct.unpack_from("<Q", raw, pos)[0]
        pos += 8
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
        if header.get("version") != VERSION:
            raise ArchiveFormatError(
                f"{self.path}: unsupported archive version {header.get('version')}"
            )
        self.header = header
        self.spec = EncoderSpec.from_dict(header["encoder"])
        self.split = str(header["split"])

        index_offset = struct.unpack_from("<Q", raw, len(raw) - _DIGEST_SIZE - 8)[0]
        index_len = struct.unpack_from("<Q", raw, index_offset)[0]
        index_json = raw[index_offset + 8 : index_offset + 8 + index_len]
        self._index: dict[str, int] = json.loads(index_json.decode("utf-8"))

    @property
    def image_ids(self) -> list[int]:
        return sorted(
            int(key) for key in self._index if not key.endswith(":flip")
        )

    @property
    def has_flipped(self) -> bool:
        return any(key.endswith(":flip") for key in self._index)

    def __contains__(self, image_id: int) -> bool:
        return _entry_key(image_id, False) in self._index

    def __len__(self) -> int:
        return len(self.image_ids)

    def get(self, image_id: int, flipped: bool = False) -> PatchFeatureMap:
        key = _entry_key(image_id, flipped)
        offset = self._index.get(key)
        if offset is None:
            raise ArchiveKeyError(f"{self.path}: no entry for key {key!r}")
        return self._read_entry(offset)

    def _read_entry(self, offset: int) -> PatchFeatureMap:
        raw = self._raw
        meta_len = struct.unpack_from("<I", raw, offset)[0]
        pos = offset + 4
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        payload_len = struct.unpack_from("<Q", raw, pos)[0]
        pos += 8
        try:
            data_bytes = zlib.decompress(raw[pos : pos + payload_len])
        except zlib.error as exc:
            raise ArchiveCorruptError(f"{self.path}: undecodable entry: {exc}") from exc
        shape = tuple(meta["shape"])
        data = np.frombuffer(data_bytes, dtype=np.float32).reshape(shape).copy()
        return PatchFeatureMap(
            data=data,
            image_id=int(meta["image_id"]),
            image_size=(int(meta["image_size"][0]), int(meta["image_size"][1])),
        )

    def __iter__(self) -> Iterator[PatchFeatureMap]:
        for image_id in self.image_ids:
            yield self.get(image_id)


def read_archive(path: str | Path) -> FeatureArchive:
    return FeatureArchive(path)
