"""Image preprocessing and frozen patch-token feature extraction."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from PIL import Image

PATCH_SIZE = 16
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# Fixture convention: synthetic foreground is painted in this color; the mock
# backend tags patches whose 16x16 block is majority signal-colored.
SIGNAL_COLOR = (230, 30, 30)
SIGNAL_OFFSET_SCALE = 6.0


class EncoderError(RuntimeError):
    pass


class BackendUnavailableError(EncoderError):
    """No backend is registered for the requested encoder variant."""


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    patch_size: int
    embed_dim: int
    variant: str

    def __post_init__(self) -> None:
        if self.patch_size != PATCH_SIZE:
            raise EncoderError(f"unsupported patch size {self.patch_size}; only 16")
        if self.embed_dim <= 0:
            raise EncoderError(f"embed dim must be positive, got {self.embed_dim}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderSpec":
        return cls(
            name=str(data["name"]),
            patch_size=int(data["patch_size"]),
            embed_dim=int(data["embed_dim"]),
            variant=str(data["variant"]),
        )


@dataclass
class PatchFeatureMap:
    """Dense per-image feature grid from a frozen encoder.

    ``data`` has shape (C, H_p, W_p); ``image_size`` is the preprocessed
    (H, W) in pixels and always equals (H_p * 16, W_p * 16).
    """

    data: np.ndarray
    image_id: int
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        c, hp, wp = self.data.shape
        h, w = self.image_size
        if (h, w) != (hp * PATCH_SIZE, wp * PATCH_SIZE):
            raise EncoderError(
                f"image size {self.image_size} incompatible with grid ({hp}, {wp})"
            )
        if not np.all(np.isfinite(self.data)):
            raise EncoderError(f"non-finite features for image {self.image_id}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.data.shape[1], self.data.shape[2])


def fit_to_patch_grid(
    height: int, width: int, target_long_side: int = 640
) -> tuple[int, int]:
    """Resize rule: long side scaled to target, both dims floored to multiples of 16."""
    if height <= 0 or width <= 0:
        raise EncoderError(f"degenerate image size ({height}, {width})")
    scale = target_long_side / max(height, width)
    new_h = max(PATCH_SIZE, int(height * scale) // PATCH_SIZE * PATCH_SIZE)
    new_w = max(PATCH_SIZE, int(width * scale) // PATCH_SIZE * PATCH_SIZE)
    return (new_h, new_w)


def preprocess(image: np.ndarray, target_long_side: int = 640) -> np.ndarray:
    """Resize an RGB uint8 (H0, W0, 3) raster and normalize to float32 (3, H, W).

    Aspect ratio is preserved up to the floor-to-16 rounding; channels are
    normalized with the standard ImageNet mean/std.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise EncoderError(f"expected (H, W, 3) RGB raster, got {image.shape}")
    h0, w0 = image.shape[:2]
    if h0 < PATCH_SIZE or w0 < PATCH_SIZE:
        raise EncoderError(f"image {h0}x{w0} smaller than one patch")
    new_h, new_w = fit_to_patch_grid(h0, w0, target_long_side)
    if (new_h, new_w) != (h0, w0):
        resized = Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR)
        image = np.asarray(resized)
    scaled = image.astype(np.float32) / 255.0
    normalized = (scaled - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(normalized.transpose(2, 0, 1))


def denormalize(tensor: np.ndarray) -> np.ndarray:
    """Invert ImageNet normalization back to unit-range (H, W, 3)."""
    return tensor.transpose(1, 2, 0) * IMAGENET_STD + IMAGENET_MEAN


class EncoderBackend(Protocol):
    """Frozen patch-token encoder: identical input must yield identical output."""

    spec: EncoderSpec

    def encode(self, tensor: np.ndarray) -> np.ndarray:
        """Map a normalized (3, H, W) tensor to (C, H/16, W/16) features."""
        ...


def signal_offset(embed_dim: int, scale: float = SIGNAL_OFFSET_SCALE) -> np.ndarray:
    """Fixed offset added by the mock backend to signal-colored patches."""
    rng = np.random.default_rng(0x5EED)
    direction = rng.standard_normal(embed_dim)
    return (direction / np.linalg.norm(direction) * scale).astype(np.float32)


def _content_seed(tensor: np.ndarray, grid: tuple[int, int]) -> int:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(tensor, dtype=np.float32).tobytes())
    digest.update(np.array(grid, dtype=np.int64).tobytes())
    return int.from_bytes(digest.digest()[:8], "little")


class MockEncoder:
    """Deterministic stand-in backend for offline tests and demos.

    Features are pseudo-random, seeded by the image content hash and grid
    size. Patches whose underlying 16x16 block is majority signal-colored
    get a fixed offset vector added, which makes synthetic foreground
    linearly separable from background.
    """

    def __init__(self, embed_dim: int = 64) -> None:
        self.spec = EncoderSpec(
            name=f"mock-{embed_dim}", patch_size=PATCH_SIZE, embed_dim=embed_dim,
            variant="mock",
        )
        self._offset = signal_offset(embed_dim)

    def encode(self, tensor: np.ndarray) -> np.ndarray:
        _, h, w = tensor.shape
        if h % PATCH_SIZE or w % PATCH_SIZE:
            raise EncoderError(f"dims ({h}, {w}) not divisible by {PATCH_SIZE}")
        hp, wp = h // PATCH_SIZE, w // PATCH_SIZE
        rng = np.random.default_rng(_content_seed(tensor, (hp, wp)))
        features = rng.standard_normal((self.spec.embed_dim, hp, wp)).astype(np.float32)
        features[:, self.signal_patches(tensor)] += self._offset[:, None]
        return features

    @staticmethod
    def signal_patches(tensor: np.ndarray) -> np.ndarray:
        """Boolean (H_p, W_p) grid of majority signal-colored blocks."""
        rgb = denormalize(tensor)
        target = np.array(SIGNAL_COLOR, dtype=np.float32) / 255.0
        is_signal = np.all(np.abs(rgb - target) < 0.2, axis=2)
        h, w = is_signal.shape
        blocks = is_signal.reshape(
            h // PATCH_SIZE, PATCH_SIZE, w // PATCH_SIZE, PATCH_SIZE
        )
        return blocks.mean(axis=(1, 3)) > 0.5


_BACKEND_FACTORIES: dict[str, Callable[..., EncoderBackend]] = {
    "mock": MockEncoder,
}

#: Published variants; real backends attach externally via register_backend,
#: reporting their own embed dims.
KNOWN_VARIANTS = ("s", "s+", "b", "l", "mock")


def register_backend(variant: str, factory: Callable[..., EncoderBackend]) -> None:
    """Register a backend factory for an encoder variant (plugin point)."""
    _BACKEND_FACTORIES[variant] = factory


def create_backend(variant: str, **kwargs) -> EncoderBackend:
    factory = _BACKEND_FACTORIES.get(variant)
    if factory is None:
        known = sorted(_BACKEND_FACTORIES)
        raise BackendUnavailableError(
            f"no backend registered for encoder variant {variant!r} "
            f"(available: {known}); real encoder weights are an external "
            f"component, use register_backend() to attach one"
        )
    return factory(**kwargs)


def extract(
    backend: EncoderBackend, tensor: np.ndarray, image_id: int
) -> PatchFeatureMap:
    """Run the frozen backend on a preprocessed tensor and wrap the result."""
    _, h, w = tensor.shape
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise EncoderError(f"dims ({h}, {w}) not divisible by {PATCH_SIZE}")
    features = backend.encode(tensor)
    expected = (backend.spec.embed_dim, h // PATCH_SIZE, w // PATCH_SIZE)
    if features.shape != expected:
        raise EncoderError(
            f"backend {backend.spec.name} returned shape {features.shape}, "
            f"expected {expected}"
        )
    return PatchFeatureMap(
        data=np.ascontiguousarray(features, dtype=np.float32),
        image_id=image_id,
        image_size=(h, w),
    )


def flip_tensor(tensor: np.ndarray) -> np.ndarray:
    """Horizontal flip of a (3, H, W) tensor."""
    return np.ascontiguousarray(tensor[:, :, ::-1])
