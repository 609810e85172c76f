"""Command-line interface: normalize, extract, train, predict, eval, cluster, viz, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import archive as archive_mod
from . import cluster as cluster_mod
from . import coco as coco_mod
from . import encoder as encoder_mod
from . import heads as heads_mod
from . import metrics as metrics_mod
from . import postprocess as post_mod
from . import synth as synth_mod
from . import train as train_mod
from . import viz as viz_mod


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(f"ratios must be three positive parts, got {text!r}")
    total = sum(parts)
    return (parts[0] / total, parts[1] / total, parts[2] / total)


def cmd_normalize(args) -> int:
    store = coco_mod.load_source(args.src)
    if any(inst.bbox is None for inst in store.instances):
        store = coco_mod.derive_bboxes(store)
    if args.splits:
        raw = json.loads(Path(args.splits).read_text(encoding="utf-8"))
        policy = coco_mod.SplitPolicy(
            mode="predefined", assignments={int(k): v for k, v in raw.items()}
        )
    else:
        policy = coco_mod.SplitPolicy(ratios=args.ratios, seed=args.seed, mode="random")
    store = coco_mod.split_dataset(store, policy)
    coco_mod.write_coco(store, args.dst)
    sizes = store.split_sizes()
    print(
        f"wrote {args.dst}: {len(store.images)} images, "
        f"{len(store.instances)} instances, splits train/val/test = "
        f"{sizes[0]}/{sizes[1]}/{sizes[2]}"
    )
    return 0


def cmd_extract(args) -> int:
    store = coco_mod.load_coco(args.coco)
    backend = encoder_mod.create_backend(args.encoder, embed_dim=args.embed_dim) \
        if args.encoder == "mock" else encoder_mod.create_backend(args.encoder)
    image_ids = store.split_ids(args.split)
    maps, flipped = [], []
    for image_id in image_ids:
        rec = store.image_by_id(image_id)
        raster = np.asarray(Image.open(Path(args.images) / rec.file_name).convert("RGB"))
        tensor = encoder_mod.preprocess(raster, args.target_long_side)
        maps.append(encoder_mod.extract(backend, tensor, image_id))
        if args.flip_aug:
            flipped.append(
                encoder_mod.extract(backend, encoder_mod.flip_tensor(tensor), image_id)
            )
    archive_mod.write_archive(args.out, maps, backend.spec, args.split, flipped)
    print(f"wrote {args.out}: {len(maps)} images ({args.encoder}, split={args.split})")
    return 0


def cmd_train(args) -> int:
    store = coco_mod.load_coco(args.coco)
    archive = archive_mod.read_archive(args.archive)
    cfg = train_mod.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        flip_augment=args.flip_aug,
        max_steps=args.max_steps,
    )
    result = train_mod.train(archive, store, args.task, cfg)
    heads_mod.save_checkpoint(
        args.out,
        result.stem,
        result.head,
        meta={
            "task": args.task,
            "encoder": archive.spec.to_dict(),
            "best_epoch": result.best_epoch,
            "seed": args.seed,
        },
    )
    curve_path = args.curve or str(Path(args.out).with_suffix(".curve.csv"))
    train_mod.write_curve_csv(result.curve, curve_path)
    last = result.curve[-1]
    print(
        f"trained {args.task} for {result.steps} steps; final train loss "
        f"{last['train_loss']:.4f}; wrote {args.out} and {curve_path}"
    )
    return 0


def cmd_predict(args) -> int:
    store = coco_mod.load_coco(args.coco)
    archive = archive_mod.read_archive(args.archive)
    stem, head, meta = heads_mod.load_checkpoint(args.ckpt)
    image_ids = [i for i in store.split_ids(args.split) if i in archive]
    if meta["task"] == "det":
        cfg = post_mod.PostprocessConfig(
            conf_threshold=args.conf,
            nms_threshold=args.nms,
            max_detections=args.max_det,
        )
        results = post_mod.predict_detections(archive, store, stem, head, cfg, image_ids)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=2), encoding="utf-8")
        print(f"wrote {args.out}: {len(results)} detections over {len(image_ids)} images")
    else:
        masks = post_mod.predict_masks(
            archive, store, stem, head, image_ids, args.mask_threshold
        )
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for image_id, mask in masks.items():
            Image.fromarray((mask * 255).astype(np.uint8)).save(
                out_dir / f"{image_id}.png"
            )
        print(f"wrote {len(masks)} masks to {out_dir}")
    return 0


def _load_mask_dir(path: Path, image_ids: list[int]) -> dict[int, np.ndarray]:
    masks = {}
    for image_id in image_ids:
        mask_path = path / f"{image_id}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing predicted mask {mask_path}")
        masks[image_id] = np.asarray(Image.open(mask_path).convert("L")) > 127
    return masks


def cmd_eval(args) -> int:
    store = coco_mod.load_coco(args.gt)
    if args.task == "det":
        preds = json.loads(Path(args.pred).read_text(encoding="utf-8"))
        metrics = metrics_mod.map_report(
            preds, store, split=args.split, conf_threshold=args.conf
        )
    else:
        image_ids = store.split_ids(args.split)
        preds = _load_mask_dir(Path(args.pred), image_ids)
        gts = {i: coco_mod.image_foreground_mask(store, i) for i in image_ids}
        metrics = metrics_mod.seg_metrics(preds, gts)
    report = metrics_mod.MetricReport(
        dataset=args.dataset, model=args.model, task=args.task, metrics=metrics
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    rendered = ", ".join(f"{k}={v:.3f}" for k, v in metrics.items())
    print(f"wrote {args.out}: {rendered}")
    return 0


def cmd_cluster(args) -> int:
    store = coco_mod.load_coco(args.gt)
    fruit_preds = json.loads(Path(args.fruit_pred).read_text(encoding="utf-8"))
    cfg = cluster_mod.VerifyConfig(
        min_fruits=args.min_fruits,
        max_compactness=args.compact,
        link_radius_factor=args.rho,
    )
    outputs_a: dict[int, list] = {}
    outputs_b: dict[int, list] = {}
    image_ids = store.split_ids(args.split)
    for image_id in image_ids:
        mask_path = Path(args.fg_mask_dir) / f"{image_id}.png"
        mask = np.asarray(Image.open(mask_path).convert("L")) > 127
        boxes = [
            tuple(p["bbox"]) for p in fruit_preds if int(p["image_id"]) == image_id
        ]
        evidence = cluster_mod.FruitEvidence.from_detections(boxes)
        outputs_a[image_id], _ = cluster_mod.pipeline_a(mask, evidence, cfg)
        outputs_b[image_id] = cluster_mod.pipeline_b(mask, cfg)
    reports = cluster_mod.compare_ab(outputs_a, outputs_b, store, split=args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {name: report.to_dict() for name, report in reports.items()}
    (out_dir / "cluster_report.json").write_text(
        json.dumps(payload, indent=2), encoding="utf-8"
    )
    viz_mod.emit_tables(
        [reports["verified"], reports["baseline"]], out_dir, basename="cluster_ab"
    )
    for name, report in reports.items():
        rendered = ", ".join(f"{k}={v:.3f}" for k, v in report.metrics.items())
        print(f"{name}: {rendered}")
    return 0


def cmd_viz_pca(args) -> int:
    archive = archive_mod.read_archive(args.archive)
    if args.images == "all":
        image_ids = archive.image_ids
    else:
        image_ids = [int(p) for p in args.images.split(",")]
    maps = [archive.get(i) for i in image_ids]
    model = viz_mod.fit_pca(maps, fallback=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fmap in maps:
        rgb = viz_mod.project_rgb(fmap, model)
        viz_mod.save_rgb(viz_mod.upscale_grid(rgb), out_dir / f"pca_{fmap.image_id}.png")
    (out_dir / "pca_model.json").write_text(
        json.dumps(
            {
                "variance_fractions": model.variance_fractions.tolist(),
                "degenerate": model.degenerate,
                "images": image_ids,
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    print(f"wrote {len(maps)} PCA maps to {out_dir}")
    return 0


def cmd_viz_overlay(args) -> int:
    store = coco_mod.load_coco(args.gt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_ids = store.split_ids(args.split)
    if args.task == "det":
        preds = json.loads(Path(args.pred).read_text(encoding="utf-8"))
        for image_id in image_ids:
            rec = store.image_by_id(image_id)
            raster = np.asarray(
                Image.open(Path(args.images) / rec.file_name).convert("RGB")
            )
            pred_boxes = [
                p["bbox"] for p in preds if int(p["image_id"]) == image_id
            ]
            gt_boxes = [
                inst.bbox
                for inst in store.instances_for_image(image_id)
                if inst.bbox is not None
            ]
            overlay = viz_mod.render_box_overlay(raster, pred_boxes, gt_boxes)
            Image.fromarray(overlay).save(out_dir / f"overlay_{image_id}.png")
    else:
        pred_masks = _load_mask_dir(Path(args.pred), image_ids)
        for image_id in image_ids:
            rec = store.image_by_id(image_id)
            raster = np.asarray(
                Image.open(Path(args.images) / rec.file_name).convert("RGB")
            )
            gt_mask = coco_mod.image_foreground_mask(store, image_id)
            overlay = viz_mod.render_mask_overlay(raster, pred_masks[image_id], gt_mask)
            Image.fromarray(overlay).save(out_dir / f"overlay_{image_id}.png")
    print(f"wrote {len(image_ids)} overlays to {out_dir}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in sorted(Path(args.input).glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        if "metrics" in data:
            reports.append(metrics_mod.MetricReport.from_dict(data))
    if not reports:
        print(f"no report JSON files under {args.input}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    by_task: dict[str, list] = {}
    for report in reports:
        by_task.setdefault(report.task, []).append(report)
    for task, group in sorted(by_task.items()):
        paths = viz_mod.emit_tables(group, out_dir, basename=f"{task}_results")
        print(f"{task}: wrote {paths['csv']}, {paths['txt']}, {paths['figure']}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "blocks":
        dataset = synth_mod.build_block_dataset(
            n_images=args.n_images, grid=(args.grid, args.grid), seed=args.seed
        )
        if args.ratios:
            dataset.store = coco_mod.split_dataset(
                dataset.store,
                coco_mod.SplitPolicy(ratios=args.ratios, seed=args.seed),
            )
        synth_mod.write_image_dir(dataset, out)
        coco_mod.write_coco(dataset.store, out / "annotations.json")
        print(f"wrote block dataset to {out} ({args.n_images} images)")
    else:
        scenes = {
            i + 1: synth_mod.sample_cluster_scene(args.seed + i)
            for i in range(args.n_images)
        }
        store = synth_mod.cluster_scene_store(scenes)
        coco_mod.write_coco(store, out / "annotations.json")
        mask_dir = out / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        fruit_preds = []
        for image_id, scene in scenes.items():
            Image.fromarray((scene.mask * 255).astype(np.uint8)).save(
                mask_dir / f"{image_id}.png"
            )
            for box in scene.fruit_boxes:
                fruit_preds.append(
                    {
                        "image_id": image_id,
                        "category_id": 1,
                        "bbox": list(box),
                        "score": 1.0,
                    }
                )
        (out / "fruit_predictions.json").write_text(
            json.dumps(fruit_preds, indent=2), encoding="utf-8"
        )
        print(f"wrote cluster scenes to {out} ({args.n_images} images)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchsight",
        description="Frozen-backbone patch-feature perception harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="convert a source dataset to COCO-JSON with splits")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--ratios", type=_parse_ratios, default=(0.7, 0.2, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", help="JSON file of predefined image id -> split")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("extract", help="cache frozen patch features into an archive")
    p.add_argument("--coco", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--encoder", choices=encoder_mod.KNOWN_VARIANTS, default="mock")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    p.add_argument("--flip-aug", action="store_true")
    p.add_argument("--target-long-side", type=int, default=640)
    p.add_argument("--embed-dim", type=int, default=64, help="mock backend width")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train stem + head on cached features")
    p.add_argument("--archive", required=True)
    p.add_argument("--coco", required=True)
    p.add_argument("--task", choices=["seg", "det"], required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flip-aug", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="loss-curve CSV path (default: next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over cached features")
    p.add_argument("--archive", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--coco", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--max-det", type=int, default=300)
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="results JSON (det) or mask dir (seg)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--task", choices=["seg", "det"], required=True)
    p.add_argument("--pred", required=True, help="results JSON (det) or mask dir (seg)")
    p.add_argument("--gt", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--model", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="verified vs baseline cluster detection")
    p.add_argument("--fg-mask-dir", required=True)
    p.add_argument("--fruit-pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--min-fruits", type=int, default=2)
    p.add_argument("--compact", type=float, default=0.6)
    p.add_argument("--rho", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("viz", help="diagnostic rasters")
    viz_sub = p.add_subparsers(dest="viz_command", required=True)
    q = viz_sub.add_parser("pca", help="PCA color maps of cached features")
    q.add_argument("--archive", required=True)
    q.add_argument("--images", default="all", help="comma-separated ids or 'all'")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_viz_pca)
    q = viz_sub.add_parser("overlay", help="prediction/ground-truth overlays")
    q.add_argument("--task", choices=["seg", "det"], required=True)
    q.add_argument("--pred", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--images", required=True)
    q.add_argument("--split", default="all")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_viz_overlay)

    p = sub.add_parser("report", help="tables + figures from a directory of reports")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate synthetic fixture datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["blocks", "clusters"], default="blocks")
    p.add_argument("--n-images", type=int, default=12)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_parse_ratios, default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
