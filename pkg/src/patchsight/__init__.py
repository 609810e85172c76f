"""patchsight: frozen-backbone patch-feature perception harness."""

from .archive import FeatureArchive, read_archive, write_archive
from .coco import (
    AnnotationStore,
    Category,
    ImageRecord,
    Instance,
    SplitPolicy,
    derive_bboxes,
    load_source,
    split_dataset,
    validate,
    write_coco,
)
from .cluster import FruitEvidence, VerifyConfig, pipeline_a, pipeline_b, verify
from .encoder import EncoderSpec, MockEncoder, PatchFeatureMap, extract, preprocess
from .heads import (
    AdaptationStem,
    DenseMask,
    DetGrid,
    DetectionHead,
    SegmentationHead,
    StemConfig,
    decode_boxes,
    encode_targets,
)
from .metrics import MetricReport, average_precision, box_iou, map_report, seg_metrics
from .postprocess import PostprocessConfig, binarize, nms, postprocess
from .train import LossWeights, TrainConfig, detection_loss, segmentation_loss, train
from .viz import PcaModel, fit_pca, project_rgb

__version__ = "0.1.0"

__all__ = [
    "AnnotationStore",
    "AdaptationStem",
    "Category",
    "DenseMask",
    "DetGrid",
    "DetectionHead",
    "EncoderSpec",
    "FeatureArchive",
    "FruitEvidence",
    "ImageRecord",
    "Instance",
    "LossWeights",
    "MetricReport",
    "MockEncoder",
    "PatchFeatureMap",
    "PcaModel",
    "PostprocessConfig",
    "SegmentationHead",
    "SplitPolicy",
    "StemConfig",
    "TrainConfig",
    "VerifyConfig",
    "average_precision",
    "binarize",
    "box_iou",
    "decode_boxes",
    "derive_bboxes",
    "detection_loss",
    "encode_targets",
    "extract",
    "fit_pca",
    "load_source",
    "map_report",
    "nms",
    "pipeline_a",
    "pipeline_b",
    "postprocess",
    "preprocess",
    "project_rgb",
    "read_archive",
    "seg_metrics",
    "segmentation_loss",
    "split_dataset",
    "train",
    "validate",
    "verify",
    "write_archive",
    "write_coco",
]
