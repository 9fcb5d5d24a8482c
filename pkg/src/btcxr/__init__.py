"""btcxr: deterministic data-prep and evaluation toolkit for chest X-ray
detection/classification pipelines."""

__version__ = "0.1.0"

from .boxes import Box, clip_box, iou
from .ingest import DatasetManifest, ImageRecord, load_manifest, save_manifest
from .wbf import FusedCluster, FusionConfig, fuse_image, fuse_manifest
from .stratify import SplitAssignment, SplitSpec, stratified_split, stratified_subsample
from .metrics import (
    Detection,
    EvalReport,
    average_precision,
    bootstrap_ci,
    mean_ap,
    roc_auc,
)
from .barlow import (
    AugmentationSpec,
    CrossCorrelation,
    augment_pair,
    bt_loss,
    bt_loss_gradient,
    bt_train_toy,
    cross_correlation,
)
from .lineval import FeatureSet, HeadConfig, LinearHead, evaluate_protocol, train_linear_head

__all__ = [
    "Box", "clip_box", "iou",
    "DatasetManifest", "ImageRecord", "load_manifest", "save_manifest",
    "FusedCluster", "FusionConfig", "fuse_image", "fuse_manifest",
    "SplitAssignment", "SplitSpec", "stratified_split", "stratified_subsample",
    "Detection", "EvalReport", "average_precision", "bootstrap_ci", "mean_ap", "roc_auc",
    "AugmentationSpec", "CrossCorrelation", "augment_pair", "bt_loss",
    "bt_loss_gradient", "bt_train_toy", "cross_correlation",
    "FeatureSet", "HeadConfig", "LinearHead", "evaluate_protocol", "train_linear_head",
]
