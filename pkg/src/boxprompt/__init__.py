"""Pseudo-label refinement via feature-guided bounding-box prompt search."""

from .aggregation import FeatureAggregator, ct_loss, ct_posteriors
from .exceptions import (
    BackendError,
    ClassAbsentError,
    ConfigError,
    EmptyMaskError,
    FeatureCapabilityError,
    TensorFormatError,
    ValidationError,
)
from .metrics import MetricReport, assd, dice_3d, dice_loss, dice_score
from .postprocess import assemble_labels, connected_components, keep_largest
from .refiner import PixelwiseDiceClassifier, PseudoLabelRefiner
from .search import (
    BoxPrompt,
    PixelSet,
    SearchConfig,
    SearchTrace,
    artificial_expand,
    box_from_pixels,
    check_stable,
    delta_m,
    mbs_prototype,
    mbs_step,
    search_class,
    select_seed,
    tbs_step,
)
from .segmenter import ExternalProcessBackend, MockBackend, MockScene, make_backend
from .tensor_io import read_tensor, read_tensor_file, write_tensor, write_tensor_file

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BoxPrompt",
    "ClassAbsentError",
    "ConfigError",
    "EmptyMaskError",
    "ExternalProcessBackend",
    "FeatureAggregator",
    "FeatureCapabilityError",
    "MetricReport",
    "MockBackend",
    "MockScene",
    "PixelSet",
    "PixelwiseDiceClassifier",
    "PseudoLabelRefiner",
    "SearchConfig",
    "SearchTrace",
    "TensorFormatError",
    "ValidationError",
    "artificial_expand",
    "assd",
    "assemble_labels",
    "box_from_pixels",
    "check_stable",
    "connected_components",
    "ct_loss",
    "ct_posteriors",
    "delta_m",
    "dice_3d",
    "dice_loss",
    "dice_score",
    "keep_largest",
    "make_backend",
    "mbs_prototype",
    "mbs_step",
    "read_tensor",
    "read_tensor_file",
    "search_class",
    "select_seed",
    "tbs_step",
    "write_tensor",
    "write_tensor_file",
]
