"""Dual-perspective cropping and enhancement of high-resolution vision features."""
from .dem import (
    FUSION_VARIANTS,
    DemParams,
    EnhancedFeatures,
    dual_pool,
    enhance,
    fuse,
    global_enhance,
    local_enhance,
    multires_combine,
)
from .encoder import PatchEmbedEncoder, VisionEncoderSpec, token_count
from .estimators import DualPerspectiveCropper, DualViewTokenizer
from .exceptions import DualViewError
from .geometry import (
    GridSpec,
    SubImageSet,
    compute_grid,
    global_crop,
    global_recombine,
    local_crop,
    local_recombine,
    map_pixel,
)
from .pipeline import PipelineConfig, PipelineParams, TokenSequence, budget, run

__version__ = "0.1.0"
