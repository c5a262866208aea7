"""Concealed-query adversarial images for CNN-based image retrieval.

Given a target image and a carrier image, the toolkit optimizes an image
that looks like the carrier but produces (near-)identical retrieval
descriptors to the target, under varying knowledge of the retrieval system
(pooling, resolution, whitening, network).
"""

from .backends import ActivationTensor, FeatureBackend, extract, load_backend
from .descriptor import Descriptor, load_descriptor, save_descriptor
from .engine import (
    AttackConfig,
    AttackResult,
    AttackTrace,
    crop_to_aspect,
    run_attack,
    trace_metrics,
)
from .errors import (
    ConfigurationError,
    DegenerateTargetError,
    EmptyRelevantSetError,
    GradientError,
    InsufficientDataError,
    InvalidInputError,
    InvalidResolutionError,
    QueryVeilError,
    UndefinedDirectionError,
)
from .image import Image, load_image, read_png16, save_image_png8, write_png16
from .losses import (
    CompiledAttackLoss,
    HistogramSpec,
    PerformanceLossSpec,
    ResolutionSet,
    distortion,
    loss_desc,
    loss_hist,
    loss_multiresolution,
    loss_nontargeted,
    loss_pool_ensemble,
    loss_tensor,
    resolution_set,
    soft_histogram,
    total_loss,
)
from .pooling import CROW, MAC, RMAC, SPOC, PoolingKind, gem, pool
from .resampling import blur_resample, gaussian_blur, resample
from .retrieval import ORIGINAL, RetrievalModel, describe
from .whitening import WhiteningTransform, learn_whitening, whiten

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
