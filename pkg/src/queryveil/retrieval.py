"""The test-model: a full extraction pipeline image -> descriptor.

A retrieval model fixes the backend, the working resolution (a max-dim pixel
count, or the image's own resolution), the pooling kind and an optional
whitening transform. `describe` composes resample -> FCN -> pool -> (whiten)
with a final unit norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backends import FeatureBackend
from .descriptor import Descriptor, l2_normalize
from .errors import InvalidResolutionError
from .image import Image, to_tensor
from .pooling import PoolingKind, pool_tensor
from .resampling import MIN_RESOLUTION, resample_tensor
from .whitening import WhiteningTransform, whiten_raw

ORIGINAL = "original"


@dataclass
class RetrievalModel:
    backend: FeatureBackend
    resolution: int | str
    pooling: PoolingKind
    whitening: WhiteningTransform | None = None

    def __post_init__(self):
        if self.resolution != ORIGINAL:
            if not isinstance(self.resolution, int) or self.resolution < MIN_RESOLUTION:
                raise InvalidResolutionError(
                    f"resolution must be >= {MIN_RESOLUTION} or {ORIGINAL!r}, "
                    f"got {self.resolution!r}"
                )

    def label(self) -> str:
        res = self.resolution if self.resolution != ORIGINAL else "orig"
        wh = "+w" if self.whitening is not None else ""
        return f"[{self.backend.name},{self.pooling.label()},{res}{wh}]"


def describe_tensor(model: RetrievalModel, x: torch.Tensor) -> torch.Tensor:
    """Differentiable pipeline on a (3, H, W) tensor, without whitening."""
    s = model.resolution if model.resolution != ORIGINAL else max(x.shape[-2:])
    return pool_tensor(model.backend(resample_tensor(x, s)), model.pooling)


def describe(model: RetrievalModel, image: Image) -> Descriptor:
    with torch.no_grad():
        v = describe_tensor(model, to_tensor(image, dtype=model.backend.dtype))
    values = v.cpu().numpy()
    if model.whitening is not None:
        values = whiten_raw(values, model.whitening)
    return Descriptor(l2_normalize(values))
