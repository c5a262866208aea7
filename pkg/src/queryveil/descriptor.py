"""Unit-norm global descriptors and their on-disk format.

Descriptors persist as raw little-endian float32 vectors next to a JSON
sidecar recording how they were extracted (backend, pooling, resolution,
whitening id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UndefinedDirectionError

UNIT_NORM_TOL = 1e-6


def l2_normalize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise UndefinedDirectionError("cannot normalize a zero-norm vector")
    return v / n


@dataclass(frozen=True)
class Descriptor:
    """d-dimensional unit-norm retrieval representation."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > UNIT_NORM_TOL:
            raise UndefinedDirectionError(
                f"descriptor must be unit-norm within {UNIT_NORM_TOL}, got {n}"
            )
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def dot(self, other: "Descriptor") -> float:
        return float(self.values @ other.values)

    @classmethod
    def from_raw(cls, values) -> "Descriptor":
        """Normalize arbitrary values into a descriptor."""
        return cls(l2_normalize(values))


def save_descriptor(path, desc: Descriptor, metadata: dict | None = None) -> None:
    """Write `<path>` as little-endian float32 plus `<path>.json` sidecar."""
    path = Path(path)
    path.write_bytes(desc.values.astype("<f4").tobytes())
    sidecar = dict(metadata or {})
    sidecar["dim"] = desc.dim
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )


def load_descriptor(path) -> tuple[Descriptor, dict]:
    path = Path(path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    metadata = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    # float32 round-trip perturbs the norm in the 1e-8 range; renormalize
    return Descriptor.from_raw(raw), metadata
