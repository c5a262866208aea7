"""PCA whitening of descriptors: centering, decorrelation, l2 renormalization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import Descriptor
from .errors import InsufficientDataError, UndefinedDirectionError

EIGENVALUE_FLOOR = 1e-9  # guards rank-deficient sample covariances


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        proj = np.asarray(self.projection, dtype=np.float64)
        if proj.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(
                f"projection must be d x d for d={mean.shape[0]}, got {proj.shape}"
            )
        mean.flags.writeable = False
        proj.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "projection", proj)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "WhiteningTransform":
        return cls(np.zeros(dim), np.eye(dim))


def _as_matrix(descriptors) -> np.ndarray:
    rows = [
        d.values if isinstance(d, Descriptor) else np.asarray(d, dtype=np.float64)
        for d in descriptors
    ]
    return np.stack(rows).astype(np.float64)


def learn_whitening(descriptors) -> WhiteningTransform:
    """PCA whitening from a descriptor sample (mean + Lambda^-1/2 V^T)."""
    x = _as_matrix(descriptors)
    if x.shape[0] < 2:
        raise InsufficientDataError(
            f"need at least 2 descriptors to learn whitening, got {x.shape[0]}"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    # biased (1/N) covariance: invariant to uniform sample duplication
    cov = centered.T @ centered / x.shape[0]
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    eigenvalues = np.maximum(eigenvalues, EIGENVALUE_FLOOR)
    projection = np.diag(eigenvalues**-0.5) @ eigenvectors.T
    return WhiteningTransform(mean, projection)


def whiten_raw(values: np.ndarray, t: WhiteningTransform) -> np.ndarray:
    """Apply centering + projection without renormalizing."""
    return t.projection @ (np.asarray(values, dtype=np.float64).ravel() - t.mean)


def whiten(desc: Descriptor, t: WhiteningTransform) -> Descriptor:
    y = whiten_raw(desc.values, t)
    n = float(np.linalg.norm(y))
    if n < 1e-12:
        raise UndefinedDirectionError("whitening projected the descriptor to zero")
    return Descriptor(y / n)


def save_whitening(path, t: WhiteningTransform, metadata: dict | None = None) -> None:
    payload = dict(metadata or {})
    payload["mean"] = t.mean.tolist()
    payload["projection"] = t.projection.tolist()
    Path(path).write_text(json.dumps(payload))


def load_whitening(path) -> tuple[WhiteningTransform, dict]:
    payload = json.loads(Path(path).read_text())
    t = WhiteningTransform(
        np.asarray(payload.pop("mean")), np.asarray(payload.pop("projection"))
    )
    return t, payload
