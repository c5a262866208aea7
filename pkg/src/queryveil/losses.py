"""Performance losses and the distortion term for concealed-query optimization.

Every loss is differentiable w.r.t. the candidate image and composes over a
set of working resolutions (optionally Gaussian-blurred before downsampling),
a set of pooling operations, and an ensemble of backends. Functions accept
either `Image` values or (3, H, W) tensors and return 0-dim torch tensors;
`float()` converts when a plain number is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backends import ActivationTensor, FeatureBackend
from .errors import DegenerateTargetError, InvalidResolutionError
from .image import Image, to_tensor
from .pooling import PoolingKind, pool_tensor
from .resampling import MIN_RESOLUTION, blur_resample_tensor, resample_tensor

_SQRT_GUARD = 1e-24  # keeps the hist-loss sqrt differentiable at exact zero


@dataclass(frozen=True)
class HistogramSpec:
    """Soft histogram layout: RBF kernels at fixed bin centers."""

    bin_centers: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(21))
    sigma: float = 0.1

    def __post_init__(self):
        if len(self.bin_centers) < 1:
            raise ValueError("need at least one bin center")
        if any(b2 <= b1 for b1, b2 in zip(self.bin_centers, self.bin_centers[1:])):
            raise ValueError("bin centers must be strictly increasing")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def with_step(cls, step: float = 0.05, sigma: float = 0.1) -> "HistogramSpec":
        n = int(round(1.0 / step)) + 1
        return cls(tuple(round(step * i, 6) for i in range(n)), sigma=sigma)


@dataclass(frozen=True)
class ResolutionSet:
    """Working resolutions (max image dimension) for a loss, with optional
    blur-before-downsample."""

    resolutions: tuple[int, ...]
    blur: bool = False

    def __post_init__(self):
        res = tuple(sorted(set(int(s) for s in self.resolutions)))
        if not res:
            raise ValueError("resolution set must be nonempty")
        if res[0] < MIN_RESOLUTION:
            raise InvalidResolutionError(
                f"resolutions must be >= {MIN_RESOLUTION}, got {res[0]}"
            )
        object.__setattr__(self, "resolutions", res)

    def label(self) -> str:
        name = _PRESET_BY_VALUE.get(self.resolutions)
        base = name if name else "{" + ",".join(map(str, self.resolutions)) + "}"
        return base + ("^" if self.blur else "")


_PRESETS: dict[str, tuple[int, ...]] = {}
_PRESETS["S0"] = (1024,)
_PRESETS["S1"] = tuple(sorted(_PRESETS["S0"] + tuple(range(300, 1000, 100))))
_PRESETS["S2"] = tuple(sorted(_PRESETS["S1"] + tuple(range(350, 1000, 100))))
_PRESETS["S3"] = tuple(sorted(_PRESETS["S0"] + (
    262, 289, 319, 351, 387, 427, 470, 518, 571, 630, 694, 765, 843, 929)))
_PRESET_BY_VALUE = {v: k for k, v in _PRESETS.items()}


def resolution_set(preset: str, blur: bool = False) -> ResolutionSet:
    """Named presets S0..S3; blur=True gives the hatted variants."""
    key = preset.upper().rstrip("^")
    if key not in _PRESETS:
        raise ValueError(f"unknown resolution preset {preset!r}")
    return ResolutionSet(_PRESETS[key], blur=blur or preset.endswith("^"))


@dataclass
class PerformanceLossSpec:
    """What the attack optimizes: loss kind x resolutions x backends."""

    kind: str  # desc | tensor | hist | pool_ensemble
    resolutions: ResolutionSet
    backends: tuple[FeatureBackend, ...]
    pooling: PoolingKind | None = None          # desc
    poolings: tuple[PoolingKind, ...] = ()      # pool_ensemble
    histogram: HistogramSpec = field(default_factory=HistogramSpec)

    def __post_init__(self):
        if self.kind not in ("desc", "tensor", "hist", "pool_ensemble"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.backends:
            raise ValueError("need at least one backend")
        self.backends = tuple(self.backends)
        if self.kind == "desc" and self.pooling is None:
            raise ValueError("desc loss needs a pooling kind")
        if self.kind == "pool_ensemble":
            if not self.poolings:
                raise ValueError("pooling ensemble must be nonempty")
            self.poolings = tuple(self.poolings)

    def label(self) -> str:
        if self.kind == "desc":
            core = f"L_{self.pooling.label()}"
        elif self.kind == "pool_ensemble":
            core = "L_P{" + ",".join(p.label() for p in self.poolings) + "}"
        else:
            core = f"L_{self.kind}"
        return f"{core}^{self.resolutions.label()}"


def spec_to_json(spec: PerformanceLossSpec, lam: float | None = None) -> dict:
    """Documented JSON schema for loss specifications."""
    payload: dict = {
        "kind": spec.kind,
        "resolutions": _PRESET_BY_VALUE.get(
            spec.resolutions.resolutions, list(spec.resolutions.resolutions)
        ),
        "blur": spec.resolutions.blur,
        "backends": [b.name for b in spec.backends],
    }
    if spec.kind == "desc":
        payload["pooling"] = spec.pooling.label()
    if spec.kind == "pool_ensemble":
        payload["poolings"] = [p.label() for p in spec.poolings]
    if spec.kind == "hist":
        centers = spec.histogram.bin_centers
        payload["sigma"] = spec.histogram.sigma
        payload["bin_step"] = round(centers[1] - centers[0], 6) if len(centers) > 1 else 1.0
    if lam is not None:
        payload["lambda"] = lam
    return payload


def spec_from_json(payload: dict, backends) -> tuple[PerformanceLossSpec, float]:
    """Parse the JSON schema; `backends` maps name -> FeatureBackend."""
    res = payload["resolutions"]
    blur = bool(payload.get("blur", False))
    rset = (
        resolution_set(res, blur=blur)
        if isinstance(res, str)
        else ResolutionSet(tuple(res), blur=blur)
    )
    kind = payload["kind"]
    names = payload.get("backends", ["A"])
    loaded = tuple(backends[n] for n in names)
    hist = HistogramSpec.with_step(
        step=float(payload.get("bin_step", 0.05)),
        sigma=float(payload.get("sigma", 0.1)),
    )
    spec = PerformanceLossSpec(
        kind=kind,
        resolutions=rset,
        backends=loaded,
        pooling=PoolingKind.parse(payload["pooling"]) if "pooling" in payload else (
            PoolingKind("gem") if kind == "desc" else None),
        poolings=tuple(PoolingKind.parse(p) for p in payload.get("poolings", ())),
        histogram=hist,
    )
    return spec, float(payload.get("lambda", 0.0))


# ---------------------------------------------------------------------------
# elementary losses (inputs assumed at a common working resolution)


def _as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, Image):
        return to_tensor(x, dtype=dtype)
    return x


def _pair(x, x_t, backend: FeatureBackend) -> tuple[torch.Tensor, torch.Tensor]:
    xt_ = _as_tensor(x_t, backend.dtype)
    x_ = _as_tensor(x, backend.dtype)
    if x_.shape != xt_.shape:
        raise ValueError(
            f"images must share a resolution, got {tuple(x_.shape)} vs {tuple(xt_.shape)}"
        )
    return x_, xt_


def loss_desc(x, x_t, backend: FeatureBackend, pooling: PoolingKind) -> torch.Tensor:
    """1 - cosine similarity of the pooled descriptors."""
    x_, xt_ = _pair(x, x_t, backend)
    hx = pool_tensor(backend(x_), pooling)
    ht = pool_tensor(backend(xt_), pooling)
    return 1.0 - hx @ ht


def _target_max(g_t: torch.Tensor) -> torch.Tensor:
    m = g_t.detach().max()
    if float(m) <= 0.0:
        raise DegenerateTargetError("target activation tensor is all zero")
    return m


def loss_tensor(x, x_t, backend: FeatureBackend) -> torch.Tensor:
    """Mean squared difference of activation tensors, max-normalized by the
    target's peak activation."""
    x_, xt_ = _pair(x, x_t, backend)
    g_t = backend(xt_)
    m = _target_max(g_t)
    return ((backend(x_) / m - g_t / m) ** 2).mean()


def soft_histogram(tensor, spec: HistogramSpec, m: float) -> torch.Tensor:
    """Per-channel soft counts: (d, n_bins) matrix of RBF kernel sums over
    spatial positions of activations normalized by `m`."""
    if not m > 0:
        raise DegenerateTargetError(f"normalization max must be positive, got {m}")
    values = tensor.values if isinstance(tensor, ActivationTensor) else tensor
    d = values.shape[0]
    a = values.reshape(d, -1, 1) / m
    centers = torch.as_tensor(spec.bin_centers, dtype=values.dtype).reshape(1, 1, -1)
    return torch.exp(-((a - centers) ** 2) / (2.0 * spec.sigma**2)).sum(dim=1)


def _hist_distance(u_x: torch.Tensor, u_t: torch.Tensor,
                   positions: int) -> torch.Tensor:
    # count normalization makes the distance scale-free, so one convergence
    # threshold works at every resolution and multi-resolution means weight
    # each resolution equally
    ssq = (((u_x - u_t) / positions) ** 2).sum(dim=1)
    return torch.sqrt(ssq + _SQRT_GUARD).mean()


def loss_hist(x, x_t, backend: FeatureBackend,
              spec: HistogramSpec | None = None) -> torch.Tensor:
    """Mean over channels of the l2 distance between per-position-normalized
    soft activation histograms; activations on both sides are scaled by the
    target's peak activation."""
    spec = spec if spec is not None else HistogramSpec()
    x_, xt_ = _pair(x, x_t, backend)
    g_t = backend(xt_)
    m = float(_target_max(g_t))
    positions = g_t.shape[1] * g_t.shape[2]
    return _hist_distance(
        soft_histogram(backend(x_), spec, m), soft_histogram(g_t, spec, m),
        positions,
    )


def loss_pool_ensemble(x, x_t, backend: FeatureBackend, poolings) -> torch.Tensor:
    """Mean descriptor loss over a set of candidate pooling operations."""
    poolings = tuple(poolings)
    if not poolings:
        raise ValueError("pooling ensemble must be nonempty")
    x_, xt_ = _pair(x, x_t, backend)
    gx, gt = backend(x_), backend(xt_)
    terms = [1.0 - pool_tensor(gx, p) @ pool_tensor(gt, p) for p in poolings]
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# composition over resolutions and backends


def _at_resolution(x: torch.Tensor, s: int, blur: bool) -> torch.Tensor:
    return blur_resample_tensor(x, s) if blur else resample_tensor(x, s)


def _base_loss(xs, xts, backend: FeatureBackend, spec: PerformanceLossSpec):
    if spec.kind == "desc":
        return loss_desc(xs, xts, backend, spec.pooling)
    if spec.kind == "tensor":
        return loss_tensor(xs, xts, backend)
    if spec.kind == "hist":
        return loss_hist(xs, xts, backend, spec.histogram)
    return loss_pool_ensemble(xs, xts, backend, spec.poolings)


def loss_multiresolution(x, x_t, spec: PerformanceLossSpec) -> torch.Tensor:
    """Mean of the base loss over the resolution set, then over backends.

    Both images are resampled (blur-resampled when the set says so) to each
    working resolution; reduction order is fixed for reproducibility.
    """
    dtype = spec.backends[0].dtype
    x_ = _as_tensor(x, dtype)
    xt_ = _as_tensor(x_t, dtype)
    per_backend = []
    for backend in spec.backends:
        terms = []
        for s in spec.resolutions.resolutions:
            xs = _at_resolution(x_, s, spec.resolutions.blur)
            xts = _at_resolution(xt_, s, spec.resolutions.blur)
            terms.append(_base_loss(xs, xts, backend, spec))
        per_backend.append(torch.stack(terms).mean())
    return torch.stack(per_backend).mean()


def distortion(x, x_c) -> torch.Tensor:
    """Squared pixel distance to the carrier, normalized by dimensionality."""
    x_ = _as_tensor(x, torch.float32)
    xc_ = _as_tensor(x_c, x_.dtype).to(x_.dtype)
    if x_.shape != xc_.shape:
        raise ValueError(
            f"carrier must share the candidate's shape, got {tuple(x_.shape)} "
            f"vs {tuple(xc_.shape)}"
        )
    return ((x_ - xc_) ** 2).mean()


def total_loss(x, x_t, x_c, spec: PerformanceLossSpec, lam: float) -> torch.Tensor:
    """Performance loss at the working resolutions plus lambda-weighted
    distortion at the original resolution."""
    dtype = spec.backends[0].dtype
    x_ = _as_tensor(x, dtype)
    perf = loss_multiresolution(x_, _as_tensor(x_t, dtype), spec)
    if lam == 0.0:
        return perf
    return perf + lam * distortion(x_, _as_tensor(x_c, dtype))


def loss_nontargeted(x, x_c, backend: FeatureBackend, pooling: PoolingKind,
                     lam: float) -> torch.Tensor:
    """Carrier cosine similarity plus distortion; minimizing pushes the
    descriptor away from the carrier's."""
    x_, xc_ = _pair(x, x_c, backend)
    hx = pool_tensor(backend(x_), pooling)
    hc = pool_tensor(backend(xc_), pooling)
    return hx @ hc + lam * distortion(x_, xc_)


class CompiledAttackLoss:
    """The multi-resolution performance loss with all target-side terms
    precomputed, for use inside the optimization loop."""

    def __init__(self, target, spec: PerformanceLossSpec):
        self.spec = spec
        xt = _as_tensor(target, spec.backends[0].dtype)
        self._terms: list[tuple[FeatureBackend, int, dict]] = []
        with torch.no_grad():
            for backend in spec.backends:
                for s in spec.resolutions.resolutions:
                    xts = _at_resolution(xt.to(backend.dtype), s, spec.resolutions.blur)
                    g_t = backend(xts)
                    payload: dict = {}
                    if spec.kind == "desc":
                        payload["desc"] = pool_tensor(g_t, spec.pooling)
                    elif spec.kind == "pool_ensemble":
                        payload["descs"] = [pool_tensor(g_t, p) for p in spec.poolings]
                    elif spec.kind == "tensor":
                        m = _target_max(g_t)
                        payload["m"] = m
                        payload["g_t_norm"] = g_t / m
                    else:
                        m = float(_target_max(g_t))
                        payload["m"] = m
                        payload["u_t"] = soft_histogram(g_t, spec.histogram, m)
                        payload["positions"] = g_t.shape[1] * g_t.shape[2]
                    self._terms.append((backend, s, payload))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        per_backend: dict[int, list] = {}
        for backend, s, payload in self._terms:
            xs = _at_resolution(x.to(backend.dtype), s, spec.resolutions.blur)
            g_x = backend(xs)
            if spec.kind == "desc":
                term = 1.0 - pool_tensor(g_x, spec.pooling) @ payload["desc"]
            elif spec.kind == "pool_ensemble":
                parts = [
                    1.0 - pool_tensor(g_x, p) @ d
                    for p, d in zip(spec.poolings, payload["descs"])
                ]
                term = torch.stack(parts).mean()
            elif spec.kind == "tensor":
                term = ((g_x / payload["m"] - payload["g_t_norm"]) ** 2).mean()
            else:
                u_x = soft_histogram(g_x, spec.histogram, payload["m"])
                term = _hist_distance(u_x, payload["u_t"], payload["positions"])
            per_backend.setdefault(id(backend), []).append(term)
        means = [torch.stack(terms).mean() for terms in per_backend.values()]
        return torch.stack(means).mean()
