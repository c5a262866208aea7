"""The optimization loop that turns a carrier into a concealed query.

Adaptive-moment (Adam) updates on the image, box projection to [0,1] by
clipping after every step, carrier initialization, a restart schedule that
divides the learning rate by 5 and doubles the iteration budget, and a full
per-iteration metric trace under a monitoring test-model.

An "iteration" is one evaluate-then-step pass: metrics are recorded at every
loss evaluation (the initial carrier state included), convergence is checked
there, and the returned image is the best evaluated state by total loss.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .descriptor import l2_normalize
from .engine_io import atomic_write  # re-export point; see engine_io
from .errors import GradientError, InvalidInputError
from .image import Image, from_tensor, to_tensor, write_png16, save_image_png8
from .losses import (
    CompiledAttackLoss,
    PerformanceLossSpec,
    distortion,
    loss_desc,
    spec_to_json,
)
from .pooling import pool_tensor
from .resampling import resample_tensor
from .retrieval import ORIGINAL, RetrievalModel, describe_tensor
from .whitening import whiten_raw

DEFAULT_ITERATIONS = {"desc": 100, "pool_ensemble": 100, "hist": 100, "tensor": 1000}
DEFAULT_THRESHOLD = {"desc": 1e-3, "pool_ensemble": 1e-3, "hist": 1e-2, "tensor": 1e-2}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
RESTART_LR_FACTOR = 5.0
RESTART_ITER_FACTOR = 2


@dataclass
class AttackConfig:
    loss: PerformanceLossSpec
    lam: float = 0.0
    learning_rate: float = 0.01
    iterations: int | None = None           # per-kind default when None
    max_restarts: int = 3
    convergence_threshold: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    def resolved_iterations(self) -> int:
        return self.iterations if self.iterations is not None \
            else DEFAULT_ITERATIONS[self.loss.kind]

    def resolved_threshold(self) -> float:
        return self.convergence_threshold if self.convergence_threshold is not None \
            else DEFAULT_THRESHOLD[self.loss.kind]

    def echo(self) -> dict:
        return {
            "loss": spec_to_json(self.loss),
            "lambda": self.lam,
            "learning_rate": self.learning_rate,
            "iterations": self.resolved_iterations(),
            "max_restarts": self.max_restarts,
            "convergence_threshold": self.resolved_threshold(),
            "seed": self.seed,
            "adam_betas": list(ADAM_BETAS),
            "adam_eps": ADAM_EPS,
            "backend_weights": [b.weights_id for b in self.loss.backends],
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TraceRecord:
    iteration: int
    restart: int
    learning_rate: float
    distortion: float
    perf_loss: float
    sim_target: float
    sim_carrier: float


@dataclass
class AttackTrace:
    header: dict = field(default_factory=dict)
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]


@dataclass
class AttackResult:
    adversarial: Image
    trace: AttackTrace
    converged: bool
    restarts_used: int
    sim_target: float
    sim_carrier: float
    distortion: float
    perf_loss: float


def crop_to_aspect(carrier: Image, target: Image) -> Image:
    """Central crop of the carrier at the target's aspect ratio, resampled to
    the target's exact pixel dimensions."""
    tw, th = target.width, target.height
    cw, ch = carrier.width, carrier.height
    aspect = tw / th
    if cw / ch > aspect:
        crop_h, crop_w = ch, max(1, round(ch * aspect))
    else:
        crop_w, crop_h = cw, max(1, round(cw / aspect))
    if crop_w < 1 or crop_h < 1:
        raise InvalidInputError("degenerate zero-area crop")
    top = (ch - crop_h) // 2
    left = (cw - crop_w) // 2
    x = to_tensor(carrier)[:, top : top + crop_h, left : left + crop_w]
    if (crop_h, crop_w) != (th, tw):
        x = F.interpolate(
            x.unsqueeze(0), size=(th, tw), mode="bilinear",
            align_corners=False, antialias=False,
        ).squeeze(0)
    return from_tensor(x, id=carrier.id)


class _Monitor:
    """Frozen test-model view used for tracing; target/carrier descriptors
    are extracted once."""

    def __init__(self, model: RetrievalModel, target: torch.Tensor,
                 carrier: torch.Tensor):
        self.model = model
        self.target = self._descriptor(target)
        self.carrier = self._descriptor(carrier)

    def _descriptor(self, x: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            v = describe_tensor(self.model, x.detach()).cpu().numpy()
        if self.model.whitening is not None:
            v = whiten_raw(v, self.model.whitening)
        return l2_normalize(v)

    def similarities(self, x: torch.Tensor) -> tuple[float, float]:
        v = self._descriptor(x)
        return float(v @ self.target), float(v @ self.carrier)


def _monitor_shares_attack_path(spec: PerformanceLossSpec,
                                monitor: RetrievalModel) -> bool:
    """True when the monitor pipeline coincides with a single-resolution
    descriptor attack, so its forward pass can be reused instead of repeated."""
    return (
        spec.kind == "desc"
        and len(spec.resolutions.resolutions) == 1
        and not spec.resolutions.blur
        and monitor.backend is spec.backends[0]
        and monitor.whitening is None
        and monitor.pooling == spec.pooling
        and monitor.resolution == spec.resolutions.resolutions[0]
    )


def run_attack(target: Image, carrier: Image, config: AttackConfig,
               monitor: RetrievalModel) -> AttackResult:
    """Optimize an image that looks like the carrier but matches the target
    under the attack loss. See the module docstring for loop semantics."""
    if (target.width, target.height) != (carrier.width, carrier.height):
        raise InvalidInputError(
            "target and carrier must share dimensions; use crop_to_aspect first"
        )
    torch.manual_seed(config.seed)
    dtype = config.loss.backends[0].dtype
    x_t = to_tensor(target, dtype=dtype)
    x_c = to_tensor(carrier, dtype=dtype)
    perf_fn = CompiledAttackLoss(x_t, config.loss)
    mon = _Monitor(monitor, x_t, x_c)
    threshold = config.resolved_threshold()
    base_iters = config.resolved_iterations()

    shared = _monitor_shares_attack_path(config.loss, monitor)
    if shared:
        # same pipeline for loss and monitor: one forward pass serves both
        s = config.loss.resolutions.resolutions[0]
        backend = config.loss.backends[0]
        pooling = config.loss.pooling
        target_vec = perf_fn._terms[0][2]["desc"]

        def evaluate(x):
            hx = pool_tensor(backend(resample_tensor(x, s)), pooling)
            perf = 1.0 - hx @ target_vec
            # same float64 route as _Monitor, so traces match the general path
            v = l2_normalize(hx.detach().cpu().numpy())
            return perf, float(v @ mon.target), float(v @ mon.carrier)
    else:
        def evaluate(x):
            perf = perf_fn(x)
            sim_t, sim_c = mon.similarities(x)
            return perf, sim_t, sim_c

    trace = AttackTrace(header=config.echo())
    trace.header["monitor"] = monitor.label()

    best_total = math.inf
    best_perf = math.inf
    best_x = x_c.clone()
    converged = False
    restarts_used = 0
    step = 0

    for restart in range(config.max_restarts + 1):
        restarts_used = restart
        lr = config.learning_rate / (RESTART_LR_FACTOR**restart)
        budget = base_iters * (RESTART_ITER_FACTOR**restart)
        x = x_c.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([x], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)

        for _ in range(budget):
            optimizer.zero_grad(set_to_none=True)
            perf, sim_t, sim_c = evaluate(x)
            dist = distortion(x, x_c)
            total = perf + config.lam * dist
            if not torch.isfinite(total):
                raise GradientError(
                    f"non-finite loss at iteration {step}: "
                    f"perf={float(perf.detach())}, "
                    f"distortion={float(dist.detach())}"
                )
            perf_val = float(perf.detach())
            total_val = float(total.detach())
            trace.records.append(TraceRecord(
                iteration=step, restart=restart, learning_rate=lr,
                distortion=float(dist.detach()), perf_loss=perf_val,
                sim_target=sim_t, sim_carrier=sim_c,
            ))
            step += 1
            if total_val < best_total:
                best_total = total_val
                best_perf = perf_val
                best_x = x.detach().clone()
            if perf_val <= threshold:
                converged = True
                break
            total.backward()
            if not torch.isfinite(x.grad).all():
                raise GradientError(f"non-finite gradient at iteration {step}")
            optimizer.step()
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
        if converged:
            break

    sim_t, sim_c = mon.similarities(best_x)
    adversarial = from_tensor(best_x, id=f"adv:{target.id}")
    return AttackResult(
        adversarial=adversarial,
        trace=trace,
        converged=converged,
        restarts_used=restarts_used,
        sim_target=sim_t,
        sim_carrier=sim_c,
        distortion=float(distortion(best_x, x_c)),
        perf_loss=best_perf,
    )


def trace_metrics(x: Image, target: Image, carrier: Image,
                  monitor: RetrievalModel,
                  loss_spec: PerformanceLossSpec | None = None,
                  ) -> tuple[float, float, float, float]:
    """(distortion, perf_loss, sim_target, sim_carrier) for an arbitrary image.

    The performance loss is the attack spec's loss when one is given, else the
    descriptor loss under the monitor; similarities are under the monitor.
    """
    dtype = loss_spec.backends[0].dtype if loss_spec else monitor.backend.dtype
    x_ = to_tensor(x, dtype=dtype)
    x_t = to_tensor(target, dtype=dtype)
    x_c = to_tensor(carrier, dtype=dtype)
    mon = _Monitor(monitor, x_t, x_c)
    with torch.no_grad():
        if loss_spec is not None:
            perf = float(CompiledAttackLoss(x_t, loss_spec)(x_))
        else:
            s = monitor.resolution if monitor.resolution != ORIGINAL \
                else max(x_.shape[-2:])
            perf = float(loss_desc(
                resample_tensor(x_, s), resample_tensor(x_t, s),
                monitor.backend, monitor.pooling,
            ))
        dist = float(distortion(x_, x_c))
    sim_t, sim_c = mon.similarities(x_)
    return dist, perf, sim_t, sim_c


# ---------------------------------------------------------------------------
# persistence: 16-bit PNG + trace CSV + metadata JSON

TRACE_COLUMNS = ("iteration", "distortion", "perf_loss", "sim_target", "sim_carrier")


def save_trace_csv(path, trace: AttackTrace, config_hash: str) -> None:
    def render(f) -> None:
        f.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for r in trace.records:
            writer.writerow([
                r.iteration, repr(r.distortion), repr(r.perf_loss),
                repr(r.sim_target), repr(r.sim_carrier),
            ])
    atomic_write(path, render)


def load_trace_csv(path) -> list[dict]:
    rows = []
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append({k: float(v) for k, v in row.items()})
    return rows


def save_attack_result(out_dir, result: AttackResult, config: AttackConfig,
                       export_png8: bool = True,
                       timings: dict | None = None) -> dict:
    """Write adversarial.png16.png, trace.csv and metadata.json; returns the
    written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    paths = {
        "adversarial": out / "adversarial.png16.png",
        "trace": out / "trace.csv",
        "metadata": out / "metadata.json",
    }
    write_png16(paths["adversarial"], result.adversarial,
                text={"config_hash": chash})
    if export_png8:
        paths["adversarial_png8"] = out / "adversarial.png"
        save_image_png8(paths["adversarial_png8"], result.adversarial)
    save_trace_csv(paths["trace"], result.trace, chash)
    metadata = {
        "config": config.echo(),
        "config_hash": chash,
        "converged": result.converged,
        "restarts_used": result.restarts_used,
        "iterations_performed": len(result.trace),
        "final": {
            "sim_target": result.sim_target,
            "sim_carrier": result.sim_carrier,
            "distortion": result.distortion,
            "perf_loss": result.perf_loss,
        },
        "monitor": result.trace.header.get("monitor"),
        "timings": timings or {},
    }
    atomic_write(paths["metadata"],
                 lambda f: f.write(json.dumps(metadata, indent=2, sort_keys=True)))
    return {k: str(v) for k, v in paths.items()}
