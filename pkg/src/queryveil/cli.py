"""Command-line entry points.

Commands: attack, evaluate, extract, whiten, plot, sweep-lambda,
sweep-resolution. Flat JSON config files with flag overrides; resolved
configuration is echoed into every output's metadata. Exit codes: 0 success,
1 configuration error, 2 runtime error. The QUERYVEIL_WEIGHTS environment
variable points at a directory of backend weight files.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from .backends import load_backend
from .benchmark import load_experiment, run_experiment
from .descriptor import save_descriptor
from .engine import (
    AttackConfig,
    crop_to_aspect,
    load_trace_csv,
    run_attack,
    save_attack_result,
)
from .engine_io import atomic_write
from .errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidResolutionError,
    QueryVeilError,
)
from .image import load_image
from .losses import spec_from_json
from .pooling import PoolingKind
from .retrieval import RetrievalModel, describe
from .whitening import learn_whitening, save_whitening
from . import plots


def _resolved_config(config_file: str | None, overrides: dict) -> dict:
    resolved = {}
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        resolved.update(json.loads(path.read_text()))
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _attack_config_from(resolved: dict) -> AttackConfig:
    backends = {}
    for name in resolved.get("backends", ["A"]):
        backends[name] = load_backend(
            name,
            weights_path=resolved.get("weights", {}).get(name),
            seed=int(resolved.get("backend_seed", 0)),
        )
    loss_payload = {
        "kind": resolved.get("loss", "desc"),
        "pooling": resolved.get("pooling", "gem"),
        "poolings": resolved.get("poolings", ["mac", "spoc", "gem"]),
        "resolutions": resolved.get("resolutions", "S0"),
        "blur": bool(resolved.get("blur", False)),
        "sigma": float(resolved.get("sigma", 0.1)),
        "bin_step": float(resolved.get("bin_step", 0.05)),
        "backends": list(backends),
        "lambda": float(resolved.get("lambda", 0.0)),
    }
    if isinstance(loss_payload["resolutions"], str) and not \
            loss_payload["resolutions"].upper().rstrip("^").startswith("S"):
        cleaned = loss_payload["resolutions"]
        for ch in "{},":
            cleaned = cleaned.replace(ch, " ")
        loss_payload["resolutions"] = [int(v) for v in cleaned.split()]
    loss, lam = spec_from_json(loss_payload, backends)
    return AttackConfig(
        loss=loss,
        lam=lam,
        learning_rate=float(resolved.get("learning_rate", 0.01)),
        iterations=resolved.get("iterations"),
        max_restarts=int(resolved.get("max_restarts", 3)),
        convergence_threshold=resolved.get("convergence_threshold"),
        seed=int(resolved.get("seed", 0)),
    )


def _monitor_from(resolved: dict, config: AttackConfig) -> RetrievalModel:
    res = resolved.get("monitor_resolution")
    if res is None:
        res = max(config.loss.resolutions.resolutions)
    return RetrievalModel(
        config.loss.backends[0], int(res),
        PoolingKind.parse(resolved.get("monitor_pooling", "gem")),
    )


def _load_pair(target_path, carrier_path):
    target = load_image(target_path, id=Path(str(target_path)).stem)
    carrier = load_image(carrier_path, id=Path(str(carrier_path)).stem)
    if (carrier.width, carrier.height) != (target.width, target.height):
        carrier = crop_to_aspect(carrier, target)
    return target, carrier


@click.group()
def cli():
    """Concealed-query adversarial images for CNN image retrieval."""


@cli.command("attack")
@click.argument("target", type=click.Path(exists=True))
@click.argument("carrier", type=click.Path(exists=True))
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="JSON config; flags override its values.")
@click.option("--loss", default=None,
              type=click.Choice(["desc", "tensor", "hist", "pool_ensemble"]))
@click.option("--pooling", default=None, help="Pooling for desc loss.")
@click.option("--resolutions", default=None,
              help="Preset S0..S3 or space/comma-separated sizes.")
@click.option("--blur/--no-blur", default=None,
              help="Blur before downsampling inside the loss.")
@click.option("--lambda", "lam", type=float, default=None,
              help="Distortion weight.")
@click.option("--iterations", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--max-restarts", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backend-seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--png8/--no-png8", default=True,
              help="Also export an 8-bit PNG.")
def cmd_attack(target, carrier, config_file, out_dir, png8, **flags):
    """Optimize a concealed query: TARGET's descriptors, CARRIER's looks."""
    overrides = {k: v for k, v in flags.items() if v is not None}
    if "lam" in overrides:
        overrides["lambda"] = overrides.pop("lam")
    resolved = _resolved_config(config_file, overrides)
    config = _attack_config_from(resolved)
    monitor = _monitor_from(resolved, config)
    target_img, carrier_img = _load_pair(target, carrier)
    t0 = time.perf_counter()
    result = run_attack(target_img, carrier_img, config, monitor)
    elapsed = time.perf_counter() - t0
    paths = save_attack_result(out_dir, result, config, export_png8=png8,
                               timings={"attack_seconds": elapsed})
    metadata_path = Path(paths["metadata"])
    metadata = json.loads(metadata_path.read_text())
    metadata["run_config"] = resolved
    atomic_write(metadata_path,
                 lambda f: f.write(json.dumps(metadata, indent=2, sort_keys=True)))
    click.echo(
        f"{config.loss.label()} lam={config.lam:g} converged={result.converged} "
        f"sim_target={result.sim_target:.3f} distortion={result.distortion:.5f} "
        f"({elapsed:.1f}s) -> {out_dir}"
    )


@cli.command("evaluate")
@click.argument("experiment", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--reuse-adversarial", is_flag=True, default=False,
              help="Re-score persisted adversarial images.")
def cmd_evaluate(experiment, out_dir, reuse_adversarial):
    """Run an experiment spec file; emit per-query CSV + aggregate JSON."""
    spec = load_experiment(experiment)
    report = run_experiment(spec, output_dir=out_dir,
                            reuse_adversarial=reuse_adversarial)
    click.echo(
        f"{report.dataset}: mAP {100 * report.original_map:.1f} -> "
        f"{100 * report.attacked_map:.1f} (delta {100 * report.delta_map:+.1f}), "
        f"mean sim {report.mean_sim_target:.3f}"
    )


@cli.command("extract")
@click.argument("images", type=click.Path(exists=True), nargs=-1, required=True)
@click.option("--backend", default="A", type=click.Choice(["A", "R", "V"]))
@click.option("--backend-seed", type=int, default=0)
@click.option("--pooling", default="gem")
@click.option("--resolution", type=int, default=1024)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_extract(images, backend, backend_seed, pooling, resolution, out_dir):
    """Extract descriptors (.f32 + JSON sidecar) for images."""
    model = RetrievalModel(
        load_backend(backend, seed=backend_seed), resolution,
        PoolingKind.parse(pooling))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for item in images:
        p = Path(item)
        paths.extend(sorted(p.glob("*.png")) + sorted(p.glob("*.jpg"))
                     if p.is_dir() else [p])
    for p in paths:
        desc = describe(model, load_image(p))
        save_descriptor(out / (p.stem + ".f32"), desc, metadata={
            "backend": backend,
            "weights": model.backend.weights_id,
            "pooling": model.pooling.label(),
            "resolution": resolution,
            "whitening": None,
            "source": str(p),
        })
    click.echo(f"extracted {len(paths)} descriptors -> {out}")


@cli.command("whiten")
@click.argument("cache", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_whiten(cache, out_path):
    """Learn PCA whitening from a directory of .f32 descriptors."""
    from .descriptor import load_descriptor

    files = sorted(Path(cache).glob("*.f32"))
    if len(files) < 2:
        raise ConfigurationError(
            f"need at least 2 descriptors in {cache}, found {len(files)}")
    descriptors = [load_descriptor(f)[0] for f in files]
    transform = learn_whitening(descriptors)
    save_whitening(out_path, transform, metadata={
        "source": str(cache), "samples": len(files)})
    click.echo(f"whitening ({transform.dim} dims, {len(files)} samples) "
               f"-> {out_path}")


@cli.command("plot")
@click.argument("source", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_plot(source, out_dir):
    """Plot a trace CSV or a sweep report JSON."""
    source = Path(source)
    if source.suffix == ".csv":
        rows = load_trace_csv(source)
        written = plots.plot_trace(rows, out_dir)
    else:
        report = json.loads(source.read_text())
        out = Path(out_dir)
        if "series" in report:
            written = [plots.plot_resolution_sweep(report,
                                                   out / "resolution_sweep.png")]
        elif "sweep" in report:
            written = [plots.plot_lambda_sweep(report, out / "lambda_sweep.png")]
        else:
            raise ConfigurationError(f"unrecognized report structure: {source}")
    click.echo("\n".join(written))


@cli.command("sweep-lambda")
@click.argument("target", type=click.Path(exists=True))
@click.argument("carrier", type=click.Path(exists=True))
@click.option("--lambdas", default="0,0.1,1,10", help="Comma-separated weights.")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_sweep_lambda(target, carrier, lambdas, config_file, out_dir):
    """Repeat one attack across distortion weights; report the trade-off."""
    resolved = _resolved_config(config_file, {})
    target_img, carrier_img = _load_pair(target, carrier)
    out = Path(out_dir)
    rows = []
    for lam in [float(v) for v in lambdas.split(",")]:
        resolved["lambda"] = lam
        config = _attack_config_from(resolved)
        monitor = _monitor_from(resolved, config)
        result = run_attack(target_img, carrier_img, config, monitor)
        save_attack_result(out / f"lambda_{lam:g}", result, config)
        rows.append({
            "lambda": lam,
            "distortion": result.distortion,
            "sim_target": result.sim_target,
            "sim_carrier": result.sim_carrier,
            "converged": result.converged,
        })
        click.echo(f"lambda={lam:g}: distortion={result.distortion:.5f} "
                   f"sim_target={result.sim_target:.3f}")
    report = {"sweep": rows, "config": resolved}
    atomic_write(out / "lambda_sweep.json",
                 lambda f: f.write(json.dumps(report, indent=2, sort_keys=True)))
    plots.plot_lambda_sweep(report, out / "lambda_sweep.png")
    click.echo(f"report -> {out / 'lambda_sweep.json'}")


@cli.command("sweep-resolution")
@click.argument("target", type=click.Path(exists=True))
@click.argument("carrier", type=click.Path(exists=True))
@click.option("--preset", default="S1", help="Attack-resolution preset.")
@click.option("--test-resolutions", default="300,450,600,750,900,1024")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_sweep_resolution(target, carrier, preset, test_resolutions, config_file,
                         out_dir):
    """Compare blurred vs plain multi-resolution attacks across
    test-resolutions."""
    resolved = _resolved_config(config_file, {})
    resolved.setdefault("loss", "hist")
    target_img, carrier_img = _load_pair(target, carrier)
    tests = [int(v) for v in test_resolutions.split(",")]
    out = Path(out_dir)
    series = {}
    for blur in (False, True):
        resolved["resolutions"] = preset
        resolved["blur"] = blur
        config = _attack_config_from(resolved)
        monitor = _monitor_from(resolved, config)
        result = run_attack(target_img, carrier_img, config, monitor)
        save_attack_result(out / config.loss.resolutions.label().replace("^", "b"),
                           result, config)
        sims = []
        for s in tests:
            model = RetrievalModel(config.loss.backends[0], s,
                                   monitor.pooling)
            adv_desc = describe(model, result.adversarial)
            tgt_desc = describe(model, target_img)
            sims.append(adv_desc.dot(tgt_desc))
        series[config.loss.resolutions.label()] = sims
        click.echo(f"{config.loss.resolutions.label()}: "
                   + " ".join(f"{v:.3f}" for v in sims))
    report = {"test_resolutions": tests, "series": series,
              "metric": "sim_target", "config": resolved}
    atomic_write(out / "resolution_sweep.json",
                 lambda f: f.write(json.dumps(report, indent=2, sort_keys=True)))
    plots.plot_resolution_sweep(report, out / "resolution_sweep.png")
    click.echo(f"report -> {out / 'resolution_sweep.json'}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (ConfigurationError, InvalidInputError, InvalidResolutionError,
            FileNotFoundError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 1
    except QueryVeilError as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        click.echo(f"runtime error: {type(exc).__name__}: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
