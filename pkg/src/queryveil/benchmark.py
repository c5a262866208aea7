"""Dataset ingestion, retrieval evaluation (mAP) and experiment orchestration.

A dataset is an images directory plus a ground-truth JSON:

    {
      "name": "synthetic10",
      "original_resolution": 1024,     // max-dim normalization applied first
      "protocol": "medium",
      "ap": "classic",                 // or "interpolated" (revisited kit)
      "crop_queries": false,           // cropped-query scaling rule
      "exclude_query": false,          // drop the query from its own ranking
      "images_dir": "images",
      "database": ["db_000.png", ...],
      "queries": [
        {"image": "q_000.png", "crop": [x, y, w, h] or null,
         "relevant": ["db_000.png"], "junk": []}
      ]
    }

An experiment runs one attack triplet against one test triplet over the
dataset's queries and reports original vs attacked mAP, descriptor
similarities and distortion.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import FeatureBackend, load_backend
from .descriptor import Descriptor
from .engine import AttackConfig, crop_to_aspect, run_attack
from .engine_io import atomic_write
from .errors import ConfigurationError, EmptyRelevantSetError
from .image import Image, load_image, read_png16, write_png16
from .losses import spec_from_json
from .pooling import PoolingKind
from .resampling import resample
from .retrieval import ORIGINAL, RetrievalModel, describe
from .whitening import load_whitening

DEFAULT_ORIGINAL_RESOLUTION = 1024
FIRST_N_QUERY_DATASETS = {"holidays": 50, "copydays": 50}


@dataclass(frozen=True)
class QueryRecord:
    image: str
    relevant: tuple[str, ...]
    junk: tuple[str, ...] = ()
    crop: tuple[int, int, int, int] | None = None  # x, y, w, h (raw pixels)


@dataclass
class RetrievalDataset:
    name: str
    root: Path
    database: tuple[str, ...]
    queries: tuple[QueryRecord, ...]
    protocol: str = "medium"
    ap_convention: str = "classic"
    crop_queries: bool = False
    exclude_query: bool = False
    original_resolution: int = DEFAULT_ORIGINAL_RESOLUTION

    def __post_init__(self):
        ids = set(self.database)
        for q in self.queries:
            extra = set(q.relevant) - ids
            if extra:
                raise ConfigurationError(
                    f"query {q.image}: relevant ids not in database: {sorted(extra)}"
                )

    def image_path(self, image_id: str) -> Path:
        return self.root / image_id

    def load(self, image_id: str) -> Image:
        return load_image(self.image_path(image_id), id=image_id)


def load_dataset(json_path) -> RetrievalDataset:
    json_path = Path(json_path)
    if not json_path.is_file():
        raise ConfigurationError(f"dataset file not found: {json_path}")
    payload = json.loads(json_path.read_text())
    root = json_path.parent / payload.get("images_dir", "images")
    if not root.is_dir():
        raise ConfigurationError(f"dataset images directory not found: {root}")
    queries = tuple(
        QueryRecord(
            image=q["image"],
            relevant=tuple(q.get("relevant", ())),
            junk=tuple(q.get("junk", ())),
            crop=tuple(q["crop"]) if q.get("crop") else None,
        )
        for q in payload["queries"]
    )
    return RetrievalDataset(
        name=payload["name"],
        root=root,
        database=tuple(payload["database"]),
        queries=queries,
        protocol=payload.get("protocol", "medium"),
        ap_convention=payload.get("ap", "classic"),
        crop_queries=bool(payload.get("crop_queries", False)),
        exclude_query=bool(payload.get("exclude_query", False)),
        original_resolution=int(
            payload.get("original_resolution", DEFAULT_ORIGINAL_RESOLUTION)),
    )


# ---------------------------------------------------------------------------
# average precision


def average_precision(ranking, relevant, junk=()) -> float:
    """Classic AP: junk removed, mean of precision at each relevant rank."""
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevantSetError("query has no relevant images")
    junk = set(junk) - relevant
    hits = 0
    rank = 0
    total = 0.0
    for item in ranking:
        if item in junk:
            continue
        rank += 1
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def average_precision_interpolated(ranking, relevant, junk=()) -> float:
    """Revisited-benchmark AP: junk removed, trapezoidal precision
    interpolation between consecutive relevant ranks."""
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevantSetError("query has no relevant images")
    junk = set(junk) - relevant
    ap = 0.0
    hits = 0
    rank = 0
    for item in ranking:
        if item in junk:
            continue
        rank += 1
        if item in relevant:
            precision_0 = hits / (rank - 1) if rank > 1 else 1.0
            hits += 1
            precision_1 = hits / rank
            ap += (precision_0 + precision_1) / 2.0
    return ap / len(relevant)


def ap_function(dataset: RetrievalDataset):
    return (average_precision_interpolated
            if dataset.ap_convention == "interpolated" else average_precision)


def rank_database(query_descriptor: Descriptor, ids, matrix: np.ndarray):
    """Descending inner product; ties broken by ascending id."""
    scores = matrix @ query_descriptor.values
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order]


# ---------------------------------------------------------------------------
# query preparation (cropped-query scaling rule)


def prepare_query(dataset: RetrievalDataset, record: QueryRecord,
                  test_resolution: int) -> Image:
    """Query image at a test resolution.

    Images are first normalized to the dataset's original resolution. For
    crop-protocol datasets the cropped region is down-sampled with the same
    scale factor the un-cropped image would get, preserving the relative
    scale between query and database images.
    """
    raw = dataset.load(record.image)
    normalized = resample(raw, dataset.original_resolution)
    if not (dataset.crop_queries and record.crop):
        return resample(normalized, test_resolution)
    f_norm = dataset.original_resolution / raw.max_dim
    x, y, w, h = record.crop
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > raw.width or y + h > raw.height:
        raise ConfigurationError(
            f"query {record.image}: crop box {record.crop} outside image bounds"
        )
    left = round(x * f_norm)
    top = round(y * f_norm)
    right = min(normalized.width, round((x + w) * f_norm))
    bottom = min(normalized.height, round((y + h) * f_norm))
    cropped = Image(np.array(normalized.pixels[top:bottom, left:right, :]),
                    id=f"{record.image}#crop")
    factor = test_resolution / dataset.original_resolution
    return resample(cropped, max(1, round(cropped.max_dim * factor)))


def scale_like_query(dataset: RetrievalDataset, image: Image,
                     test_resolution: int) -> Image:
    """Apply the query scaling rule to an already-prepared image (e.g. an
    adversarial image built at the original resolution)."""
    if not dataset.crop_queries:
        return resample(image, test_resolution)
    factor = test_resolution / dataset.original_resolution
    return resample(image, max(1, round(image.max_dim * factor)))


# ---------------------------------------------------------------------------
# descriptor cache


class DescriptorCache:
    """Database descriptors per (dataset, backend, pooling, resolution,
    whitening), stored as one .npz per key."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(dataset: RetrievalDataset, model: RetrievalModel,
            whitening_id: str = "none") -> str:
        blob = "|".join([
            dataset.name, model.backend.name, model.backend.weights_id,
            model.pooling.label(), str(model.resolution), whitening_id,
        ])
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def path(self, key: str) -> Path:
        return self.root / f"db_{key}.npz"

    def load(self, key: str):
        p = self.path(key)
        if not p.exists():
            return None
        data = np.load(p, allow_pickle=False)
        return list(data["ids"]), data["matrix"]

    def store(self, key: str, ids, matrix: np.ndarray) -> None:
        np.savez(self.path(key), ids=np.array(ids), matrix=matrix)


def database_descriptors(dataset: RetrievalDataset, model: RetrievalModel,
                         cache: DescriptorCache | None = None,
                         whitening_id: str = "none"):
    """Extract (or load cached) descriptors for every database image."""
    key = DescriptorCache.key(dataset, model, whitening_id) if cache else None
    if cache:
        hit = cache.load(key)
        if hit is not None:
            return hit
    rows = []
    for image_id in dataset.database:
        rows.append(describe(model, dataset.load(image_id)).values)
    matrix = np.stack(rows)
    if cache:
        cache.store(key, list(dataset.database), matrix)
    return list(dataset.database), matrix


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    dataset: RetrievalDataset
    test_model: RetrievalModel
    carrier: Image
    attack_config: AttackConfig | None = None  # None -> null attack
    query_limit: int | str | None = "auto"
    cache: DescriptorCache | None = None
    whitening_id: str = "none"

    def selected_queries(self):
        limit = self.query_limit
        if limit == "auto":
            limit = None
            lowered = self.dataset.name.lower()
            for tag, n in FIRST_N_QUERY_DATASETS.items():
                if tag in lowered:
                    limit = n
        return self.dataset.queries[: limit] if limit else self.dataset.queries


@dataclass
class QueryRow:
    query: str
    ap_original: float
    ap_attacked: float
    sim_target: float
    sim_carrier: float
    distortion: float
    converged: bool


@dataclass
class EvalReport:
    dataset: str
    original_map: float
    attacked_map: float
    mean_sim_target: float
    mean_sim_carrier: float
    mean_distortion: float
    rows: list[QueryRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def delta_map(self) -> float:
        return self.attacked_map - self.original_map

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "original_map": self.original_map,
            "attacked_map": self.attacked_map,
            "delta_map": self.delta_map,
            "mean_sim_target": self.mean_sim_target,
            "mean_sim_carrier": self.mean_sim_carrier,
            "mean_distortion": self.mean_distortion,
            "queries": len(self.rows),
            "skipped": self.skipped,
        }


def _adversarial_for_query(spec: ExperimentSpec, index: int, target: Image,
                           carrier: Image, adversarial_dir: Path | None,
                           reuse: bool):
    """Build (or reload) the concealed query for one target."""
    path = (adversarial_dir / f"adv_{index:04d}.png16.png"
            if adversarial_dir is not None else None)
    if reuse:
        if path is None or not path.exists():
            raise ConfigurationError(f"missing persisted adversarial: {path}")
        return read_png16(path, id=f"adv_{index:04d}"), True
    if spec.attack_config is None:  # null attack: adversarial := target
        adv, converged = target, True
    else:
        result = run_attack(target, carrier, spec.attack_config, spec.test_model)
        adv, converged = result.adversarial, result.converged
    if path is not None:
        write_png16(path, adv)
    return adv, converged


def run_experiment(spec: ExperimentSpec, output_dir=None,
                   reuse_adversarial: bool = False) -> EvalReport:
    """Attack every selected query, rank, and score original vs attacked mAP."""
    dataset = spec.dataset
    model = spec.test_model
    if model.resolution == ORIGINAL:
        raise ConfigurationError("experiments need an explicit test resolution")
    test_res = model.resolution
    out = Path(output_dir) if output_dir else None
    adv_dir = out / "adversarial" if out else None
    if adv_dir and not reuse_adversarial:
        adv_dir.mkdir(parents=True, exist_ok=True)

    ids, matrix = database_descriptors(dataset, model, spec.cache,
                                       spec.whitening_id)
    ap = ap_function(dataset)
    query_model = RetrievalModel(model.backend, ORIGINAL, model.pooling,
                                 whitening=model.whitening)

    rows: list[QueryRow] = []
    skipped: list[str] = []
    for index, record in enumerate(spec.selected_queries()):
        if not record.relevant:
            skipped.append(record.image)
            continue
        junk = set(record.junk)
        if dataset.exclude_query:
            junk.add(record.image)
        target = prepare_query(dataset, record, dataset.original_resolution)
        carrier = crop_to_aspect(spec.carrier, target)
        adversarial, converged = _adversarial_for_query(
            spec, index, target, carrier, adv_dir, reuse_adversarial)

        target_desc = describe(query_model,
                               prepare_query(dataset, record, test_res))
        adv_desc = describe(query_model,
                            scale_like_query(dataset, adversarial, test_res))
        carrier_desc = describe(query_model,
                                scale_like_query(dataset, carrier, test_res))
        dist = float(np.mean((adversarial.pixels.astype(np.float64)
                              - carrier.pixels.astype(np.float64)) ** 2))
        rows.append(QueryRow(
            query=record.image,
            ap_original=ap(rank_database(target_desc, ids, matrix),
                           record.relevant, junk),
            ap_attacked=ap(rank_database(adv_desc, ids, matrix),
                           record.relevant, junk),
            sim_target=adv_desc.dot(target_desc),
            sim_carrier=adv_desc.dot(carrier_desc),
            distortion=dist,
            converged=converged,
        ))

    if not rows:
        raise ConfigurationError("no scorable queries (all relevant sets empty)")
    report = EvalReport(
        dataset=dataset.name,
        original_map=float(np.mean([r.ap_original for r in rows])),
        attacked_map=float(np.mean([r.ap_attacked for r in rows])),
        mean_sim_target=float(np.mean([r.sim_target for r in rows])),
        mean_sim_carrier=float(np.mean([r.sim_carrier for r in rows])),
        mean_distortion=float(np.mean([r.distortion for r in rows])),
        rows=rows,
        skipped=skipped,
    )
    if out:
        save_report(out, report, spec)
    return report


def similarity_report(spec: ExperimentSpec, output_dir=None,
                      reuse_adversarial: bool = False):
    """Per-query and mean cosine similarities (adversarial-to-target and
    adversarial-to-carrier) without the ranking pass."""
    dataset = spec.dataset
    model = spec.test_model
    test_res = (model.resolution if model.resolution != ORIGINAL
                else dataset.original_resolution)
    out = Path(output_dir) if output_dir else None
    adv_dir = out / "adversarial" if out else None
    if adv_dir and not reuse_adversarial:
        adv_dir.mkdir(parents=True, exist_ok=True)
    query_model = RetrievalModel(model.backend, ORIGINAL, model.pooling,
                                 whitening=model.whitening)
    per_query = []
    for index, record in enumerate(spec.selected_queries()):
        target = prepare_query(dataset, record, dataset.original_resolution)
        carrier = crop_to_aspect(spec.carrier, target)
        adversarial, _ = _adversarial_for_query(
            spec, index, target, carrier, adv_dir, reuse_adversarial)
        target_desc = describe(query_model,
                               prepare_query(dataset, record, test_res))
        adv_desc = describe(query_model,
                            scale_like_query(dataset, adversarial, test_res))
        carrier_desc = describe(query_model,
                                scale_like_query(dataset, carrier, test_res))
        per_query.append({
            "query": record.image,
            "sim_target": adv_desc.dot(target_desc),
            "sim_carrier": adv_desc.dot(carrier_desc),
        })
    return {
        "per_query": per_query,
        "mean_sim_target": float(np.mean([r["sim_target"] for r in per_query])),
        "mean_sim_carrier": float(np.mean([r["sim_carrier"] for r in per_query])),
    }


# ---------------------------------------------------------------------------
# report files (per-query CSV + aggregate JSON)


def experiment_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps({
        "dataset": spec.dataset.name,
        "attack": (spec.attack_config.echo() if spec.attack_config else "null"),
        "test": spec.test_model.label(),
        "whitening": spec.whitening_id,
        "carrier": spec.carrier.content_hash(),
        "query_limit": spec.query_limit,
    }, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_report(out_dir, report: EvalReport, spec: ExperimentSpec) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = experiment_hash(spec)

    def render_csv(f):
        f.write(f"# config_hash: {chash}\n")
        writer = csv.writer(f)
        writer.writerow(["query", "ap_original", "ap_attacked", "sim_target",
                         "sim_carrier", "distortion", "converged"])
        for r in report.rows:
            writer.writerow([r.query, repr(r.ap_original), repr(r.ap_attacked),
                             repr(r.sim_target), repr(r.sim_carrier),
                             repr(r.distortion), int(r.converged)])

    atomic_write(out / "per_query.csv", render_csv)
    payload = report.to_json()
    payload["config_hash"] = chash
    payload["attack"] = (spec.attack_config.echo()
                         if spec.attack_config else "null")
    payload["test_model"] = spec.test_model.label()
    atomic_write(out / "report.json",
                 lambda f: f.write(json.dumps(payload, indent=2, sort_keys=True)))
    return {"per_query": str(out / "per_query.csv"),
            "report": str(out / "report.json")}


# ---------------------------------------------------------------------------
# experiment files (cmd_evaluate input)


def load_experiment(path) -> ExperimentSpec:
    """Build an ExperimentSpec from a flat JSON file (see README schema)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"experiment file not found: {path}")
    payload = json.loads(path.read_text())
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    dataset = load_dataset(resolve(payload["dataset"]))
    carrier_path = resolve(payload["carrier"])
    if not carrier_path.is_file():
        raise ConfigurationError(f"carrier image not found: {carrier_path}")
    carrier = load_image(carrier_path)

    weights = payload.get("backend_weights", {})
    seed = int(payload.get("backend_seed", 0))

    def backend(name: str) -> FeatureBackend:
        wpath = weights.get(name)
        if wpath is not None:
            wpath = resolve(wpath)
            if not wpath.is_file():
                raise ConfigurationError(f"backend weights not found: {wpath}")
        return load_backend(name, weights_path=str(wpath) if wpath else None,
                            seed=seed)

    test = payload["test"]
    whitening = None
    whitening_id = "none"
    if test.get("whitening"):
        wfile = resolve(test["whitening"])
        if not wfile.is_file():
            raise ConfigurationError(f"whitening file not found: {wfile}")
        whitening, _ = load_whitening(wfile)
        whitening_id = wfile.name
    test_model = RetrievalModel(
        backend(test.get("backend", "A")),
        int(test["resolution"]),
        PoolingKind.parse(test.get("pooling", "gem")),
        whitening=whitening,
    )

    attack_config = None
    if not payload.get("null_attack", False):
        backends = {}
        for name in payload["attack"].get("backends", ["A"]):
            backends[name] = (test_model.backend
                              if name == test_model.backend.name else backend(name))
        loss, lam = spec_from_json(payload["attack"], backends)
        overrides = payload.get("attack_overrides", {})
        attack_config = AttackConfig(
            loss=loss,
            lam=lam,
            learning_rate=float(overrides.get("learning_rate", 0.01)),
            iterations=overrides.get("iterations"),
            max_restarts=int(overrides.get("max_restarts", 3)),
            convergence_threshold=overrides.get("convergence_threshold"),
            seed=int(overrides.get("seed", 0)),
        )

    cache = None
    if payload.get("cache_dir"):
        cache = DescriptorCache(resolve(payload["cache_dir"]))
    return ExperimentSpec(
        dataset=dataset,
        test_model=test_model,
        carrier=carrier,
        attack_config=attack_config,
        query_limit=payload.get("query_limit", "auto"),
        cache=cache,
        whitening_id=whitening_id,
    )
