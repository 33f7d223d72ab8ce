"""End-to-end experiments: scene, dataset, training, shaping, propagation, metrics.

Configs are ``key = value`` text files (``#`` starts a comment). List-valued
keys (``sigma``, ``density``) take comma-separated values and the run sweeps
over their product. Trained checkpoints are cached under ``cache_dir`` keyed
by a hash of exactly the settings that produce them, so sweeps and repeated
runs reuse one trained field.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import Camera, FieldConfig, FieldParams, init_field
from .metrics import compute_metrics, seen_classes
from .propagation import (
    SeedLabels,
    adaptive_gradient_sampling,
    argmax_labels,
    dense_responses,
    propagate_sparse_2d,
    propagate_sparse_3d,
    train_aggregation_mlp,
)
from .scene import Dataset, generate_scene, make_dataset
from .shaping import ShapingConfig, Trace, TrainConfig, heldout_psnr, save_trace, shape, train_photometric

log = logging.getLogger(__name__)

CLOSE_DEG = 30.0
FAR_DEG = 90.0
CSV_COLUMNS = ("experiment_id", "mode", "variant", "sigma", "density", "mIoU", "avg_acc", "total_acc")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    experiment_id: str = "exp"
    output_dir: str = "runs/exp"
    cache_dir: str = ""  # empty: <output_dir>/cache
    seed: int = 0
    # scene + dataset
    scene_seed: int = 0
    n_objects: int = 4
    parts: int = 2
    palette: int = 4  # 0: every primitive gets its own colour
    n_classes: int = 0  # 0: one class per object
    n_train: int = 20
    n_test: int = 4
    width: int = 32
    height: int = 32
    radius: float = 4.0
    n_samples: int = 32
    # photometric training
    train_steps: int = 2000
    train_lr: float = 2e-3
    train_lr_decay: float = 0.1
    train_batch: int = 512
    # shaping
    shaped: bool = True
    shape_steps: int = 3000
    shape_lr: float = 5e-4
    shape_lr_decay: float = 0.1
    lam: float = 0.01
    gamma: float = 0.01
    tau: float = 0.1
    shape_batch: int = 64
    photo_rays: int = 256
    label_mode: str = "semantic"
    # propagation
    mode: str = "sparse"
    variant: str = "2d"
    sigma: tuple = (0.1,)
    density: tuple = (1.0,)
    source_view: int = 0
    views: str = "test"  # test | close | far
    label_seed: int = 0
    label_draws: int = 3
    selections: int = 5
    candidates: int = 20
    max_rounds: int = 50
    mlp_iterations: int = 20000

    def __post_init__(self):
        self.sigma = tuple(float(s) for s in _as_tuple(self.sigma))
        self.density = tuple(float(d) for d in _as_tuple(self.density))
        if not self.sigma or any(not math.isfinite(s) or s < 0 for s in self.sigma):
            raise ConfigError("sigma values must be finite and >= 0")
        if not self.density or any(not 0.0 < d <= 1.0 for d in self.density):
            raise ConfigError("density values must lie in (0, 1]")
        choices = {"mode": ("sparse", "dense"), "variant": ("2d", "3d"), "views": ("test", "close", "far"),
                   "label_mode": ("semantic", "instance")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.label_draws < 1 or self.selections < 1 or self.candidates < 1:
            raise ConfigError("label_draws, selections and candidates must be >= 1")
        if not 0 <= self.source_view < self.n_train:
            raise ConfigError("source_view must index a training view")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self, keys=None) -> str:
        data = self.to_dict()
        if keys is not None:
            data = {k: data[k] for k in keys}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            text = ", ".join(repr(x) for x in v) if isinstance(v, list) else str(v).lower() if isinstance(v, bool) else v
            lines.append(f"{k} = {text}")
        return "\n".join(lines) + "\n"


def _as_tuple(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(v)
    if isinstance(v, str):
        return tuple(x for x in (s.strip() for s in v.split(",")) if x)
    return (v,)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in _as_tuple(raw))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def make_config(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string or typed ``values`` on top of ``base`` (defaults when omitted)."""
    base = base or ExperimentConfig()
    valid = ExperimentConfig.keys()
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(valid)}")
    current = dataclasses.asdict(base)
    for k, v in values.items():
        current[k] = _coerce(k, v, getattr(base, k)) if isinstance(v, str) else v
    return ExperimentConfig(**current)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config(text)
    values.update(overrides or {})
    return make_config(values)


# ---------------------------------------------------------------- helpers


def view_angle(a: Camera, b: Camera) -> float:
    """Angle in degrees between two cameras' viewing directions."""
    fa, fb = a.rotation[:, 2], b.rotation[:, 2]
    return math.degrees(math.acos(float(np.clip(fa @ fb, -1.0, 1.0))))


def density_patch(labels, fraction: float, seed) -> np.ndarray:
    """Per class, a random 4-connected pixel patch covering ``ceil(fraction * area)`` pixels.

    Grown from a random pixel of the class by expanding a randomly ordered
    frontier; a class split into several components may stop short of the
    target inside the component it started from.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    for c in np.unique(labels):
        if c == 0:
            continue
        ys, xs = np.nonzero(labels == c)
        need = math.ceil(fraction * len(ys))
        j = rng.integers(len(ys))
        frontier = [(ys[j], xs[j])]
        seen = {frontier[0]}
        count = 0
        while frontier and count < need:
            y, x = frontier.pop(rng.integers(len(frontier)))
            out[y, x] = True
            count += 1
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and (ny, nx) not in seen and labels[ny, nx] == c:
                    seen.add((ny, nx))
                    frontier.append((ny, nx))
    return out


@dataclass
class MetricRow:
    experiment_id: str
    mode: str
    variant: str
    sigma: float
    density: float
    miou: float
    avg_acc: float
    total_acc: float

    def as_list(self) -> list:
        return [self.experiment_id, self.mode, self.variant, repr(self.sigma), repr(self.density), repr(self.miou),
                repr(self.avg_acc), repr(self.total_acc)]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    config_hash: str
    rows: list[MetricRow]
    psnr_pre: float
    psnr_post: float | None
    manifest: dict = field(default_factory=dict)

    def row(self, variant: str | None = None, sigma: float | None = None, density: float | None = None) -> MetricRow:
        for r in self.rows:
            if ((variant is None or r.variant == variant) and (sigma is None or r.sigma == sigma)
                    and (density is None or r.density == density)):
                return r
        raise KeyError((variant, sigma, density))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            wr.writerow(r.as_list())


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricRow(r[0], r[1], r[2], *(float(x) for x in r[3:])) for r in rd]


# ---------------------------------------------------------------- stages

SCENE_KEYS = ("scene_seed", "n_objects", "parts", "palette", "n_classes")
DATA_KEYS = SCENE_KEYS + ("n_train", "n_test", "width", "height", "radius")
TRAIN_KEYS = DATA_KEYS + ("seed", "train_steps", "train_lr", "train_lr_decay", "train_batch", "n_samples")
SHAPE_KEYS = TRAIN_KEYS + ("shape_steps", "shape_lr", "shape_lr_decay", "lam", "gamma", "tau", "shape_batch",
                           "photo_rays", "label_mode")


class _Stage:
    def __init__(self, name: str, manifest: dict):
        self.name = name
        self.manifest = manifest

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.manifest.setdefault("stages", []).append(self.name)
            return False
        if isinstance(exc, ExperimentError):
            return False
        raise ExperimentError(self.name, f"{exc_type.__name__}: {exc}") from exc


def build_scene(config: ExperimentConfig):
    return generate_scene(config.n_objects, config.scene_seed, n_classes=config.n_classes or None,
                          parts=config.parts, palette=config.palette or None)


def build_dataset(config: ExperimentConfig) -> Dataset:
    return make_dataset(build_scene(config), config.n_train, config.n_test, config.scene_seed,
                        width=config.width, height=config.height, radius=config.radius)


def train_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(steps=config.train_steps, lr=config.train_lr, lr_decay=config.train_lr_decay,
                       batch_rays=config.train_batch, n_samples=config.n_samples, seed=config.seed)


def shaping_config(config: ExperimentConfig) -> ShapingConfig:
    return ShapingConfig(lam=config.lam, gamma=config.gamma, tau=config.tau, batch_rays=config.shape_batch,
                         photo_rays=config.photo_rays, lr=config.shape_lr, lr_decay=config.shape_lr_decay,
                         steps=config.shape_steps, n_samples=config.n_samples, mode=config.label_mode,
                         seed=config.seed)


def _cache_dir(config: ExperimentConfig) -> Path:
    return Path(config.cache_dir) if config.cache_dir else Path(config.output_dir) / "cache"


def pretrained_field(config: ExperimentConfig, dataset: Dataset | None = None) -> FieldParams:
    """Photometrically trained field, loaded from the cache when available."""
    path = _cache_dir(config) / f"train-{config.digest(TRAIN_KEYS)[:16]}.jtna"
    if path.exists():
        return FieldParams.load(path)
    dataset = dataset or build_dataset(config)
    params = train_photometric(init_field(FieldConfig(), config.seed), dataset, train_config(config))
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path, tag="pre")
    return params


def shaped_field(config: ExperimentConfig, dataset: Dataset | None = None,
                 pretrained: FieldParams | None = None) -> tuple[FieldParams, Path]:
    """Shaped field plus the path of its loss trace; cached like :func:`pretrained_field`."""
    key = config.digest(SHAPE_KEYS)[:16]
    path = _cache_dir(config) / f"shape-{key}.jtna"
    trace_path = _cache_dir(config) / f"shape-{key}.csv"
    if path.exists():
        return FieldParams.load(path), trace_path
    dataset = dataset or build_dataset(config)
    pretrained = pretrained or pretrained_field(config, dataset)
    trace = Trace()
    params = shape(pretrained, dataset, None, shaping_config(config), trace)
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path, tag="post")
    save_trace(trace, trace_path)
    return params, trace_path


def target_views(config: ExperimentConfig, dataset: Dataset):
    source = dataset.train[config.source_view].camera
    if config.views == "test":
        return list(dataset.test)
    if config.views == "close":
        views = [v for v in dataset.test if view_angle(source, v.camera) < CLOSE_DEG]
    else:
        views = [v for v in dataset.test if view_angle(source, v.camera) > FAR_DEG]
    if not views:
        raise ValueError(f"no test view qualifies as {config.views!r} for source view {config.source_view}")
    return views


def _mean_report(reports) -> tuple[float, float, float]:
    return (float(np.mean([r.miou for r in reports])), float(np.mean([r.avg_acc for r in reports])),
            float(np.mean([r.total_acc for r in reports])))


def _sparse_rows(config, params, dataset, sigma, density):
    src = dataset.train[config.source_view]
    labels = src.label_map(config.label_mode)
    seen = seen_classes(labels)
    propagate = propagate_sparse_2d if config.variant == "2d" else propagate_sparse_3d
    reports = []
    for draw in range(config.label_draws):
        seed = [config.label_seed, draw]
        pool = np.where(density_patch(labels, density, seed), labels, 0) if density < 1.0 else labels
        seeds = SeedLabels.sample_sparse(pool, config.source_view, seed, config.label_mode)
        for view in target_views(config, dataset):
            res = propagate(params, seeds, src.camera, view.camera, sigma, n_samples=config.n_samples)
            reports.append(compute_metrics(res.scene_labels(), view.label_map(config.label_mode), seen))
    return [(config.variant, _mean_report(reports))]


def _dense_rows(config, params, dataset, sigma, density):
    src = dataset.train[config.source_view]
    labels = src.label_map(config.label_mode)
    seen = seen_classes(labels)
    seed = [config.label_seed, 0]
    known = np.where(density_patch(labels, density, seed), labels, 0) if density < 1.0 else labels
    sel = adaptive_gradient_sampling(params, src.camera, known, seed=config.label_seed,
                                     n_selections=config.selections, n_candidates=config.candidates,
                                     max_rounds=config.max_rounds, sigma=sigma, n_samples=config.n_samples,
                                     variant=config.variant)
    lut = np.array((0,) + sel.label_ids)
    src_resp = dense_responses(params, sel, src.camera, sigma, n_samples=config.n_samples, variant=config.variant)
    k_labels = np.searchsorted(sel.label_ids, known.ravel()) + 1
    k_labels[known.ravel() == 0] = 0
    mlp = train_aggregation_mlp(src_resp, k_labels, iterations=config.mlp_iterations, seed=config.seed)
    raw, agg = [], []
    for view in target_views(config, dataset):
        gt = view.label_map(config.label_mode)
        resp = dense_responses(params, sel, view.camera, sigma, n_samples=config.n_samples, variant=config.variant)
        pred, _ = argmax_labels(resp)
        raw.append(compute_metrics(lut[pred].reshape(gt.shape), gt, seen))
        agg.append(compute_metrics(lut[mlp.predict(resp)].reshape(gt.shape), gt, seen))
    return [(config.variant, _mean_report(raw)), (config.variant + "+mlp", _mean_report(agg))]


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every stage, write artifacts under ``config.output_dir`` and return the metrics."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment_id": config.experiment_id,
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "seeds": {"scene": config.scene_seed, "dataset": config.scene_seed, "init": config.seed,
                  "train": config.seed, "shape": config.seed, "labels": config.label_seed},
    }
    with _Stage("scene", manifest):
        scene = build_scene(config)
        scene.save(out / "scene.txt")
    with _Stage("dataset", manifest):
        dataset = build_dataset(config)
        dataset.save(out / "dataset")
    with _Stage("train", manifest):
        pre = pretrained_field(config, dataset)
        psnr_pre = heldout_psnr(pre, dataset, config.n_samples)
        manifest["checkpoints"] = {"pre": pre.digest()}
    params, psnr_post = pre, None
    if config.shaped:
        with _Stage("shape", manifest):
            params, trace_path = shaped_field(config, dataset, pre)
            psnr_post = heldout_psnr(params, dataset, config.n_samples)
            manifest["checkpoints"]["post"] = params.digest()
            manifest["trace"] = str(trace_path)
    manifest["psnr"] = {"pre": psnr_pre, "post": psnr_post}
    rows = []
    with _Stage("propagate", manifest):
        prefix = "" if config.shaped else "plain-"
        for sigma in config.sigma:
            for density in config.density:
                fn = _sparse_rows if config.mode == "sparse" else _dense_rows
                for variant, (miou, avg, tot) in fn(config, params, dataset, sigma, density):
                    rows.append(MetricRow(config.experiment_id, config.mode, prefix + variant, sigma, density,
                                          miou, avg, tot))
    with _Stage("report", manifest):
        write_metrics_csv(out / "metrics.csv", rows)
        (out / "config.cfg").write_text(config.dumps())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(config, manifest["config_hash"], rows, psnr_pre, psnr_post, manifest)
