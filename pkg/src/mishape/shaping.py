"""Photometric training and mutual-information shaping of the color-layer Jacobians.

Shaping minimises ``L_nerf + lam * L_mig + gamma * mean((1 - |J_i|)^2)`` where
``J_i`` is the gray-value Jacobian of pixel ``i`` with respect to
``rgb.weight`` and ``L_mig`` is an InfoNCE loss on ``|cos(J_i, J_j)|``.

``J`` is built on the tape from forward quantities (quadrature weights,
sigmoid slopes and color features), so one reverse pass differentiates the
whole objective; no double-backward is needed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .field import FieldParams, RayBatch, render_batched, render_rays, psnr
from .jacobian import DEGENERATE_NORM, PerturbationSpec, color_jacobians, jacobian_ad_batch
from .optim import Adam
from .scene import Dataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- configs


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 5e-4
    lr_decay: float = 0.1  # final lr as a fraction of the initial one
    batch_rays: int = 512
    n_samples: int = 32
    seed: int = 0


@dataclass
class ShapingConfig:
    lam: float = 0.01
    gamma: float = 0.01
    tau: float = 0.1
    batch_rays: int = 64
    photo_rays: int = 256
    threshold_interval: tuple[float, float] = (0.5, 0.8)
    threshold_init: float = 0.65
    threshold_step: float = 0.001
    ratio_band: tuple[float, float] = (0.05, 0.15)
    lr: float = 5e-4
    lr_decay: float = 1.0
    steps: int = 10000
    n_samples: int = 32
    affinity: str = "ground-truth"
    mode: str = "semantic"
    validate_every: int = 500
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.threshold_interval
        r_lo, r_hi = self.ratio_band
        if min(self.lam, self.gamma) < 0 or self.tau <= 0:
            raise ValueError("lam and gamma must be >= 0 and tau > 0")
        if not lo < hi or not r_lo < r_hi:
            raise ValueError("threshold interval and ratio band must be increasing")
        if self.batch_rays < 2:
            raise ValueError("need at least two rays per shaping batch")


# ---------------------------------------------------------------- affinity surrogates


class AffinityProvider(Protocol):
    def eligible(self) -> np.ndarray: ...

    def __call__(self, idx: np.ndarray) -> np.ndarray: ...


class LabelAffinity:
    """Same-label indicator over flattened training pixels; background never eligible."""

    def __init__(self, labels):
        self.labels = np.asarray(labels).ravel()

    def eligible(self) -> np.ndarray:
        return np.flatnonzero(self.labels != 0)

    def __call__(self, idx) -> np.ndarray:
        lab = self.labels[idx]
        return ((lab[:, None] == lab[None, :]) & (lab[:, None] != 0)).astype(np.float64)


class FeatureAffinity:
    """Cosine similarity of externally supplied per-pixel feature vectors."""

    def __init__(self, features, mask=None):
        feats = np.asarray(features, dtype=np.float64)
        self.features = feats.reshape(-1, feats.shape[-1])
        norms = np.linalg.norm(self.features, axis=1)
        self.mask = norms > 0 if mask is None else (np.asarray(mask).ravel() & (norms > 0))
        self.unit = self.features / np.where(norms > 0, norms, 1.0)[:, None]

    def eligible(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def __call__(self, idx) -> np.ndarray:
        u = self.unit[idx]
        return u @ u.T


# ---------------------------------------------------------------- pair selection + losses


@dataclass
class PairBatch:
    """Positive / negative partners of each anchor in a shaping batch.

    Every ray is an anchor; its contrast set is the rest of the batch, so the
    anchor together with its partners always counts ``len(anchors)`` samples.
    """

    anchors: np.ndarray  # flat pixel ids
    positive: np.ndarray  # (B, B) bool
    negative: np.ndarray  # (B, B) bool
    similarity: np.ndarray  # (B, B)

    @property
    def positive_ratio(self) -> float:
        b = len(self.anchors)
        return float(self.positive.sum()) / max(1, b * (b - 1))


def update_threshold(threshold: float, ratio: float, config: ShapingConfig) -> float:
    lo, hi = config.threshold_interval
    r_lo, r_hi = config.ratio_band
    if ratio < r_lo:
        threshold -= config.threshold_step
    elif ratio > r_hi:
        threshold += config.threshold_step
    return float(min(hi, max(lo, round(threshold, 12))))


def select_pairs(anchors, similarity, threshold: float, config: ShapingConfig) -> tuple[PairBatch, float]:
    """Split each anchor's partners at ``threshold`` and adapt the threshold."""
    sim = np.asarray(similarity, dtype=np.float64)
    off = ~np.eye(len(sim), dtype=bool)
    pos = (sim > threshold) & off
    neg = ~pos & off
    batch = PairBatch(np.asarray(anchors), pos, neg, sim)
    return batch, update_threshold(threshold, batch.positive_ratio, config)


def jacobian_rows(rb) -> object:
    """Color-layer gray Jacobians from a (possibly taped) render, shape ``(R, 3H)``."""
    s = ad.sigmoid(rb.z)
    slope = s * (1.0 - s)
    r, k, hdim = ad.value(rb.h).shape
    w = ad.reshape(rb.w, (r, k, 1, 1))
    prod = w * ad.reshape(slope, (r, k, 3, 1)) * ad.reshape(rb.h, (r, k, 1, hdim))
    return ad.reshape(ad.sum(prod, axis=1), (r, 3 * hdim)) / 3.0


def _row_norms(jac):
    return ad.sqrt(ad.sum(ad.square(jac), axis=1))


def mig_loss(jacobians, positive, negative, tau: float):
    """InfoNCE on |cos| between Jacobian rows, averaged over (anchor, positive) pairs.

    Rows with a near-zero norm are dropped (both as anchors and as partners).
    Returns 0 when no positive pair survives.
    """
    positive = np.asarray(positive, dtype=bool)
    negative = np.asarray(negative, dtype=bool)
    norms = np.linalg.norm(ad.value(jacobians), axis=1)
    keep = np.flatnonzero(norms > DEGENERATE_NORM)
    if len(keep) < len(norms):
        jacobians = ad.take(jacobians, keep)
        positive = positive[np.ix_(keep, keep)]
        negative = negative[np.ix_(keep, keep)]
    n_pos = positive.sum()
    if n_pos == 0:
        return 0.0 * ad.sum(jacobians)
    unit = jacobians / ad.reshape(_row_norms(jacobians), (-1, 1))
    cos = ad.absolute(unit @ ad.transpose(unit))
    shifted = (cos - 1.0) / tau  # |cos| <= 1, so exp never overflows
    e = ad.exp(shifted)
    neg_sum = ad.sum(e * negative.astype(np.float64), axis=1, keepdims=True)
    terms = ad.log(e + neg_sum) - shifted
    return ad.sum(terms * positive.astype(np.float64)) / float(n_pos)


def norm_penalty(jacobians):
    """Mean of (1 - |J_i|)^2 over non-degenerate rows."""
    norms = np.linalg.norm(ad.value(jacobians), axis=1)
    keep = np.flatnonzero(norms > DEGENERATE_NORM)
    if len(keep) == 0:
        return 0.0 * ad.sum(jacobians)
    if len(keep) < len(norms):
        jacobians = ad.take(jacobians, keep)
    return ad.mean(ad.square(1.0 - _row_norms(jacobians)))


# ---------------------------------------------------------------- training loops


@dataclass
class TraceRow:
    step: int
    l_nerf: float
    l_mig: float
    l_norm: float
    threshold: float
    pos_ratio: float

    @property
    def total(self) -> float:
        return self.l_nerf + self.l_mig + self.l_norm


@dataclass
class Trace:
    rows: list[TraceRow] = field(default_factory=list)
    lam: float = 0.0
    gamma: float = 0.0
    ad_check: list[tuple[int, float]] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([r.l_nerf + self.lam * r.l_mig + self.gamma * r.l_norm for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "l_nerf", "l_mig", "l_norm", "threshold", "pos_ratio"])
            for r in self.rows:
                wr.writerow([r.step, repr(r.l_nerf), repr(r.l_mig), repr(r.l_norm), repr(r.threshold), repr(r.pos_ratio)])


def _photometric_loss(tv, rays: RayBatch, target, config, n_samples, seed):
    rb = render_rays(tv, rays, config, n_samples, rng_seed=seed)
    return ad.mean(ad.square(rb.rgb - target))


def _check(loss, step):
    val = float(ad.value(loss))
    if not math.isfinite(val):
        raise TrainingError(f"loss became non-finite at step {step}")
    return val


def train_photometric(params: FieldParams, dataset: Dataset, config: TrainConfig = TrainConfig(),
                      trace: Trace | None = None) -> FieldParams:
    """Fit the field to the training views with an RGB mean-squared error."""
    if not dataset.train:
        raise TrainingError("dataset has no training views")
    rays = dataset.train_rays()
    pixels = dataset.train_pixels()
    rng = np.random.default_rng([config.seed, 1])
    tensors = dict(params.tensors)
    opt = Adam(tensors, lr=config.lr, decay_to=config.lr_decay, decay_steps=config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, len(rays), config.batch_rays)
        tape = ad.Tape()
        tv = tape.params_from(tensors)
        loss = _photometric_loss(tv, rays[idx], pixels[idx], params.config, config.n_samples, [config.seed, 2, step])
        val = _check(loss, step)
        tensors = opt.step(tensors, ad.backward(loss, tape))
        if trace is not None:
            trace.rows.append(TraceRow(step, val, 0.0, 0.0, math.nan, math.nan))
        if step % 500 == 0:
            log.info("photometric step %d loss %.3e", step, val)
    return FieldParams(params.config, tensors)


def make_affinity(dataset: Dataset, config: ShapingConfig, features=None) -> AffinityProvider:
    if config.affinity == "ground-truth":
        return LabelAffinity(dataset.train_labels(config.mode))
    if config.affinity == "feature-file":
        if features is None:
            raise TrainingError("feature-file affinity needs per-pixel features")
        fg = dataset.train_labels(config.mode) != 0
        return FeatureAffinity(features, mask=fg)
    raise TrainingError(f"unknown affinity source {config.affinity!r}")


def shape(params: FieldParams, dataset: Dataset, affinity: AffinityProvider | None = None,
          config: ShapingConfig = ShapingConfig(), trace: Trace | None = None) -> FieldParams:
    """Fine-tune a photometrically trained field with the shaping objective.

    Each step draws ``config.batch_rays`` eligible pixels uniformly across all
    training views for the contrastive terms and ``config.photo_rays`` pixels
    for the photometric term.
    """
    rays = dataset.train_rays()
    pixels = dataset.train_pixels()
    affinity = affinity or make_affinity(dataset, config)
    eligible = affinity.eligible()
    if len(eligible) < config.batch_rays:
        raise TrainingError("not enough eligible pixels for a shaping batch")
    # the photometric stream matches train_photometric, so lam = gamma = 0 reproduces it exactly
    photo_rng = np.random.default_rng([config.seed, 1])
    rng = np.random.default_rng([config.seed, 3])
    tensors = dict(params.tensors)
    opt = Adam(tensors, lr=config.lr, decay_to=config.lr_decay, decay_steps=config.steps)
    threshold = config.threshold_init
    trace = trace if trace is not None else Trace()
    trace.lam, trace.gamma = config.lam, config.gamma
    spec = PerturbationSpec.single_layer(params)
    for step in range(config.steps):
        anchors = rng.choice(eligible, size=config.batch_rays, replace=False)
        photo = photo_rng.integers(0, len(rays), config.photo_rays)
        batch, new_threshold = select_pairs(anchors, affinity(anchors), threshold, config)

        tape = ad.Tape()
        tv = tape.params_from(tensors)
        l_nerf = _photometric_loss(tv, rays[photo], pixels[photo], params.config, config.n_samples,
                                   [config.seed, 2, step])
        total = l_nerf
        l_mig = l_norm = 0.0
        if config.lam > 0 or config.gamma > 0:
            rb = render_rays(tv, rays[anchors], params.config, config.n_samples)
            jac = jacobian_rows(rb)
            l_mig = mig_loss(jac, batch.positive, batch.negative, config.tau)
            l_norm = norm_penalty(jac)
            total = total + config.lam * l_mig + config.gamma * l_norm
        _check(total, step)
        tensors = opt.step(tensors, ad.backward(total, tape))
        trace.rows.append(TraceRow(step, float(ad.value(l_nerf)), float(ad.value(l_mig)),
                                   float(ad.value(l_norm)), threshold, batch.positive_ratio))
        threshold = new_threshold
        if config.validate_every and step % config.validate_every == 0:
            trace.ad_check.append((step, _fast_vs_ad(FieldParams(params.config, tensors), rays[anchors[:2]],
                                                     spec, config.n_samples)))
            log.info("shaping step %d nerf %.3e mig %.3f norm %.3f thr %.3f", step, trace.rows[-1].l_nerf,
                     trace.rows[-1].l_mig, trace.rows[-1].l_norm, threshold)
    return FieldParams(params.config, tensors)


def _fast_vs_ad(params: FieldParams, rays: RayBatch, spec: PerturbationSpec, n_samples: int) -> float:
    """Largest relative gap between closed-form and AD Jacobians on a few rays."""
    fast = color_jacobians(render_rays(params.tensors, rays, params.config, n_samples))
    slow = jacobian_ad_batch(params, rays, spec, n_samples)
    scale = np.maximum(np.linalg.norm(slow, axis=1, keepdims=True), 1e-300)
    return float(np.max(np.abs(fast - slow) / scale))


def heldout_psnr(params: FieldParams, dataset: Dataset, n_samples: int = 64) -> float:
    vals = []
    for v in dataset.test:
        img = render_batched(params, _rays(v), n_samples).rgb.reshape(v.image.shape)
        vals.append(psnr(img, v.image))
    return float(np.mean(vals))


def heldout_jacobians(params: FieldParams, views, n_samples: int = 64,
                      mode: str = "semantic") -> tuple[np.ndarray, np.ndarray]:
    """Color-layer Jacobians and labels of every pixel of ``views``, background and
    degenerate rows removed."""
    jac, lab = [], []
    for v in views:
        jac.append(color_jacobians(render_batched(params, _rays(v), n_samples)))
        lab.append(v.label_map(mode).ravel())
    jac, lab = np.concatenate(jac), np.concatenate(lab)
    keep = (lab > 0) & (np.linalg.norm(jac, axis=1) > DEGENERATE_NORM)
    return jac[keep], lab[keep]


def triple_win_rate(jac, labels, n_triples: int = 500, seed=0) -> float:
    """Fraction of random (anchor, same-label, other-label) triples with
    ``|cos(anchor, pos)| > |cos(anchor, neg)|``."""
    from .jacobian import cosine_abs

    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("triples need at least two labels")
    wins = 0
    for _ in range(n_triples):
        a = rng.integers(len(labels))
        pos = rng.choice(np.flatnonzero(labels == labels[a]))
        neg = rng.choice(np.flatnonzero(labels != labels[a]))
        wins += cosine_abs(jac[a], jac[pos]) > cosine_abs(jac[a], jac[neg])
    return wins / n_triples


def norm_deviation(jac, n_pixels: int = 200, seed=0) -> float:
    """Mean ``| |J| - 1 |`` over ``n_pixels`` rows drawn without replacement."""
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(jac), min(n_pixels, len(jac)), replace=False)
    return float(np.mean(np.abs(np.linalg.norm(np.asarray(jac)[pick], axis=1) - 1.0)))


def _rays(view):
    from .field import generate_rays

    return generate_rays(view.camera)


def save_trace(trace: Trace, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    trace.write_csv(path)


def load_trace(path, lam: float = 0.0, gamma: float = 0.0) -> Trace:
    """Read a CSV loss trace; the loss weights are not stored and must be supplied."""
    with open(path, newline="") as fh:
        rows = [TraceRow(int(r["step"]), float(r["l_nerf"]), float(r["l_mig"]), float(r["l_norm"]),
                         float(r["threshold"]), float(r["pos_ratio"])) for r in csv.DictReader(fh)]
    return Trace(rows, lam, gamma)
