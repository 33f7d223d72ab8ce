"""Label propagation by perturbing the field along seed-pixel Jacobians.

For each class ``k`` the color weights move by ``sigma * u_k`` where ``u_k`` is
the unit Jacobian of class ``k``'s seed pixel. The absolute change of every
target pixel's gray value is that pixel's logit ``R_k``; labels are the argmax.

* 2D: ``R_k = |I_k - I|`` on rendered gray values.
* 3D: per-sample gray differences are accumulated with the unperturbed
  quadrature weights before any image is formed.

The dense setting (a fully labelled source view) picks seed combinations by
adaptive gradient sampling and denoises the responses with a small MLP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import (
    DEFAULT_SAMPLES,
    RGB_LAYER,
    Camera,
    FieldParams,
    RayBatch,
    generate_rays,
    render_batched,
    render_rays,
)
from .jacobian import (
    DEGENERATE_NORM,
    ColorCache,
    JacobianError,
    PerturbationSpec,
    channel_jacobians,
    color_jacobians,
    jacobian_ad_batch,
    perturb,
)
from .metrics import compute_metrics
from .optim import Adam
from .tensor_io import save_tensor, write_ppm

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.1
VARIANTS = ("2d", "3d")

# fixed colours for label ids 0..15 (0 = unlabeled, black)
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
], dtype=np.float64) / 255.0


class PropagationError(RuntimeError):
    pass


def colorize(labels) -> np.ndarray:
    """``(H, W)`` label ids to ``(H, W, 3)`` colours; ids wrap around the 16-entry palette."""
    lab = np.asarray(labels, dtype=np.int64)
    return PALETTE[np.where(lab > 0, (lab - 1) % (len(PALETTE) - 1) + 1, 0)]


# ---------------------------------------------------------------- seeds


@dataclass(frozen=True)
class SeedLabels:
    """Labelled pixels ``(u, v, k)`` of one source view, classes ``k = 1..K``.

    ``label_ids[k - 1]`` is the scene label that class ``k`` stands for.
    """

    view_id: int
    pixels: tuple[tuple[int, int, int], ...]
    mode: str = "semantic"
    label_ids: tuple[int, ...] = ()
    sparse: bool = True

    def __post_init__(self):
        pixels = tuple((int(u), int(v), int(k)) for u, v, k in self.pixels)
        object.__setattr__(self, "pixels", pixels)
        if self.mode not in ("semantic", "instance"):
            raise ValueError("mode must be 'semantic' or 'instance'")
        ks = [k for _, _, k in pixels]
        if not ks:
            raise ValueError("no seed pixels")
        classes = sorted(set(ks))
        if classes != list(range(1, len(classes) + 1)):
            raise ValueError(f"class ids must be contiguous from 1, got {classes}")
        if self.sparse and len(ks) != len(classes):
            raise ValueError("sparse seeds need exactly one pixel per class")
        ids = self.label_ids or tuple(classes)
        if len(ids) != len(classes):
            raise ValueError("label_ids must name every class")
        object.__setattr__(self, "label_ids", tuple(int(i) for i in ids))

    @property
    def n_classes(self) -> int:
        return len(self.label_ids)

    def flat_indices(self, width: int) -> np.ndarray:
        return np.array([v * width + u for u, v, _ in self.pixels])

    def classes(self) -> np.ndarray:
        return np.array([k for _, _, k in self.pixels])

    def to_scene_labels(self, labels) -> np.ndarray:
        """Map class ids ``0..K`` back to scene label ids (0 stays 0)."""
        lut = np.array((0,) + self.label_ids)
        return lut[np.asarray(labels)]

    def dumps(self) -> str:
        lines = ["# view_id u v class_id"]
        lines += [f"{self.view_id} {u} {v} {self.label_ids[k - 1]}" for u, v, k in self.pixels]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, mode: str = "semantic") -> "SeedLabels":
        """Parse ``view_id u v class_id`` lines; scene class ids are remapped to ``1..K``."""
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                tok = line.split()
                if len(tok) != 4:
                    raise ValueError(f"malformed seed line: {line!r}")
                rows.append(tuple(int(t) for t in tok))
        if not rows:
            raise ValueError("seed file has no entries")
        views = {r[0] for r in rows}
        if len(views) != 1:
            raise ValueError(f"seeds must come from a single view, got {sorted(views)}")
        ids = tuple(sorted({r[3] for r in rows}))
        remap = {c: i + 1 for i, c in enumerate(ids)}
        pixels = tuple((u, v, remap[c]) for _, u, v, c in rows)
        return cls(rows[0][0], pixels, mode, ids, sparse=len(pixels) == len(ids))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path, mode: str = "semantic") -> "SeedLabels":
        return cls.loads(Path(path).read_text(), mode)

    @classmethod
    def sample_sparse(cls, labels, view_id: int, seed: int, mode: str = "semantic") -> "SeedLabels":
        """One uniformly random pixel per nonzero label of an ``(H, W)`` label image."""
        labels = np.asarray(labels)
        rng = np.random.default_rng(seed)
        ids = tuple(int(c) for c in np.unique(labels) if c != 0)
        if not ids:
            raise ValueError("label image has no labelled pixels")
        pixels = []
        for k, c in enumerate(ids, start=1):
            vs, us = np.nonzero(labels == c)
            j = rng.integers(len(us))
            pixels.append((us[j], vs[j], k))
        return cls(view_id, tuple(pixels), mode, ids)


# ---------------------------------------------------------------- responses


@dataclass
class PropagationResult:
    logits: np.ndarray  # (H, W, K), >= 0
    labels: np.ndarray  # (H, W), 0 where every logit is 0
    sigma: float
    variant: str
    label_ids: tuple[int, ...] = ()
    unpropagatable: tuple[int, ...] = ()
    ties: int = 0

    @property
    def empty(self) -> bool:
        return not np.any(self.logits > 0)

    def scene_labels(self) -> np.ndarray:
        lut = np.array((0,) + tuple(self.label_ids or range(1, self.logits.shape[-1] + 1)))
        return lut[self.labels]

    def save(self, stem) -> None:
        """``<stem>.jtns`` holds the logits, ``<stem>_labels.jtns`` the scene label ids and
        ``<stem>.ppm`` the colourised labels."""
        stem = Path(stem)
        save_tensor(stem.with_suffix(".jtns"), self.logits)
        save_tensor(stem.parent / f"{stem.name}_labels.jtns", self.scene_labels().astype(np.int64))
        write_ppm(stem.with_suffix(".ppm"), colorize(self.scene_labels()))


def argmax_labels(logits) -> tuple[np.ndarray, int]:
    """Labels ``1..K`` by argmax with the lowest index winning ties; 0 where all logits are 0.

    Returns the label image and the number of labelled pixels that had a tie.
    """
    logits = np.asarray(logits)
    top = logits.max(axis=-1)
    labels = np.where(top > 0, np.argmax(logits, axis=-1) + 1, 0)
    ties = int(np.count_nonzero((top > 0) & (np.sum(logits == top[..., None], axis=-1) > 1)))
    if ties:
        log.info("argmax: %d tied pixels resolved to the lowest class index", ties)
    return labels, ties


def _jacobians(params: FieldParams, rays: RayBatch, spec: PerturbationSpec, n_samples: int) -> np.ndarray:
    if spec.is_color_layer(params):
        return color_jacobians(render_batched(params, rays, n_samples))
    return jacobian_ad_batch(params, rays, spec, n_samples)


def unit_rows(jac: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalised rows plus a mask of rows too small to normalise (left at zero)."""
    norms = np.linalg.norm(jac, axis=1)
    bad = norms <= DEGENERATE_NORM
    out = np.zeros_like(jac)
    out[~bad] = jac[~bad] / norms[~bad, None]
    return out, bad


def seed_directions(params: FieldParams, seeds: SeedLabels, source: Camera, spec: PerturbationSpec,
                    n_samples: int = DEFAULT_SAMPLES) -> tuple[np.ndarray, tuple[int, ...]]:
    """Unit Jacobians of the seed pixels ``(n_seeds, D)`` and the classes that cannot be propagated."""
    rays = generate_rays(source)[seeds.flat_indices(source.width)]
    units, bad = unit_rows(_jacobians(params, rays, spec, n_samples))
    dead = tuple(int(k) for k in np.unique(seeds.classes()[bad]))
    if dead:
        log.warning("classes %s have degenerate seed Jacobians and will not be propagated", dead)
    return units, dead


class ResponseRenderer:
    """Gray-value responses of one view to a sequence of perturbations of ``theta^D``."""

    def __init__(self, params: FieldParams, camera: Camera, spec: PerturbationSpec,
                 n_samples: int = DEFAULT_SAMPLES):
        self.params = params
        self.camera = camera
        self.spec = spec
        self.n_samples = n_samples
        self.rays = generate_rays(camera)
        self.base = render_batched(params, self.rays, n_samples)
        self.fast = spec.is_color_layer(params)
        self.cache = ColorCache.from_render(self.base)
        self.base_sample_gray = ad._sigmoid(self.cache.z).mean(axis=2)
        # same arithmetic as the perturbed path, so a zero move gives exactly zero response
        self.base_gray = (np.einsum("rs,rs->r", self.cache.w, self.base_sample_gray) if self.fast
                          else self.base.rgb.mean(axis=1))

    def response(self, delta: np.ndarray, variant: str = "2d") -> np.ndarray:
        """Flat ``(H*W,)`` response to ``theta^D += delta``."""
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.fast:
            sample_gray = self.cache.sample_rgb(delta.reshape(3, -1)).mean(axis=2)
        else:
            moved = render_batched(perturb(self.params, self.spec, delta), self.rays, self.n_samples)
            sample_gray = ad._sigmoid(moved.z).mean(axis=2)
            if variant == "2d":
                return np.abs(moved.rgb.mean(axis=1) - self.base_gray)
        if variant == "2d":
            return np.abs(np.einsum("rs,rs->r", self.cache.w, sample_gray) - self.base_gray)
        return np.einsum("rs,rs->r", self.cache.w, np.abs(sample_gray - self.base_sample_gray))

    def responses(self, directions: np.ndarray, sigma: float, variant: str = "2d") -> np.ndarray:
        """``(H*W, n)`` responses, one column per unit direction."""
        return np.stack([self.response(sigma * d, variant) for d in directions], axis=1)


def _default_spec(params: FieldParams, spec: PerturbationSpec | None) -> PerturbationSpec:
    return spec if spec is not None else PerturbationSpec.single_layer(params, RGB_LAYER)


def _propagate(params, seeds, source, target, sigma, spec, n_samples, variant):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    spec = _default_spec(params, spec)
    units, dead = seed_directions(params, seeds, source, spec, n_samples)
    renderer = ResponseRenderer(params, target, spec, n_samples)
    per_seed = renderer.responses(units, sigma, variant)
    k = seeds.n_classes
    logits = np.zeros((per_seed.shape[0], k))
    for col, cls in enumerate(seeds.classes()):
        logits[:, cls - 1] = np.maximum(logits[:, cls - 1], per_seed[:, col])
    logits = logits.reshape(target.height, target.width, k)
    labels, ties = argmax_labels(logits)
    result = PropagationResult(logits, labels, sigma, variant, seeds.label_ids, dead, ties)
    if result.empty:
        log.warning("propagation produced no response (sigma=%g)", sigma)
    return result


def propagate_sparse_2d(params: FieldParams, seeds: SeedLabels, source: Camera, target: Camera,
                        sigma: float = DEFAULT_SIGMA, spec: PerturbationSpec | None = None,
                        n_samples: int = DEFAULT_SAMPLES) -> PropagationResult:
    """Logits ``R_k = |I_k - I|`` with ``I_k`` rendered after moving along seed ``k``'s unit Jacobian."""
    return _propagate(params, seeds, source, target, sigma, spec, n_samples, "2d")


def propagate_sparse_3d(params: FieldParams, seeds: SeedLabels, source: Camera, target: Camera,
                        sigma: float = DEFAULT_SIGMA, spec: PerturbationSpec | None = None,
                        n_samples: int = DEFAULT_SAMPLES) -> PropagationResult:
    """Like the 2D variant but integrates per-sample gray differences with the unperturbed weights."""
    return _propagate(params, seeds, source, target, sigma, spec, n_samples, "3d")


# ---------------------------------------------------------------- dense setting


@dataclass
class GradientSelection:
    """Seed combinations kept by adaptive gradient sampling."""

    directions: np.ndarray  # (n_selected, K, D) unit Jacobians
    pixels: np.ndarray  # (n_selected, K) flat source-pixel indices
    label_ids: tuple[int, ...]
    history: list[float] = field(default_factory=list)  # source mIoU after each kept selection
    rounds: int = 0
    complete: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.label_ids)


def reduce_responses(per_selection: np.ndarray) -> np.ndarray:
    """Per-class max over selections: ``(N, S, K) -> (N, K)``."""
    return per_selection.max(axis=1)


def _selection_logits(renderer: ResponseRenderer, directions: np.ndarray, sigma: float, variant: str) -> np.ndarray:
    """``(N, n_sel, K)`` responses of a view to every selected seed direction."""
    n_sel, k, d = directions.shape
    flat = renderer.responses(directions.reshape(-1, d), sigma, variant)
    return flat.reshape(-1, n_sel, k)


def adaptive_gradient_sampling(params: FieldParams, source: Camera, labels, seed: int = 0,
                               n_selections: int = 5, n_candidates: int = 20, max_rounds: int = 50,
                               sigma: float = DEFAULT_SIGMA, spec: PerturbationSpec | None = None,
                               n_samples: int = DEFAULT_SAMPLES, variant: str = "2d") -> GradientSelection:
    """Greedily keep seed combinations that raise the source view's self-propagation mIoU.

    Each round draws ``n_candidates`` combinations of one labelled pixel per
    class, scores each by the mIoU gain it brings to the current selection and
    keeps the best one if that gain is positive (otherwise the whole round is
    discarded). Once the source mIoU reaches 1 no gain is possible, so from
    then on the first candidate that keeps it at 1 is kept. Stops after ``n_selections`` kept combinations or
    ``max_rounds`` rounds, whichever comes first. Pixels labelled 0 are
    unlabelled and ignored.
    """
    spec = _default_spec(params, spec)
    labels = np.asarray(labels).reshape(source.height, source.width)
    ids = tuple(int(c) for c in np.unique(labels) if c != 0)
    if not ids:
        raise PropagationError("source view has no labelled pixels")
    flat = labels.ravel()
    target = np.searchsorted(ids, flat) + 1
    target[flat == 0] = 0
    members = [np.flatnonzero(flat == c) for c in ids]
    labelled = np.flatnonzero(flat > 0)

    rays = generate_rays(source)
    units = np.zeros((flat.size, spec.dim))
    units[labelled], bad = unit_rows(_jacobians(params, rays[labelled], spec, n_samples))
    usable = np.ones(flat.size, dtype=bool)
    usable[labelled[bad]] = False
    members = [m[usable[m]] for m in members]
    if any(len(m) == 0 for m in members):
        raise PropagationError("a class has no pixel with a usable Jacobian")

    renderer = ResponseRenderer(params, source, spec, n_samples)
    seen = tuple(range(1, len(ids) + 1))
    rng = np.random.default_rng(seed)
    cur = np.zeros((flat.size, len(ids)))
    score = 0.0
    kept_dirs, kept_pix, history = [], [], []
    rounds = 0
    while len(kept_dirs) < n_selections and rounds < max_rounds:
        rounds += 1
        best = (0.0, None, None, None)
        for _ in range(n_candidates):
            pix = np.array([m[rng.integers(len(m))] for m in members])
            resp = renderer.responses(units[pix], sigma, variant)
            merged = np.maximum(cur, resp)
            pred, _ = argmax_labels(merged)
            miou = compute_metrics(pred[labelled], target[labelled], seen).miou
            gain = miou - score
            # a perfect reconstruction cannot gain further; candidates that keep it perfect still qualify
            qualified = gain > best[0] or (best[1] is None and score == 1.0 and miou == 1.0)
            if qualified:
                best = (gain, pix, merged, miou)
        if best[1] is None:
            continue
        _, pix, cur, score = best
        kept_dirs.append(units[pix])
        kept_pix.append(pix)
        history.append(score)
        log.info("gradient sampling: round %d kept selection %d, source mIoU %.4f", rounds, len(kept_dirs), score)
    complete = len(kept_dirs) == n_selections
    if not complete:
        log.warning("gradient sampling found %d of %d qualified selections in %d rounds",
                    len(kept_dirs), n_selections, rounds)
    dirs = np.array(kept_dirs).reshape(len(kept_dirs), len(ids), spec.dim)
    pix = np.array(kept_pix, dtype=np.int64).reshape(len(kept_pix), len(ids))
    return GradientSelection(dirs, pix, ids, history, rounds, complete)


def dense_responses(params: FieldParams, selection: GradientSelection, target: Camera,
                    sigma: float = DEFAULT_SIGMA, spec: PerturbationSpec | None = None,
                    n_samples: int = DEFAULT_SAMPLES, variant: str = "2d") -> np.ndarray:
    """``(H*W, K)`` responses of ``target`` reduced over the kept selections."""
    spec = _default_spec(params, spec)
    if len(selection.directions) == 0:
        raise PropagationError("empty gradient selection")
    renderer = ResponseRenderer(params, target, spec, n_samples)
    return reduce_responses(_selection_logits(renderer, selection.directions, sigma, variant))


# ---------------------------------------------------------------- aggregation MLP


def _log_softmax(logits):
    shift = logits.value.max(axis=1, keepdims=True)
    z = logits - shift
    return z - ad.log(ad.sum(ad.exp(z), axis=1, keepdims=True))


@dataclass
class AggregationMLP:
    """K -> 256 -> 128 -> K rectifier network mapping responses to class logits.

    Inputs are divided by ``scale`` (fixed at training time) so the network
    sees responses of order one whatever ``sigma`` produced them.
    """

    weights: dict[str, np.ndarray]
    scale: float = 1.0

    @classmethod
    def init(cls, k: int, seed: int = 0, hidden=(256, 128)) -> "AggregationMLP":
        rng = np.random.default_rng(seed)
        dims = (k, *hidden, k)
        weights = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(a)
            weights[f"l{i}.weight"] = rng.uniform(-bound, bound, (b, a))
            weights[f"l{i}.bias"] = rng.uniform(-bound, bound, b)
        return cls(weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights) // 2

    def forward(self, weights, x):
        for i in range(self.n_layers):
            x = ad.matmul(x, ad.transpose(weights[f"l{i}.weight"])) + weights[f"l{i}.bias"]
            if i < self.n_layers - 1:
                x = ad.relu(x)
        return x

    def logits(self, responses) -> np.ndarray:
        return np.asarray(self.forward(self.weights, np.asarray(responses) / self.scale))

    def predict(self, responses) -> np.ndarray:
        """Labels ``1..K``."""
        return np.argmax(self.logits(responses), axis=1) + 1


def train_aggregation_mlp(responses, labels, iterations: int = 20_000, lr: float = 1e-3, batch: int = 256,
                          seed: int = 0) -> AggregationMLP:
    """Fit the aggregation MLP with cross-entropy on pixels labelled ``1..K`` (0 = ignored)."""
    x = np.asarray(responses, dtype=np.float64)
    y = np.asarray(labels).ravel()
    keep = y > 0
    x, y = x[keep], y[keep] - 1
    k = x.shape[1]
    if len(x) == 0:
        raise PropagationError("no labelled pixels to train on")
    if y.max() >= k:
        raise PropagationError("labels exceed the response width")
    scale = float(x.max()) if x.max() > 0 else 1.0
    x = x / scale
    model = AggregationMLP.init(k, seed)
    model.scale = scale
    opt = Adam(model.weights, lr=lr)
    rng = np.random.default_rng(seed)
    weights = model.weights
    for it in range(iterations):
        idx = rng.integers(0, len(x), min(batch, len(x)))
        tape = ad.Tape()
        wv = tape.params_from(weights)
        logp = _log_softmax(model.forward(wv, x[idx]))
        onehot = np.zeros((len(idx), k))
        onehot[np.arange(len(idx)), y[idx]] = 1.0
        loss = -ad.sum(logp * onehot) / len(idx)
        if not np.isfinite(loss.value):
            raise PropagationError(f"aggregation MLP diverged at iteration {it}")
        weights = opt.step(weights, ad.backward(loss, tape))
    model.weights = weights
    return model


# ---------------------------------------------------------------- re-colouring


def _channel_jacobians_ad(params: FieldParams, ray, spec: PerturbationSpec, n_samples: int) -> np.ndarray:
    out = np.empty((3, spec.dim))
    for c in range(3):
        tape = ad.Tape()
        tv = tape.params_from(params.tensors)
        rb = render_rays(tv, ray, params.config, n_samples)
        grads = ad.backward(ad.sum(ad.take(rb.rgb, (0, c))), tape)
        out[c] = np.concatenate([grads[n].ravel() for n in params.tensors])[spec.indices]
    return out


def recolor_entity(params: FieldParams, source: Camera, pixel: tuple[int, int], delta_rgb, target: Camera,
                   sigma: float = DEFAULT_SIGMA, spec: PerturbationSpec | None = None,
                   n_samples: int = DEFAULT_SAMPLES) -> tuple[np.ndarray, np.ndarray]:
    """Move ``theta^D`` by ``sum_c delta_c sigma J_c / |J_c|`` for the seed pixel's channel Jacobians.

    Returns the re-coloured target image and the unperturbed one, both ``(H, W, 3)``.
    """
    spec = _default_spec(params, spec)
    u, v = pixel
    ray = generate_rays(source)[v * source.width + u]
    if spec.is_color_layer(params):
        jc = channel_jacobians(render_batched(params, ray, n_samples).pixel(0))
    else:
        jc = _channel_jacobians_ad(params, ray, spec, n_samples)
    norms = np.linalg.norm(jc, axis=1)
    if np.any(norms <= DEGENERATE_NORM):
        raise JacobianError("seed pixel has a degenerate channel Jacobian")
    delta = sigma * np.asarray(delta_rgb, dtype=np.float64) @ (jc / norms[:, None])
    rays = generate_rays(target)
    shape = (target.height, target.width, 3)
    base = render_batched(params, rays, n_samples)
    if spec.is_color_layer(params):
        moved = ColorCache.from_render(base).rgb(delta.reshape(3, -1))
    else:
        moved = render_batched(perturb(params, spec, delta), rays, n_samples).rgb
    return moved.reshape(shape), base.rgb.reshape(shape)


def recolor_ratio(changed, original, mask, region=None) -> float:
    """Mean ``|dI|`` inside ``mask`` over mean ``|dI|`` on the rest of ``region``.

    ``region`` defaults to the whole image; pass the foreground so that empty
    background (which no colour edit can reach) does not dilute the ratio.
    """
    diff = np.abs(np.asarray(changed) - np.asarray(original)).mean(axis=-1)
    mask = np.asarray(mask, dtype=bool)
    rest = ~mask if region is None else np.asarray(region, dtype=bool) & ~mask
    if not mask.any() or not rest.any():
        raise ValueError("recolor ratio needs pixels both inside and outside the mask")
    outside = diff[rest].mean()
    return float(diff[mask].mean() / outside) if outside > 0 else float("inf")
