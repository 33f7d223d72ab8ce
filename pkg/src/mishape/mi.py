"""Mutual information between two pixels under random weight perturbation.

Perturbing ``theta^D`` by ``sigma * n`` with ``n`` uniform on the unit sphere
turns every rendered pixel into a random variable. To first order two pixels
respond as ``J_i . n`` and ``J_j . n``, and their mutual information is
``log(1 / sqrt(1 - cos^2)) + const`` where ``cos`` is the absolute cosine of
their Jacobians. :func:`closed_form_mi` evaluates that expression and
:func:`mc_mi_estimate` measures the same quantity by sampling.

The sampler uses a 2-D histogram on rank-transformed values: each marginal is
mapped to its empirical quantiles and cut into equal-width bins. The estimate
is invariant to any monotone reparametrisation of either pixel (shifts
included) and a pixel paired with itself scores exactly ``log(bins)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .field import DEFAULT_SAMPLES, Camera, FieldParams, Ray, RayBatch, generate_rays, render_batched
from .jacobian import (
    DEGENERATE_NORM,
    ColorCache,
    PerturbationSpec,
    color_jacobians,
    cosine_abs_matrix,
    jacobian_ad_batch,
    perturb,
    sample_sphere,
)
from .tensor_io import save_tensor, write_ppm

DEFAULT_BINS = 32
MIN_DRAWS = 1000
SATURATED = math.inf  # closed-form MI of (numerically) parallel Jacobians
SATURATION_COS = 1.0 - 1e-12
DISPLAY_COS = 0.999


def closed_form_mi(cos_abs: float) -> float:
    """``log(1 / sqrt(1 - cos^2))``, up to the additive constant it is defined with.

    Returns :data:`SATURATED` once ``cos_abs >= 1 - 1e-12``.
    """
    c = float(cos_abs)
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"cos_abs must lie in [0, 1], got {cos_abs}")
    if c >= SATURATION_COS:
        return SATURATED
    return -0.5 * math.log1p(-c * c)


def display_mi(cos_abs) -> np.ndarray:
    """Closed-form MI clamped at ``cos = 0.999`` so it can be drawn."""
    c = np.minimum(np.clip(np.asarray(cos_abs, dtype=np.float64), 0.0, 1.0), DISPLAY_COS)
    return -0.5 * np.log1p(-c * c)


MI_DISPLAY_MAX = float(display_mi(1.0))


# ---------------------------------------------------------------- histogram estimator


def _bin_index(x: np.ndarray, bins: int, transform: str) -> np.ndarray:
    if transform == "rank":
        q = (rankdata(x, method="average") - 0.5) / len(x)
    elif transform == "none":
        lo, hi = x.min(), x.max()
        q = (x - lo) / (hi - lo)
    else:
        raise ValueError("transform must be 'rank' or 'none'")
    return np.minimum((q * bins).astype(np.int64), bins - 1)


def _xlogx(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0)), 0.0)


def histogram_mi(x, y, bins: int = DEFAULT_BINS, transform: str = "rank") -> tuple[float, float]:
    """Plug-in and jackknife-corrected MI (nats) of paired samples.

    Returns ``(corrected, plugin)``. The jackknife recomputes the plug-in value
    with each sample left out; that is done in closed form per occupied cell.
    Constant inputs carry no information and give ``(0.0, 0.0)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    n = len(x)
    if n < 2 or bins < 2:
        raise ValueError("need at least 2 samples and 2 bins")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, 0.0
    ix = _bin_index(x, bins, transform)
    iy = _bin_index(y, bins, transform)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ix, iy), 1.0)
    a = joint.sum(axis=1)
    b = joint.sum(axis=0)
    s_joint, s_a, s_b = _xlogx(joint).sum(), _xlogx(a).sum(), _xlogx(b).sum()
    plugin = math.log(n) - (s_a + s_b - s_joint) / n

    # leave one sample out of cell (i, j)
    ci, cj = np.nonzero(joint)
    nij = joint[ci, cj]
    d_joint = _xlogx(nij - 1) - _xlogx(nij)
    d_a = _xlogx(a[ci] - 1) - _xlogx(a[ci])
    d_b = _xlogx(b[cj] - 1) - _xlogx(b[cj])
    loo = math.log(n - 1) - ((s_a + d_a) + (s_b + d_b) - (s_joint + d_joint)) / (n - 1)
    loo_mean = float(np.sum(nij * loo) / n)
    corrected = n * plugin - (n - 1) * loo_mean
    return float(corrected), float(plugin)


# ---------------------------------------------------------------- Monte-Carlo estimates


@dataclass(frozen=True)
class MiEstimate:
    empirical_mi: float
    plugin_mi: float
    closed_form: float
    cos_abs: float
    n_draws: int
    sigma: float
    bins: int = DEFAULT_BINS
    transform: str = "rank"
    degenerate: bool = False

    @property
    def bias(self) -> float:
        """Jackknife bias estimate that was removed from the plug-in value."""
        return self.plugin_mi - self.empirical_mi

    def to_record(self, label: str = "") -> str:
        fields = [label or "-", f"{self.cos_abs:.12g}", f"{self.closed_form:.12g}", f"{self.empirical_mi:.12g}",
                  f"{self.plugin_mi:.12g}", str(self.n_draws), f"{self.sigma:.6g}", str(self.bins), self.transform,
                  "degenerate" if self.degenerate else "ok"]
        return " ".join(fields)

    @classmethod
    def from_record(cls, line: str) -> tuple[str, "MiEstimate"]:
        tok = line.split()
        if len(tok) != 10:
            raise ValueError(f"malformed MI record: {line!r}")
        est = cls(empirical_mi=float(tok[3]), plugin_mi=float(tok[4]), closed_form=float(tok[2]),
                  cos_abs=float(tok[1]), n_draws=int(tok[5]), sigma=float(tok[6]), bins=int(tok[7]),
                  transform=tok[8], degenerate=tok[9] == "degenerate")
        return tok[0], est


RECORD_HEADER = "# pair cos_abs closed_form empirical_mi plugin_mi n_draws sigma bins transform status"


def write_records(path, records) -> None:
    """``records``: iterable of ``(label, MiEstimate)``."""
    lines = [RECORD_HEADER] + [est.to_record(label) for label, est in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path) -> list[tuple[str, MiEstimate]]:
    return [MiEstimate.from_record(line) for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]


def estimate_from_samples(x, y, cos_abs: float, sigma: float, bins: int = DEFAULT_BINS,
                          transform: str = "rank") -> MiEstimate:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    degenerate = bool(np.ptp(x) == 0 or np.ptp(y) == 0)
    corrected, plugin = histogram_mi(x, y, bins, transform)
    cos_abs = float(min(max(cos_abs, 0.0), 1.0)) if np.isfinite(cos_abs) else 0.0
    return MiEstimate(corrected, plugin, closed_form_mi(cos_abs), cos_abs, len(x), sigma, bins, transform,
                      degenerate)


def _perturbed_gray(params: FieldParams, rays: RayBatch, spec: PerturbationSpec, directions: np.ndarray,
                    n_samples: int, chunk: int = 512) -> np.ndarray:
    """Gray values ``(n_draws, R)`` of ``rays`` with theta^D moved by ``sigma * direction``."""
    out = np.empty((len(directions), len(rays)))
    if spec.is_color_layer(params):
        cache = ColorCache.from_render(render_batched(params, rays, n_samples))
        hdim = cache.h.shape[-1]
        for start in range(0, len(directions), chunk):
            dw = spec.sigma * directions[start:start + chunk].reshape(-1, 3, hdim)
            z = cache.z[None] + np.einsum("rsj,ncj->nrsc", cache.h, dw)
            rgb = np.einsum("rs,nrsc->nrc", cache.w, 1.0 / (1.0 + np.exp(-z)))
            out[start:start + chunk] = rgb.mean(axis=2)
        return out
    for k, n in enumerate(directions):
        moved = perturb(params, spec, spec.sigma * n)
        out[k] = render_batched(moved, rays, n_samples).rgb.mean(axis=1)
    return out


def pixel_jacobians(params: FieldParams, rays, spec: PerturbationSpec, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Jacobian rows for ``rays``; closed form for the color layer, AD otherwise."""
    rays = RayBatch.from_rays(rays)
    if spec.is_color_layer(params):
        return color_jacobians(render_batched(params, rays, n_samples))
    return jacobian_ad_batch(params, rays, spec, n_samples)


def mc_mi_estimate(params: FieldParams, ray_i: Ray, ray_j: Ray, spec: PerturbationSpec, n_draws: int = 10_000,
                   bins: int = DEFAULT_BINS, seed: int = 0, n_samples: int = DEFAULT_SAMPLES,
                   transform: str = "rank") -> MiEstimate:
    """Sample ``n ~ U(S^{D-1})``, render both pixels at ``theta^D + sigma n`` and estimate their MI.

    A pixel whose value does not move under any draw yields an estimate
    flagged ``degenerate``.
    """
    if n_draws < MIN_DRAWS:
        raise ValueError(f"n_draws must be >= {MIN_DRAWS}")
    spec.check(params)
    rays = RayBatch.from_rays([ray_i, ray_j])
    jac = pixel_jacobians(params, rays, spec, n_samples)
    cos = cosine_abs_matrix(jac[:1], jac[1:])[0, 0]
    directions = sample_sphere(n_draws, spec.dim, np.random.default_rng(seed))
    vals = _perturbed_gray(params, rays, spec, directions, n_samples)
    est = estimate_from_samples(vals[:, 0], vals[:, 1], cos, spec.sigma, bins, transform)
    if np.isnan(cos) and not est.degenerate:
        est = MiEstimate(**{**est.__dict__, "degenerate": True})
    return est


def unit_pair(cos_abs: float, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two random unit vectors in R^dim with the given cosine."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    a = q[:, 0]
    b = cos_abs * q[:, 0] + math.sqrt(max(0.0, 1.0 - cos_abs ** 2)) * q[:, 1]
    return a, b


def linear_mi_estimate(jac_i, jac_j, sigma: float = 1e-3, n_draws: int = 10_000, bins: int = DEFAULT_BINS,
                       seed: int = 0, transform: str = "rank") -> MiEstimate:
    """MI estimate for an explicit linear map ``theta -> (J_i . theta, J_j . theta)``."""
    a = np.asarray(jac_i, dtype=np.float64).ravel()
    b = np.asarray(jac_j, dtype=np.float64).ravel()
    directions = sample_sphere(n_draws, len(a), np.random.default_rng(seed))
    cos = cosine_abs_matrix(a[None], b[None])[0, 0]
    return estimate_from_samples(sigma * directions @ a, sigma * directions @ b, cos, sigma, bins, transform)


# ---------------------------------------------------------------- MI maps


@dataclass
class MiMap:
    """Closed-form MI between one source pixel and every pixel of a target view."""

    mi: np.ndarray  # (H, W), clamped for display
    cos: np.ndarray  # (H, W), NaN where the target Jacobian is degenerate
    empirical: dict[int, MiEstimate] = field(default_factory=dict)

    def top_fraction(self, labels, label: int, top: float = 0.05) -> float:
        """Share of the ``top`` highest-MI pixels whose label equals ``label``."""
        flat = self.mi.ravel()
        k = max(1, int(round(top * flat.size)))
        order = np.argsort(-flat, kind="stable")[:k]
        return float(np.mean(np.asarray(labels).ravel()[order] == label))

    def save(self, stem) -> None:
        """Write ``<stem>.ppm`` (heatmap) and ``<stem>.jtns`` (raw values)."""
        stem = Path(stem)
        save_tensor(stem.with_suffix(".jtns"), self.mi)
        write_ppm(stem.with_suffix(".ppm"), heatmap(self.mi / MI_DISPLAY_MAX))


def heatmap(values) -> np.ndarray:
    """Map ``[0, 1]`` to a black-red-yellow-white ramp, shape ``(..., 3)``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


def mi_map(params: FieldParams, source: Ray, target: Camera, spec: PerturbationSpec,
           n_samples: int = DEFAULT_SAMPLES, empirical_pixels=(), n_draws: int = 10_000, seed: int = 0) -> MiMap:
    """Clamped closed-form MI image; ``empirical_pixels`` (flat indices) also get sampled estimates."""
    spec.check(params)
    rays = generate_rays(target)
    src = pixel_jacobians(params, [source], spec, n_samples)
    tgt = pixel_jacobians(params, rays, spec, n_samples)
    if np.linalg.norm(src) <= DEGENERATE_NORM:
        raise ValueError("source pixel has a degenerate Jacobian")
    cos = cosine_abs_matrix(tgt, src)[:, 0]
    mi = np.where(np.isnan(cos), 0.0, display_mi(np.nan_to_num(cos)))
    emp = {int(p): mc_mi_estimate(params, source, rays[int(p)], spec, n_draws, seed=seed, n_samples=n_samples)
           for p in empirical_pixels}
    shape = (target.height, target.width)
    return MiMap(mi.reshape(shape), cos.reshape(shape), emp)
