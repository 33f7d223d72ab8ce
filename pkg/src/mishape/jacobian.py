"""Per-pixel Jacobians of rendered gray values with respect to a weight subset.

Two routes are provided:

* :func:`pixel_jacobian_ad` runs reverse-mode AD through the renderer and
  works for any perturbation pattern;
* :func:`pixel_jacobian_fast` uses the closed form available when the
  perturbed weights are the final ``3 x H`` color layer,
  ``dI/dW[c, j] = (1/3) sum_k w_k sigmoid'(z_kc) h_kj``.

Because neither the quadrature weights ``w`` nor the features ``h`` depend
on the color layer, a view rendered once can be re-rendered exactly under
any color-layer change from its cached per-sample features
(:func:`render_color_delta`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .field import (
    DEFAULT_SAMPLES,
    RGB_LAYER,
    FieldParams,
    Ray,
    RayBatch,
    RenderBatch,
    RenderOutput,
    render_rays,
)

PATTERNS = ("random-neurons", "single-layer", "layer-block")
DEGENERATE_NORM = 1e-12
COLOR_BLOCK = ("feature", "color", "rgb")


class JacobianError(RuntimeError):
    pass


class DegenerateJacobianError(JacobianError):
    """A Jacobian is too small for its direction to be meaningful."""


@dataclass(frozen=True)
class PerturbationSpec:
    """Which flattened parameters are perturbed, and by how much."""

    pattern: str
    indices: np.ndarray
    sigma: float = 0.1
    layers: tuple[str, ...] = field(default=())

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")
        if idx.ndim != 1 or len(idx) < 2:
            raise ValueError("need at least two perturbed parameters")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("perturbation indices must be unique")
        if idx.min() < 0:
            raise ValueError("perturbation indices must be non-negative")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be a finite non-negative number")

    @property
    def dim(self) -> int:
        return len(self.indices)

    def with_sigma(self, sigma: float) -> "PerturbationSpec":
        return PerturbationSpec(self.pattern, self.indices, sigma, self.layers)

    def check(self, params: FieldParams) -> None:
        if self.indices.max() >= params.size:
            raise IndexError(f"perturbation index {self.indices.max()} out of range ({params.size} parameters)")

    def is_color_layer(self, params: FieldParams) -> bool:
        a, b = params.offsets()[RGB_LAYER]
        return self.pattern == "single-layer" and np.array_equal(self.indices, np.arange(a, b))

    @classmethod
    def single_layer(cls, params: FieldParams, layer: str = RGB_LAYER, sigma: float = 0.1) -> "PerturbationSpec":
        """All entries of one weight tensor (biases are not included)."""
        a, b = params.offsets()[layer]
        return cls("single-layer", np.arange(a, b), sigma, (layer,))

    @classmethod
    def layer_block(cls, params: FieldParams, layers=COLOR_BLOCK, sigma: float = 0.1) -> "PerturbationSpec":
        """Weights and biases of a run of layers, by default the whole color branch."""
        offs = params.offsets()
        names = [n for n in offs if n.split(".")[0] in layers]
        idx = np.concatenate([np.arange(*offs[n]) for n in names])
        return cls("layer-block", idx, sigma, tuple(names))

    @classmethod
    def random_neurons(cls, params: FieldParams, n_neurons: int, seed: int, sigma: float = 0.1) -> "PerturbationSpec":
        """Incoming weights of ``n_neurons`` units drawn at random across all layers."""
        rng = np.random.default_rng(seed)
        offs = params.offsets()
        units = [(name, row) for name, arr in params.tensors.items() if name.endswith(".weight")
                 for row in range(arr.shape[0])]
        pick = rng.choice(len(units), size=n_neurons, replace=False)
        idx = []
        for k in sorted(pick):
            name, row = units[k]
            fan_in = params[name].shape[1]
            start = offs[name][0] + row * fan_in
            idx.append(np.arange(start, start + fan_in))
        return cls("random-neurons", np.concatenate(idx), sigma, tuple(sorted({units[k][0] for k in pick})))


@dataclass(frozen=True)
class PixelJacobian:
    values: np.ndarray
    norm: float = -1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(vals)):
            raise JacobianError("non-finite Jacobian")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "norm", float(np.linalg.norm(vals)))

    @property
    def degenerate(self) -> bool:
        return self.norm <= DEGENERATE_NORM

    def unit(self) -> np.ndarray:
        if self.degenerate:
            raise DegenerateJacobianError("cannot normalise a near-zero Jacobian")
        return self.values / self.norm


# ---------------------------------------------------------------- Jacobian routes


def jacobian_ad_batch(params: FieldParams, rays, spec: PerturbationSpec, n_samples: int = DEFAULT_SAMPLES,
                      rng_seed=None) -> np.ndarray:
    """Rows are d gray / d theta^D for each ray, one reverse pass per ray."""
    spec.check(params)
    rays = RayBatch.from_rays(rays)
    out = np.empty((len(rays), spec.dim))
    for i in range(len(rays)):
        tape = ad.Tape()
        tv = tape.params_from(params.tensors)
        seed = None if rng_seed is None else [int(rng_seed), i]
        rb = render_rays(tv, rays[i:i + 1], params.config, n_samples, seed)
        grads = ad.backward(ad.mean(rb.rgb), tape)
        flat = np.concatenate([grads[k].ravel() for k in params.tensors])
        out[i] = flat[spec.indices]
    if not np.all(np.isfinite(out)):
        raise JacobianError("non-finite gradient")
    return out


def pixel_jacobian_ad(params: FieldParams, ray: Ray, spec: PerturbationSpec, n_samples: int = DEFAULT_SAMPLES,
                      rng_seed=None) -> PixelJacobian:
    """Gradient of the rendered gray value w.r.t. the spec's parameters, via reverse-mode AD."""
    rows = jacobian_ad_batch(params, [ray], spec, n_samples, None if rng_seed is None else rng_seed)
    return PixelJacobian(rows[0])


def _sigmoid_prime(z):
    s = ad._sigmoid(np.asarray(z, dtype=np.float64))
    return s * (1.0 - s)


def color_jacobians(cache: RenderBatch | RenderOutput) -> np.ndarray:
    """Closed-form gray Jacobians w.r.t. ``rgb.weight``, shape ``(R, 3 * H)`` (row-major (c, j))."""
    w = np.atleast_2d(ad.value(cache.w))
    z = ad.value(cache.z)
    h = ad.value(cache.h)
    if z.ndim == 2:
        z, h = z[None], h[None]
    jac = np.einsum("rk,rkc,rkj->rcj", w, _sigmoid_prime(z), h) / 3.0
    return jac.reshape(len(w), -1)


def channel_jacobians(cache: RenderOutput) -> np.ndarray:
    """Per-channel Jacobians ``d rgb_c / d rgb.weight``, shape ``(3, 3 * H)``."""
    sp = _sigmoid_prime(cache.z)
    hdim = cache.h.shape[-1]
    out = np.zeros((3, 3, hdim))
    for c in range(3):
        out[c, c] = np.einsum("k,k,kj->j", cache.w, sp[:, c], cache.h)
    return out.reshape(3, -1)


def pixel_jacobian_fast(render_output: RenderOutput, spec: PerturbationSpec,
                        params: FieldParams | None = None) -> PixelJacobian:
    """Closed-form Jacobian for the designated color layer.

    Raises:
        JacobianError: if ``spec`` does not select exactly the ``rgb.weight`` entries.
    """
    ok = spec.pattern == "single-layer" and spec.layers == (RGB_LAYER,)
    if params is not None:
        ok = spec.is_color_layer(params)
    if not ok or spec.dim != 3 * render_output.h.shape[-1]:
        raise JacobianError("fast path only covers the single-layer rgb.weight pattern")
    return PixelJacobian(color_jacobians(render_output)[0])


def cosine_abs(a, b) -> float:
    """|a.b| / (|a| |b|) for two Jacobians (``PixelJacobian`` or arrays)."""
    va = a.values if isinstance(a, PixelJacobian) else np.asarray(a, dtype=np.float64).ravel()
    vb = b.values if isinstance(b, PixelJacobian) else np.asarray(b, dtype=np.float64).ravel()
    sa, sb = float(va @ va), float(vb @ vb)
    if sa <= DEGENERATE_NORM**2 or sb <= DEGENERATE_NORM**2:
        raise DegenerateJacobianError("cosine undefined for a near-zero Jacobian")
    # sqrt of the product keeps cos(a, a) exactly 1
    return float(min(1.0, abs(va @ vb) / np.sqrt(sa * sb)))


def cosine_abs_matrix(rows_a: np.ndarray, rows_b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise |cos| between Jacobian rows; degenerate rows give NaN."""
    rows_b = rows_a if rows_b is None else rows_b
    na = np.linalg.norm(rows_a, axis=1)
    nb = np.linalg.norm(rows_b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.abs(rows_a @ rows_b.T) / np.outer(na, nb)
    cos[na <= DEGENERATE_NORM, :] = np.nan
    cos[:, nb <= DEGENERATE_NORM] = np.nan
    return np.minimum(cos, 1.0)


# ---------------------------------------------------------------- perturbations


def perturb(params: FieldParams, spec: PerturbationSpec, delta) -> FieldParams:
    """theta^D <- theta^D + delta; every other parameter is copied bit-for-bit."""
    spec.check(params)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (spec.dim,):
        raise ValueError(f"delta must have shape ({spec.dim},)")
    flat = params.flat()
    flat[spec.indices] += delta
    return params.with_flat(flat)


def apply_perturbation(params: FieldParams, spec: PerturbationSpec, direction) -> FieldParams:
    """Move ``params`` by ``spec.sigma`` along a unit ``direction`` in R^D."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("perturbation direction must be a unit vector")
    return perturb(params, spec, spec.sigma * direction)


def sample_sphere_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Isotropic unit vector in R^dim (normalised standard normal)."""
    return sample_sphere(1, dim, rng)[0]


def sample_sphere(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim < 2:
        raise ValueError("sphere dimension must be >= 2")
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# ---------------------------------------------------------------- cached color-layer rendering


@dataclass
class ColorCache:
    """Per-sample quantities of a rendered ray set that a color-layer change leaves fixed."""

    w: np.ndarray  # (R, S)
    h: np.ndarray  # (R, S, H)
    z: np.ndarray  # (R, S, 3)

    @classmethod
    def from_render(cls, rb: RenderBatch) -> "ColorCache":
        return cls(np.asarray(ad.value(rb.w)), np.asarray(ad.value(rb.h)), np.asarray(ad.value(rb.z)))

    def subset(self, idx) -> "ColorCache":
        return ColorCache(self.w[idx], self.h[idx], self.z[idx])

    def jacobians(self) -> np.ndarray:
        return color_jacobians(self)

    def sample_rgb(self, delta_w=None) -> np.ndarray:
        """Per-sample radiance ``(R, S, 3)`` with ``rgb.weight`` shifted by ``delta_w`` (3 x H)."""
        z = self.z if delta_w is None else self.z + self.h @ np.asarray(delta_w).T
        return ad._sigmoid(z)

    def rgb(self, delta_w=None) -> np.ndarray:
        return np.einsum("rk,rkc->rc", self.w, self.sample_rgb(delta_w))

    def gray(self, delta_w=None) -> np.ndarray:
        return self.rgb(delta_w).mean(axis=1)


def render_color_delta(cache: ColorCache, delta_w) -> np.ndarray:
    """Exact rgb ``(R, 3)`` after adding ``delta_w`` to the color layer."""
    return cache.rgb(delta_w)
