"""Radiance-field MLP, pinhole cameras and volume-rendering quadrature.

The network follows the classic NeRF layout at reduced size::

    gamma(x) -> trunk (depth x width, ReLU) -> density head (ReLU)
                                           -> feature (linear)
    [feature, gamma(d)] -> color (ReLU, H units) -> rgb (3 x H linear) -> sigmoid

The final ``rgb.weight`` matrix is the designated perturbation layer.

Every function here runs on plain arrays or on taped ``Var`` parameters, so
the same code renders images and builds training graphs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .tensor_io import load_archive, save_archive

RGB_LAYER = "rgb.weight"
DEFAULT_NEAR = 0.1
DEFAULT_FAR = 6.0
DEFAULT_SAMPLES = 64


class FieldError(RuntimeError):
    """Raised when the network produces non-finite values."""


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class FieldConfig:
    n_freq_pos: int = 6
    n_freq_dir: int = 4
    depth: int = 4
    width: int = 64
    color_width: int = 64

    def __post_init__(self):
        if min(self.n_freq_pos, self.n_freq_dir) < 0 or min(self.depth, self.width, self.color_width) < 1:
            raise ValueError(f"invalid field config {self}")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.n_freq_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.n_freq_dir

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.pos_dim
        for i in range(self.depth):
            shapes[f"trunk{i}.weight"] = (self.width, fan_in)
            shapes[f"trunk{i}.bias"] = (self.width,)
            fan_in = self.width
        shapes["sigma.weight"] = (1, self.width)
        shapes["sigma.bias"] = (1,)
        shapes["feature.weight"] = (self.width, self.width)
        shapes["feature.bias"] = (self.width,)
        shapes["color.weight"] = (self.color_width, self.width + self.dir_dim)
        shapes["color.bias"] = (self.color_width,)
        shapes["rgb.weight"] = (3, self.color_width)
        shapes["rgb.bias"] = (3,)
        return shapes

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.int64)

    @classmethod
    def from_array(cls, arr) -> "FieldConfig":
        return cls(*(int(v) for v in arr))


@dataclass
class FieldParams:
    """All trainable tensors of the field, in a fixed order.

    Weights are stored ``(out, in)``; the flattened parameter vector is the
    row-major concatenation of the tensors in ``config.layer_shapes()`` order.
    """

    config: FieldConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if list(self.tensors) != list(shapes):
            raise ValueError("tensor names do not match the architecture")
        for name, shape in shapes.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite parameters")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name, arr in self.tensors.items():
            out[name] = (pos, pos + arr.size)
            pos += arr.size
        return out

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "FieldParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector must have length {self.size}")
        tensors = {}
        for name, (a, b) in self.offsets().items():
            tensors[name] = vec[a:b].reshape(self.tensors[name].shape).copy()
        return FieldParams(self.config, tensors)

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def digest(self, names=None) -> str:
        h = hashlib.sha256(self.config.as_array().tobytes())
        for name in names or self.tensors:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()

    def save(self, path, tag: str = "") -> None:
        payload = {"__config__": self.config.as_array()}
        if tag:
            payload["__tag__"] = np.frombuffer(tag.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        payload.update(self.tensors)
        save_archive(path, payload)

    @classmethod
    def load(cls, path) -> "FieldParams":
        data = load_archive(path)
        config = FieldConfig.from_array(data.pop("__config__"))
        data.pop("__tag__", None)
        return cls(config, data)


def checkpoint_tag(path) -> str:
    data = load_archive(path)
    tag = data.get("__tag__")
    return "" if tag is None else bytes(tag.astype(np.uint8)).decode("utf-8")


def init_field(config: FieldConfig = FieldConfig(), seed: int = 0) -> FieldParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.layer_shapes().items():
        fan_in = shape[1] if len(shape) == 2 else config.layer_shapes()[name.replace("bias", "weight")][1]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return FieldParams(config, tensors)


# ---------------------------------------------------------------- encoding + MLP


def positional_encode(x, n_freq: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].

    Works on a single 3-vector or on an ``(N, 3)`` batch; output width is
    ``3 + 6 * n_freq``.
    """
    if n_freq < 0:
        raise ValueError("frequency count must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for i in range(n_freq):
        arg = (2.0 ** i) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


@dataclass
class FieldOutput:
    sigma: object  # (N,) density after ReLU
    z: object  # (N, 3) pre-sigmoid color logits
    h: object  # (N, H) input features of the rgb layer


def _check_finite(layer: str, x) -> None:
    if not np.all(np.isfinite(ad.value(x))):
        raise FieldError(f"non-finite output in layer {layer!r}")


def _linear(x, tensors, name):
    w = tensors[f"{name}.weight"]
    return x @ w.T + tensors[f"{name}.bias"]


def field_forward(tensors: Mapping, points, dirs, config: FieldConfig, check: bool = True) -> FieldOutput:
    """Evaluate the MLP at ``(N, 3)`` points with ``(N, 3)`` unit view directions."""
    x = positional_encode(points, config.n_freq_pos)
    d = positional_encode(dirs, config.n_freq_dir)
    h = x
    for i in range(config.depth):
        h = ad.relu(_linear(h, tensors, f"trunk{i}"))
        if check:
            _check_finite(f"trunk{i}", h)
    sigma = ad.relu(_linear(h, tensors, "sigma"))
    feat = _linear(h, tensors, "feature")
    hc = ad.relu(_linear(ad.concat([feat, d], axis=-1), tensors, "color"))
    z = _linear(hc, tensors, "rgb")
    if check:
        for layer, val in (("sigma", sigma), ("feature", feat), ("color", hc), ("rgb", z)):
            _check_finite(layer, val)
    return FieldOutput(sigma=ad.reshape(sigma, (-1,)), z=z, h=hc)


# ---------------------------------------------------------------- cameras and rays


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.column_stack([right, down, fwd])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` maps camera axes (x right, y down, z forward) to world."""

    width: int
    height: int
    fov: float  # vertical, radians
    rotation: np.ndarray
    position: np.ndarray
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        pos = np.asarray(self.position, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if rot.shape != (3, 3) or np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-9:
            raise ValueError("rotation must be orthonormal")
        if not 0.0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")

    @classmethod
    def looking_at(cls, position, width, height, fov, target=(0.0, 0.0, 0.0), **kw) -> "Camera":
        return cls(width, height, fov, look_at(position, target), np.asarray(position, float), **kw)

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * self.fov)

    def pose_matrix(self) -> np.ndarray:
        """Row-major 3x4 ``[R | t]`` camera-to-world matrix."""
        return np.hstack([self.rotation, self.position[:, None]])

    def with_size(self, width: int, height: int) -> "Camera":
        return Camera(width, height, self.fov, self.rotation, self.position, self.near, self.far)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0.0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")


@dataclass
class RayBatch:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3)
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Ray(self.origins[idx], self.directions[idx], float(self.near[idx]), float(self.far[idx]))
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def __iter__(self) -> Iterator[Ray]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        if isinstance(rays, RayBatch):
            return rays
        if isinstance(rays, Ray):
            rays = [rays]
        rays = list(rays)
        return cls(
            np.array([r.origin for r in rays], dtype=np.float64).reshape(-1, 3),
            np.array([r.direction for r in rays], dtype=np.float64).reshape(-1, 3),
            np.array([r.near for r in rays], dtype=np.float64),
            np.array([r.far for r in rays], dtype=np.float64),
        )

    @classmethod
    def concat(cls, batches) -> "RayBatch":
        batches = list(batches)
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("origins", "directions", "near", "far")))


def generate_rays(camera: Camera) -> RayBatch:
    """One unit ray per pixel center, in row-major (v, u) order."""
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    f = camera.focal
    cam = np.stack(
        [(u + 0.5 - 0.5 * camera.width) / f, (v + 0.5 - 0.5 * camera.height) / f, np.ones_like(u, dtype=float)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(dirs)
    return RayBatch(
        np.broadcast_to(camera.position, (n, 3)).copy(),
        dirs,
        np.full(n, camera.near),
        np.full(n, camera.far),
    )


# ---------------------------------------------------------------- quadrature


def sample_depths(near, far, n_samples: int, rng_seed=None) -> np.ndarray:
    """Stratified depths, one per equal-width bin of [near, far].

    With ``rng_seed=None`` every sample sits at its bin center, which is the
    deterministic evaluation mode.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if rng_seed is None:
        u = np.full((len(near), n_samples), 0.5)
    else:
        u = np.random.default_rng(rng_seed).random((len(near), n_samples))
    bins = np.arange(n_samples)[None, :] + u
    return near[:, None] + (far - near)[:, None] * bins / n_samples


def segment_lengths(t: np.ndarray, far) -> np.ndarray:
    """delta_k = t_{k+1} - t_k, with the last segment ending at ``far``."""
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    return np.concatenate([np.diff(t, axis=-1), far[:, None] - t[:, -1:]], axis=-1)


def quadrature_weights(sigma, deltas):
    """w_k = T_k (1 - exp(-sigma_k delta_k)), T_k = exp(-sum_{j<k} sigma_j delta_j)."""
    tau = sigma * deltas
    alpha = 1.0 - ad.exp(-tau)
    trans = ad.exp(-ad.cumsum(tau, axis=-1, exclusive=True))
    return trans * alpha


@dataclass
class RenderBatch:
    """Per-ray rendering results plus the per-sample quantities behind them."""

    rgb: object  # (R, 3)
    t: np.ndarray  # (R, S)
    w: object  # (R, S)
    h: object  # (R, S, H)
    z: object  # (R, S, 3)
    sigma: object  # (R, S)

    @property
    def gray(self):
        return ad.mean(self.rgb, axis=-1)

    def __len__(self):
        return len(self.t)

    def pixel(self, i: int) -> "RenderOutput":
        v = ad.value
        return RenderOutput(
            rgb=v(self.rgb)[i].copy(), t=self.t[i].copy(), w=v(self.w)[i].copy(),
            h=v(self.h)[i].copy(), z=v(self.z)[i].copy(),
        )


@dataclass
class RenderOutput:
    rgb: np.ndarray
    t: np.ndarray
    w: np.ndarray
    h: np.ndarray
    z: np.ndarray

    @property
    def gray(self) -> float:
        return float(self.rgb.mean())


def render_rays(tensors: Mapping, rays, config: FieldConfig, n_samples: int = DEFAULT_SAMPLES,
                rng_seed=None, check: bool = True) -> RenderBatch:
    """Volume-render a batch of rays; ``tensors`` may hold arrays or taped Vars."""
    rays = RayBatch.from_rays(rays)
    t = sample_depths(rays.near, rays.far, n_samples, rng_seed)
    deltas = segment_lengths(t, rays.far)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
    out = field_forward(tensors, pts.reshape(-1, 3), dirs.reshape(-1, 3), config, check=check)
    r, s = t.shape
    sigma = ad.reshape(out.sigma, (r, s))
    z = ad.reshape(out.z, (r, s, 3))
    h = ad.reshape(out.h, (r, s, -1))
    w = quadrature_weights(sigma, deltas)
    color = ad.sigmoid(z)
    rgb = ad.sum(ad.reshape(w, (r, s, 1)) * color, axis=1)
    return RenderBatch(rgb=rgb, t=t, w=w, h=h, z=z, sigma=sigma)


def render_pixel(params: FieldParams, ray: Ray, n_samples: int = DEFAULT_SAMPLES, rng_seed=None) -> RenderOutput:
    return render_rays(params.tensors, ray, params.config, n_samples, rng_seed).pixel(0)


def render_batched(params: FieldParams, rays, n_samples: int = DEFAULT_SAMPLES, rng_seed=None,
                   chunk: int = 1024) -> RenderBatch:
    """Render many rays in chunks; each chunk gets its own derived sampling seed."""
    rays = RayBatch.from_rays(rays)
    parts = []
    for k, start in enumerate(range(0, len(rays), chunk)):
        seed = None if rng_seed is None else [int(rng_seed), k]
        parts.append(render_rays(params.tensors, rays[start:start + chunk], params.config, n_samples, seed))
    return RenderBatch(
        rgb=np.concatenate([p.rgb for p in parts]),
        t=np.concatenate([p.t for p in parts]),
        w=np.concatenate([p.w for p in parts]),
        h=np.concatenate([p.h for p in parts]),
        z=np.concatenate([p.z for p in parts]),
        sigma=np.concatenate([p.sigma for p in parts]),
    )


def render_image(params: FieldParams, camera: Camera, n_samples: int = DEFAULT_SAMPLES, rng_seed=None,
                 chunk: int = 1024) -> tuple[np.ndarray, RenderBatch]:
    """Render ``camera``'s view; returns an ``(H, W, 3)`` image and the per-pixel cache."""
    cache = render_batched(params, generate_rays(camera), n_samples, rng_seed, chunk)
    return cache.rgb.reshape(camera.height, camera.width, 3), cache


def psnr(img_a, img_b) -> float:
    """10 log10(1 / MSE). Identical images give ``math.inf``."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
