"""Procedural toy scenes with exact geometry and per-pixel ground truth.

Scenes are sets of unshaded spheres and axis-aligned boxes floating over a
black background, each carrying a flat albedo plus semantic and instance ids.
Label maps use 0 for background / unlabeled pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import Camera, RayBatch, generate_rays
from .tensor_io import load_tensor, save_tensor

ORBIT_RADIUS = 4.0
PLACEMENT_RADIUS = 1.2
MIN_ALBEDO_DISTANCE = 0.2


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    extent: tuple[float, float, float]  # sphere: (r, r, r); box: half sizes
    albedo: tuple[float, float, float]
    sem_id: int
    inst_id: int

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.extent[0])
        return float(np.linalg.norm(self.extent))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Entry distance along each ray (``inf`` on a miss)."""
        c = np.asarray(self.center)
        if self.kind == "sphere":
            r = self.extent[0]
            oc = origins - c
            b = np.einsum("ij,ij->i", oc, dirs)
            disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
            t = np.full(len(origins), np.inf)
            hit = disc >= 0
            sq = np.sqrt(disc[hit])
            t0 = -b[hit] - sq
            t1 = -b[hit] + sq
            t[hit] = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
            return t
        if self.kind == "box":
            lo = c - np.asarray(self.extent)
            hi = c + np.asarray(self.extent)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                ta = (lo - origins) * inv
                tb = (hi - origins) * inv
            tmin = np.nanmax(np.minimum(ta, tb), axis=1)
            tmax = np.nanmin(np.maximum(ta, tb), axis=1)
            t = np.where(tmin > 0, tmin, tmax)
            return np.where((tmax >= tmin) & (tmax > 0), t, np.inf)
        raise SceneError(f"unknown primitive kind {self.kind!r}")

    def to_line(self) -> str:
        nums = [*self.center, *self.extent, *self.albedo]
        return " ".join([self.kind, *(repr(float(v)) for v in nums), str(self.sem_id), str(self.inst_id)])

    @classmethod
    def from_line(cls, line: str) -> "Primitive":
        tok = line.split()
        if len(tok) != 12:
            raise SceneError(f"malformed primitive line: {line!r}")
        vals = [float(v) for v in tok[1:10]]
        return cls(tok[0], tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]), int(tok[10]), int(tok[11]))


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    seed: int = 0

    def __post_init__(self):
        for attr in ("sem_id", "inst_id"):
            ids = sorted({getattr(p, attr) for p in self.primitives})
            if ids != list(range(1, len(ids) + 1)):
                raise SceneError(f"{attr} values must be contiguous from 1, got {ids}")

    @property
    def n_classes(self) -> int:
        return max(p.sem_id for p in self.primitives)

    @property
    def n_instances(self) -> int:
        return max(p.inst_id for p in self.primitives)

    @property
    def extent(self) -> float:
        """Radius of a ball about the origin containing every primitive."""
        return max(np.linalg.norm(p.center) + p.bounding_radius for p in self.primitives)

    def dumps(self) -> str:
        lines = [f"# seed {self.seed}", "# kind cx cy cz ex ey ez r g b sem_id inst_id"]
        lines += [p.to_line() for p in self.primitives]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SceneSpec":
        seed = 0
        prims = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            prims.append(Primitive.from_line(line))
        return cls(tuple(prims), seed)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.loads(Path(path).read_text())


def generate_scene(n_objects: int, seed: int, n_classes: int | None = None, parts: int = 1,
                   palette: int | None = None, max_retries: int = 1000, restarts: int = 10) -> SceneSpec:
    """Random non-overlapping objects with well-separated albedos.

    By default every object is one primitive and its own semantic class, and
    all albedos are pairwise distinct. ``n_classes`` < n makes objects share
    classes while keeping distinct instance ids. ``parts`` > 1 builds each
    object from that many touching primitives, and ``palette`` draws all part
    colors from a shared set of that many distinct albedos (each object uses
    distinct palette entries), so that color no longer identifies an object.

    Placement is greedy. When ``max_retries`` rejections pile up it starts over
    from an empty scene, at most ``restarts`` times, then raises SceneError.
    """
    if not 1 <= n_objects <= 16:
        raise ValueError("n_objects must be in [1, 16]")
    n_classes = n_objects if n_classes is None else n_classes
    if not 1 <= n_classes <= n_objects:
        raise ValueError("n_classes must be in [1, n_objects]")
    if parts < 1:
        raise ValueError("parts must be >= 1")
    n_colors = n_objects * parts if palette is None else palette
    if n_colors < parts:
        raise ValueError("palette must hold at least `parts` colors")
    rng = np.random.default_rng(seed)
    scale = min(1.0, (4.0 / n_objects) ** (1.0 / 3.0)) / parts ** 0.75
    placed: list[tuple[np.ndarray, list, float]] = []
    retries = attempt = 0
    while len(placed) < n_objects:
        shapes = _compound(rng, parts, scale)
        bound = max(np.linalg.norm(off) + b for _, off, _, b in shapes)
        center = _uniform_in_ball(rng, PLACEMENT_RADIUS - bound)
        if all(np.linalg.norm(center - c) > bound + b + 0.05 for c, _, b in placed):
            placed.append((center, shapes, bound))
            continue
        retries += 1
        if retries > max_retries:
            attempt += 1
            if attempt > restarts:
                raise SceneError(f"could not place {n_objects} objects in {restarts + 1} attempts of "
                                 f"{max_retries} retries (seed {seed})")
            placed, retries = [], 0
    albedos = _distinct_albedos(rng, n_colors)
    shift = np.mean([c for c, _, _ in placed], axis=0)
    sem = np.concatenate([np.arange(1, n_classes + 1), rng.integers(1, n_classes + 1, n_objects - n_classes)])
    prims = []
    for i, (center, shapes, _) in enumerate(placed):
        colors = np.arange(i * parts, (i + 1) * parts) if palette is None else rng.permutation(n_colors)[:parts]
        for (kind, off, ext, _), col in zip(shapes, colors):
            prims.append(Primitive(kind, tuple(float(v) for v in center + off - shift), tuple(float(v) for v in ext),
                                   tuple(float(v) for v in albedos[col]), int(sem[i]), i + 1))
    return SceneSpec(tuple(prims), seed)


def _primitive_shape(rng, scale: float):
    if rng.random() < 0.5:
        ext = np.full(3, rng.uniform(0.28, 0.5) * scale)
        return "sphere", ext, float(ext[0])
    ext = rng.uniform(0.2, 0.38, size=3) * scale
    return "box", ext, float(np.linalg.norm(ext))


def _compound(rng, parts: int, scale: float):
    """``parts`` primitives chained so each one overlaps its predecessor."""
    shapes = []
    offset = np.zeros(3)
    prev_bound = 0.0
    for k in range(parts):
        kind, ext, bound = _primitive_shape(rng, scale)
        if k:
            step = rng.standard_normal(3)
            step /= np.linalg.norm(step)
            offset = offset + step * 0.6 * (prev_bound + bound)
        shapes.append((kind, offset.copy(), ext, bound))
        prev_bound = bound
    mid = np.mean([s[1] for s in shapes], axis=0)
    return [(kind, off - mid, ext, b) for kind, off, ext, b in shapes]


def _uniform_in_ball(rng, radius: float) -> np.ndarray:
    while True:
        p = rng.uniform(-1.0, 1.0, size=3)
        if p @ p <= 1.0:
            return p * max(radius, 0.0)


def _distinct_albedos(rng, n: int) -> np.ndarray:
    out: list[np.ndarray] = []
    for _ in range(100000):
        if len(out) == n:
            break
        a = rng.uniform(0.1, 0.9, size=3)
        if a.max() < 0.4:
            continue  # keep objects visibly brighter than the background
        if all(np.linalg.norm(a - b) >= MIN_ALBEDO_DISTANCE for b in out):
            out.append(a)
    if len(out) < n:
        raise SceneError("could not draw distinct albedos")
    return np.array(out)


# ---------------------------------------------------------------- ground truth rendering


def gt_render_rays(scene: SceneSpec, rays: RayBatch, mode: str = "semantic"):
    """Nearest-hit albedo, label and depth per ray (black / 0 / inf on a miss)."""
    n = len(rays)
    depth = np.full(n, np.inf)
    color = np.zeros((n, 3))
    labels = np.zeros(n, dtype=np.int64)
    for prim in scene.primitives:
        t = prim.intersect(rays.origins, rays.directions)
        t = np.where((t >= rays.near) & (t <= rays.far), t, np.inf)
        closer = t < depth
        depth[closer] = t[closer]
        color[closer] = prim.albedo
        labels[closer] = prim.sem_id if mode == "semantic" else prim.inst_id
    return color, labels, depth


def gt_render(scene: SceneSpec, camera: Camera, mode: str = "semantic"):
    """Exact render of ``scene``: ``(image (H,W,3), labels (H,W) int, depth (H,W))``."""
    if mode not in ("semantic", "instance"):
        raise ValueError(f"unknown label mode {mode!r}")
    color, labels, depth = gt_render_rays(scene, generate_rays(camera), mode)
    shape = (camera.height, camera.width)
    return color.reshape(*shape, 3), labels.reshape(shape), depth.reshape(shape)


def gt_affinity(label_a, label_b) -> np.ndarray | int:
    """1 where two labels are the same non-background id, else 0 (broadcasts)."""
    a = np.asarray(label_a)
    b = np.asarray(label_b)
    out = ((a == b) & (a != 0)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- datasets


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    labels: np.ndarray  # semantic ids
    instances: np.ndarray
    depth: np.ndarray

    def label_map(self, mode: str = "semantic") -> np.ndarray:
        return self.labels if mode == "semantic" else self.instances


@dataclass
class Dataset:
    scene: SceneSpec
    train: list[View] = field(default_factory=list)
    test: list[View] = field(default_factory=list)

    def train_rays(self) -> RayBatch:
        return RayBatch.concat(generate_rays(v.camera) for v in self.train)

    def train_pixels(self) -> np.ndarray:
        return np.concatenate([v.image.reshape(-1, 3) for v in self.train])

    def train_labels(self, mode: str = "semantic") -> np.ndarray:
        return np.concatenate([v.label_map(mode).ravel() for v in self.train])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.scene.save(d / "scene.txt")
        for split in ("train", "test"):
            views = getattr(self, split)
            save_tensor(d / f"{split}_images.jtns", np.stack([v.image for v in views]))
            save_tensor(d / f"{split}_labels.jtns", np.stack([v.labels for v in views]))
            save_tensor(d / f"{split}_instances.jtns", np.stack([v.instances for v in views]))
            save_tensor(d / f"{split}_depth.jtns", np.stack([np.where(np.isfinite(v.depth), v.depth, -1.0) for v in views]))
            save_poses(d / f"{split}_poses.txt", [v.camera for v in views])

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        ds = cls(SceneSpec.load(d / "scene.txt"))
        for split in ("train", "test"):
            cams = load_poses(d / f"{split}_poses.txt")
            imgs = load_tensor(d / f"{split}_images.jtns")
            labels = load_tensor(d / f"{split}_labels.jtns")
            inst = load_tensor(d / f"{split}_instances.jtns")
            depth = load_tensor(d / f"{split}_depth.jtns")
            depth = np.where(depth < 0, np.inf, depth)
            getattr(ds, split).extend(View(c, imgs[i], labels[i], inst[i], depth[i]) for i, c in enumerate(cams))
        return ds


def save_poses(path, cameras) -> None:
    """One camera per line: ``width height fov near far`` then the 3x4 pose, row-major."""
    lines = ["# width height fov near far r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2"]
    for c in cameras:
        nums = [c.width, c.height, c.fov, c.near, c.far, *c.pose_matrix().ravel()]
        lines.append(" ".join(repr(float(v)) if i > 1 else str(int(v)) for i, v in enumerate(nums)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> list[Camera]:
    cams = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        w, h = int(tok[0]), int(tok[1])
        fov, near, far = (float(v) for v in tok[2:5])
        pose = np.array([float(v) for v in tok[5:17]]).reshape(3, 4)
        cams.append(Camera(w, h, fov, pose[:, :3], pose[:, 3], near, far))
    return cams


def orbit_camera(azimuth: float, elevation: float, scene: SceneSpec, width: int, height: int,
                 fov: float = math.radians(45.0), radius: float = ORBIT_RADIUS) -> Camera:
    pos = radius * np.array([
        math.cos(elevation) * math.cos(azimuth),
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
    ])
    ext = scene.extent
    near = max(0.05, radius - ext - 0.1)
    return Camera.looking_at(pos, width, height, fov, near=near, far=radius + ext + 0.1)


def make_dataset(scene: SceneSpec, n_train_views: int, n_test_views: int, seed: int,
                 width: int = 32, height: int = 32, fov: float = math.radians(45.0),
                 radius: float = ORBIT_RADIUS, elevation_range=(math.radians(10.0), math.radians(60.0))) -> Dataset:
    """Posed train/test views on an orbit sphere, all aimed at the scene centroid (origin)."""
    if n_train_views < 1 or n_test_views < 1:
        raise ValueError("view counts must be >= 1")
    rng = np.random.default_rng(seed)
    poses: list[tuple[float, float]] = []
    while len(poses) < n_train_views + n_test_views:
        az = float(rng.uniform(0.0, 2.0 * math.pi))
        el = float(rng.uniform(*elevation_range))
        if all(abs(az - a) + abs(el - e) > 1e-6 for a, e in poses):
            poses.append((az, el))
    views = []
    for az, el in poses:
        cam = orbit_camera(az, el, scene, width, height, fov, radius)
        img, sem, depth = gt_render(scene, cam, "semantic")
        _, inst, _ = gt_render(scene, cam, "instance")
        views.append(View(cam, img, sem, inst, depth))
    return Dataset(scene, views[:n_train_views], views[n_train_views:])
