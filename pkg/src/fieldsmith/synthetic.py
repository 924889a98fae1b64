"""Procedural multi-view test scenes with an analytic reference renderer.

Scenes are the interior of a colored box room, optionally containing solid
primitives (spheres, boxes). Cameras sit on a smooth inward-facing orbit.
The returned renderer ray-traces the same geometry exactly and doubles as
ground truth for fitting, insertion, and removal experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import view_rays
from .scene_io import CameraIntrinsics, CameraPose, CameraView, SceneDataset, save_dataset

_LIGHT = np.array([0.45, 0.78, 0.42])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

# wall order: -x, +x, -y (floor), +y (ceiling), -z, +z
_DEFAULT_WALLS = np.array([
    [0.82, 0.35, 0.30],
    [0.30, 0.55, 0.82],
    [0.55, 0.47, 0.40],
    [0.85, 0.84, 0.80],
    [0.38, 0.70, 0.42],
    [0.78, 0.68, 0.30],
])


@dataclass(frozen=True)
class SpherePrim:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]
    color2: tuple[float, float, float] | None = None  # two-tone split along split_axis
    split_axis: int = 0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center)
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        valid = disc >= 0
        sq = np.sqrt(np.where(valid, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(valid & (t > 1e-9), t, np.inf)

    def shade(self, points: np.ndarray) -> np.ndarray:
        n = (points - np.asarray(self.center)) / self.radius
        base = np.asarray(self.color, dtype=np.float64)
        if self.color2 is not None:
            side = points[:, self.split_axis] - self.center[self.split_axis] >= 0
            base = np.where(side[:, None], base, np.asarray(self.color2))
        else:
            base = np.broadcast_to(base, points.shape)
        lambert = 0.55 + 0.45 * np.clip(n @ _LIGHT, 0, 1)
        return np.clip(base * lambert[:, None], 0, 1)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v


@dataclass(frozen=True)
class BoxPrim:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    color: tuple[float, float, float]

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.center) - np.asarray(self.half_extents)
        hi = np.asarray(self.center) + np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        tmin = np.where(np.isnan(np.minimum(ta, tb)), -np.inf, np.minimum(ta, tb))
        tmax = np.where(np.isnan(np.maximum(ta, tb)), np.inf, np.maximum(ta, tb))
        t0 = tmin.max(axis=-1)
        t1 = tmax.min(axis=-1)
        hit = (t1 >= t0) & (t1 > 1e-9)
        t = np.where(t0 > 1e-9, t0, np.inf)  # origin inside -> treat as miss
        return np.where(hit, t, np.inf)

    def shade(self, points: np.ndarray) -> np.ndarray:
        local = (points - np.asarray(self.center)) / np.asarray(self.half_extents)
        axis = np.argmax(np.abs(local), axis=-1)
        normals = np.zeros_like(points)
        normals[np.arange(len(points)), axis] = np.sign(
            local[np.arange(len(points)), axis])
        lambert = 0.55 + 0.45 * np.clip(normals @ _LIGHT, 0, 1)
        return np.clip(np.asarray(self.color) * lambert[:, None], 0, 1)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        he = np.asarray(self.half_extents, dtype=np.float64)
        areas = np.array([he[1] * he[2], he[1] * he[2], he[0] * he[2],
                          he[0] * he[2], he[0] * he[1], he[0] * he[1]])
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * he
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * he[axis]
        return np.asarray(self.center) + pts


_PRIM_TYPES = {"sphere": SpherePrim, "box": BoxPrim}


def _prim_to_dict(p) -> dict:
    d = {"kind": {SpherePrim: "sphere", BoxPrim: "box"}[type(p)]}
    for k, v in p.__dict__.items():
        d[k] = list(v) if isinstance(v, tuple) else v
    return d


def _prim_from_dict(d: dict):
    d = dict(d)
    cls = _PRIM_TYPES[d.pop("kind")]
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    """Full procedural recipe; serializable so oracles can be rebuilt later."""

    room_half: tuple[float, float, float] = (1.35, 0.95, 1.35)
    wall_colors: tuple = tuple(map(tuple, _DEFAULT_WALLS))
    primitives: tuple = ()
    n_views: int = 40
    orbit_radius: float = 1.0
    orbit_height: float = 0.18
    orbit_wobble: float = 0.08
    target: tuple[float, float, float] = (0.0, -0.15, 0.0)
    image_size: int = 64
    focal: float = 70.0
    seed: int = 0

    def to_json(self) -> dict:
        d = {k: (list(v) if isinstance(v, tuple) and k != "primitives" else v)
             for k, v in self.__dict__.items()}
        d["wall_colors"] = [list(c) for c in self.wall_colors]
        d["primitives"] = [_prim_to_dict(p) for p in self.primitives]
        return d

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        d = dict(d)
        d["room_half"] = tuple(d["room_half"])
        d["wall_colors"] = tuple(tuple(c) for c in d["wall_colors"])
        d["target"] = tuple(d["target"])
        d["primitives"] = tuple(_prim_from_dict(p) for p in d["primitives"])
        return SceneSpec(**d)


class GroundTruthRenderer:
    """Analytic z-buffer renderer for a box room plus solid primitives."""

    def __init__(self, room_half, wall_colors, primitives=()):
        self.room_half = np.asarray(room_half, dtype=np.float64)
        self.wall_colors = np.asarray(wall_colors, dtype=np.float64).reshape(6, 3)
        self.primitives = tuple(primitives)

    @staticmethod
    def from_spec(spec: SceneSpec) -> "GroundTruthRenderer":
        return GroundTruthRenderer(spec.room_half, spec.wall_colors, spec.primitives)

    def without_primitives(self) -> "GroundTruthRenderer":
        return GroundTruthRenderer(self.room_half, self.wall_colors, ())

    @property
    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.room_half, self.room_half

    def _wall_exit(self, origins, dirs):
        """Exit parameter and face index for rays starting inside the room."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_faces = np.stack([(-self.room_half - origins) * inv,
                                (self.room_half - origins) * inv], axis=-1)
        t_faces = np.where(np.isfinite(t_faces), t_faces, np.inf)
        t_exit_axis = t_faces.max(axis=-1)  # per-axis outgoing crossing
        pos = np.where(dirs >= 0, 1, 0)
        exit_t = np.where(t_exit_axis > 1e-9, t_exit_axis, np.inf).min(axis=-1)
        axis = np.argmin(np.where(t_exit_axis > 1e-9, t_exit_axis, np.inf), axis=-1)
        rows = np.arange(len(axis))
        face = 2 * axis + pos[rows, axis]
        return exit_t, face

    def _shade_walls(self, points, face):
        # gentle brightness ramp along one tangent axis keeps walls learnable
        # but non-trivial
        colors = self.wall_colors[face]
        tangent = (face // 2 + 1) % 3
        span = self.room_half[tangent]
        s = (points[np.arange(len(points)), tangent] + span) / (2 * span)
        return np.clip(colors * (0.78 + 0.22 * s)[:, None], 0, 1)

    def trace(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest-hit colors for rays with origins inside the room."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        t_wall, face = self._wall_exit(origins, dirs)
        best_t = t_wall
        best_prim = np.full(len(dirs), -1)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_prim = np.where(closer, i, best_prim)

        pts = origins + best_t[:, None] * dirs
        out = self._shade_walls(pts, face)
        for i, prim in enumerate(self.primitives):
            sel = best_prim == i
            if sel.any():
                out[sel] = prim.shade(pts[sel])
        return out

    def hit_distance(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance to the nearest primitive hit (inf where only walls are hit)."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        best = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.intersect(origins, dirs))
        return best

    def render_view(self, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
        origins, dirs = view_rays(pose, intr)
        colors = self.trace(origins, dirs)
        return colors.reshape(intr.height, intr.width, 3)

    def sample_object_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.primitives:
            raise ConfigError("scene has no primitives to sample")
        per = [n // len(self.primitives)] * len(self.primitives)
        per[0] += n - sum(per)
        return np.concatenate([p.sample_surface(k, rng)
                               for p, k in zip(self.primitives, per)])

    def points_visible_from(self, cam_pos: np.ndarray, points: np.ndarray,
                            tol: float = 1e-4) -> np.ndarray:
        """True where a surface point is unoccluded from the camera position."""
        cam_pos = np.asarray(cam_pos, dtype=np.float64)
        delta = points - cam_pos
        dist = np.linalg.norm(delta, axis=1)
        dirs = delta / dist[:, None]
        origins = np.broadcast_to(cam_pos, points.shape)
        t_hit = self.hit_distance(origins, dirs)
        return t_hit >= dist - tol * (1 + dist)


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Camera-to-world pose looking from eye toward target (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-9:
        raise ConfigError("look_at: eye and target coincide")
    fwd = fwd / norm
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ConfigError("look_at: viewing direction parallel to up vector")
    right = right / rnorm
    down = np.cross(fwd, right)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = down
    mat[:3, 2] = fwd
    mat[:3, 3] = eye
    return CameraPose(mat)


def orbit_poses(spec: SceneSpec) -> list[CameraPose]:
    rng = np.random.default_rng(spec.seed)
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(spec.n_views):
        theta = phase + 2 * np.pi * k / spec.n_views
        eye = np.array([
            spec.orbit_radius * np.cos(theta),
            spec.orbit_height + spec.orbit_wobble * np.sin(2 * theta + phase),
            spec.orbit_radius * np.sin(theta),
        ])
        poses.append(look_at_pose(eye, spec.target))
    return poses


def make_synthetic_scene(spec: SceneSpec) -> tuple[SceneDataset, GroundTruthRenderer]:
    """Render a deterministic orbit dataset plus its analytic reference renderer."""
    if spec.n_views < 2:
        raise ConfigError("synthetic scene requires n_views >= 2")
    renderer = GroundTruthRenderer.from_spec(spec)
    half = renderer.room_half
    size = spec.image_size
    intr = CameraIntrinsics(fx=spec.focal, fy=spec.focal,
                            cx=size / 2.0, cy=size / 2.0, width=size, height=size)
    poses = orbit_poses(spec)
    for k, pose in enumerate(poses):
        eye = pose.translation
        if np.any(np.abs(eye) >= half - 1e-6):
            raise ConfigError(f"camera {k} lies outside the room")
        for prim in spec.primitives:
            if isinstance(prim, SpherePrim):
                inside = np.linalg.norm(eye - np.asarray(prim.center)) <= prim.radius
            else:
                inside = np.all(np.abs(eye - np.asarray(prim.center))
                                <= np.asarray(prim.half_extents))
            if inside:
                raise ConfigError(f"camera {k} lies inside scene geometry")

    views = []
    for k, pose in enumerate(poses):
        image = renderer.render_view(pose, intr)
        views.append(CameraView(id=k, image=image, pose=pose, intrinsics=intr))
    dataset = SceneDataset(views=views, role="background",
                           aabb=(-half.copy(), half.copy()))
    return dataset, renderer


def write_scene_dir(dataset: SceneDataset, spec: SceneSpec, path: str | Path) -> None:
    """Persist dataset plus the procedural recipe (enables oracle reconstruction)."""
    root = Path(path)
    save_dataset(dataset, root)
    with open(root / "scene_spec.json", "w") as f:
        json.dump(spec.to_json(), f, indent=1)


def load_scene_spec(path: str | Path) -> SceneSpec:
    p = Path(path) / "scene_spec.json"
    if not p.exists():
        raise ConfigError(f"scene dir has no procedural recipe ({p}); "
                          "oracle backends need a generated scene")
    with open(p) as f:
        return SceneSpec.from_json(json.load(f))
