"""Oriented 3D boxes, their per-view projection masks, and mask algebra.

Mask polarity convention used everywhere in this package: value 1 marks a
PRESERVED background pixel, value 0 marks an EDITABLE pixel (inside the
projected box). Compositing and every synthesis backend honor this polarity
bit-exactly on the preserved side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Camera convention: camera-to-world rigid transforms, camera axes OpenCV
# style (+x right, +y down, +z forward through the image plane). Pixel
# centers sit at integer + 0.5.

_NEAR_PLANE = 1e-6


def rotation_from_axis_angle(axis_angle) -> np.ndarray:
    """Rodrigues formula; the vector's norm is the rotation angle in radians."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.eye(3)
    k = v / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def _check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ConfigError("rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ConfigError("rotation block has det != +1")


@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented box: world-space center, strictly positive half extents, SO(3) rotation."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        if not np.all(self.half_extents > 0):
            raise ConfigError("box half_extents must be strictly positive")
        _check_rotation(self.rotation)

    def corners(self) -> np.ndarray:
        """The 8 corners in world space, shape (8, 3)."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        local = signs * self.half_extents
        return local @ self.rotation.T + self.center

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean inside-test for (..., 3) world points (boundary counts as inside)."""
        pts = np.asarray(points, dtype=np.float64)
        local = (pts - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + 1e-12, axis=-1)

    def scaled(self, factor: float) -> "BoundingBox3D":
        return BoundingBox3D(self.center, self.half_extents * factor, self.rotation)


@dataclass(frozen=True)
class EditMask:
    """Binary H x W grid; 1 = preserved background, 0 = editable region."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ConfigError("mask grid must be 2-D")
        if not np.isin(g, (0, 1)).all():
            raise ConfigError("mask values must be 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def editable(self) -> np.ndarray:
        return self.grid == 0

    @property
    def preserved(self) -> np.ndarray:
        return self.grid == 1

    def editable_fraction(self) -> float:
        return float(np.mean(self.grid == 0))

    def complement(self) -> "EditMask":
        return EditMask(1 - self.grid)

    @staticmethod
    def all_preserved(height: int, width: int) -> "EditMask":
        return EditMask(np.ones((height, width), dtype=np.uint8))

    @staticmethod
    def all_editable(height: int, width: int) -> "EditMask":
        return EditMask(np.zeros((height, width), dtype=np.uint8))


def pose_translation_distance_sq(a, b) -> float:
    """Squared Euclidean distance between pose translations; rotation is ignored."""
    ta = np.asarray(a.matrix, dtype=np.float64)[:3, 3]
    tb = np.asarray(b.matrix, dtype=np.float64)[:3, 3]
    d = ta - tb
    return float(d @ d)


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices (handles degeneracy)."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _fill_convex(hull: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean raster of pixel centers inside a CCW convex polygon."""
    inside = np.zeros((height, width), dtype=bool)
    if len(hull) < 3:
        return inside
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    ok = np.ones((height, width), dtype=bool)
    n = len(hull)
    for i in range(n):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % n]
        ok &= (px - x0) * (y1 - y0) - (py - y0) * (x1 - x0) >= 0
        if not ok.any():
            break
    return ok


def project_bbox(box: BoundingBox3D, pose, intr) -> EditMask:
    """Projection mask of a 3D box for one camera.

    The editable region is the filled convex hull of the perspective
    projections of the 8 corners, with corners behind the camera clipped
    against the near plane first. A box entirely behind the camera yields
    an all-preserved mask; a camera inside the box yields an all-editable
    mask (every frustum ray starts inside the hull).
    """
    h, w = intr.height, intr.width
    mat = np.asarray(pose.matrix, dtype=np.float64)
    rot, t = mat[:3, :3], mat[:3, 3]

    if box.contains(t):
        return EditMask.all_editable(h, w)

    cam_pts = (box.corners() - t) @ rot  # world -> camera via R^T
    front = cam_pts[:, 2] > _NEAR_PLANE
    if not front.any():
        return EditMask.all_preserved(h, w)

    pts = [cam_pts[front]]
    # clip each box edge that straddles the near plane
    idx = np.arange(8).reshape(2, 2, 2)
    edges = []
    for axis in range(3):
        rolled = np.moveaxis(idx, axis, 0)
        edges.extend(zip(rolled[0].ravel(), rolled[1].ravel()))
    for a, b in edges:
        za, zb = cam_pts[a, 2], cam_pts[b, 2]
        if (za > _NEAR_PLANE) != (zb > _NEAR_PLANE):
            s = (_NEAR_PLANE - za) / (zb - za)
            pts.append((cam_pts[a] + s * (cam_pts[b] - cam_pts[a]))[None, :])
    cam = np.concatenate(pts, axis=0)

    px = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
    py = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    hull = _convex_hull_2d(np.stack([px, py], axis=1))
    editable = _fill_convex(hull, h, w)
    return EditMask(np.where(editable, 0, 1).astype(np.uint8))


def composite(background: np.ndarray, rendered: np.ndarray, mask: EditMask) -> np.ndarray:
    """Background where the mask preserves, rendered content where it is editable.

    Preserved pixels are returned bit-identically from ``background``.
    """
    background = np.asarray(background, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if background.shape != rendered.shape:
        raise ConfigError(f"composite shape mismatch: {background.shape} vs {rendered.shape}")
    if background.shape[:2] != mask.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match image {background.shape[:2]}")
    keep = mask.grid.astype(bool)[..., None]
    return np.where(keep, background, rendered)


def pixel_directions(intr) -> np.ndarray:
    """Unit ray directions through all pixel centers, camera frame, shape (H*W, 3)."""
    xs = (np.arange(intr.width, dtype=np.float64) + 0.5 - intr.cx) / intr.fx
    ys = (np.arange(intr.height, dtype=np.float64) + 0.5 - intr.cy) / intr.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def view_rays(pose, intr) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origins, directions) for all pixel centers of a view."""
    mat = np.asarray(pose.matrix, dtype=np.float64)
    dirs_cam = pixel_directions(intr)
    dirs = dirs_cam @ mat[:3, :3].T
    origins = np.broadcast_to(mat[:3, 3], dirs.shape).copy()
    return origins, dirs


def ray_aabb_span(origins: np.ndarray, dirs: np.ndarray,
                  lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit parameters of rays against an axis-aligned box.

    Returns (t0, t1); rays that miss get t0 >= t1. Entry is clamped to 0 so
    cameras inside the box integrate from their own position.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t0 = np.maximum(tmin.max(axis=-1), 0.0)
    t1 = tmax.min(axis=-1)
    return t0, t1
