"""Dataset, image, and checkpoint I/O.

A scene directory holds ``scene.json`` plus one lossless 8-bit PNG per view:

    {"views": [{"id": 0, "file": "images/0000.png",
                "fx": 70.0, "fy": 70.0, "cx": 32.0, "cy": 32.0,
                "w": 64, "h": 64, "c2w": [16 floats, row-major]}],
     "aabb": {"min": [...], "max": [...]}}        # optional scene bounds

Poses are camera-to-world with OpenCV camera axes (+x right, +y down,
+z forward). Images are processed as float arrays in [0, 1]; files are
written as 8-bit RGB PNG so repeated dataset rewrites never accumulate
codec drift.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError
from .geometry import BoundingBox3D, rotation_from_axis_angle


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ConfigError("image dims must be at least 16 px")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """4x4 rigid camera-to-world transform."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "matrix", m)
        if not np.allclose(m[3], (0, 0, 0, 1), atol=1e-9):
            raise ConfigError("pose bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ConfigError("pose rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ConfigError("pose rotation block has det != +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass
class CameraView:
    """One posed image; the atom of every dataset."""

    id: int
    image: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"view {self.id}: image must be HxWx3")
        if img.shape[0] != self.intrinsics.height or img.shape[1] != self.intrinsics.width:
            raise DatasetError(
                f"view {self.id}: image dims {img.shape[:2]} do not match "
                f"intrinsics {(self.intrinsics.height, self.intrinsics.width)}")
        if img.min() < -1e-9 or img.max() > 1 + 1e-9:
            raise DatasetError(f"view {self.id}: channel values must lie in [0, 1]")
        self.image = img


@dataclass
class SceneDataset:
    views: list[CameraView]
    role: str = "background"
    aabb: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.role not in ("background", "object"):
            raise DatasetError(f"unknown dataset role {self.role!r}")
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise DatasetError("view ids must be unique")

    def __len__(self) -> int:
        return len(self.views)

    def view(self, view_id: int) -> CameraView:
        for v in self.views:
            if v.id == view_id:
                return v
        raise DatasetError(f"no view with id {view_id}")

    def ids(self) -> list[int]:
        return [v.id for v in self.views]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a float [0,1] RGB array as an 8-bit lossless PNG."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ConfigError(f"unsupported image format {path.suffix!r}; use .png")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError("save_image expects an HxWx3 array")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file into a float [0,1] RGB array."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"image file not found: {path}")
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_mask(mask, path: str | Path) -> None:
    """Debug export of an edit mask as a 1-bit raster (white = preserved)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.grid * 255).astype(np.uint8), mode="L").convert("1").save(path)


# ---------------------------------------------------------------------------
# scene manifests
# ---------------------------------------------------------------------------

def load_dataset(path: str | Path, role: str = "background") -> SceneDataset:
    """Load a scene directory; pure function of the directory contents."""
    root = Path(path)
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)

    entries = manifest.get("views", [])
    if len(entries) < 2:
        raise DatasetError("dataset requires >= 2 views")

    views = []
    for entry in entries:
        vid = entry.get("id")
        try:
            intr = CameraIntrinsics(fx=float(entry["fx"]), fy=float(entry["fy"]),
                                    cx=float(entry["cx"]), cy=float(entry["cy"]),
                                    width=int(entry["w"]), height=int(entry["h"]))
            c2w = np.asarray(entry["c2w"], dtype=np.float64).reshape(4, 4)
            pose = CameraPose(c2w)
        except (ConfigError, KeyError, ValueError) as exc:
            raise DatasetError(f"view {vid}: {exc}") from exc
        image = load_image(root / entry["file"])
        try:
            views.append(CameraView(id=int(vid), image=image, pose=pose, intrinsics=intr))
        except DatasetError as exc:
            raise DatasetError(str(exc)) from exc

    aabb = None
    if "aabb" in manifest:
        aabb = (np.asarray(manifest["aabb"]["min"], dtype=np.float64),
                np.asarray(manifest["aabb"]["max"], dtype=np.float64))
    return SceneDataset(views=views, role=role, aabb=aabb)


def save_dataset(dataset: SceneDataset, path: str | Path) -> None:
    """Write a scene directory (manifest + per-view PNGs)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.views:
        rel = f"images/{v.id:04d}.png"
        save_image(v.image, root / rel)
        i = v.intrinsics
        entries.append({
            "id": v.id, "file": rel,
            "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
            "w": i.width, "h": i.height,
            "c2w": [float(x) for x in v.pose.matrix.reshape(-1)],
        })
    manifest: dict = {"views": entries}
    if dataset.aabb is not None:
        manifest["aabb"] = {"min": [float(x) for x in dataset.aabb[0]],
                            "max": [float(x) for x in dataset.aabb[1]]}
    with open(root / "scene.json", "w") as f:
        json.dump(manifest, f, indent=1)


# ---------------------------------------------------------------------------
# bounding-box configs
# ---------------------------------------------------------------------------

def load_box_config(path: str | Path) -> BoundingBox3D:
    """JSON box config: {center: [3], half_extents: [3], rotation_axis_angle: [3]}."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing box config: {path}")
    with open(path) as f:
        cfg = json.load(f)
    try:
        rotation = rotation_from_axis_angle(cfg.get("rotation_axis_angle", (0, 0, 0)))
        return BoundingBox3D(center=cfg["center"], half_extents=cfg["half_extents"],
                             rotation=rotation)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad box config {path}: {exc}") from exc


def save_box_config(center, half_extents, rotation_axis_angle, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"center": [float(x) for x in center],
                   "half_extents": [float(x) for x in half_extents],
                   "rotation_axis_angle": [float(x) for x in rotation_axis_angle]},
                  f, indent=1)


# ---------------------------------------------------------------------------
# session checkpoints
# ---------------------------------------------------------------------------

def save_session_checkpoint(path: str | Path, field, session) -> None:
    """Persist a resumable edit run: field blob, session state, edited views.

    Resuming reproduces the uninterrupted run's scheduling decisions exactly
    (same view admission/replacement order); parameter bits may differ by
    float32 checkpoint rounding.
    """
    from .field import save_field  # local import: avoid module cycle

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_field(field, root / "field.fsf")
    with open(root / "session.json", "w") as f:
        json.dump(session.state_dict(), f, indent=1)
    edited_dir = root / "edited"
    edited_dir.mkdir(exist_ok=True)
    for vid, img in session.edited.items():
        save_image(img, edited_dir / f"{vid:04d}.png")


def load_session_checkpoint(path: str | Path, background: SceneDataset):
    """Inverse of :func:`save_session_checkpoint`; needs the source dataset."""
    from .field import load_field
    from .scheduler import EditSession

    root = Path(path)
    if not (root / "session.json").exists():
        raise ConfigError(f"missing session checkpoint at {root}")
    field = load_field(root / "field.fsf")
    with open(root / "session.json") as f:
        state = json.load(f)
    edited = {}
    for vid in state["used_order"]:
        edited[vid] = load_image(root / "edited" / f"{vid:04d}.png")
    session = EditSession.from_state(state, background, edited)
    return field, session
