"""Edit-quality metrics over a pluggable image/text embedder.

The real CLIP network is deliberately out of scope; a deterministic toy
embedder ships for tests and experiments. Its image embedding concatenates
the mean RGB with a 12-bin hue histogram (dimension 15, unit norm); its text
embedding is a unit-norm vector derived by hashing the prompt's token bag,
with identifier tokens marked so customized prompts embed differently from
their plain counterparts.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import EditMask
from .scene_io import SceneDataset
from .synthesizer import Prompt
from .synthetic import GroundTruthRenderer

logger = logging.getLogger(__name__)


def cos_plus(a, b) -> float:
    """max(0, cosine similarity); raises on zero vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ConfigError("cos_plus is undefined for zero vectors")
    return float(max(0.0, (a @ b) / (na * nb)))


def clip_score(embedder, image: np.ndarray, prompt: Prompt) -> float:
    """Clamped cosine between the image and prompt embeddings."""
    return cos_plus(embedder.embed_image(image), embedder.embed_text(prompt))


def clip_dc(embedder, original_pair, edited_pair, prompt: Prompt,
            edited_prompt: Prompt) -> float:
    """Directional consistency for one adjacent view pair.

    Product of two clamped cosines: (text difference vs first image
    difference) and (first vs second image difference). Zero-difference
    vectors make the score 0 by convention (logged, not raised): a no-op
    edit has no direction to agree with.
    """
    t = embedder.embed_text(edited_prompt) - embedder.embed_text(prompt)
    d0 = embedder.embed_image(edited_pair[0]) - embedder.embed_image(original_pair[0])
    d1 = embedder.embed_image(edited_pair[1]) - embedder.embed_image(original_pair[1])
    for name, v in (("text", t), ("first image", d0), ("second image", d1)):
        if not np.any(v):
            logger.warning("clip_dc: zero %s difference vector; scoring 0", name)
            return 0.0
    return cos_plus(t, d0) * cos_plus(d0, d1)


@dataclass
class MetricsReport:
    clip_scores: list[float]
    clip_dcs: list[float]
    mean_clip_score: float
    mean_clip_dc: float
    diagnostics: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        return {"clip_scores": self.clip_scores, "clip_dcs": self.clip_dcs,
                "mean_clip_score": self.mean_clip_score,
                "mean_clip_dc": self.mean_clip_dc,
                "diagnostics": self.diagnostics}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)


def evaluate_scene(embedder, originals, editeds, prompt: Prompt,
                   edited_prompt: Prompt, diagnostics: dict | None = None) -> MetricsReport:
    """Per-view scores plus directional consistency over consecutive pairs.

    Adjacency follows the given list order, which is expected to be the
    dataset's capture-trajectory order.
    """
    if len(originals) != len(editeds):
        raise ConfigError(f"view count mismatch: {len(originals)} vs {len(editeds)}")
    if len(originals) < 2:
        raise ConfigError("evaluate_scene requires at least 2 views")
    scores = [clip_score(embedder, img, edited_prompt) for img in editeds]
    dcs = [clip_dc(embedder, (originals[i], originals[i + 1]),
                   (editeds[i], editeds[i + 1]), prompt, edited_prompt)
           for i in range(len(editeds) - 1)]
    return MetricsReport(clip_scores=scores, clip_dcs=dcs,
                         mean_clip_score=float(np.mean(scores)),
                         mean_clip_dc=float(np.mean(dcs)),
                         diagnostics=diagnostics or {})


# ---------------------------------------------------------------------------
# toy embedder
# ---------------------------------------------------------------------------

class ToyEmbedder:
    """Deterministic 15-dimensional stand-in for a vision-language embedder."""

    dim = 15

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
        mean_rgb = img.mean(axis=0)
        hist = self._hue_histogram(img)
        v = np.concatenate([mean_rgb, hist])
        n = np.linalg.norm(v)
        if n == 0.0:  # black image: hue bin 0 still carries mass
            v = np.zeros(self.dim)
            v[3] = 1.0
            return v
        return v / n

    @staticmethod
    def _hue_histogram(pixels: np.ndarray, bins: int = 12) -> np.ndarray:
        r, g, b = pixels[:, 0], pixels[:, 1], pixels[:, 2]
        maxc = pixels.max(axis=1)
        minc = pixels.min(axis=1)
        delta = maxc - minc
        hue = np.zeros(len(pixels))
        nz = delta > 1e-12
        rmax = nz & (maxc == r)
        gmax = nz & (maxc == g) & ~rmax
        bmax = nz & ~rmax & ~gmax
        with np.errstate(invalid="ignore", divide="ignore"):
            hue[rmax] = ((g[rmax] - b[rmax]) / delta[rmax]) % 6.0
            hue[gmax] = (b[gmax] - r[gmax]) / delta[gmax] + 2.0
            hue[bmax] = (r[bmax] - g[bmax]) / delta[bmax] + 4.0
        # desaturated pixels keep hue 0 by convention
        idx = np.clip((hue / 6.0 * bins).astype(int), 0, bins - 1)
        return np.bincount(idx, minlength=bins) / len(pixels)

    def embed_text(self, prompt: Prompt) -> np.ndarray:
        tokens = sorted(("*" + t if t in prompt.identifiers else t)
                        for t in prompt.tokens())
        digest = hashlib.shake_256("\x1f".join(tokens).encode()).digest(8 * self.dim)
        raw = np.frombuffer(digest, dtype="<u8").astype(np.float64)
        v = raw / 2.0 ** 63 - 1.0
        return v / np.linalg.norm(v)


def toy_embedder() -> ToyEmbedder:
    return ToyEmbedder()


# ---------------------------------------------------------------------------
# oracle diagnostics (analytic ground truth available)
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio for [0,1] images; optional boolean region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if region is not None:
        a = a[region]
        b = b[region]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def editable_region_psnr(renders: dict[int, np.ndarray],
                         references: dict[int, np.ndarray],
                         masks: dict[int, EditMask]) -> dict[int, float]:
    """Per-view PSNR restricted to the editable (inside-box) region."""
    out = {}
    for vid, render in renders.items():
        out[vid] = psnr(render, references[vid], region=masks[vid].editable)
    return out


def surface_point_consistency(renders: dict[int, np.ndarray], dataset: SceneDataset,
                              renderer: GroundTruthRenderer, n_points: int = 400,
                              seed: int = 0, min_views: int = 3) -> float:
    """Cross-view appearance spread of the object surface in rendered images.

    Samples points on the known object surface, projects each into every view
    where it is unoccluded, bilinearly samples the rendered color there, and
    averages the per-point standard deviation across views. Lower is more
    view-consistent.
    """
    rng = np.random.default_rng(seed)
    points = renderer.sample_object_surface(n_points, rng)
    samples: list[list[np.ndarray]] = [[] for _ in range(len(points))]
    for view in dataset.views:
        if view.id not in renders:
            continue
        img = renders[view.id]
        cam_pos = view.pose.translation
        visible = renderer.points_visible_from(cam_pos, points)
        cam = view.pose.world_to_camera(points)
        in_front = cam[:, 2] > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            px = view.intrinsics.fx * cam[:, 0] / cam[:, 2] + view.intrinsics.cx
            py = view.intrinsics.fy * cam[:, 1] / cam[:, 2] + view.intrinsics.cy
        h, w = img.shape[:2]
        ok = visible & in_front & (px >= 0.5) & (px <= w - 0.5) & (py >= 0.5) & (py <= h - 0.5)
        for i in np.nonzero(ok)[0]:
            samples[i].append(_bilinear(img, px[i], py[i]))
    spreads = []
    for obs in samples:
        if len(obs) >= min_views:
            arr = np.stack(obs)
            spreads.append(float(np.mean(arr.std(axis=0))))
    if not spreads:
        raise ConfigError("no surface point was observed from enough views")
    return float(np.mean(spreads))


def _bilinear(img: np.ndarray, px: float, py: float) -> np.ndarray:
    x = px - 0.5
    y = py - 0.5
    x0 = int(np.clip(np.floor(x), 0, img.shape[1] - 2))
    y0 = int(np.clip(np.floor(y), 0, img.shape[0] - 2))
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x0 + 1])
            + fy * ((1 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1]))
