"""Image synthesis backends behind one request contract.

Every backend obeys the same rules:

* mask contract — preserved pixels (mask = 1) are returned bit-identically
  from the request image;
* strength contract — at strength 1 the editable region is regenerated with
  no dependence on the request's editable pixels, at strength 0 it is the
  identity, and in between (for local oracles) the output is the convex blend
  ``(1 - strength) * hint + strength * (ideal + noise)``;
* determinism — a fixed request (including seed) yields a fixed output for
  all local backends.

The procedural oracles stand in for a fine-tuned text-to-image inpainting
model at desk scale: the noisy variant adds per-call, strength-scaled noise
(full-strength calls are the least faithful, low-strength calls cling to
their hints), and the removal oracle models an un-customized generator by
pulling unanchored output toward a generic prior color, which is what makes
the pseudo-ground-truth anchoring stage matter.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import requests
from PIL import Image

from ._rng import derive_seed
from .errors import ConfigError, SynthesisError
from .geometry import EditMask, view_rays
from .scene_io import CameraIntrinsics, CameraPose, SceneDataset
from .synthetic import GroundTruthRenderer


@dataclass(frozen=True)
class Prompt:
    """Free text plus the subset of tokens treated as learned identifiers."""

    text: str
    identifiers: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.text.strip():
            raise ConfigError("prompt text must be non-empty")
        object.__setattr__(self, "identifiers", frozenset(self.identifiers))

    def tokens(self) -> list[str]:
        return [t for t in self.text.lower().split() if t]


@dataclass
class SynthesisRequest:
    image: np.ndarray
    mask: EditMask
    prompt: Prompt
    strength: float
    seed: int = 0
    view_id: int | None = None  # used by local oracles to find the camera

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError("strength must lie in [0, 1]")
        if self.image.shape[:2] != self.mask.shape:
            raise ConfigError(
                f"request image {self.image.shape[:2]} does not match mask {self.mask.shape}")


@dataclass
class FineTuneRequest:
    """Customization contract; local backends accept it, the remote forwards it."""

    background_views: SceneDataset | None
    object_views: SceneDataset | None = None
    n_bg: int = 500
    n_obj: int = 5000
    prompts: tuple[Prompt, ...] = ()
    pseudo_ground_truth: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        if self.background_views is not None and len(self.background_views) and self.n_bg <= 0:
            raise ConfigError("n_bg must be positive when background views are given")
        if self.object_views is not None and len(self.object_views) and self.n_obj <= 0:
            raise ConfigError("n_obj must be positive when object views are given")


@dataclass(frozen=True)
class FineTuneStatus:
    state: str  # ready | pending | failed
    job_id: str | None = None


def request_finetune(backend, req: FineTuneRequest) -> FineTuneStatus:
    return backend.request_finetune(req)


def synthesize(backend, req: SynthesisRequest) -> np.ndarray:
    return backend.synthesize(req)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def border_inpaint(image: np.ndarray, mask: EditMask) -> np.ndarray:
    """Fill the editable region by per-row linear interpolation of border colors.

    Rows with no preserved pixel fall back to the mean color of all
    mask-border pixels (mid gray if the whole image is editable).
    """
    image = np.asarray(image, dtype=np.float64)
    out = image.copy()
    editable = mask.editable
    if not editable.any():
        return out
    preserved = ~editable
    if preserved.any():
        border = preserved & (
            np.roll(editable, 1, axis=0) | np.roll(editable, -1, axis=0)
            | np.roll(editable, 1, axis=1) | np.roll(editable, -1, axis=1))
        fallback = image[border].mean(axis=0) if border.any() else image[preserved].mean(axis=0)
    else:
        fallback = np.full(3, 0.5)

    h, w = editable.shape
    cols = np.arange(w)
    for y in range(h):
        row_edit = editable[y]
        if not row_edit.any():
            continue
        row_keep = ~row_edit
        if not row_keep.any():
            out[y, row_edit] = fallback
            continue
        # nearest preserved column on each side of every editable pixel
        keep_idx = cols[row_keep]
        right_pos = np.searchsorted(keep_idx, cols[row_edit], side="left")
        left = np.where(right_pos > 0, keep_idx[np.maximum(right_pos - 1, 0)], -1)
        right = np.where(right_pos < len(keep_idx),
                         keep_idx[np.minimum(right_pos, len(keep_idx) - 1)], w)
        x = cols[row_edit]
        lval = np.where((left >= 0)[:, None], image[y, np.maximum(left, 0)], np.nan)
        rval = np.where((right < w)[:, None], image[y, np.minimum(right, w - 1)], np.nan)
        both = (left >= 0) & (right < w)
        frac = np.zeros(len(x))
        span = np.maximum(right - left, 1)
        frac[both] = (x[both] - left[both]) / span[both]
        val = np.where(both[:, None], (1 - frac)[:, None] * lval + frac[:, None] * rval,
                       np.where((left >= 0)[:, None], lval, rval))
        out[y, row_edit] = val
    return np.clip(out, 0.0, 1.0)


def _blend_editable(req: SynthesisRequest, ideal: np.ndarray,
                    noise_std: float) -> np.ndarray:
    """Apply the strength contract; preserved pixels come straight from the request."""
    a = req.strength
    editable = req.mask.editable
    gen = ideal
    if noise_std > 0:
        rng = np.random.default_rng(derive_seed(req.seed, 0xD1F0))
        gen = ideal + rng.normal(0.0, noise_std, size=ideal.shape)
    blended = (1.0 - a) * req.image + a * gen
    out = req.image.copy()
    out[editable] = np.clip(blended[editable], 0.0, 1.0)
    return out


class CameraTable:
    """view id -> (pose, intrinsics), built from a dataset."""

    def __init__(self, dataset: SceneDataset):
        self._table = {v.id: (v.pose, v.intrinsics) for v in dataset.views}

    def get(self, view_id) -> tuple[CameraPose, CameraIntrinsics]:
        if view_id not in self._table:
            raise SynthesisError(f"unknown view id {view_id!r}")
        return self._table[view_id]


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class IdentityBackend:
    """Returns the request image unchanged; useful as a no-op control."""

    def synthesize(self, req: SynthesisRequest) -> np.ndarray:
        return req.image.copy()

    def request_finetune(self, req: FineTuneRequest) -> FineTuneStatus:
        return FineTuneStatus(state="ready")


class ObjectOracle:
    """Insertion oracle: analytically renders known object primitives.

    The ideal editable content is a z-buffer render of the configured
    primitives over a border-interpolation inpaint of the editable region.
    ``jitter`` scales the per-call noise std as jitter * strength.
    """

    def __init__(self, cameras: CameraTable, primitives, jitter: float = 0.0):
        if jitter < 0:
            raise ConfigError("jitter must be >= 0")
        self.cameras = cameras
        self.renderer = GroundTruthRenderer(room_half=(1e6, 1e6, 1e6),
                                            wall_colors=np.zeros((6, 3)),
                                            primitives=primitives)
        self.jitter = jitter

    def ideal_editable(self, req: SynthesisRequest) -> np.ndarray:
        pose, intr = self.cameras.get(req.view_id)
        origins, dirs = view_rays(pose, intr)
        t_hit = self.renderer.hit_distance(origins, dirs)
        hit = np.isfinite(t_hit).reshape(intr.height, intr.width)
        colors = self.renderer.trace(origins, dirs).reshape(intr.height, intr.width, 3)
        fill = border_inpaint(req.image, req.mask)
        return np.where(hit[..., None], colors, fill)

    def synthesize(self, req: SynthesisRequest) -> np.ndarray:
        ideal = self.ideal_editable(req)
        return _blend_editable(req, ideal, self.jitter * req.strength)

    def request_finetune(self, req: FineTuneRequest) -> FineTuneStatus:
        return FineTuneStatus(state="ready")  # oracle is "pre-trained"


class InpaintOracle:
    """Removal oracle: regenerates the editable region as empty background.

    Before any fine-tune request the oracle behaves like a generic,
    un-customized generator: its output is pulled toward ``prior_color`` by
    ``prior_pull``, and at low strength it only refines what the request
    already shows. A fine-tune request carrying pseudo ground truth anchors
    subsequent calls to those per-view images.
    """

    def __init__(self, cameras: CameraTable, empty_renderer: GroundTruthRenderer,
                 jitter: float = 0.0, prior_pull: float = 0.0,
                 prior_color=(0.12, 0.11, 0.14)):
        if not 0.0 <= prior_pull < 1.0:
            raise ConfigError("prior_pull must lie in [0, 1)")
        self.cameras = cameras
        self.renderer = empty_renderer
        self.jitter = jitter
        self.prior_pull = prior_pull
        self.prior_color = np.asarray(prior_color, dtype=np.float64)
        self.anchors: dict[int, np.ndarray] | None = None

    def ideal_editable(self, req: SynthesisRequest) -> np.ndarray:
        if self.anchors is not None:
            if req.view_id not in self.anchors:
                raise SynthesisError(f"no pseudo ground truth for view {req.view_id!r}")
            return self.anchors[req.view_id]
        if req.strength >= 1.0:
            pose, intr = self.cameras.get(req.view_id)
            base = self.renderer.render_view(pose, intr)
        else:
            base = req.image  # un-anchored low-strength calls refine the hint
        return (1.0 - self.prior_pull) * base + self.prior_pull * self.prior_color

    def synthesize(self, req: SynthesisRequest) -> np.ndarray:
        ideal = self.ideal_editable(req)
        return _blend_editable(req, ideal, self.jitter * req.strength)

    def request_finetune(self, req: FineTuneRequest) -> FineTuneStatus:
        if req.pseudo_ground_truth:
            self.anchors = {int(k): np.asarray(v, dtype=np.float64)
                            for k, v in req.pseudo_ground_truth.items()}
        return FineTuneStatus(state="ready")


# ---------------------------------------------------------------------------
# remote backend (HTTP, JSON bodies, base64 PNG payloads)
# ---------------------------------------------------------------------------

def encode_image_b64(image: np.ndarray) -> str:
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(payload: str) -> np.ndarray:
    buf = io.BytesIO(base64.b64decode(payload))
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def encode_mask_b64(mask: EditMask) -> str:
    buf = io.BytesIO()
    Image.fromarray((mask.grid * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_b64(payload: str) -> EditMask:
    buf = io.BytesIO(base64.b64decode(payload))
    with Image.open(buf) as im:
        grid = np.asarray(im.convert("L"))
    return EditMask((grid >= 128).astype(np.uint8))


def _view_record(view) -> dict:
    i = view.intrinsics
    return {"id": view.id, "image": encode_image_b64(view.image),
            "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
            "w": i.width, "h": i.height,
            "c2w": [float(x) for x in view.pose.matrix.reshape(-1)]}


class RemoteBackend:
    """Client for an external diffusion server.

    POST /v1/synthesize {image, mask, prompt, strength, seed} -> {image}
    POST /v1/finetune   {background_views[], object_views[], prompts,
                         n_bg, n_obj, pseudo_ground_truth[]} -> {job_id}
    GET  /v1/finetune/{job_id} -> {status}

    Mask semantics on the wire: white (1) = preserve. HTTP 503 and timeouts
    are retried up to ``retries`` times with exponential backoff, then
    surfaced as a retryable :class:`SynthesisError`.
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2,
                 backoff: float = 0.25):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, path: str, body: dict) -> dict:
        delay = self.backoff
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(self.url + path, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    return resp.json()
                if resp.status_code != 503:
                    raise SynthesisError(
                        f"remote rejected {path}: HTTP {resp.status_code}")
                retry_after = float(resp.headers.get("Retry-After", delay))
                last = SynthesisError(f"remote busy on {path} (HTTP 503)",
                                      retryable=True, retry_after=retry_after)
            if attempt < self.retries:
                time.sleep(delay)
                delay *= 2
        if isinstance(last, SynthesisError):
            raise last
        raise SynthesisError(f"remote unreachable on {path}: {last}",
                             retryable=True, retry_after=delay)

    def synthesize(self, req: SynthesisRequest) -> np.ndarray:
        body = {"image": encode_image_b64(req.image),
                "mask": encode_mask_b64(req.mask),
                "prompt": {"text": req.prompt.text,
                           "identifiers": sorted(req.prompt.identifiers)},
                "strength": req.strength,
                "seed": req.seed}
        out = decode_image_b64(self._post("/v1/synthesize", body)["image"])
        if out.shape != req.image.shape:
            raise SynthesisError(
                f"remote returned {out.shape}, expected {req.image.shape}")
        # enforce the mask contract locally so a sloppy server cannot leak edits
        result = req.image.copy()
        result[req.mask.editable] = out[req.mask.editable]
        return result

    def request_finetune(self, req: FineTuneRequest) -> FineTuneStatus:
        body = {
            "background_views": [_view_record(v) for v in
                                 (req.background_views.views if req.background_views else [])],
            "object_views": [_view_record(v) for v in
                             (req.object_views.views if req.object_views else [])],
            "prompts": [{"text": p.text, "identifiers": sorted(p.identifiers)}
                        for p in req.prompts],
            "n_bg": req.n_bg,
            "n_obj": req.n_obj,
            "pseudo_ground_truth": [
                {"id": int(k), "image": encode_image_b64(v)}
                for k, v in (req.pseudo_ground_truth or {}).items()],
        }
        job_id = str(self._post("/v1/finetune", body)["job_id"])
        return FineTuneStatus(state="pending", job_id=job_id)

    def finetune_status(self, job_id: str) -> FineTuneStatus:
        delay = self.backoff
        try:
            resp = requests.get(f"{self.url}/v1/finetune/{job_id}", timeout=self.timeout)
        except requests.RequestException as exc:
            raise SynthesisError(f"remote unreachable: {exc}", retryable=True,
                                 retry_after=delay)
        if resp.status_code != 200:
            raise SynthesisError(f"finetune status failed: HTTP {resp.status_code}")
        return FineTuneStatus(state=resp.json()["status"], job_id=job_id)
