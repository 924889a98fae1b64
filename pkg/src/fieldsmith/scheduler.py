"""Pose-conditioned dataset updates driving field training.

The edit loop admits source views into an evolving edited dataset and trains
the field against it:

* the first view is drawn uniformly at random and synthesized at full
  strength (the mask region is generated from scratch);
* afterwards, every ``n_new`` training steps a burst of up to ``n_near``
  views is admitted, each chosen as the not-yet-admitted view whose camera
  translation is closest to any already-admitted view (ties break toward the
  lower view id);
* admitted views are synthesized at low strength from a composite that keeps
  the real photo outside the box and the field's current rendering inside
  it, so the generator inherits appearance hints from nearby views;
* every ``n_old`` training steps one admitted view is re-synthesized the
  same way, cycling round-robin in admission order;
* once every source view has been admitted, a consolidation phase of
  training-plus-replacement runs before the loop reports Done.

At a step where both cadences trigger, the replacement is emitted before the
admission burst; a replacement due on the final consolidation step runs
before Done. Everything is deterministic given the session seed, and the
whole history is reified as an event log (newline-delimited JSON records
``{step, kind, view_id?, loss?}``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from ._rng import derive_seed
from .errors import ConfigError, TrainingDiverged
from .geometry import BoundingBox3D, EditMask, composite, project_bbox
from .field import Adam, RadianceField, RayPool, TrainConfig, render_view, train_step_pool
from .scene_io import SceneDataset
from .synthesizer import (FineTuneRequest, Prompt, SynthesisRequest,
                          request_finetune)


@dataclass
class ScheduleParams:
    n_near: int = 3
    n_new: int = 500
    n_old: int = 10
    alpha_first: float = 1.0
    alpha_refine: float = 0.35
    consolidation_steps: int | None = None  # defaults to 3 * n_new
    selection: str = "pose"                 # pose | random

    def __post_init__(self):
        if self.n_near < 1 or self.n_new < 1 or self.n_old < 1:
            raise ConfigError("n_near, n_new, n_old must all be >= 1")
        if not (0 <= self.alpha_refine <= 1 and 0 <= self.alpha_first <= 1):
            raise ConfigError("strengths must lie in [0, 1]")
        if self.selection not in ("pose", "random"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")

    @property
    def consolidation(self) -> int:
        return 3 * self.n_new if self.consolidation_steps is None else self.consolidation_steps


@dataclass
class ScheduleEvent:
    step: int
    kind: str  # admit | replace | train | done
    view_id: int | None = None
    loss: float | None = None

    def to_record(self) -> dict:
        rec: dict = {"step": self.step, "kind": self.kind}
        if self.view_id is not None:
            rec["view_id"] = self.view_id
        if self.loss is not None:
            rec["loss"] = self.loss
        return rec

    @staticmethod
    def from_record(rec: dict) -> "ScheduleEvent":
        return ScheduleEvent(step=rec["step"], kind=rec["kind"],
                             view_id=rec.get("view_id"), loss=rec.get("loss"))


def write_event_log(events, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for ev in events:
            f.write(json.dumps(ev.to_record()) + "\n")


def read_event_log(path: str | Path) -> list[ScheduleEvent]:
    with open(path) as f:
        return [ScheduleEvent.from_record(json.loads(line)) for line in f if line.strip()]


class EditSession:
    """State machine for one edit run.

    Holds the remaining/edited view partition, admission order, cadence
    counters, and the RNG streams; never touches the field itself.
    """

    def __init__(self, background: SceneDataset, box: BoundingBox3D, prompt: Prompt,
                 params: ScheduleParams, seed: int = 0):
        if len(background) == 0:
            raise ConfigError("edit session requires a non-empty dataset")
        self.background = background
        self.box = box
        self.prompt = prompt
        self.params = params
        self.seed = int(seed)
        self.remaining: set[int] = set(background.ids())
        self.edited: dict[int, np.ndarray] = {}
        self.used_order: list[int] = []
        self.train_steps = 0
        self.steps_since_admission = 0
        self.steps_since_replace = 0
        self.replace_cursor = 0
        self.synth_calls = 0
        self.selection_rng = np.random.default_rng(derive_seed(self.seed, 0x5E1))
        self.train_rng = np.random.default_rng(derive_seed(self.seed, 0x7A1))
        self._masks: dict[int, EditMask] = {}

    # -- invariant helpers ---------------------------------------------------

    def all_ids(self) -> set[int]:
        return set(self.background.ids())

    def check_conservation(self) -> None:
        assert self.remaining.isdisjoint(self.edited.keys())
        assert self.remaining | set(self.edited.keys()) == self.all_ids()
        assert len(set(self.used_order)) == len(self.used_order)

    def mask_for(self, view_id: int) -> EditMask:
        if view_id not in self._masks:
            view = self.background.view(view_id)
            self._masks[view_id] = project_bbox(self.box, view.pose, view.intrinsics)
        return self._masks[view_id]

    def next_synthesis_seed(self) -> int:
        self.synth_calls += 1
        return derive_seed(self.seed, 0x5EED, self.synth_calls)

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "remaining": sorted(self.remaining),
            "used_order": list(self.used_order),
            "train_steps": self.train_steps,
            "steps_since_admission": self.steps_since_admission,
            "steps_since_replace": self.steps_since_replace,
            "replace_cursor": self.replace_cursor,
            "synth_calls": self.synth_calls,
            "params": asdict(self.params),
            "prompt": {"text": self.prompt.text,
                       "identifiers": sorted(self.prompt.identifiers)},
            "box": {"center": self.box.center.tolist(),
                    "half_extents": self.box.half_extents.tolist(),
                    "rotation": self.box.rotation.reshape(-1).tolist()},
            "selection_rng": self.selection_rng.bit_generator.state,
            "train_rng": self.train_rng.bit_generator.state,
        }

    @staticmethod
    def from_state(state: dict, background: SceneDataset,
                   edited: dict[int, np.ndarray]) -> "EditSession":
        box = BoundingBox3D(center=state["box"]["center"],
                            half_extents=state["box"]["half_extents"],
                            rotation=np.asarray(state["box"]["rotation"]).reshape(3, 3))
        prompt = Prompt(text=state["prompt"]["text"],
                        identifiers=frozenset(state["prompt"]["identifiers"]))
        session = EditSession(background, box, prompt,
                              ScheduleParams(**state["params"]), seed=state["seed"])
        session.remaining = set(state["remaining"])
        session.used_order = list(state["used_order"])
        session.edited = {int(k): v for k, v in edited.items()}
        session.train_steps = state["train_steps"]
        session.steps_since_admission = state["steps_since_admission"]
        session.steps_since_replace = state["steps_since_replace"]
        session.replace_cursor = state["replace_cursor"]
        session.synth_calls = state["synth_calls"]
        session.selection_rng.bit_generator.state = state["selection_rng"]
        session.train_rng.bit_generator.state = state["train_rng"]
        session.check_conservation()
        return session


def init_session(field: RadianceField, background: SceneDataset, box: BoundingBox3D,
                 prompt: Prompt, params: ScheduleParams, seed: int = 0) -> EditSession:
    """Fresh session over a background-fitted field: nothing admitted yet."""
    del field  # fitting quality is the caller's responsibility
    return EditSession(background, box, prompt, params, seed=seed)


# ---------------------------------------------------------------------------
# view selection
# ---------------------------------------------------------------------------

def select_initial_view(session: EditSession) -> int:
    """Uniformly random starting view, drawn from the session RNG."""
    if session.edited:
        raise ConfigError("initial view already chosen for this session")
    ids = sorted(session.remaining)
    return ids[int(session.selection_rng.integers(0, len(ids)))]


def select_next_view(session: EditSession) -> int:
    """Closest remaining view (squared camera-translation distance to any
    admitted view); ties break toward the lowest id. Random mode draws
    uniformly instead."""
    if not session.remaining:
        raise ConfigError("no remaining views to select")
    if not session.edited:
        raise ConfigError("select_next_view requires an admitted view")
    ids = sorted(session.remaining)
    if session.params.selection == "random":
        return ids[int(session.selection_rng.integers(0, len(ids)))]
    used = [session.background.view(v).pose.translation for v in session.used_order]
    used = np.stack(used)
    best_id, best_d = None, np.inf
    for vid in ids:
        t = session.background.view(vid).pose.translation
        d = float(np.min(np.sum((used - t) ** 2, axis=1)))
        if d < best_d:
            best_id, best_d = vid, d
    return best_id


# ---------------------------------------------------------------------------
# synthesis wrappers
# ---------------------------------------------------------------------------

def synthesize_initial(session: EditSession, field: RadianceField, synth) -> tuple[int, np.ndarray]:
    """Full-strength synthesis of the randomly chosen first view; admits it."""
    view_id = select_initial_view(session)
    view = session.background.view(view_id)
    mask = session.mask_for(view_id)
    req = SynthesisRequest(image=view.image, mask=mask, prompt=session.prompt,
                           strength=session.params.alpha_first,
                           seed=session.next_synthesis_seed(), view_id=view_id)
    image = synth.synthesize(req)
    session.remaining.discard(view_id)
    session.edited[view_id] = image
    session.used_order.append(view_id)
    return view_id, image


def synthesize_refined(session: EditSession, field: RadianceField, synth,
                       view_id: int, train_config: TrainConfig) -> np.ndarray:
    """Low-strength synthesis from the background/render composite.

    Used both to admit a new view and to replace an already-admitted one;
    set membership is updated accordingly.
    """
    admitting = view_id in session.remaining
    if not admitting and view_id not in session.edited:
        raise ConfigError(f"view {view_id} is neither remaining nor edited")
    view = session.background.view(view_id)
    mask = session.mask_for(view_id)
    rendered = render_view(field, view.pose, view.intrinsics,
                           n_samples=train_config.n_samples_per_ray,
                           seed=session.seed)
    hint = composite(view.image, rendered, mask)
    req = SynthesisRequest(image=hint, mask=mask, prompt=session.prompt,
                           strength=session.params.alpha_refine,
                           seed=session.next_synthesis_seed(), view_id=view_id)
    image = synth.synthesize(req)
    if admitting:
        session.remaining.discard(view_id)
        session.used_order.append(view_id)
    session.edited[view_id] = image
    return image


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _edited_pool(session: EditSession, field: RadianceField) -> RayPool:
    views = [session.background.view(v) for v in session.used_order]
    images = [session.edited[v.id] for v in views]
    return RayPool.from_views(field, views, images)


def run_insertion(field: RadianceField, session: EditSession, synth,
                  train_config: TrainConfig, *,
                  max_train_steps: int | None = None,
                  on_event: Callable[[ScheduleEvent], None] | None = None,
                  ) -> tuple[RadianceField, list[ScheduleEvent]]:
    """Run the dataset-update loop to completion (or ``max_train_steps``).

    Returns the trained field and the full event log. Each source view is
    admitted exactly once; cadence counts in the log match the configured
    ``n_new``/``n_old`` exactly.
    """
    params = session.params
    events: list[ScheduleEvent] = []

    def emit(ev: ScheduleEvent):
        events.append(ev)
        if on_event is not None:
            on_event(ev)

    if not session.used_order:
        vid, _ = synthesize_initial(session, field, synth)
        emit(ScheduleEvent(step=session.train_steps, kind="admit", view_id=vid))

    pool = _edited_pool(session, field)
    optimizer = Adam(field, train_config)
    steps_this_call = 0

    while True:
        if max_train_steps is not None and steps_this_call >= max_train_steps:
            return field, events

        loss = train_step_pool(field, pool, train_config, optimizer,
                               session.train_rng, session.train_steps)
        session.train_steps += 1
        session.steps_since_admission += 1
        session.steps_since_replace += 1
        steps_this_call += 1
        emit(ScheduleEvent(step=session.train_steps, kind="train", loss=loss))

        structural = False
        if session.steps_since_replace >= params.n_old and session.used_order:
            vid = session.used_order[session.replace_cursor % len(session.used_order)]
            session.replace_cursor += 1
            synthesize_refined(session, field, synth, vid, train_config)
            session.steps_since_replace = 0
            emit(ScheduleEvent(step=session.train_steps, kind="replace", view_id=vid))
            structural = True

        if session.remaining and session.steps_since_admission >= params.n_new:
            for _ in range(min(params.n_near, len(session.remaining))):
                vid = select_next_view(session)
                synthesize_refined(session, field, synth, vid, train_config)
                emit(ScheduleEvent(step=session.train_steps, kind="admit", view_id=vid))
            session.steps_since_admission = 0
            structural = True

        if not session.remaining and session.steps_since_admission >= params.consolidation:
            emit(ScheduleEvent(step=session.train_steps, kind="done"))
            return field, events

        if structural:
            pool = _edited_pool(session, field)


def run_removal(field: RadianceField, background: SceneDataset, box: BoundingBox3D,
                prompts: tuple[Prompt, Prompt], synth, params: ScheduleParams,
                train_config: TrainConfig, *, seed: int = 0,
                skip_pseudo_gt: bool = False,
                on_event: Callable[[ScheduleEvent], None] | None = None,
                ) -> tuple[RadianceField, dict[int, np.ndarray], list[ScheduleEvent]]:
    """Object removal: pseudo-ground-truth stage, fine-tune handoff, then the
    same dataset-update loop with the background prompt.

    ``prompts`` is (plain background prompt, identifier background prompt);
    the plain one drives the per-view full-strength inpainting that builds
    the pseudo ground truth, the identifier one drives the edit loop.
    ``skip_pseudo_gt`` skips both the inpainting stage and the fine-tune
    request (ablation mode).
    """
    inpaint_prompt, edit_prompt = prompts
    pseudo: dict[int, np.ndarray] = {}
    if not skip_pseudo_gt:
        for i, view in enumerate(background.views):
            mask = project_bbox(box, view.pose, view.intrinsics)
            req = SynthesisRequest(image=view.image, mask=mask, prompt=inpaint_prompt,
                                   strength=1.0,
                                   seed=derive_seed(seed, 0x96D, i),
                                   view_id=view.id)
            pseudo[view.id] = synth.synthesize(req)
        request_finetune(synth, FineTuneRequest(
            background_views=background, object_views=None,
            prompts=(inpaint_prompt, edit_prompt),
            pseudo_ground_truth=pseudo))

    session = init_session(field, background, box, edit_prompt, params, seed=seed)
    field, events = run_insertion(field, session, synth, train_config, on_event=on_event)
    return field, pseudo, events


# ---------------------------------------------------------------------------
# log verification helpers (used by tests and the CLI report)
# ---------------------------------------------------------------------------

def admission_order_from_events(events) -> list[int]:
    return [ev.view_id for ev in events if ev.kind == "admit"]


def verify_cadence(events, params: ScheduleParams) -> None:
    """Raise AssertionError unless the log obeys the configured cadences."""
    train_count = 0
    since_admit = 0
    since_replace = 0
    admitted_steps: list[int] = []
    for ev in events:
        if ev.kind == "train":
            train_count += 1
            since_admit += 1
            since_replace += 1
        elif ev.kind == "replace":
            assert since_replace == params.n_old, (
                f"replace after {since_replace} steps, expected {params.n_old}")
            since_replace = 0
        elif ev.kind == "admit":
            if admitted_steps and ev.step != admitted_steps[-1]:
                assert since_admit == params.n_new, (
                    f"admission burst after {since_admit} steps, expected {params.n_new}")
            admitted_steps.append(ev.step)
            if ev.step > 0:
                since_admit = 0
    bursts: dict[int, int] = {}
    for s in admitted_steps:
        bursts[s] = bursts.get(s, 0) + 1
    assert bursts.get(0, 0) == 1, "initial admission must be a burst of size 1"
