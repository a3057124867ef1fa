"""Scenario data model, JSON persistence and the synthetic scenario generator.

A scenario is one traffic event: a frame-indexed list of phases, each with a
vehicle caption and a pedestrian caption, plus a sparse pedestrian bounding
box track.  Boundaries are stored as frame indices; seconds are ``frame / fps``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

VIEWS = ("vehicle", "overhead")
SPLITS = ("train", "valid", "test")
DEFAULT_FRAME_SIZE = (480, 640)


@dataclass(frozen=True)
class BBox:
    x_st: int
    x_ed: int
    y_st: int
    y_ed: int

    @property
    def width(self) -> int:
        return self.x_ed - self.x_st

    @property
    def height(self) -> int:
        return self.y_ed - self.y_st


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    vehicle_caption: str
    pedestrian_caption: str

    def caption(self, target: str) -> str:
        if target == "vehicle":
            return self.vehicle_caption
        if target == "pedestrian":
            return self.pedestrian_caption
        raise ValueError(f"unknown target {target!r}")


@dataclass(frozen=True)
class Scenario:
    id: str
    duration_frames: int
    phases: tuple[Phase, ...]
    bbox_track: tuple[tuple[int, BBox], ...] = ()
    fps: float = 30.0
    view: str = "vehicle"
    frame_size: tuple[int, int] = DEFAULT_FRAME_SIZE
    latents: dict = field(default_factory=dict, compare=True, hash=False)

    @property
    def num_phases(self) -> int:
        return len(self.phases)

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        return [(p.start, p.end) for p in self.phases]

    def captions(self, target: str) -> list[str]:
        return [p.caption(target) for p in self.phases]

    def phase_at(self, frame: int) -> int | None:
        """Index of the phase covering ``frame``; a shared boundary belongs to the later phase."""
        hit = None
        for i, p in enumerate(self.phases):
            if p.start <= frame <= p.end:
                hit = i
        return hit

    def boxes_in_phase(self, i: int) -> list[tuple[int, BBox]]:
        p = self.phases[i]
        return [(f, b) for f, b in self.bbox_track if p.start <= f <= p.end]

    def seconds(self, frame: int) -> float:
        return frame / self.fps


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[Scenario, ...] = ()
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError([f"split not in {SPLITS}"])
        seen = set()
        dupes = []
        for s in self.scenarios:
            if s.id in seen:
                dupes.append(f"scenarios[id={s.id}] duplicate id")
            seen.add(s.id)
        if dupes:
            raise ValidationError(dupes)

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i) -> Scenario:
        return self.scenarios[i]

    def by_id(self) -> dict[str, Scenario]:
        return {s.id: s for s in self.scenarios}


def validate_scenario(s: Scenario) -> list[str]:
    """Return every invariant violation of ``s`` as ``"<field path> <rule>"`` strings."""
    out = []
    T = s.duration_frames
    if not s.id:
        out.append("id empty")
    if not isinstance(T, (int, np.integer)) or T <= 0:
        out.append("duration_frames<=0")
        T = 0
    if not s.fps > 0:
        out.append("fps<=0")
    if s.view not in VIEWS:
        out.append(f"view not in {VIEWS}")
    H, W = s.frame_size
    if H <= 0 or W <= 0:
        out.append("frame_size not positive")

    for i, p in enumerate(s.phases):
        if p.start > p.end:
            out.append(f"phase[{i}].start>end")
        for name in ("start", "end"):
            v = getattr(p, name)
            if not 0 <= v < T:
                out.append(f"phase[{i}].{name} out of [0,T)")
        if not p.vehicle_caption.strip():
            out.append(f"phase[{i}].vehicle_caption empty")
        if not p.pedestrian_caption.strip():
            out.append(f"phase[{i}].pedestrian_caption empty")
    for i in range(len(s.phases) - 1):
        a, b = s.phases[i], s.phases[i + 1]
        if a.start > b.start:
            out.append(f"phase[{i}].start>phase[{i + 1}].start")
        elif a.end > b.start:
            out.append(f"phase[{i}].end>phase[{i + 1}].start")

    frames = set()
    for j, (f, box) in enumerate(s.bbox_track):
        if not 0 <= f < T:
            out.append(f"bbox_track[{j}].frame out of [0,T)")
        if f in frames:
            out.append(f"bbox_track[{j}].frame duplicate")
        frames.add(f)
        if min(box.x_st, box.x_ed, box.y_st, box.y_ed) < 0:
            out.append(f"bbox_track[{j}] negative coordinate")
        if box.x_st >= box.x_ed:
            out.append(f"bbox_track[{j}].x_st>=x_ed")
        if box.y_st >= box.y_ed:
            out.append(f"bbox_track[{j}].y_st>=y_ed")
    return out


# ---------------------------------------------------------------------------
# JSON (de)serialization


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "id": s.id,
        "fps": s.fps,
        "duration_frames": s.duration_frames,
        "view": s.view,
        "frame_size": list(s.frame_size),
        "phases": [
            {
                "start": p.start,
                "end": p.end,
                "vehicle_caption": p.vehicle_caption,
                "pedestrian_caption": p.pedestrian_caption,
            }
            for p in s.phases
        ],
        "bbox_track": [
            {"frame": f, "x_st": b.x_st, "x_ed": b.x_ed, "y_st": b.y_st, "y_ed": b.y_ed}
            for f, b in s.bbox_track
        ],
        "latents": s.latents,
    }


def _req(d: dict, key: str, path: str, kind=None):
    if not isinstance(d, dict):
        raise FormatError("expected an object", field=path)
    if key not in d:
        raise FormatError("missing required field", field=f"{path}.{key}" if path else key)
    v = d[key]
    # bool is an int subclass; reject it where an integer is required
    if kind is not None and (not isinstance(v, kind) or (isinstance(v, bool) and kind is not bool)):
        raise FormatError(f"expected {getattr(kind, '__name__', kind)}", field=f"{path}.{key}" if path else key)
    return v


def scenario_from_dict(d: dict, path: str = "") -> Scenario:
    number = (int, float)
    phases = []
    for i, pd in enumerate(_req(d, "phases", path, list)):
        pp = f"{path}.phases[{i}]"
        phases.append(
            Phase(
                start=_req(pd, "start", pp, int),
                end=_req(pd, "end", pp, int),
                vehicle_caption=_req(pd, "vehicle_caption", pp, str),
                pedestrian_caption=_req(pd, "pedestrian_caption", pp, str),
            )
        )
    track = []
    for j, bd in enumerate(d.get("bbox_track", [])):
        bp = f"{path}.bbox_track[{j}]"
        track.append(
            (
                _req(bd, "frame", bp, int),
                BBox(
                    _req(bd, "x_st", bp, int),
                    _req(bd, "x_ed", bp, int),
                    _req(bd, "y_st", bp, int),
                    _req(bd, "y_ed", bp, int),
                ),
            )
        )
    size = d.get("frame_size", list(DEFAULT_FRAME_SIZE))
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) for v in size)):
        raise FormatError("expected [height, width]", field=f"{path}.frame_size")
    fps = d.get("fps", 30.0)
    if not isinstance(fps, number):
        raise FormatError("expected number", field=f"{path}.fps")
    return Scenario(
        id=_req(d, "id", path, str),
        duration_frames=_req(d, "duration_frames", path, int),
        phases=tuple(phases),
        bbox_track=tuple(track),
        fps=float(fps),
        view=d.get("view", "vehicle"),
        frame_size=(size[0], size[1]),
        latents=d.get("latents", {}),
    )


def scenario_set_to_dict(ss: ScenarioSet) -> dict:
    return {"split": ss.split, "scenarios": [scenario_to_dict(s) for s in ss.scenarios]}


def dumps_scenario_set(ss: ScenarioSet) -> str:
    return json.dumps(scenario_set_to_dict(ss), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def save_scenario_set(ss: ScenarioSet, path) -> None:
    Path(path).write_text(dumps_scenario_set(ss), encoding="utf-8")


def load_scenario_set(path) -> ScenarioSet:
    """Load and validate a ScenarioSet JSON file.

    Raises FormatError for malformed JSON or missing fields, ValidationError
    listing every field path whose invariant fails.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path=path, line=exc.lineno) from exc
    try:
        split = _req(raw, "split", "", str)
        items = _req(raw, "scenarios", "", list)
        scenarios = [scenario_from_dict(d, f"scenarios[{i}]") for i, d in enumerate(items)]
    except FormatError as exc:
        raise FormatError(str(exc), path=path) from exc
    violations = []
    for i, s in enumerate(scenarios):
        violations += [f"scenarios[{i}].{v}" for v in validate_scenario(s)]
    if violations:
        raise ValidationError(violations, context=str(path))
    return ScenarioSet(tuple(scenarios), split)


# ---------------------------------------------------------------------------
# Synthetic generator

AGES = ("young", "adult", "elderly", "teenage")
CLOTHING = ("red", "blue", "black", "white", "green", "yellow")
WEATHER = ("clear", "rainy", "cloudy")
POSITIONS = ("in front of", "to the left of", "to the right of", "diagonally ahead of")
MOTIONS = ("going straight", "turning left", "turning right", "slowing down", "stopped", "accelerating")
ACTIONS = ("walking", "standing still", "crossing the road", "looking at the vehicle", "running", "waiting at the curb")

ATTRIBUTE_SLOTS = {
    "age": AGES,
    "clothing": CLOTHING,
    "weather": WEATHER,
    "position": POSITIONS,
    "motion": MOTIONS,
    "action": ACTIONS,
}
SCENARIO_SLOTS = ("age", "clothing", "weather")
PHASE_SLOTS = ("position", "motion", "action")


def render_captions(latents: dict) -> list[tuple[str, str]]:
    """Expand attribute labels into (vehicle, pedestrian) caption pairs, one per phase."""
    out = []
    for ph in latents["phase_attributes"]:
        vehicle = (
            f"the vehicle is {ph['motion']} on a {latents['weather']} day . "
            f"the pedestrian is {ph['position']} the vehicle ."
        )
        pedestrian = (
            f"the {latents['age']} pedestrian in a {latents['clothing']} shirt is {ph['action']} . "
            f"the pedestrian is {ph['position']} the vehicle ."
        )
        out.append((vehicle, pedestrian))
    return out


def _box_track(rng, phase: Phase, H: int, W: int, start_center) -> list[tuple[int, BBox]]:
    h = int(rng.integers(48, max(49, H // 3)))
    w = max(8, int(h * rng.uniform(0.3, 0.5)))
    cx, cy = start_center
    stride = int(rng.integers(3, 9))
    track = []
    for f in range(phase.start, phase.end + 1, stride):
        cx = float(np.clip(cx + rng.normal(0, 3), w / 2, W - w / 2))
        cy = float(np.clip(cy + rng.normal(0, 1.5), h / 2, H - h / 2))
        x0 = int(round(cx - w / 2))
        y0 = int(round(cy - h / 2))
        x0 = min(max(x0, 0), W - w)
        y0 = min(max(y0, 0), H - h)
        track.append((f, BBox(x0, x0 + w, y0, y0 + h)))
    return track


def generate_synthetic_dataset(
    seed: int,
    count: int,
    phase_range: tuple[int, int] = (4, 5),
    frame_dims: tuple[int, int] = DEFAULT_FRAME_SIZE,
    *,
    split: str = "train",
    fps: float = 30.0,
    missing_box_prob: float = 0.25,
    overhead_frac: float = 0.0,
    id_offset: int = 0,
) -> ScenarioSet:
    """Generate ``count`` templated traffic scenarios, deterministically from ``seed``.

    Each scenario stores its attribute labels and a feature seed under
    ``latents`` so the synthetic feature extractor can emit phase- and
    attribute-dependent vectors; captions are ``render_captions(latents)``.
    """
    lo, hi = phase_range
    if count < 1:
        raise ValueError("count must be positive")
    if not 2 <= lo <= hi <= 8:
        raise ValueError(f"phase_range must satisfy 2 <= min <= max <= 8, got {phase_range}")
    H, W = frame_dims
    if H < 64 or W < 64:
        raise ValueError(f"frame_dims must be at least 64x64, got {frame_dims}")
    if not 0 <= missing_box_prob <= 1:
        raise ValueError("missing_box_prob must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    scenarios = []
    for n in range(count):
        P = int(rng.integers(lo, hi + 1))
        latents: dict[str, Any] = {s: str(rng.choice(ATTRIBUTE_SLOTS[s])) for s in SCENARIO_SLOTS}
        phase_attrs = []
        prev = None
        for _ in range(P):
            # consecutive phases differ in vehicle motion so boundaries are visible
            choices = [m for m in MOTIONS if m != (prev or {}).get("motion")]
            ph = {
                "position": str(rng.choice(POSITIONS)),
                "motion": str(rng.choice(choices)),
                "action": str(rng.choice(ACTIONS)),
            }
            phase_attrs.append(ph)
            prev = ph
        latents["phase_attributes"] = phase_attrs
        latents["feature_seed"] = int(rng.integers(0, 2**31 - 1))

        t = int(rng.integers(0, int(6 * fps)))
        bounds = []
        for i in range(P):
            dur = int(rng.integers(int(1 * fps), int(5 * fps)))
            bounds.append((t, t + dur))
            t = t + dur + int(rng.integers(0, int(1 * fps)))
        T = bounds[-1][1] + int(rng.integers(int(1 * fps), int(6 * fps)))

        caps = render_captions(latents)
        phases = tuple(Phase(a, b, v, p) for (a, b), (v, p) in zip(bounds, caps))
        view = "overhead" if rng.random() < overhead_frac else "vehicle"

        track = []
        center = (rng.uniform(0.2, 0.8) * W, rng.uniform(0.4, 0.7) * H)
        for ph in phases:
            if rng.random() < missing_box_prob:
                continue
            seg = _box_track(rng, ph, H, W, center)
            center = ((seg[-1][1].x_st + seg[-1][1].x_ed) / 2, (seg[-1][1].y_st + seg[-1][1].y_ed) / 2)
            # a boundary frame shared by two phases carries at most one box
            if track and seg and seg[0][0] == track[-1][0]:
                seg = seg[1:]
            track += seg

        scenarios.append(
            Scenario(
                id=f"syn-{n + id_offset:04d}",
                duration_frames=T,
                phases=phases,
                bbox_track=tuple(track),
                fps=fps,
                view=view,
                frame_size=(H, W),
                latents=latents,
            )
        )
    return ScenarioSet(tuple(scenarios), split)


def caption_corpus(sets: Iterable[ScenarioSet] | ScenarioSet) -> list[str]:
    """All vehicle and pedestrian captions, in scenario order; vocabulary input."""
    if isinstance(sets, ScenarioSet):
        sets = [sets]
    out = []
    for ss in sets:
        for s in ss:
            for p in s.phases:
                out += [p.vehicle_caption, p.pedestrian_caption]
    return out


def scenarios_with_missing_boxes(ss: Sequence[Scenario]) -> list[str]:
    return [s.id for s in ss if any(not s.boxes_in_phase(i) for i in range(s.num_phases))]
