"""Frame-feature extraction and assembly of the sub-global / local feature matrices."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import FormatError
from .geometry import (
    PAD,
    ResamplePlan,
    SquareRegion,
    TrimWindow,
    local_crop_region,
    resample_to_F,
    union_crop_region,
)
from .scenario import ATTRIBUTE_SLOTS, PHASE_SLOTS, SCENARIO_SLOTS, Scenario

CACHE_MAGIC = b"DCKF1"
MAX_PHASES = 8


class FrameExtractor(Protocol):
    d: int

    def extract(self, scenario: Scenario, frame_index: int, region: SquareRegion) -> np.ndarray: ...


class SyntheticExtractor:
    """Stand-in visual encoder for generated scenarios.

    A frame inside phase ``i`` maps to ``phase_emb[i]`` plus the embeddings of
    the scenario-level and phase-level attribute labels, plus seeded Gaussian
    noise of scale ``noise``.  Frames outside every phase get a background
    vector plus the scenario-level attributes.
    """

    def __init__(self, d: int = 64, noise: float = 0.05, seed: int = 0):
        self.d = d
        self.noise = noise
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        self.phase_emb = rng.normal(0, 1, (MAX_PHASES, d)) * scale * 2
        self.background = rng.normal(0, 1, d) * scale * 2
        self.attr_emb = {
            slot: {v: rng.normal(0, 1, d) * scale for v in values} for slot, values in ATTRIBUTE_SLOTS.items()
        }

    def clean_vector(self, scenario: Scenario, frame_index: int) -> np.ndarray:
        lat = scenario.latents
        if "phase_attributes" not in lat:
            raise LookupError(f"scenario {scenario.id} carries no synthetic latents")
        vec = sum(self.attr_emb[s][lat[s]] for s in SCENARIO_SLOTS)
        i = scenario.phase_at(frame_index)
        if i is None:
            return vec + self.background
        ph = lat["phase_attributes"][i]
        return vec + self.phase_emb[i] + sum(self.attr_emb[s][ph[s]] for s in PHASE_SLOTS)

    def extract(self, scenario: Scenario, frame_index: int, region: SquareRegion) -> np.ndarray:
        if not 0 <= frame_index < scenario.duration_frames:
            raise ValueError(f"frame {frame_index} outside [0, {scenario.duration_frames})")
        vec = self.clean_vector(scenario, frame_index)
        if self.noise > 0:
            seed = [scenario.latents["feature_seed"], frame_index, region.x0, region.y0, region.width, region.height]
            vec = vec + np.random.default_rng(seed).normal(0, self.noise / np.sqrt(self.d), self.d)
        return np.asarray(vec, dtype=np.float64)


def frame_key(scenario_id: str, frame_index: int, region: SquareRegion) -> str:
    return f"{scenario_id}|{frame_index}|{region.key()}"


class FeatureCache:
    """String-keyed store of float32 vectors with the ``DCKF1`` binary layout."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self.entries: dict[str, np.ndarray] = dict(entries or {})

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> np.ndarray:
        return self.entries[key]

    def put(self, key: str, vec) -> None:
        self.entries[key] = np.asarray(vec, dtype=np.float32)

    def save(self, path) -> None:
        parts = [CACHE_MAGIC, struct.pack("<I", len(self.entries))]
        for key in sorted(self.entries):
            vec = self.entries[key]
            kb = key.encode("utf-8")
            parts += [struct.pack("<I", len(kb)), kb, struct.pack("<I", vec.shape[0]), vec.astype("<f4").tobytes()]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "FeatureCache":
        buf = Path(path).read_bytes()
        if buf[:5] != CACHE_MAGIC:
            raise FormatError("bad magic, expected DCKF1", path=path)
        pos = 5

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise FormatError("truncated feature cache", path=path)
            out = buf[pos : pos + n]
            pos += n
            return out

        (count,) = struct.unpack("<I", take(4))
        entries = {}
        for _ in range(count):
            (klen,) = struct.unpack("<I", take(4))
            key = take(klen).decode("utf-8")
            (d,) = struct.unpack("<I", take(4))
            entries[key] = np.frombuffer(take(4 * d), dtype="<f4").astype(np.float32)
        return cls(entries)


class PrecomputedExtractor:
    """Reads frame vectors from a FeatureCache; missing entries raise LookupError."""

    def __init__(self, cache: FeatureCache):
        self.cache = cache
        first = next(iter(cache.entries.values()), None)
        self.d = 0 if first is None else first.shape[0]

    def extract(self, scenario, frame_index, region):
        key = frame_key(scenario.id, frame_index, region)
        try:
            return self.cache[key].astype(np.float64)
        except KeyError:
            raise LookupError(f"no cached feature for {key}") from None


class CachingExtractor:
    """Wraps an extractor and records every vector it produces into ``cache``."""

    def __init__(self, inner, cache: FeatureCache | None = None):
        self.inner = inner
        self.d = inner.d
        self.cache = cache if cache is not None else FeatureCache()

    def extract(self, scenario, frame_index, region):
        vec = self.inner.extract(scenario, frame_index, region)
        self.cache.put(frame_key(scenario.id, frame_index, region), vec)
        return vec


def extract_frame_feature(extractor, scenario: Scenario, frame_index: int, region: SquareRegion) -> np.ndarray:
    return extractor.extract(scenario, frame_index, region)


@dataclass(frozen=True, eq=False)
class SubGlobalFeature:
    matrix: np.ndarray  # F x d
    pad_mask: np.ndarray  # F bools


@dataclass(frozen=True, eq=False)
class LocalFeature:
    matrix: np.ndarray  # P x d
    placeholder_mask: np.ndarray  # P bools


@dataclass
class PlaceholderBank:
    """Learnable rows substituted for phases without a bounding box."""

    u: np.ndarray  # P_max x d

    @property
    def P_max(self) -> int:
        return self.u.shape[0]


def subglobal_region(scenario: Scenario) -> SquareRegion:
    """Square crop over the union of all boxes; whole frame when the track is empty."""
    boxes = [b for _, b in scenario.bbox_track]
    if not boxes:
        return SquareRegion.full_frame(scenario.frame_size)
    return union_crop_region(boxes, scenario.frame_size)


def plan_hash(plan: ResamplePlan) -> str:
    return hashlib.sha1(repr(plan.source_indices).encode()).hexdigest()[:12]


def assemble_subglobal(
    extractor, scenario: Scenario, window: TrimWindow, plan: ResamplePlan, region: SquareRegion
) -> SubGlobalFeature:
    F = plan.F
    mat = np.zeros((F, extractor.d), dtype=np.float64)
    for k, src in enumerate(plan.source_indices):
        if src == PAD:
            continue
        mat[k] = extractor.extract(scenario, window.start_n + src, region)
    return SubGlobalFeature(mat, np.array(plan.pad_mask, dtype=bool))


def assemble_local(extractor, scenario: Scenario, bank: PlaceholderBank, rng: np.random.Generator) -> LocalFeature:
    """One row per phase: a uniformly chosen box's local crop, or ``bank.u[i]`` when the phase has none."""
    P = scenario.num_phases
    if bank.P_max < P:
        raise ValueError(f"placeholder bank holds {bank.P_max} rows, scenario has {P} phases")
    mat = np.zeros((P, bank.u.shape[1]), dtype=np.float64)
    mask = np.zeros(P, dtype=bool)
    for i in range(P):
        boxes = scenario.boxes_in_phase(i)
        if not boxes:
            mat[i] = bank.u[i]
            mask[i] = True
            continue
        frame, box = boxes[int(rng.integers(len(boxes)))]
        mat[i] = extractor.extract(scenario, frame, local_crop_region(box, scenario.frame_size))
    return LocalFeature(mat, mask)


@dataclass(frozen=True)
class StreamConfig:
    use_global: bool = False
    use_subglobal: bool = True
    use_local: bool = True
    phase_encoder: bool = True

    def __post_init__(self):
        if not (self.use_global or self.use_subglobal or self.use_local):
            raise ValueError("at least one feature stream must be enabled")

    @property
    def name(self) -> str:
        parts = [n for n, on in (("global", self.use_global), ("subglobal", self.use_subglobal), ("local", self.use_local)) if on]
        if self.use_local and self.phase_encoder:
            parts.append("phase-encoder")
        return "+".join(parts)


# Rows of the stream ablation, plus local-only with the phase encoder.
ABLATION_CONFIGS = (
    StreamConfig(False, True, False, False),
    StreamConfig(True, False, False, False),
    StreamConfig(True, True, True, True),
    StreamConfig(True, True, False, False),
    StreamConfig(False, True, True, False),
    StreamConfig(True, False, True, True),
    StreamConfig(False, True, True, True),
    StreamConfig(False, False, True, True),
)


@dataclass(eq=False)
class SampleFeatures:
    window: TrimWindow
    global_: SubGlobalFeature | None
    subglobal: SubGlobalFeature | None
    local: LocalFeature | None


def build_sample_features(
    extractor,
    scenario: Scenario,
    window: TrimWindow,
    streams: StreamConfig,
    bank: PlaceholderBank,
    rng: np.random.Generator,
    F: int = 100,
    mid_fps: float = 3.0,
) -> SampleFeatures:
    """Assemble every enabled stream for one trim window.

    The global stream reuses the sub-global window and plan with a whole-frame region.
    """
    plan = resample_to_F(window.duration, scenario.fps, mid_fps, F)
    glob = sub = loc = None
    if streams.use_global:
        glob = assemble_subglobal(extractor, scenario, window, plan, SquareRegion.full_frame(scenario.frame_size))
    if streams.use_subglobal:
        sub = assemble_subglobal(extractor, scenario, window, plan, subglobal_region(scenario))
    if streams.use_local:
        loc = assemble_local(extractor, scenario, bank, rng)
    return SampleFeatures(window, glob, sub, loc)
