"""Dual-target fine-tuning: sequence loss, warmup+cosine schedule, gradient check, fit loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import PAD_ID, Tokenizer, TokenSequence, encode_target_sequence, quantize_boundaries
from .features import SampleFeatures, build_sample_features
from .geometry import TrimWindow, sample_trim_window, trim_window
from .metrics import MetricReport
from .model import TARGETS, CaptionModel
from .scenario import Scenario

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    warmup_frac: float = 0.1
    epochs: int = 30
    batch_size: int = 1
    max_offset_s: float = 5.0
    overhead_mix: float = 0.1
    seed: int = 0
    mid_fps: float = 3.0
    max_steps: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if not 0 <= self.overhead_mix <= 0.1:
            raise ValueError("overhead_mix must lie in [0, 0.1]")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` over ``warmup_frac * total_steps``, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.lr * step / warm
    if total_steps == warm:
        return cfg.lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * progress))


def sequence_loss(logits: torch.Tensor, target: TokenSequence | Sequence[int]) -> torch.Tensor:
    """Mean next-token cross-entropy; row ``i`` of ``logits`` predicts ``target[i + 1]``. PAD targets are ignored."""
    ids = torch.as_tensor(list(target.ids if isinstance(target, TokenSequence) else target), dtype=torch.long)
    if logits.shape[0] != ids.shape[0]:
        raise ValueError(f"logits length {logits.shape[0]} != target length {ids.shape[0]}")
    if ids.shape[0] < 2:
        raise ValueError("target needs at least two tokens")
    return F.cross_entropy(logits[:-1], ids[1:], ignore_index=PAD_ID)


@dataclass(eq=False)
class Sample:
    scenario: Scenario
    features: SampleFeatures
    targets: dict[str, TokenSequence]
    time_pairs: list[tuple[int, int]]


def build_sample(
    model: CaptionModel,
    tok: Tokenizer,
    extractor,
    scenario: Scenario,
    rng: np.random.Generator,
    max_offset_s: float = 0.0,
    mid_fps: float = 3.0,
) -> Sample:
    """Draw a trim window, assemble features and both target sequences for one scenario."""
    if max_offset_s > 0:
        window = sample_trim_window(scenario.boundaries, scenario.duration_frames, scenario.fps, rng, max_offset_s)
    else:
        window = inference_window(scenario)
    cfg = model.cfg
    feats = build_sample_features(
        extractor, scenario, window, cfg.streams, model.placeholder_bank(), rng, F=cfg.F, mid_fps=mid_fps
    )
    pairs = quantize_boundaries(scenario.boundaries, window, tok.N)
    targets = {t: encode_target_sequence(scenario.captions(t), pairs, tok, cfg.L_max) for t in TARGETS}
    return Sample(scenario, feats, targets, pairs)


def inference_window(scenario: Scenario) -> TrimWindow:
    b = scenario.boundaries
    return trim_window(b[0][0], b[-1][1], scenario.duration_frames, 0, 0)


def target_losses(model: CaptionModel, sample: Sample, targets: Sequence[str] = TARGETS) -> dict[str, torch.Tensor]:
    """Per-target losses sharing one visual-encoder pass."""
    mem = model.encode_visual(sample.features)
    out = {}
    for t in targets:
        logits = model.decode_teacher_forced(model.attach_condition(mem, t), sample.targets[t])
        out[t] = sequence_loss(logits, sample.targets[t])
    return out


class Trainer:
    """Single-writer training state: model, Adam optimizer, step counter and RNG."""

    def __init__(self, model: CaptionModel, tok: Tokenizer, extractor, cfg: TrainConfig, total_steps: int = 1):
        self.model = model
        self.tok = tok
        self.extractor = extractor
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.total_steps = max(1, total_steps)
        self.step = 0

    def multitask_step(self, scenario: Scenario, update: bool = True) -> tuple[float, float, float]:
        """One dual-target update on a freshly trimmed sample; returns (vehicle, pedestrian, total) losses."""
        sample = build_sample(
            self.model, self.tok, self.extractor, scenario, self.rng, self.cfg.max_offset_s, self.cfg.mid_fps
        )
        self.model.train()
        losses = target_losses(self.model, sample)
        total = losses["vehicle"] + losses["pedestrian"]
        trainable = [p for p in self.model.parameters() if p.requires_grad]
        if update and trainable:
            lr = lr_schedule(min(self.step + 1, self.total_steps), self.total_steps, self.cfg)
            for g in self.optimizer.param_groups:
                g["lr"] = lr
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
        self.step += 1
        return losses["vehicle"].item(), losses["pedestrian"].item(), total.item()


# ---------------------------------------------------------------------------
# Gradient verification


def finite_difference_check(
    model: CaptionModel,
    tok: Tokenizer,
    extractor,
    scenario: Scenario,
    eps: float = 1e-4,
    n_params: int = 50,
    seed: int = 0,
    corrupt: Callable[[torch.Tensor], torch.Tensor] | None = None,
    details: list | None = None,
) -> float:
    """Max relative error between autograd and central differences on sampled entries.

    Runs on a float64 copy of ``model``.  The sample always includes one entry
    each of ``q_g``, ``q_l``, ``u`` and both conditional embeddings.
    ``corrupt`` transforms the analytic gradient before comparison.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    rng = np.random.default_rng(seed)
    sample = build_sample(m, tok, extractor, scenario, rng, max_offset_s=0.0)
    params = dict(m.named_parameters())

    def loss() -> torch.Tensor:
        ls = target_losses(m, sample)
        return ls["vehicle"] + ls["pedestrian"]

    m.zero_grad(set_to_none=True)
    loss().backward()

    P = scenario.num_phases
    placeholder_rows = np.flatnonzero(sample.features.local.placeholder_mask) if sample.features.local is not None else []
    u_row = int(placeholder_rows[0]) if len(placeholder_rows) else 0
    forced = [
        ("q_g", (int(rng.integers(m.cfg.F)), int(rng.integers(m.cfg.d)))),
        ("q_l", (int(rng.integers(P)), int(rng.integers(m.cfg.d)))),
        ("u", (u_row, int(rng.integers(m.cfg.d)))),
    ]
    if m.cfg.k > 0:
        forced += [
            ("cond_vehicle", (int(rng.integers(m.cfg.k)), int(rng.integers(m.cfg.d)))),
            ("cond_pedestrian", (int(rng.integers(m.cfg.k)), int(rng.integers(m.cfg.d)))),
        ]
    names = sorted(params)
    picks = list(forced)
    while len(picks) < n_params:
        name = names[int(rng.integers(len(names)))]
        shape = params[name].shape
        picks.append((name, tuple(int(rng.integers(s)) for s in shape)))

    worst = 0.0
    with torch.no_grad():
        for name, idx in picks:
            p = params[name]
            g = p.grad[idx] if p.grad is not None else torch.zeros((), dtype=p.dtype)
            ga = float(corrupt(g) if corrupt else g)
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss())
            p[idx] = orig - eps
            down = float(loss())
            p[idx] = orig
            gfd = (up - down) / (2 * eps)
            err = abs(ga - gfd) / max(abs(ga), abs(gfd), 1e-8)
            if details is not None:
                details.append({"param": name, "index": idx, "analytic": ga, "numeric": gfd, "rel_error": err})
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Fit loop


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)

    @property
    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    @property
    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainLog":
        return cls([json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()])


def epoch_plan(scenarios: Sequence[Scenario], epochs: int, overhead_mix: float, rng: np.random.Generator) -> list[list[int]]:
    """Per-epoch sample orders; overhead-view scenarios make up at most ``overhead_mix`` of each epoch."""
    veh = [i for i, s in enumerate(scenarios) if s.view != "overhead"]
    over = [i for i, s in enumerate(scenarios) if s.view == "overhead"]
    if not veh:
        cap = len(over)
    else:
        cap = min(len(over), int(math.floor(overhead_mix * len(veh) / (1 - overhead_mix) + 1e-9)))
    plans = []
    for _ in range(epochs):
        chosen = veh + [over[j] for j in sorted(rng.permutation(len(over))[:cap])]
        plans.append([chosen[j] for j in rng.permutation(len(chosen))])
    return plans


@dataclass(eq=False)
class FitResult:
    log: TrainLog
    best_state: dict
    best_epoch: int
    best_score: float | None


def fit(
    model: CaptionModel,
    tok: Tokenizer,
    extractor,
    train: Sequence[Scenario],
    cfg: TrainConfig,
    valid: Sequence[Scenario] = (),
    on_epoch: Callable[[int, CaptionModel], None] | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` (or ``cfg.max_steps``) and keep the best-validation state.

    Validation runs greedy generation on zero-offset windows and ranks epochs
    by the mean of the two targets' challenge scores.  Without a validation
    split the final state is returned.
    """
    from .inference import evaluate_model

    train = list(train)
    if not train:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    plans = epoch_plan(train, cfg.epochs, cfg.overhead_mix, rng)
    total = sum(len(p) for p in plans)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    trainer = Trainer(model, tok, extractor, cfg, total_steps=total)
    trainer.rng = rng
    out = TrainLog()
    best_state = None
    best_score = None
    best_epoch = -1
    if not valid:
        log.warning("no validation scenarios; the last checkpoint is kept as best")

    for epoch, order in enumerate(plans):
        for idx in order:
            if trainer.step >= total:
                break
            lr = lr_schedule(trainer.step + 1, total, cfg)
            lv, lp, lt = trainer.multitask_step(train[idx])
            out.add(kind="step", step=trainer.step, epoch=epoch, scenario=train[idx].id,
                    loss_vehicle=lv, loss_pedestrian=lp, loss=lt, lr=lr)
        last = trainer.step >= total or epoch == len(plans) - 1
        if valid and ((epoch + 1) % cfg.eval_every == 0 or last):
            rv, rp, score = evaluate_model(model, tok, extractor, valid, seed=cfg.seed, mid_fps=cfg.mid_fps)
            out.add(kind="epoch", epoch=epoch, step=trainer.step, vehicle=rv.to_dict(), pedestrian=rp.to_dict(), score=score)
            if best_score is None or score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(epoch, model)
        if trainer.step >= total:
            break
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
        best_epoch = epoch
    return FitResult(out, best_state, best_epoch, best_score)


def reports_from_log(rec: dict) -> tuple[MetricReport, MetricReport]:
    return MetricReport.from_dict(rec["vehicle"]), MetricReport.from_dict(rec["pedestrian"])
