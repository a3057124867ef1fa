"""Caption generation for scenarios, checkpoint ensembles and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .codec import PhaseCaptionList, Tokenizer, decode_sequence
from .features import build_sample_features
from .metrics import MetricReport, evaluate_run
from .model import TARGETS, CaptionModel, GenerationResult, ensemble_select
from .scenario import Scenario
from .training import inference_window


@dataclass(eq=False)
class Prediction:
    captions: PhaseCaptionList
    result: GenerationResult
    warnings: list[str]


def predict_scenario(
    model: CaptionModel,
    tok: Tokenizer,
    extractor,
    scenario: Scenario,
    seed: int = 0,
    strategy: str = "greedy",
    beam_width: int = 1,
    mid_fps: float = 3.0,
    L_max: int | None = None,
) -> dict[str, Prediction]:
    """Generate both targets' captions on the zero-offset window of ``scenario``."""
    rng = np.random.default_rng([seed, int.from_bytes(scenario.id.encode()[:8].ljust(8, b"\0"), "little")])
    model.eval()
    feats = build_sample_features(
        extractor, scenario, inference_window(scenario), model.cfg.streams, model.placeholder_bank(), rng,
        F=model.cfg.F, mid_fps=mid_fps,
    )
    out = {}
    with torch.no_grad():
        mem = model.encode_visual(feats)
        for t in TARGETS:
            res = model.generate(model.attach_condition(mem, t), strategy, beam_width, L_max)
            caps, warns = decode_sequence(res.tokens, tok)
            out[t] = Prediction(caps, res, warns)
    return out


def predict_split(models: Sequence[CaptionModel], tok: Tokenizer, extractor, scenarios: Sequence[Scenario], **kw) -> dict:
    """Prediction JSON map; with several models each target keeps the most confident generation."""
    preds = {}
    for s in scenarios:
        per_model = [predict_scenario(m, tok, extractor, s, **kw) for m in models]
        entry = {}
        for t in TARGETS:
            cands = [pm[t] for pm in per_model]
            chosen = ensemble_select([c.result for c in cands])
            pick = next(c for c in cands if c.result is chosen)
            entry[t] = pick.captions.captions()
            entry[f"{t}_confidence"] = pick.result.confidence
        preds[s.id] = entry
    return preds


def evaluate_model(model, tok, extractor, scenarios, seed: int = 0, mid_fps: float = 3.0) -> tuple[MetricReport, MetricReport, float]:
    preds = predict_split([model], tok, extractor, scenarios, seed=seed, mid_fps=mid_fps)
    return evaluate_run(preds, {s.id: s for s in scenarios})
