"""Caption metrics (BLEU-4, ROUGE-L, METEOR, CIDEr-D) and the challenge score.

Sentences are lowercased and split into alphanumeric word tokens;
punctuation is dropped before scoring.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

from nltk.stem.porter import PorterStemmer

from . import kernels
from .codec import PhaseCaptionList
from .errors import ValidationError

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)
_stemmer = PorterStemmer()


def metric_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=65536)
def _stem(word: str) -> str:
    return _stemmer.stem(word)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


# ---------------------------------------------------------------------------
# BLEU


def bleu_precisions(candidates: Sequence[str], references: Sequence[str], max_n: int = 4):
    """Corpus-pooled clipped n-gram precisions as ``(matches, totals)`` lists, plus (c, r) lengths."""
    _check_pairs(candidates, references)
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = metric_tokens(cand), metric_tokens(ref)
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(ct, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            totals[n - 1] += max(len(ct) - n + 1, 0)
    return matches, totals, c_len, r_len


def bleu4(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU-4 without smoothing; zero whenever any n-gram precision is zero."""
    matches, totals, c, r = bleu_precisions(candidates, references, 4)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L


def _ids(*token_lists):
    table: dict[str, int] = {}
    return [[table.setdefault(w, len(table)) for w in toks] for toks in token_lists]


def rouge_l(candidate: str, references: Sequence[str], beta: float = 1.2) -> float:
    """Sentence ROUGE-L F-measure, maximised over references; empty references are skipped."""
    ct = metric_tokens(candidate)
    if not ct:
        return 0.0
    best = 0.0
    for ref in references:
        rt = metric_tokens(ref)
        if not rt:
            log.warning("rouge_l: skipping empty reference")
            continue
        a, b = _ids(ct, rt)
        lcs = kernels.lcs_length(a, b)
        if lcs == 0:
            continue
        p, r = lcs / len(ct), lcs / len(rt)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


def corpus_rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_pairs(candidates, references)
    return sum(rouge_l(c, [r]) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# METEOR


def meteor_stats(candidate: str, reference: str) -> tuple[int, int, int, int]:
    """``(matches, chunks, |cand|, |ref|)`` after exact then stem alignment."""
    ct, rt = metric_tokens(candidate), metric_tokens(reference)
    cid, rid = _ids(ct, rt)
    cs, rs = _ids([_stem(w) for w in ct], [_stem(w) for w in rt])
    m, chunks = kernels.meteor_align(cid, rid, cs, rs)
    return m, chunks, len(ct), len(rt)


def meteor(candidate: str, reference: str) -> float:
    m, chunks, lc, lr = meteor_stats(candidate, reference)
    if m == 0:
        return 0.0
    p, r = m / lc, m / lr
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1 - penalty)


def corpus_meteor(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_pairs(candidates, references)
    return sum(meteor(c, r) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# CIDEr-D


def cider_scores(candidates: Sequence[str], references: Sequence[str], sigma: float = 6.0, n: int = 4) -> list[float]:
    """Per-sample CIDEr-D on the [0, 10] scale; document frequencies from ``references``."""
    _check_pairs(candidates, references)
    N = len(references)
    ref_toks = [metric_tokens(r) for r in references]
    ref_grams = [[_ngrams(t, k) for k in range(1, n + 1)] for t in ref_toks]
    uniform_idf = N < 2
    if uniform_idf:
        log.warning("cider: corpus of size %d, document frequencies default to 1", N)
    df: Counter = Counter()
    for grams in ref_grams:
        for counts in grams:
            df.update(counts.keys())
    log_n = math.log(N) if not uniform_idf else 0.0

    def vec(counts: Counter):
        out = {}
        for g, tf in counts.items():
            idf = 1.0 if uniform_idf else log_n - math.log(max(1.0, df[g]))
            out[g] = tf * idf
        return out

    scores = []
    for cand, rt, rgrams in zip(candidates, ref_toks, ref_grams):
        ct = metric_tokens(cand)
        delta = len(ct) - len(rt)
        penalty = math.exp(-(delta**2) / (2 * sigma**2))
        total = 0.0
        for k in range(n):
            vc = vec(_ngrams(ct, k + 1))
            vr = vec(rgrams[k])
            norm_c = math.sqrt(sum(v * v for v in vc.values()))
            norm_r = math.sqrt(sum(v * v for v in vr.values()))
            if norm_c == 0 or norm_r == 0:
                continue
            dot = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
            total += dot / (norm_c * norm_r) * penalty
        scores.append(10.0 * total / n)
    return scores


def cider(candidates: Sequence[str], references: Sequence[str]) -> float:
    s = cider_scores(candidates, references)
    return sum(s) / len(s)


# ---------------------------------------------------------------------------
# Reports and scoring


def target_score(bleu: float, meteor_: float, rouge: float, cider_: float) -> float:
    return 0.25 * (100 * (bleu + meteor_ + rouge) + 10 * cider_)


@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float
    per_phase: list[dict] = field(default_factory=list)

    @property
    def score(self) -> float:
        return target_score(self.bleu4, self.meteor, self.rouge_l, self.cider)

    def to_dict(self, with_phases: bool = False) -> dict:
        d = {"bleu4": self.bleu4, "rouge_l": self.rouge_l, "meteor": self.meteor, "cider": self.cider, "score": self.score}
        if with_phases:
            d["per_phase"] = self.per_phase
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        try:
            return cls(float(d["bleu4"]), float(d["rouge_l"]), float(d["meteor"]), float(d["cider"]))
        except KeyError as exc:
            raise ValidationError([f"{exc.args[0]} missing"], context="metric report") from None


def challenge_score(vehicle: MetricReport, pedestrian: MetricReport) -> float:
    """Mean over the two targets of ``(100 * (B + M + R) + 10 * C) / 4``."""
    return (vehicle.score + pedestrian.score) / 2


def score_corpus(candidates: Sequence[str], references: Sequence[str], keys: Sequence | None = None) -> MetricReport:
    cands = list(candidates)
    refs = list(references)
    ciders = cider_scores(cands, refs)
    rouges = [rouge_l(c, [r]) for c, r in zip(cands, refs)]
    meteors = [meteor(c, r) for c, r in zip(cands, refs)]
    keys = list(keys) if keys is not None else list(range(len(cands)))
    per_phase = [
        {"key": k, "rouge_l": ro, "meteor": me, "cider": ci} for k, ro, me, ci in zip(keys, rouges, meteors, ciders)
    ]
    return MetricReport(
        bleu4=bleu4(cands, refs),
        rouge_l=sum(rouges) / len(rouges),
        meteor=sum(meteors) / len(meteors),
        cider=sum(ciders) / len(ciders),
        per_phase=per_phase,
    )


@dataclass
class EvalPair:
    scenario_id: str
    target: str
    prediction: PhaseCaptionList | list[str]
    reference: list[str]

    def aligned(self) -> list[str]:
        """Predicted captions aligned to reference phases by index; missing phases are ''."""
        preds = self.prediction.captions() if isinstance(self.prediction, PhaseCaptionList) else list(self.prediction)
        preds = preds[: len(self.reference)]
        return preds + [""] * (len(self.reference) - len(preds))


def evaluate_run(predictions: Mapping[str, Mapping[str, Sequence[str]]], groundtruth) -> tuple[MetricReport, MetricReport, float]:
    """Score a prediction map ``{scenario_id: {"vehicle": [...], "pedestrian": [...]}}``.

    Captions are pooled across scenarios and phases per target.  Unknown
    scenario ids raise ValidationError; ground-truth scenarios absent from
    the predictions are scored with empty captions.
    """
    gt = groundtruth.by_id() if hasattr(groundtruth, "by_id") else dict(groundtruth)
    unknown = sorted(set(predictions) - set(gt))
    if unknown:
        raise ValidationError([f"predictions[{sid}] unknown scenario id" for sid in unknown])
    missing = [sid for sid in gt if sid not in predictions]
    if missing:
        log.warning("%d ground-truth scenarios have no predictions; scoring them as empty", len(missing))
    reports = []
    for target in ("vehicle", "pedestrian"):
        cands, refs, keys = [], [], []
        for sid, scen in gt.items():
            pred = predictions.get(sid, {}).get(target, [])
            pair = EvalPair(sid, target, pred, scen.captions(target))
            for i, (c, r) in enumerate(zip(pair.aligned(), pair.reference)):
                cands.append(c)
                refs.append(r)
                keys.append(f"{sid}/{i}")
        if not cands:
            raise ValidationError(["groundtruth has no phases"])
        reports.append(score_corpus(cands, refs, keys))
    return reports[0], reports[1], challenge_score(reports[0], reports[1])
