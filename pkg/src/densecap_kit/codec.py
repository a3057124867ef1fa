"""Time-token vocabulary and the single-sequence caption codec.

A target sequence for ``P`` phases is::

    [BOS, <time_s1>, <time_e1>, w, w, ..., <time_s2>, <time_e2>, w, ..., EOS]

where the time tokens are boundaries quantized relative to the trim window.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError
from .geometry import TrimWindow

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)
UNK_WORD = "<unk>"
DEFAULT_L_MAX = 1024

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_TIME_RE = re.compile(r"<time_(\d+)>")


def tokenize_words(text: str) -> list[str]:
    """Lowercase and split into word and single-punctuation tokens."""
    return _WORD_RE.findall(text.lower())


def normalize_caption(text: str) -> str:
    return " ".join(tokenize_words(text))


class Tokenizer:
    """Word-level tokenizer with ``N`` appended time tokens.

    Id layout: specials ``0..3``, words ``4..4+V-1``, then ``<time_0>..<time_{N-1}>``.
    """

    def __init__(self, words: Sequence[str], n_time_tokens: int = 100):
        if n_time_tokens < 1:
            raise ValueError("n_time_tokens must be >= 1")
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.N = n_time_tokens
        self.word_to_id = {w: len(SPECIALS) + i for i, w in enumerate(self.words)}
        self.time_token_base = len(SPECIALS) + len(self.words)

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.words == other.words and self.N == other.N

    def __len__(self) -> int:
        return self.vocab_size

    @property
    def vocab_size(self) -> int:
        return self.time_token_base + self.N

    def time_id(self, k: int) -> int:
        if not 0 <= k < self.N:
            raise ValueError(f"time token index {k} outside [0, {self.N - 1}]")
        return self.time_token_base + k

    def is_time(self, i: int) -> bool:
        return self.time_token_base <= i < self.vocab_size

    def time_index(self, i: int) -> int:
        return i - self.time_token_base

    def encode_words(self, text: str) -> list[int]:
        return [self.word_to_id.get(w, UNK_ID) for w in tokenize_words(text)]

    def token_str(self, i: int) -> str:
        if 0 <= i < len(SPECIALS):
            return SPECIALS[i]
        if i < self.time_token_base:
            return self.words[i - len(SPECIALS)]
        if i < self.vocab_size:
            return f"<time_{i - self.time_token_base}>"
        raise ValueError(f"token id {i} out of range")

    def render(self, ids: Iterable[int]) -> str:
        """Human-readable dump, e.g. ``<bos> <time_0> <time_5> a cat <eos>``."""
        return " ".join(self.token_str(i) for i in ids)

    def parse_rendered(self, text: str) -> list[int]:
        out = []
        for tok in text.split():
            m = _TIME_RE.fullmatch(tok)
            if m:
                out.append(self.time_id(int(m.group(1))))
            elif tok in SPECIALS:
                out.append(SPECIALS.index(tok))
            else:
                out.append(self.word_to_id.get(tok, UNK_ID))
        return out

    def to_dict(self) -> dict:
        return {
            "words": {w: i for w, i in self.word_to_id.items()},
            "specials": {s: i for i, s in enumerate(SPECIALS)},
            "n_time_tokens": self.N,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        try:
            words = sorted(d["words"].items(), key=lambda kv: kv[1])
            n = int(d["n_time_tokens"])
            specials = d.get("specials", {})
        except (KeyError, AttributeError, TypeError, ValueError) as exc:
            raise FormatError(f"bad tokenizer file: {exc}") from exc
        if any(specials.get(s, i) != i for i, s in enumerate(SPECIALS)):
            raise FormatError("special token ids do not match the expected layout", field="specials")
        ids = [i for _, i in words]
        if ids != list(range(len(SPECIALS), len(SPECIALS) + len(ids))):
            raise FormatError("word ids are not dense", field="words")
        return cls([w for w, _ in words], n)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, path=path, line=exc.lineno) from exc
        return cls.from_dict(d)


def build_vocabulary(corpus: Sequence[str], N: int = 100) -> Tokenizer:
    """Word vocabulary over ``corpus`` with ids assigned by first occurrence."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    seen: dict[str, None] = {}
    for text in corpus:
        for w in tokenize_words(text):
            seen.setdefault(w, None)
    return Tokenizer(list(seen), N)


def quantize_boundary(b: int, D: int, N: int) -> int:
    return min((b * N) // D, N - 1)


def dequantize_token(t: int, D: int, N: int) -> float:
    """Window-relative midpoint of the bin covered by time token ``t``."""
    return (t + 0.5) * D / N


def quantize_boundaries(
    boundaries: Sequence[tuple[int, int]], window: TrimWindow, N: int = 100
) -> list[tuple[int, int]]:
    """Shift boundaries to the window start and rescale to integer tokens in ``[0, N-1]``.

    ``token = floor(b * N / D)``, with ``b == D`` clamped to ``N - 1``.
    """
    D = window.duration
    if D <= 0:
        raise ValueError("window duration must be positive")
    out = []
    for i, (st, ed) in enumerate(boundaries):
        a, b = st - window.start_n, ed - window.start_n
        if not (0 <= a <= D and 0 <= b <= D):
            raise ValueError(f"phase {i} ({st}, {ed}) lies outside window ({window.start_n}, {window.end_n})")
        out.append((quantize_boundary(a, D, N), quantize_boundary(b, D, N)))
    return out


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PhaseCaption:
    start: int
    end: int
    caption: str


@dataclass(frozen=True)
class PhaseCaptionList:
    entries: tuple[PhaseCaption, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def captions(self) -> list[str]:
        return [e.caption for e in self.entries]

    def time_pairs(self) -> list[tuple[int, int]]:
        return [(e.start, e.end) for e in self.entries]

    def to_list(self) -> list[dict]:
        return [{"start": e.start, "end": e.end, "caption": e.caption} for e in self.entries]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "PhaseCaptionList":
        return cls(tuple(PhaseCaption(int(d["start"]), int(d["end"]), str(d["caption"])) for d in items))


def encode_target_sequence(
    captions: Sequence[str],
    time_pairs: Sequence[tuple[int, int]],
    tok: Tokenizer,
    L_max: int = DEFAULT_L_MAX,
) -> TokenSequence:
    if len(captions) != len(time_pairs):
        raise ValueError(f"{len(captions)} captions but {len(time_pairs)} time pairs")
    if L_max < 2:
        raise ValueError("L_max must be >= 2")
    starts = [p[0] for p in time_pairs]
    if starts != sorted(starts):
        raise ValueError("time pairs must be sorted by start")
    ids = [BOS_ID]
    for cap, (st, ed) in zip(captions, time_pairs):
        ids += [tok.time_id(st), tok.time_id(ed)]
        ids += tok.encode_words(cap)
    ids.append(EOS_ID)
    if len(ids) > L_max:
        ids = ids[: L_max - 1] + [EOS_ID]
    return TokenSequence(tuple(ids))


def decode_sequence(seq: TokenSequence | Sequence[int], tok: Tokenizer) -> tuple[PhaseCaptionList, list[str]]:
    """Recover (start, end, caption) triples from a generated sequence.

    Never raises on in-vocabulary ids.  Recovery rules, each reported once in
    the returned warnings: a lone time token is both start and end
    (``missing-end-token``), words before the first time token are dropped
    (``leading-text``), a missing EOS is tolerated (``missing-eos``),
    out-of-order phases are stably sorted (``out-of-order``).  Ids outside
    the vocabulary are skipped (``invalid-id``).
    """
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    warnings: list[str] = []

    def warn(w):
        if w not in warnings:
            warnings.append(w)

    pos = 0
    if ids and ids[0] == BOS_ID:
        pos = 1
    body = []
    saw_eos = False
    for i in ids[pos:]:
        if i == EOS_ID:
            saw_eos = True
            break
        if not 0 <= i < tok.vocab_size:
            warn("invalid-id")
            continue
        if i in (PAD_ID, BOS_ID):
            if i == BOS_ID:
                warn("stray-special")
            continue
        body.append(i)
    if not saw_eos:
        warn("missing-eos")

    entries: list[list] = []
    k = 0
    n = len(body)
    while k < n and not tok.is_time(body[k]):
        k += 1
    if k > 0:
        warn("leading-text")
    while k < n:
        st = tok.time_index(body[k])
        k += 1
        if k < n and tok.is_time(body[k]):
            ed = tok.time_index(body[k])
            k += 1
        else:
            ed = st
            warn("missing-end-token")
        words = []
        while k < n and not tok.is_time(body[k]):
            i = body[k]
            words.append(UNK_WORD if i == UNK_ID else tok.token_str(i))
            k += 1
        entries.append(PhaseCaption(st, ed, " ".join(words)))

    if any(entries[j].start > entries[j + 1].start for j in range(len(entries) - 1)):
        warn("out-of-order")
        entries = sorted(entries, key=lambda e: e.start)
    return PhaseCaptionList(tuple(entries)), warnings
