"""Temporal visual encoder, conditional memory and autoregressive caption decoder."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import BOS_ID, EOS_ID, Tokenizer, TokenSequence
from .errors import FormatError
from .features import LocalFeature, SampleFeatures, StreamConfig, SubGlobalFeature

CKPT_MAGIC = b"DCKM1"
TARGETS = ("vehicle", "pedestrian")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 64
    F: int = 100
    P_max: int = 8
    k: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    L_max: int = 1024
    streams: StreamConfig = field(default_factory=StreamConfig)
    shared_encoder: bool = True
    init_pos: float = 0.5

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.k < 0 or self.F < 1 or self.P_max < 1 or self.L_max < 2:
            raise ValueError("invalid model dimensions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        streams = StreamConfig(**d.pop("streams", {}))
        return cls(streams=streams, **d)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem=None, key_mask=None, causal=False, cache=None):
        # x: B x L x d, mem: B x S x d, key_mask: B x S (True = ignore)
        # cache: dict reused across incremental decoding steps
        B, L, d = x.shape
        h = self.heads
        q = self.q(x).view(B, L, h, -1).transpose(1, 2)
        if cache is not None and mem is not None and "k" in cache:
            k, v = cache["k"], cache["v"]
        else:
            src = x if mem is None else mem
            S = src.shape[1]
            k = self.k(src).view(src.shape[0], S, h, -1).transpose(1, 2)
            v = self.v(src).view(src.shape[0], S, h, -1).transpose(1, 2)
            if cache is not None:
                if mem is None and "k" in cache:
                    k = torch.cat([cache["k"], k], dim=2)
                    v = torch.cat([cache["v"], v], dim=2)
                cache["k"], cache["v"] = k, v
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(L, k.shape[2], dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        att = scores.softmax(-1) @ v
        return self.o(att.transpose(1, 2).reshape(B, L, d))


class MLP(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.fc = nn.Linear(d, d * mult)
        self.proj = nn.Linear(d * mult, d)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d, heads, mult):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = MLP(d, mult)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d, heads, mult):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads)
        self.ln3 = nn.LayerNorm(d)
        self.mlp = MLP(d, mult)

    def forward(self, x, mem, mem_mask, cache=None):
        if cache is None:
            x = x + self.self_attn(self.ln1(x), causal=True)
            x = x + self.cross_attn(self.ln2(x), mem, key_mask=mem_mask)
        else:
            # incremental step: x holds only new positions, earlier keys live in the cache
            x = x + self.self_attn(self.ln1(x), cache=cache.setdefault("self", {}))
            x = x + self.cross_attn(self.ln2(x), mem, key_mask=mem_mask, cache=cache.setdefault("cross", {}))
        return x + self.mlp(self.ln3(x))


class TemporalEncoder(nn.Module):
    """Pre-norm transformer over a frame sequence; identity when every residual branch is zero."""

    def __init__(self, d, layers, heads, mult):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(d, heads, mult) for _ in range(layers))

    def forward(self, x, key_mask=None):
        for blk in self.blocks:
            x = blk(x, key_mask)
        return x


@dataclass(eq=False)
class Memory:
    """Decoder cross-attention input: ``rows`` is 1 x R x d, ``pad_mask`` 1 x R (True = masked)."""

    rows: torch.Tensor
    pad_mask: torch.Tensor
    conditioned: bool = False
    target: str | None = None

    @property
    def num_rows(self) -> int:
        return self.rows.shape[1]


@dataclass(eq=False)
class GenerationResult:
    tokens: TokenSequence
    per_token_logprobs: list[float]

    @property
    def confidence(self) -> float:
        lp = self.per_token_logprobs
        return float(sum(lp) / len(lp)) if lp else float("-inf")


class CaptionModel(nn.Module):
    """Learnable state: positional embeddings ``q_g``/``q_l``, placeholder rows ``u``,
    conditional embeddings, temporal encoder(s) and the text decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.q_g = nn.Parameter(torch.randn(cfg.F, d) * cfg.init_pos)
        self.q_l = nn.Parameter(torch.randn(cfg.P_max, d) * cfg.init_pos)
        self.u = nn.Parameter(torch.randn(cfg.P_max, d) * 0.02)
        self.cond_vehicle = nn.Parameter(torch.randn(cfg.k, d) * 0.5)
        self.cond_pedestrian = nn.Parameter(torch.randn(cfg.k, d) * 0.5)
        self.encoder = TemporalEncoder(d, cfg.encoder_layers, cfg.heads, cfg.ff_mult)
        self.local_encoder = (
            None if cfg.shared_encoder else TemporalEncoder(d, cfg.encoder_layers, cfg.heads, cfg.ff_mult)
        )
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Parameter(torch.randn(cfg.L_max, d) * cfg.init_pos)
        self.blocks = nn.ModuleList(DecoderBlock(d, cfg.heads, cfg.ff_mult) for _ in range(cfg.decoder_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    @property
    def dtype(self):
        return self.q_g.dtype

    def _t(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=self.dtype)

    def conditional(self, target: str) -> torch.Tensor:
        if target == "vehicle":
            return self.cond_vehicle
        if target == "pedestrian":
            return self.cond_pedestrian
        raise ValueError(f"unknown target {target!r}")

    # -- encoder -----------------------------------------------------------

    def _frame_stream(self, feat: SubGlobalFeature) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._t(feat.matrix)
        if x.shape != (self.cfg.F, self.cfg.d):
            raise ValueError(f"frame stream shape {tuple(x.shape)} != ({self.cfg.F}, {self.cfg.d})")
        mask = torch.as_tensor(np.asarray(feat.pad_mask, dtype=bool))[None]
        z = self.encoder((x + self.q_g)[None], key_mask=mask)
        return z, mask

    def _local_stream(self, feat: LocalFeature) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._t(feat.matrix)
        P = x.shape[0]
        if P > self.cfg.P_max or x.shape[1] != self.cfg.d:
            raise ValueError(f"local stream shape {tuple(x.shape)} incompatible with P_max={self.cfg.P_max}, d={self.cfg.d}")
        ph = torch.as_tensor(np.asarray(feat.placeholder_mask, dtype=bool))[:, None]
        # placeholder rows are routed through the parameter so they receive gradient
        x = torch.where(ph, self.u[:P], x) + self.q_l[:P]
        x = x[None]
        if self.cfg.streams.phase_encoder:
            enc = self.local_encoder if self.local_encoder is not None else self.encoder
            x = enc(x)
        return x, torch.zeros(1, P, dtype=torch.bool)

    def encode_visual(self, feats: SampleFeatures) -> Memory:
        """Memory rows ordered ``[global?, sub-global?, local?]``; padded frame rows are masked."""
        st = self.cfg.streams
        rows, masks = [], []
        for on, feat in ((st.use_global, feats.global_), (st.use_subglobal, feats.subglobal)):
            if on:
                if feat is None:
                    raise ValueError("enabled frame stream missing from features")
                z, m = self._frame_stream(feat)
                rows.append(z)
                masks.append(m)
        if st.use_local:
            if feats.local is None:
                raise ValueError("local stream enabled but missing from features")
            z, m = self._local_stream(feats.local)
            rows.append(z)
            masks.append(m)
        return Memory(torch.cat(rows, 1), torch.cat(masks, 1))

    def attach_condition(self, memory: Memory, target: str) -> Memory:
        if memory.conditioned:
            raise ValueError("condition already attached")
        cond = self.conditional(target)
        rows = torch.cat([memory.rows, cond[None]], 1)
        mask = torch.cat([memory.pad_mask, torch.zeros(1, cond.shape[0], dtype=torch.bool)], 1)
        return Memory(rows, mask, conditioned=True, target=target)

    # -- decoder -----------------------------------------------------------

    def _decode(self, memory: Memory, ids: torch.Tensor, caches: list | None = None, offset: int = 0) -> torch.Tensor:
        B, L = ids.shape
        if offset + L > self.cfg.L_max:
            raise ValueError(f"sequence length {offset + L} exceeds L_max={self.cfg.L_max}")
        x = self.tok_emb(ids) + self.pos_emb[offset : offset + L]
        if caches is None:
            mem, mmask = memory.rows.expand(B, -1, -1), memory.pad_mask.expand(B, -1)
        else:
            # cross-attention keys stay at batch 1 and broadcast over hypotheses
            mem, mmask = memory.rows, memory.pad_mask
        for i, blk in enumerate(self.blocks):
            x = blk(x, mem, mmask, None if caches is None else caches[i])
        return self.head(self.ln_f(x))

    def _check_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(list(ids), dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError("token id out of range")
        return ids

    def decode_teacher_forced(self, memory: Memory, target: TokenSequence | Sequence[int]) -> torch.Tensor:
        """Logits ``L x V``; row ``i`` scores the token at position ``i + 1`` given ``ids[: i + 1]``."""
        ids = self._check_ids(target.ids if isinstance(target, TokenSequence) else target)
        if ids.numel() == 0 or ids[0] != BOS_ID:
            raise ValueError("target must start with BOS")
        return self._decode(memory, ids[None])[0]

    @torch.no_grad()
    def generate(self, memory: Memory, strategy: str = "greedy", beam_width: int = 1, L_max: int | None = None) -> GenerationResult:
        if not memory.conditioned:
            raise ValueError("attach a condition before generating")
        L_max = min(L_max or self.cfg.L_max, self.cfg.L_max)
        if strategy == "greedy":
            return self._greedy(memory, L_max)
        if strategy == "beam":
            return self._beam(memory, beam_width, L_max)
        raise ValueError(f"unknown strategy {strategy!r}")

    def _greedy(self, memory, L_max) -> GenerationResult:
        ids = [BOS_ID]
        lps = []
        caches = [{} for _ in self.blocks]
        while len(ids) < L_max:
            logp = self._decode(memory, torch.tensor([[ids[-1]]]), caches, len(ids) - 1)[0, -1].log_softmax(-1)
            nxt = int(logp.argmax())
            ids.append(nxt)
            lps.append(float(logp[nxt]))
            if nxt == EOS_ID:
                break
        return GenerationResult(TokenSequence(tuple(ids)), lps)

    def _beam(self, memory, width, L_max) -> GenerationResult:
        if width < 1:
            raise ValueError("beam width must be >= 1")
        alive = [([BOS_ID], [], 0.0)]
        done = []
        caches = [{} for _ in self.blocks]
        while alive:
            last = torch.tensor([[h[0][-1]] for h in alive])
            logp = self._decode(memory, last, caches, len(alive[0][0]) - 1)[:, -1].log_softmax(-1)
            cand = []
            for b, (ids, lps, score) in enumerate(alive):
                top = torch.topk(logp[b], min(width, logp.shape[-1]))
                for lp, t in zip(top.values.tolist(), top.indices.tolist()):
                    cand.append((ids + [t], lps + [lp], score + lp, b))
            cand.sort(key=lambda h: -h[2])
            alive, parents = [], []
            for h in cand:
                if h[0][-1] == EOS_ID or len(h[0]) >= L_max:
                    done.append(h[:3])
                else:
                    alive.append(h[:3])
                    parents.append(h[3])
                if len(alive) == width:
                    break
            done.sort(key=lambda h: -h[2])
            done = done[:width]
            if len(done) >= width and (not alive or done[0][2] >= alive[0][2]):
                break
            idx = torch.tensor(parents, dtype=torch.long)
            for c in caches:
                c["self"]["k"] = c["self"]["k"][idx]
                c["self"]["v"] = c["self"]["v"][idx]
        best = max(done, key=lambda h: h[2])
        return GenerationResult(TokenSequence(tuple(best[0])), best[1])

    # -- helpers -----------------------------------------------------------

    def swap_conditions(self) -> None:
        with torch.no_grad():
            tmp = self.cond_vehicle.detach().clone()
            self.cond_vehicle.copy_(self.cond_pedestrian)
            self.cond_pedestrian.copy_(tmp)

    def placeholder_bank(self):
        from .features import PlaceholderBank

        return PlaceholderBank(self.u.detach().cpu().numpy().astype(np.float64))


def ensemble_select(candidates: Sequence[GenerationResult]) -> GenerationResult:
    """Highest-confidence candidate; ties go to the earliest."""
    if not candidates:
        raise ValueError("ensemble_select needs at least one candidate")
    best = 0
    for i, c in enumerate(candidates):
        if c.confidence > candidates[best].confidence:
            best = i
    return candidates[best]


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: CaptionModel, path, tokenizer: Tokenizer | None = None, extra: dict | None = None) -> None:
    meta = {"format": 1, "model": model.cfg.to_dict()}
    if tokenizer is not None:
        meta["tokenizer"] = tokenizer.to_dict()
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.state_dict()
    parts = [CKPT_MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<I", s) for s in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[CaptionModel, Tokenizer | None, dict]:
    buf = Path(path).read_bytes()
    if buf[:5] != CKPT_MAGIC:
        raise FormatError("bad magic, expected DCKM1", path=path)
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", path=path)
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    meta = json.loads(take(u32()).decode("utf-8"))
    cfg = ModelConfig.from_dict(meta["model"])
    model = CaptionModel(cfg)
    state = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        n = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    tok = Tokenizer.from_dict(meta["tokenizer"]) if "tokenizer" in meta else None
    return model, tok, meta.get("extra", {})


def with_streams(cfg: ModelConfig, streams: StreamConfig) -> ModelConfig:
    return replace(cfg, streams=streams)
