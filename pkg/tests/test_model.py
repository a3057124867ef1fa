import math

import numpy as np
import pytest
import torch

from densecap_kit.codec import BOS_ID, EOS_ID, encode_target_sequence
from densecap_kit.features import ABLATION_CONFIGS, StreamConfig, SyntheticExtractor
from densecap_kit.model import (
    CaptionModel,
    GenerationResult,
    ModelConfig,
    ensemble_select,
    load_checkpoint,
    save_checkpoint,
    with_streams,
)
from densecap_kit.codec import TokenSequence
from densecap_kit.training import build_sample, sequence_loss


def _sample(model, tok, extractor, scen, seed=0):
    return build_sample(model, tok, extractor, scen, np.random.default_rng(seed))




def test_config_validation(tok):
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d=10, heads=4)


def test_identity_wiring(tiny_model, tok, extractor, small_set):
    m = tiny_model
    with torch.no_grad():
        for blk in m.encoder.blocks:
            blk.attn.o.weight.zero_()
            blk.attn.o.bias.zero_()
            blk.mlp.proj.weight.zero_()
            blk.mlp.proj.bias.zero_()
    smp = _sample(m, tok, extractor, small_set[0])
    mem = m.encode_visual(smp.features)
    F = m.cfg.F
    P = small_set[0].num_phases
    sub = torch.as_tensor(smp.features.subglobal.matrix, dtype=m.dtype) + m.q_g
    loc = torch.where(torch.as_tensor(smp.features.local.placeholder_mask)[:, None], m.u[:P],
                      torch.as_tensor(smp.features.local.matrix, dtype=m.dtype)) + m.q_l[:P]
    assert torch.allclose(mem.rows[0, :F], sub, atol=1e-6)
    assert torch.allclose(mem.rows[0, F:], loc, atol=1e-6)


def test_phase_encoder_toggle_changes_only_local(tok, extractor, small_set):
    torch.manual_seed(1)
    cfg = ModelConfig(vocab_size=tok.vocab_size, d=16, F=20, k=2, heads=2, encoder_layers=1, decoder_layers=1, L_max=160)
    on = CaptionModel(cfg)
    off = CaptionModel(with_streams(cfg, StreamConfig(phase_encoder=False)))
    off.load_state_dict(on.state_dict())
    smp = _sample(on, tok, extractor, small_set[1])
    a = on.encode_visual(smp.features).rows
    b = off.encode_visual(smp.features).rows
    assert torch.equal(a[0, :20], b[0, :20])
    assert not torch.allclose(a[0, 20:], b[0, 20:])


def test_pad_rows_masked(tok, extractor, small_set):
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=tok.vocab_size, d=16, F=100, k=2, heads=2, L_max=160)
    m = CaptionModel(cfg).eval()
    scen = small_set[0]
    smp = _sample(m, tok, extractor, scen)
    pad = smp.features.subglobal.pad_mask
    assert pad.any()
    base = m.encode_visual(smp.features)
    logits = m.decode_teacher_forced(m.attach_condition(base, "vehicle"), smp.targets["vehicle"])
    rng = np.random.default_rng(0)
    for _ in range(5):
        smp.features.subglobal.matrix[pad] += rng.normal(0, 5, smp.features.subglobal.matrix[pad].shape)
        mem = m.encode_visual(smp.features)
        keep = ~mem.pad_mask[0]
        assert torch.allclose(mem.rows[0, keep], base.rows[0, keep], atol=1e-6)
        out = m.decode_teacher_forced(m.attach_condition(mem, "vehicle"), smp.targets["vehicle"])
        assert torch.allclose(out, logits, atol=1e-6)


def test_condition_differs_only_in_last_k_rows(tiny_model, tok, extractor, small_set):
    m = tiny_model
    mem = m.encode_visual(_sample(m, tok, extractor, small_set[0]).features)
    v = m.attach_condition(mem, "vehicle").rows[0]
    p = m.attach_condition(mem, "pedestrian").rows[0]
    k = m.cfg.k
    assert torch.equal(v[:-k], p[:-k]) and torch.equal(v[:-k], mem.rows[0])
    assert (v[-k:] != p[-k:]).all()


def test_k_zero_leaves_memory_unchanged(tok, extractor, small_set):
    cfg = ModelConfig(vocab_size=tok.vocab_size, d=16, F=20, k=0, heads=2, encoder_layers=1, decoder_layers=1, L_max=160)
    m = CaptionModel(cfg)
    mem = m.encode_visual(_sample(m, tok, extractor, small_set[0]).features)
    assert torch.equal(m.attach_condition(mem, "vehicle").rows, mem.rows)


def test_attach_twice_errors(tiny_model, tok, extractor, small_set):
    m = tiny_model
    mem = m.attach_condition(m.encode_visual(_sample(m, tok, extractor, small_set[0]).features), "vehicle")
    with pytest.raises(ValueError, match="condition already attached"):
        m.attach_condition(mem, "pedestrian")


def test_causality(tiny_model, tok, extractor, small_set):
    m = tiny_model.eval()
    smp = _sample(m, tok, extractor, small_set[0])
    mem = m.attach_condition(m.encode_visual(smp.features), "pedestrian")
    ids = list(smp.targets["pedestrian"].ids)
    base = m.decode_teacher_forced(mem, ids)
    rng = np.random.default_rng(0)
    for i in (1, 5, len(ids) // 2, len(ids) - 2):
        changed = ids[: i + 1] + rng.integers(4, tok.vocab_size, len(ids) - i - 1).tolist()
        out = m.decode_teacher_forced(mem, changed)
        assert torch.equal(out[: i + 1], base[: i + 1])


def test_teacher_forced_deterministic_and_checks(tiny_model, tok, extractor, small_set):
    m = tiny_model.eval()
    smp = _sample(m, tok, extractor, small_set[0])
    mem = m.attach_condition(m.encode_visual(smp.features), "vehicle")
    a = m.decode_teacher_forced(mem, smp.targets["vehicle"])
    assert torch.equal(a, m.decode_teacher_forced(mem, smp.targets["vehicle"]))
    assert a.shape == (len(smp.targets["vehicle"]), tok.vocab_size)
    with pytest.raises(ValueError):
        m.decode_teacher_forced(mem, [BOS_ID, tok.vocab_size])
    with pytest.raises(ValueError):
        m.decode_teacher_forced(mem, [EOS_ID, 5])


def test_fresh_model_loss_near_uniform(tok, extractor, small_set):
    torch.manual_seed(0)
    m = CaptionModel(ModelConfig(vocab_size=tok.vocab_size, d=32, F=40, heads=4, L_max=200)).eval()
    expected = math.log(tok.vocab_size)
    for scen in small_set:
        smp = _sample(m, tok, SyntheticExtractor(32), scen)
        mem = m.encode_visual(smp.features)
        for t in ("vehicle", "pedestrian"):
            loss = float(sequence_loss(m.decode_teacher_forced(m.attach_condition(mem, t), smp.targets[t]), smp.targets[t]).detach())
            assert abs(loss - expected) / expected < 0.05


def test_generation_contract(tiny_model, tok, extractor, small_set):
    m = tiny_model.eval()
    mem = m.attach_condition(m.encode_visual(_sample(m, tok, extractor, small_set[0]).features), "vehicle")
    res = m.generate(mem, "greedy", L_max=30)
    ids = res.tokens.ids
    assert ids[0] == BOS_ID
    assert ids[-1] == EOS_ID or len(ids) == 30
    assert all(0 <= i < tok.vocab_size for i in ids)
    assert len(res.per_token_logprobs) == len(ids) - 1
    assert res.confidence == pytest.approx(np.mean(res.per_token_logprobs))
    assert m.generate(mem, "greedy", L_max=30).tokens == res.tokens


def test_beam_one_equals_greedy(tiny_model, tok, extractor, small_set):
    m = tiny_model.eval()
    for scen in small_set[:3]:
        mem = m.attach_condition(m.encode_visual(_sample(m, tok, extractor, scen).features), "pedestrian")
        g = m.generate(mem, "greedy", L_max=25)
        b = m.generate(mem, "beam", beam_width=1, L_max=25)
        assert g.tokens == b.tokens
        assert b.per_token_logprobs == pytest.approx(g.per_token_logprobs)


def test_beam_score_not_worse_than_greedy(tiny_model, tok, extractor, small_set):
    m = tiny_model.eval()
    mem = m.attach_condition(m.encode_visual(_sample(m, tok, extractor, small_set[2]).features), "vehicle")
    g = m.generate(mem, "greedy", L_max=12)
    b = m.generate(mem, "beam", beam_width=4, L_max=12)
    assert sum(b.per_token_logprobs) >= sum(g.per_token_logprobs) - 1e-9


def test_generate_requires_condition(tiny_model, tok, extractor, small_set):
    m = tiny_model
    with pytest.raises(ValueError):
        m.generate(m.encode_visual(_sample(m, tok, extractor, small_set[0]).features))


def _res(conf):
    return GenerationResult(TokenSequence((BOS_ID, EOS_ID)), [conf])


def test_ensemble_select():
    one = _res(-3.0)
    assert ensemble_select([one]) is one
    cands = [_res(-1.2), _res(-0.4), _res(-0.9)]
    assert ensemble_select(cands) is cands[1]
    tied = [_res(-0.5), _res(-0.5)]
    assert ensemble_select(tied) is tied[0]
    with pytest.raises(ValueError):
        ensemble_select([])


def test_checkpoint_round_trip(tmp_path, tiny_model, tok):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p, tok, extra={"epoch": 3})
    assert p.read_bytes()[:5] == b"DCKM1"
    m2, tok2, extra = load_checkpoint(p)
    assert tok2 == tok and extra == {"epoch": 3} and m2.cfg == tiny_model.cfg
    for (n1, a), (n2, b) in zip(tiny_model.state_dict().items(), m2.state_dict().items()):
        assert n1 == n2 and torch.equal(a.float(), b)


def test_every_ablation_config_runs(tok, extractor, small_set):
    for streams in ABLATION_CONFIGS:
        cfg = ModelConfig(vocab_size=tok.vocab_size, d=16, F=20, k=2, heads=2, encoder_layers=1,
                          decoder_layers=1, L_max=160, streams=streams)
        m = CaptionModel(cfg)
        smp = _sample(m, tok, extractor, small_set[0])
        mem = m.encode_visual(smp.features)
        expect = 20 * (streams.use_global + streams.use_subglobal) + small_set[0].num_phases * streams.use_local
        assert mem.num_rows == expect
        assert torch.isfinite(m.decode_teacher_forced(m.attach_condition(mem, "vehicle"), smp.targets["vehicle"])).all()
