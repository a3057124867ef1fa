import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecap_kit.codec import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    PhaseCaption,
    Tokenizer,
    build_vocabulary,
    decode_sequence,
    dequantize_token,
    encode_target_sequence,
    quantize_boundaries,
    quantize_boundary,
)
from densecap_kit.geometry import TrimWindow

WORDS = [f"w{i}" for i in range(40)] + [".", ","]
TOK = Tokenizer(WORDS, 100)


def test_build_vocabulary_layout():
    tok = build_vocabulary(["a cat.", "a dog"], 100)
    assert tok.words == ["a", "cat", ".", "dog"]
    assert tok.vocab_size == 4 + 4 + 100
    assert tok.time_id(0) == 8 and tok.time_id(99) == 107


def test_build_vocabulary_deterministic_and_unk():
    a = build_vocabulary(["the car stops", "a car"])
    assert a == build_vocabulary(["the car stops", "a car"])
    assert a.encode_words("the zebra") == [a.word_to_id["the"], UNK_ID]


def test_tokenizer_json_round_trip(tmp_path):
    p = tmp_path / "tok.json"
    TOK.save(p)
    assert Tokenizer.load(p) == TOK


def test_quantize_zero_and_clamp():
    w = TrimWindow(100, 400)
    assert quantize_boundaries([(100, 400)], w, 100) == [(0, 99)]


def test_quantize_hand_value():
    # 12.4 s into a 62 s window at 30 fps -> 372 / 1860 frames
    assert quantize_boundaries([(372, 372)], TrimWindow(0, 1860), 100) == [(20, 20)]


def test_quantize_rejects_outside_window():
    with pytest.raises(ValueError):
        quantize_boundaries([(5, 50)], TrimWindow(10, 60), 100)


def test_quantize_monotone_in_range_and_resolution():
    for D in (1, 7, 99, 100, 101, 630, 1860, 10_000):
        prev = 0
        for b in range(D + 1):
            t = quantize_boundary(b, D, 100)
            assert 0 <= t <= 99 and t >= prev
            assert abs(dequantize_token(t, D, 100) - b) <= D / 100 + 1e-9
            prev = t


def test_encode_layout():
    tok = build_vocabulary(["a cat"], 100)
    seq = encode_target_sequence(["a cat"], [(0, 5)], tok, 1024)
    assert seq.ids == (BOS_ID, tok.time_id(0), tok.time_id(5), tok.word_to_id["a"], tok.word_to_id["cat"], EOS_ID)


def test_encode_empty():
    assert encode_target_sequence([], [], TOK).ids == (BOS_ID, EOS_ID)


def test_encode_truncates_with_eos():
    seq = encode_target_sequence([" ".join(WORDS)] * 3, [(0, 1), (2, 3), (4, 5)], TOK, 20)
    assert len(seq) == 20 and seq.ids[-1] == EOS_ID


def test_encode_length_mismatch():
    with pytest.raises(ValueError):
        encode_target_sequence(["w1"], [(0, 1), (2, 3)], TOK)


def test_decode_missing_end_token():
    ids = [BOS_ID, TOK.time_id(3), TOK.word_to_id["w1"], EOS_ID]
    caps, warns = decode_sequence(ids, TOK)
    assert caps.entries == (PhaseCaption(3, 3, "w1"),)
    assert warns == ["missing-end-token"]


def test_decode_leading_text():
    w = TOK.word_to_id
    ids = [BOS_ID, w["w1"], w["w2"], TOK.time_id(1), TOK.time_id(2), w["w3"], EOS_ID]
    caps, warns = decode_sequence(ids, TOK)
    assert caps.entries == (PhaseCaption(1, 2, "w3"),)
    assert warns == ["leading-text"]


def test_decode_missing_eos_and_unk():
    ids = [BOS_ID, TOK.time_id(1), TOK.time_id(2), UNK_ID]
    caps, warns = decode_sequence(ids, TOK)
    assert caps.captions() == ["<unk>"]
    assert warns == ["missing-eos"]


def test_decode_out_of_order_sorted():
    w = TOK.word_to_id
    ids = [BOS_ID, TOK.time_id(5), TOK.time_id(6), w["w1"], TOK.time_id(1), TOK.time_id(2), w["w2"], EOS_ID]
    caps, warns = decode_sequence(ids, TOK)
    assert caps.time_pairs() == [(1, 2), (5, 6)]
    assert "out-of-order" in warns


def _random_case(r: random.Random):
    P = r.randint(0, 8)
    caps = [" ".join(r.choice(WORDS) for _ in range(r.randint(0, 12))) for _ in range(P)]
    starts = sorted(r.randint(0, 99) for _ in range(P))
    pairs = [(s, r.randint(s, 99)) for s in starts]
    return caps, pairs


def test_round_trip_randomized():
    r = random.Random(0)
    for _ in range(2000):
        caps, pairs = _random_case(r)
        seq = encode_target_sequence(caps, pairs, TOK)
        out, warns = decode_sequence(seq, TOK)
        assert warns == []
        assert out.captions() == caps and out.time_pairs() == pairs


@settings(max_examples=500)
@given(st.lists(st.integers(0, TOK.vocab_size - 1), max_size=60))
def test_decode_never_raises(ids):
    caps, warns = decode_sequence(ids, TOK)
    assert all(0 <= e.start < 100 and 0 <= e.end < 100 for e in caps.entries)
    starts = [e.start for e in caps.entries]
    assert starts == sorted(starts)


@given(st.lists(st.integers(-5, TOK.vocab_size + 5), max_size=30))
def test_decode_tolerates_invalid_ids(ids):
    decode_sequence(ids, TOK)


def test_render_round_trip():
    seq = encode_target_sequence(["w1 w2 ."], [(3, 7)], TOK)
    text = TOK.render(seq.ids)
    assert text == "<bos> <time_3> <time_7> w1 w2 . <eos>"
    assert TOK.parse_rendered(text) == list(seq.ids)
