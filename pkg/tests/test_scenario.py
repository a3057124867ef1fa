import json

import pytest

from densecap_kit.errors import FormatError, ValidationError
from densecap_kit.scenario import (
    BBox,
    Phase,
    Scenario,
    ScenarioSet,
    dumps_scenario_set,
    generate_synthetic_dataset,
    load_scenario_set,
    render_captions,
    save_scenario_set,
    scenario_to_dict,
    scenarios_with_missing_boxes,
    validate_scenario,
)
from densecap_kit.codec import build_vocabulary
from densecap_kit.scenario import caption_corpus


def _scenario(**kw):
    base = dict(
        id="s",
        duration_frames=100,
        phases=(Phase(0, 10, "a", "b"), Phase(10, 30, "c", "d")),
        bbox_track=((5, BBox(0, 10, 0, 20)),),
    )
    base.update(kw)
    return Scenario(**base)


def test_generate_count_ids_and_phase_range(small_set):
    assert len(small_set) == 8
    assert [s.id for s in small_set] == [f"syn-{i:04d}" for i in range(8)]
    assert all(4 <= s.num_phases <= 5 for s in small_set)


def test_generate_is_byte_deterministic():
    a = generate_synthetic_dataset(7, 8, (4, 5), (480, 640))
    b = generate_synthetic_dataset(7, 8, (4, 5), (480, 640))
    assert dumps_scenario_set(a) == dumps_scenario_set(b)
    assert dumps_scenario_set(a) != dumps_scenario_set(generate_synthetic_dataset(8, 8))


def test_seed7_has_phase_without_boxes():
    ss = generate_synthetic_dataset(7, 64, (4, 5), (480, 640))
    assert scenarios_with_missing_boxes(ss)


def test_generated_scenarios_valid_and_captions_reconstructible():
    ss = generate_synthetic_dataset(3, 32, (2, 8), (64, 64))
    for s in ss:
        assert validate_scenario(s) == []
        assert render_captions(s.latents) == [(p.vehicle_caption, p.pedestrian_caption) for p in s.phases]


def test_vocabulary_is_small():
    ss = generate_synthetic_dataset(0, 200, (2, 8))
    assert len(build_vocabulary(caption_corpus(ss)).words) <= 200


@pytest.mark.parametrize(
    "kw",
    [dict(phase_range=(1, 4)), dict(phase_range=(3, 9)), dict(phase_range=(5, 4)), dict(frame_dims=(32, 640)), dict(count=0)],
)
def test_generate_rejects_bad_arguments(kw):
    args = dict(seed=0, count=2, phase_range=(2, 3), frame_dims=(480, 640))
    args.update(kw)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(**args)


def test_round_trip(tmp_path, small_set):
    p = tmp_path / "set.json"
    save_scenario_set(small_set, p)
    assert load_scenario_set(p) == small_set


def test_empty_set_round_trip(tmp_path):
    p = tmp_path / "empty.json"
    save_scenario_set(ScenarioSet((), "valid"), p)
    loaded = load_scenario_set(p)
    assert len(loaded) == 0 and loaded.split == "valid"


def test_overlapping_phases_name_both(tmp_path, small_set):
    d = json.loads(dumps_scenario_set(small_set))
    ph = d["scenarios"][2]["phases"]
    ph[0]["end"] = ph[1]["start"] + 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(ValidationError) as exc:
        load_scenario_set(p)
    assert "scenarios[2].phase[0].end>phase[1].start" in exc.value.violations


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"split": "train",\n "scenarios": [\n oops]}')
    with pytest.raises(FormatError) as exc:
        load_scenario_set(p)
    assert exc.value.line == 3


def test_missing_field_reports_path(tmp_path, small_set):
    d = json.loads(dumps_scenario_set(small_set))
    del d["scenarios"][1]["phases"][0]["vehicle_caption"]
    p = tmp_path / "missing.json"
    p.write_text(json.dumps(d))
    with pytest.raises(FormatError, match=r"scenarios\[1\]\.phases\[0\]\.vehicle_caption"):
        load_scenario_set(p)


def test_validate_well_formed():
    assert validate_scenario(_scenario()) == []


def test_validate_start_after_end():
    s = _scenario(phases=(Phase(12, 10, "a", "b"),))
    assert validate_scenario(s) == ["phase[0].start>end"]


def test_validate_duplicate_bbox_frame():
    s = _scenario(bbox_track=((5, BBox(0, 10, 0, 20)), (5, BBox(1, 10, 0, 20))))
    assert validate_scenario(s) == ["bbox_track[1].frame duplicate"]


def test_validate_out_of_range_and_degenerate_box():
    s = _scenario(duration_frames=20, bbox_track=((25, BBox(10, 10, 0, 20)),))
    v = validate_scenario(s)
    assert "phase[1].end out of [0,T)" in v
    assert "bbox_track[0].frame out of [0,T)" in v
    assert "bbox_track[0].x_st>=x_ed" in v


def test_duplicate_ids_rejected():
    s = _scenario()
    with pytest.raises(ValidationError):
        ScenarioSet((s, s))


def test_phase_at_shared_boundary_goes_to_later_phase():
    s = _scenario()
    assert s.phase_at(10) == 1
    assert s.phase_at(50) is None
    assert scenario_to_dict(s)["phases"][1]["start"] == 10
