import json

import numpy as np
import pytest

from mtcnet.data import (
    COLORS, PALETTE, QTYPES, TIR_BG, TOKEN_ID, VOCAB, Box, DatasetConsistencyError, DatasetFormatError, Entity,
    GenerationError, SceneParams, SceneSpec, Split, derive_violations, detokenize, generate_qa, generate_scene,
    generate_split, quadrant, read_dataset, render_clean, render_pair, tokenize, write_dataset,
)
from mtcnet.tensor import SeededRng

from oracles import count_entities


def scene(seed=0, condition="day", size=64, **kw):
    return generate_scene(SeededRng(seed), condition, SceneParams(**kw) if kw else None, scene_id=seed, size=size)


def test_generation_is_deterministic():
    assert scene(3).to_record() == scene(3).to_record()
    a, b = generate_split(9, 6, size=32), generate_split(9, 6, size=32)
    assert [s.to_record() for s in a.scenes] == [s.to_record() for s in b.scenes]
    assert all(np.array_equal(p.opt, q.opt) for p, q in zip(a.pairs, b.pairs))


def test_parallel_generation_matches_serial():
    a = generate_split(2, 7, SceneParams(cell=4, max_vehicles=6), size=16)
    b = generate_split(2, 7, SceneParams(cell=4, max_vehicles=6), size=16, jobs=2)
    assert [s.to_record() for s in a.scenes] == [s.to_record() for s in b.scenes]
    assert [[q.to_record() for q in per] for per in a.qa] == [[q.to_record() for q in per] for per in b.qa]


def test_difficulty_zero_is_empty():
    s = generate_scene(SeededRng(1), "night", SceneParams.for_difficulty(0))
    assert s.entities == [] and not any(v.any for v in s.violations.values())


@pytest.mark.parametrize("seed", range(40))
def test_scene_invariants(seed):
    s = scene(seed, size=64, cell=8)
    assert 1 <= len(s.vehicles()) <= 8 and len(s.pedestrians()) <= 4
    for e in s.entities:
        assert 0 <= e.box.x0 < e.box.x1 <= s.width and 0 <= e.box.y0 < e.box.y1 <= s.height
    for a in s.entities:
        for b in s.entities:
            if a.id < b.id:
                assert a.box.intersect_area(b.box) == 0
    assert derive_violations(s) == s.violations
    assert len({e.color for e in s.vehicles()}) == len(s.vehicles())


def test_violation_rules():
    base = scene(0)
    cw = base.crosswalk
    lane = base.lanes[0]
    inside = Entity(0, "vehicle", Box(cw.x0, cw.y0, cw.x0 + 2, cw.y0 + 2), lane.direction, 0.7, 0)
    against = Entity(1, "vehicle", Box(lane.box.x0, lane.box.y0, lane.box.x0 + 2, lane.box.y0 + 2),
                     {"N": "S", "S": "N", "E": "W", "W": "E"}[lane.direction], 0.7, 1)
    s = SceneSpec(0, "day", base.width, base.height, base.lanes, cw, [inside, against])
    v = derive_violations(s)
    assert v[0].crosswalk
    assert v[1].wrong_way and not v[1].crosswalk
    ped = Entity(2, "pedestrian", Box(lane.box.x0, lane.box.y0, lane.box.x0 + 1, lane.box.y0 + 1), "N", 0.5, 0)
    if not cw.contains_point(lane.box.x0 + 0.5, lane.box.y0 + 0.5):
        assert derive_violations(SceneSpec(0, "day", 64, 64, base.lanes, cw, [ped]))[2].jaywalking


def test_placement_failure_raises():
    with pytest.raises(GenerationError):
        generate_scene(SeededRng(0), "day", SceneParams(min_vehicles=40, max_vehicles=40, cell=8), size=32)
    with pytest.raises(ValueError):
        generate_scene(SeededRng(0), "rain")


def test_day_render_shows_vehicle_colour():
    s = scene(2)
    pair = render_pair(s)
    e = s.vehicles()[0]
    cx, cy = e.box.center
    assert np.array_equal(pair.opt[:, int(cy), int(cx)], PALETTE[e.color])
    assert pair.tir[0, int(cy), int(cx)] == pytest.approx(e.heat)


def test_night_leaves_thermal_untouched_and_fog_lowers_variance():
    for seed in range(5):
        s = scene(seed)
        day = render_clean(s)
        night = render_pair(SceneSpec(**{**s.__dict__, "condition": "night"}), seed)
        fog = render_pair(SceneSpec(**{**s.__dict__, "condition": "fog"}), seed)
        assert np.array_equal(night.tir, day.tir)
        assert fog.opt.var() < day.opt.var() and fog.tir.var() < day.tir.var()
        assert night.opt.std() < day.opt.std()
        for p in (night, fog):
            assert p.opt.min() >= 0 and p.opt.max() <= 1 and np.isfinite(p.opt).all()


def test_empty_scene_renders_background():
    s = generate_scene(SeededRng(1), "day", SceneParams.for_difficulty(0))
    assert render_pair(s).tir.min() >= TIR_BG


def test_qa_examples_and_counts():
    s = scene(4, "night")
    qa = {q.question: q.answer for q in generate_qa(s, SeededRng(0), 10)}
    assert qa["is it night"] == "yes"
    assert qa["how many vehicles are there"] == str(len(s.vehicles()))


def test_count_answers_match_enumeration_oracle():
    split = generate_split(21, 1000, SceneParams(cell=8), size=64)
    for s, per in zip(split.scenes, split.qa):
        veh, ped = count_entities(s.to_record())
        answers = {q.question: q.answer for q in per}
        assert answers["how many vehicles are there"] == str(veh)
        assert answers["how many pedestrians are there"] == str(ped)


def test_qa_contract(small_split):
    for s, per in zip(small_split.scenes, small_split.qa):
        assert 8 <= len(per) <= 20
        for q in per:
            assert q.qtype in QTYPES
            assert all(w in TOKEN_ID for w in q.answer.split())
            assert all(w in TOKEN_ID for w in q.question.split())
            if q.qtype == "location-quadrant":
                assert q.answer == quadrant(s, s.entity(q.referent))
            if q.qtype == "modality-match":
                assert q.answer == ("yes" if q.tir_scene == s.id else "no")


def test_tokenize_round_trip():
    assert detokenize(tokenize("is there a red vehicle")) == "is there a red vehicle"
    assert set(COLORS) <= set(VOCAB) and len(VOCAB) <= 64


def test_dataset_round_trip(tmp_path, small_split):
    write_dataset(small_split, tmp_path)
    back = read_dataset(tmp_path)
    assert [s.to_record() for s in back.scenes] == [s.to_record() for s in small_split.scenes]
    assert [[q.to_record() for q in per] for per in back.qa] == [[q.to_record() for q in per]
                                                                 for per in small_split.qa]
    for a, b in zip(back.pairs, small_split.pairs):
        assert np.max(np.abs(a.opt - b.opt)) <= 1e-7 and np.max(np.abs(a.tir - b.tir)) <= 1e-7


def test_dataset_errors(tmp_path, small_split):
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "nothing")
    write_dataset(small_split.subset([0, 1]), tmp_path)
    img = tmp_path / "scene_0.bin"
    raw = img.read_bytes()
    img.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(DatasetConsistencyError):
        read_dataset(tmp_path)
    img.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path)
    img.write_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path)
    img.write_bytes(raw)
    (tmp_path / "manifest.jsonl").write_text("{not json\n")
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path)


def test_subset_renumbers(small_split):
    sub = small_split.subset([3, 5])
    assert [s.id for s in sub.scenes] == [0, 1]
    assert all(q.scene_id == j and q.tir_scene in (0, 1) for j, per in enumerate(sub.qa) for q in per)
    assert isinstance(sub, Split) and json.dumps(sub.scenes[0].to_record())


def test_detokenize_maps_padding_ids_to_unknown():
    assert detokenize([TOKEN_ID["yes"], len(VOCAB) + 1, 2, TOKEN_ID["no"]]) == f"yes {VOCAB[3]}"
