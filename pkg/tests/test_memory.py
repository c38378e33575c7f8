import numpy as np
import pytest

from mtcnet.data import SceneParams, generate_split
from mtcnet.memory import (
    BankCorruptionError, BankFormatError, BoundingBox, EmptyBank, MemoryBank, NoReferent, SemanticPhrase,
    build_memory, distill_phrase, epicenter_aggregate, expected_bank_size, ground_event, load_bank, save_bank,
    union_box,
)
from mtcnet.tensor import ParameterError, SeededRng

from oracles import bank_rows_by_enumeration, epicenter_loop


class FakeEncoder:
    """Deterministic per-scene features on a 4x4 grid."""
    token_grid = (4, 4)

    def encode_pair(self, pair):
        f = np.resize(pair.opt.mean(axis=0).ravel(), 16 * 3).reshape(16, 3)
        g = np.resize(pair.tir.ravel()[::7], 16 * 3).reshape(16, 3)
        return f, g


def test_box_validation_and_geometry():
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 1, 2)
    b = BoundingBox(0, 0, 4, 2)
    assert b.center == (2, 1)
    assert b.contains(BoundingBox(1, 0, 2, 2)) and not b.contains(BoundingBox(1, 1, 5, 2))


def test_union_box_examples():
    assert union_box(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)) == BoundingBox(0, 0, 3, 3)
    b = BoundingBox(1, 2, 3, 4)
    assert union_box(b, b) == b
    a, c = BoundingBox(0, 5, 1, 6), BoundingBox(4, 0, 5, 1)
    u = union_box(a, c)
    assert u.contains(a) and u.contains(c)


def test_phrase_length_limits():
    with pytest.raises(ValueError):
        SemanticPhrase("", "lane-driving", 0)
    with pytest.raises(ValueError):
        SemanticPhrase(" ".join(["w"] * 17), "lane-driving", 0)


def test_epicenter_single_token_and_uniform_grid():
    f = np.array([[1.5, -2.0, 0.5]])
    assert np.array_equal(epicenter_aggregate(f, BoundingBox(0, 0, 1, 1), 0.07, (1, 1)), f[0])
    g = np.tile([0.3, 0.1], (9, 1))
    assert np.allclose(epicenter_aggregate(g, BoundingBox(0, 0, 1, 1), 0.5, (3, 3)), g[0], atol=1e-15)


def test_epicenter_peaks_near_matching_tokens():
    f = np.zeros((16, 2))
    f[5] = [1.0, 0.0]
    f[15] = [0.0, 1.0]
    out = epicenter_aggregate(f, BoundingBox(1, 1, 2, 2), 0.01, (4, 4))
    assert out[0] > 0.99


@pytest.mark.parametrize("seed", range(6))
def test_epicenter_matches_loop_oracle(seed):
    rng = SeededRng(seed)
    rows, cols = 4, 5
    f = rng.normal(size=(rows * cols, 6))
    x0, y0 = rng.uniform(0, 30), rng.uniform(0, 20)
    box = BoundingBox(x0, y0, x0 + 6, y0 + 8)
    cx, cy = box.center
    r, c = min(int(cy * rows / 32), rows - 1), min(int(cx * cols / 40), cols - 1)
    out = epicenter_aggregate(f, box, 0.3, (rows, cols), (32, 40))
    assert np.max(np.abs(out - epicenter_loop(f, (r, c), 0.3, rows, cols))) < 1e-12


def test_epicenter_rejects_bad_tau_and_grid():
    with pytest.raises(ParameterError):
        epicenter_aggregate(np.ones((4, 2)), BoundingBox(0, 0, 1, 1), 0.0, (2, 2))
    with pytest.raises(ValueError):
        epicenter_aggregate(np.ones((5, 2)), BoundingBox(0, 0, 1, 1), 0.1, (2, 2))


def test_grounding_jitter_bounds(small_split):
    scene, per = small_split.scenes[0], small_split.qa[0]
    qa = next(q for q in per if q.referent is not None and scene.entity(q.referent).kind != "pedestrian")
    phrase = distill_phrase(scene, qa)
    true = scene.entity(phrase.entity_id).box
    b_opt, b_th = ground_event(scene, phrase, None, 0.05)
    assert (b_opt.x0, b_opt.y0, b_opt.x1, b_opt.y1) == (true.x0, true.y0, true.x1, true.y1) and b_opt == b_th
    for s in range(20):
        for b in ground_event(scene, phrase, SeededRng(s), 0.1):
            assert abs(b.x0 - true.x0) <= 0.1 * scene.width + 1e-9
            assert 0 <= b.x0 <= b.x1 <= scene.width and 0 <= b.y0 <= b.y1 <= scene.height
    with pytest.raises(ParameterError):
        ground_event(scene, phrase, None, 0.2)


def test_distill_needs_referent(small_split):
    qa = next(q for q in small_split.qa[0] if q.referent is None)
    with pytest.raises(NoReferent):
        distill_phrase(small_split.scenes[0], qa)


def test_bank_size_matches_enumeration_oracle():
    split = generate_split(7, 100, SceneParams(cell=8), size=64)
    keys = bank_rows_by_enumeration([s.to_record() for s in split.scenes],
                                    [[q.to_record() for q in per] for per in split.qa])
    assert expected_bank_size(split) == len(keys)
    bank = build_memory(split, FakeEncoder())
    assert len(bank) == len(keys)
    assert [(m["scene_id"], m["event_kind"]) for m in bank.meta] == keys
    assert bank.width == 6 and np.all(np.isfinite(bank.vectors))


def test_build_is_deterministic_and_round_trips(tmp_path, small_split):
    a = build_memory(small_split, FakeEncoder(), rng=SeededRng(3))
    assert a == build_memory(small_split, FakeEncoder(), rng=SeededRng(3))
    save_bank(a, tmp_path / "b.trmb")
    assert load_bank(tmp_path / "b.trmb") == a


def test_build_rejects_empty(small_split):
    with pytest.raises(ValueError):
        build_memory(small_split.subset([]), FakeEncoder())
    bare = small_split.subset([0])
    bare.qa[0] = [q for q in bare.qa[0] if q.referent is None]
    with pytest.raises(EmptyBank):
        build_memory(bare, FakeEncoder())


def test_bank_file_corruption(tmp_path):
    bank = MemoryBank(np.arange(12.0).reshape(3, 4), [{"phrase": "p", "event_kind": "lane-driving",
                                                       "scene_id": i, "entity_id": 0} for i in range(3)])
    p = tmp_path / "b.trmb"
    save_bank(bank, p)
    raw = p.read_bytes()
    cases = {"magic": (b"XXXX" + raw[4:], BankFormatError), "trunc": (raw[:30], BankCorruptionError),
             "tail": (raw[:-2], BankCorruptionError), "extra": (raw + b"x", BankCorruptionError)}
    for name, (data, err) in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(err):
            load_bank(tmp_path / name)


def test_positives_mask():
    bank = MemoryBank(np.eye(3), [{"phrase": "p", "event_kind": k, "scene_id": s, "entity_id": 0}
                                  for s, k in [(0, "lane-driving"), (0, "wrong-way"), (1, "lane-driving")]])
    assert bank.positives([0, 1]).tolist() == [[True, True, False], [False, False, True]]
    assert bank.positives([0], ["wrong-way"]).tolist() == [[False, True, False]]
    assert bank.positives([0], ["jaywalking"]).tolist() == [[True, True, False]]
