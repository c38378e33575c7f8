import numpy as np
import pytest

from mtcnet.data import BOS, EOS, PAD, detokenize, tokenize
from mtcnet.memory import build_memory
from mtcnet.model import (
    BackboneStub, EncodingError, GateParams, ModelConfig, ModelState, Schedule, answer_arrays, encode_split, forward,
    fuse_residual, nll_loss, predict_answer, predict_encoded, sinusoidal_2d, train, visual_tokens,
)
from mtcnet.tensor import DimensionError, Param, SeededRng

from oracles import nll_formula

CFG = dict(d_model=16, heads=2, d_head=8, d_ffn=32, patch=8, image_size=32, k=2)


def make_state(split, **kw):
    cfg = ModelConfig(**{**CFG, **kw})
    bank = build_memory(split, BackboneStub(cfg, SeededRng(cfg.seed, 0xB0).child(0))) if cfg.use_pgke else None
    return ModelState(cfg, bank)


def randomize(params, seed):
    rng = SeededRng(seed)
    for p in params:
        p.data[...] = rng.normal(size=p.shape)


def test_fuse_residual_examples():
    f = np.arange(6.0).reshape(2, 3)
    g = GateParams()
    assert np.array_equal(fuse_residual(f, np.full((2, 3), 9.0), np.full((2, 3), -4.0), g).data, f)
    g.alpha.data[...] = 1.0
    assert np.array_equal(fuse_residual(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 3)), g).data, np.ones((2, 3)))
    with pytest.raises(DimensionError):
        fuse_residual(f, np.ones((3, 2)), np.ones((2, 3)), g)


def test_fuse_residual_formula():
    rng = SeededRng(1)
    f, a, b = rng.normal(size=(3, 4, 5))
    g = GateParams(Param(np.array(0.3)), Param(np.array(-1.2)))
    assert np.max(np.abs(fuse_residual(f, a, b, g).data - (f + 0.3 * a - 1.2 * b))) < 1e-15


def test_gates_start_at_zero_and_visual_tokens_equal_features(small_split):
    state = make_state(small_split)
    assert float(state.gates.alpha.data) == 0.0 and float(state.gates.beta.data) == 0.0
    enc = encode_split(small_split, state.backbone, 4)
    idx = np.arange(5)
    vis = visual_tokens(state, enc.f_opt[enc.opt_idx[idx]], enc.f_tir[enc.tir_idx[idx]], enc.q[idx]).data
    assert np.array_equal(vis, np.concatenate([enc.f_opt[enc.opt_idx[idx]], enc.f_tir[enc.tir_idx[idx]]], axis=1))


def test_predictions_ignore_branch_weights_at_init(small_split):
    state = make_state(small_split)
    enc = encode_split(small_split.subset([0, 1]), state.backbone, 4)
    before = predict_encoded(state, enc)
    randomize([*state.pgke.params(), *state.qasc.params()], 3)
    assert predict_encoded(state, enc) == before


def test_single_modality_ignores_other_stream(small_split):
    state = make_state(small_split, modality="opt", use_pgke=False)
    pair = small_split.pairs[0]
    q = tokenize("is it night")
    a = forward(pair.opt, pair.tir, q, state).data
    b = forward(pair.opt, np.zeros_like(pair.tir), q, state).data
    assert np.array_equal(a, b)


def test_greedy_decode_matches_stepwise_oracle(small_split):
    state = make_state(small_split, use_pgke=False)
    randomize(state.decoder.params(), 5)
    for i in range(3):
        pair = small_split.pairs[i]
        q = tokenize(small_split.qa[i][0].question)
        prefix = []
        for t in range(state.cfg.t_max):
            nxt = int(np.argmax(forward(pair.opt, pair.tir, q, state, prefix).data[t]))
            if nxt == EOS:
                break
            prefix.append(nxt)
        assert predict_answer(pair.opt, pair.tir, q, state) == detokenize(prefix)


def test_nll_matches_formula_and_rejects_mismatch():
    logits = SeededRng(2).normal(size=(5, 8))
    target = [0, 7, 3, 3, 1]
    assert abs(float(nll_loss(logits, target).data) - nll_formula(logits, target)) < 1e-12
    with pytest.raises(DimensionError):
        nll_loss(logits, target[:4])
    with pytest.raises(DimensionError):
        nll_loss(np.zeros((0, 8)), [])


def test_answer_arrays_layout():
    dec_in, target, mask = answer_arrays([9, 10], 4)
    assert dec_in.tolist() == [BOS, 9, 10, PAD]
    assert target.tolist() == [9, 10, EOS, PAD]
    assert mask.tolist() == [1, 1, 1, 0]
    with pytest.raises(DimensionError):
        answer_arrays([5, 6, 7, 8], 4)


def test_zero_lr_leaves_state_and_frozen_bytes_unchanged(small_split):
    state = make_state(small_split)
    enc = encode_split(small_split.subset([0, 1, 2]), state.backbone, 4)
    snap = {n: p.data.tobytes() for n, p in state.named_params().items()}
    train(enc, state, Schedule(lr=0.0, steps=3, batch=4))
    assert {n: p.data.tobytes() for n, p in state.named_params().items()} == snap
    train(enc, state, Schedule(lr=1e-2, steps=3, batch=4))
    trainable = {p.name for p in state.trainable_params()}
    for n, p in state.named_params().items():
        if n not in trainable:
            assert p.data.tobytes() == snap[n], n
    assert any(p.data.tobytes() != snap[p.name] for p in state.trainable_params())


def test_training_is_deterministic(small_split):
    traces = []
    for _ in range(2):
        state = make_state(small_split)
        enc = encode_split(small_split.subset([0, 1, 2, 3]), state.backbone, 4)
        traces.append([r["loss"] for r in train(enc, state, Schedule(steps=4, batch=8))])
    assert traces[0] == traces[1]


def test_trainable_set_follows_switches(small_split):
    names = lambda s: {p.name for p in s.trainable_params()}  # noqa: E731
    full = make_state(small_split)
    base = make_state(small_split, use_pgke=False, use_qasc=False)
    assert not any(n.startswith("backbone") for n in names(full))
    assert names(full) > names(base) and not any(n.startswith(("pgke", "qasc")) for n in names(base))


def test_encode_image_and_question_examples():
    cfg = ModelConfig(**CFG)
    bb = BackboneStub(cfg, SeededRng(0))
    assert np.allclose(bb.encode_image(np.zeros((3, 32, 32)), "opt").data, sinusoidal_2d(4, 4, 16), atol=0)
    with pytest.raises(DimensionError):
        bb.encode_image(np.zeros((3, 30, 30)), "opt")
    with pytest.raises(DimensionError):
        bb.encode_image(np.zeros((1, 32, 32)), "opt")
    assert np.array_equal(bb.encode_question([5, 5]), bb.question_embed.data[5])
    with pytest.raises(EncodingError):
        bb.encode_question([])
    with pytest.raises(EncodingError):
        bb.encode_question([64])


def test_config_validation():
    for bad in (dict(fusion="max"), dict(modality="rgb"), dict(image_size=30), dict(vocab_size=2)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
