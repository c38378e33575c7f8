import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtcnet.config import preset
from mtcnet.estimator import MTCNetVQA, TRMBuilder, check_split

TINY = dict(d_model=16, heads=2, d_head=8, d_ffn=32, patch=4, k=2, steps=6, batch=8)


def test_get_params_and_clone():
    est = MTCNetVQA(**TINY, fusion="add", seed=3)
    params = est.get_params()
    assert params["fusion"] == "add" and params["seed"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert MTCNetVQA.from_config(preset("tiny")).get_params()["d_model"] == 16


def test_check_split_errors(tiny_split):
    with pytest.raises(TypeError):
        check_split([1, 2, 3])
    with pytest.raises(ValueError):
        check_split(tiny_split.subset([]))
    assert len(check_split(tiny_split.subset([]), allow_empty=True)) == 0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MTCNetVQA().predict(None)
    with pytest.raises(NotFittedError):
        TRMBuilder().transform(None)


def test_fit_predict_save_load(tmp_path, tiny_split):
    est = MTCNetVQA(**TINY).fit(tiny_split)
    preds = est.predict(tiny_split.subset([0, 1]))
    assert preds.dtype == object and len(preds) == len(tiny_split.subset([0, 1]).samples())
    assert 0.0 <= est.score(tiny_split) <= 1.0
    back = MTCNetVQA.load(est.save(tmp_path / "m"))
    assert back.get_params() == est.get_params()
    assert list(back.predict(tiny_split.subset([0, 1]))) == list(preds)
    assert len(est.predict(tiny_split.subset([]))) == 0


def test_trm_builder(tiny_split):
    b = TRMBuilder(d_model=16, heads=2, d_head=8, d_ffn=32, patch=4).fit(tiny_split)
    assert b.bank_.width == 32 and b.n_prototypes_ == len(b.bank_)
    assert np.array_equal(b.transform(tiny_split), b.bank_.vectors)


def test_bank_width_mismatch(tiny_split):
    bank = TRMBuilder(d_model=8, heads=2, d_head=4, d_ffn=16, patch=4).fit(tiny_split).bank_
    with pytest.raises(ValueError):
        MTCNetVQA(**TINY).fit(tiny_split, bank=bank)
