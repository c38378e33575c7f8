"""scikit-learn style wrappers: a TRM builder and the answer-generating estimator."""
from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Split
from .memory import MemoryBank, build_memory, load_bank, save_bank
from .metrics import MetricsReport, PredRecord, evaluate
from .model import ModelConfig, ModelState, Schedule, encode_split, predict_encoded, train
from .tensor import SeededRng

WEIGHTS_NAME = "weights.mtcw"
MODEL_NAME = "model.json"
BANK_NAME = "bank.trmb"


def check_split(X, name: str = "X", allow_empty: bool = False) -> Split:
    """Reject anything that is not a rendered :class:`Split` with consistent parts."""
    if not isinstance(X, Split):
        raise TypeError(f"{name} must be a Split, got {type(X).__name__}")
    if not (len(X.scenes) == len(X.pairs) == len(X.qa)):
        raise ValueError(f"{name}: {len(X.scenes)} scenes, {len(X.pairs)} image pairs, {len(X.qa)} QA lists")
    if not allow_empty and len(X) == 0:
        raise ValueError(f"{name} is empty")
    sizes = {p.opt.shape[1:] for p in X.pairs} | {p.tir.shape[1:] for p in X.pairs}
    if len(sizes) > 1:
        raise ValueError(f"{name} mixes image sizes {sorted(sizes)}")
    return X


def image_size_of(X: Split) -> int:
    h, w = X.pairs[0].opt.shape[1:]
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    return h


class TRMBuilder(TransformerMixin, BaseEstimator):
    """Builds the traffic regulation memory bank from a training split.

    ``transform`` returns the prototype matrix of a split without keeping it,
    which is handy for inspecting another split under the same encoder.
    """

    def __init__(self, d_model=64, heads=4, d_head=16, d_ffn=128, patch=8, patch_gain=5.0, question_gain=8.0,
                 tau=0.07, jitter=0.05, seed=0):
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_head
        self.d_ffn = d_ffn
        self.patch = patch
        self.patch_gain = patch_gain
        self.question_gain = question_gain
        self.tau = tau
        self.jitter = jitter
        self.seed = seed

    def _backbone(self, image_size: int):
        cfg = ModelConfig(d_model=self.d_model, heads=self.heads, d_head=self.d_head, d_ffn=self.d_ffn,
                          patch=self.patch, image_size=image_size, patch_gain=self.patch_gain,
                          question_gain=self.question_gain, seed=self.seed, use_pgke=False)
        return ModelState(cfg).backbone

    def _build(self, X) -> MemoryBank:
        X = check_split(X)
        return build_memory(X, self._backbone(image_size_of(X)), self.tau, SeededRng(self.seed), self.jitter)

    def fit(self, X, y=None):
        self.bank_ = self._build(X)
        self.n_prototypes_ = len(self.bank_)
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        return self._build(X).vectors


_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("image_size",)]
_SCHEDULE_KEYS = ["steps", "lr", "batch", "optimizer", "weight_decay", "warmup", "gate_lr_mult"]


class MTCNetVQA(BaseEstimator):
    """Gated residual VQA model trained on a :class:`Split`; ``predict`` returns answer strings."""

    def __init__(self, d_model=64, heads=4, d_head=16, d_ffn=128, patch=8, vocab_size=64, t_max=4, k=8,
                 tau=0.07, use_pgke=True, use_qasc=True, fusion="sequence", modality="mul", aux_weight=0.1,
                 nce_temperature=0.1, patch_gain=5.0, question_gain=8.0, jitter=0.05, steps=2000, lr=3e-3,
                 batch=16, optimizer="adam", weight_decay=0.0, warmup=0, gate_lr_mult=1.0, seed=0):
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_head
        self.d_ffn = d_ffn
        self.patch = patch
        self.vocab_size = vocab_size
        self.t_max = t_max
        self.k = k
        self.tau = tau
        self.use_pgke = use_pgke
        self.use_qasc = use_qasc
        self.fusion = fusion
        self.modality = modality
        self.aux_weight = aux_weight
        self.nce_temperature = nce_temperature
        self.patch_gain = patch_gain
        self.question_gain = question_gain
        self.jitter = jitter
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.gate_lr_mult = gate_lr_mult
        self.seed = seed

    @classmethod
    def from_config(cls, cfg) -> "MTCNetVQA":
        """Pick the matching fields off any object with these attribute names (e.g. a RunConfig)."""
        names = cls._get_param_names()
        return cls(**{n: getattr(cfg, n) for n in names if hasattr(cfg, n)})

    def model_config(self, image_size: int) -> ModelConfig:
        kw = {k: getattr(self, k) for k in _MODEL_KEYS}
        return ModelConfig(image_size=image_size, **kw)

    def schedule(self) -> Schedule:
        return Schedule(seed=self.seed, **{k: getattr(self, k) for k in _SCHEDULE_KEYS})

    def fit(self, X, y=None, bank: MemoryBank | None = None, log=None):
        """Train from scratch. ``y`` is unused (answers live in ``X``); ``bank`` skips the TRM build."""
        X = check_split(X)
        cfg = self.model_config(image_size_of(X))
        if cfg.use_pgke and bank is None:
            bank = TRMBuilder(cfg.d_model, cfg.heads, cfg.d_head, cfg.d_ffn, cfg.patch, cfg.patch_gain,
                              cfg.question_gain, cfg.tau, self.jitter, cfg.seed).fit(X).bank_
        if cfg.use_pgke and bank.d_model != cfg.d_model:
            raise ValueError(f"bank was built for d_model={bank.d_model}, model has {cfg.d_model}")
        state = ModelState(cfg, bank if cfg.use_pgke else None)
        enc = encode_split(X, state.backbone, cfg.t_max)
        self.trace_ = train(enc, state, self.schedule(), log)
        self.state_ = state
        self.image_size_ = cfg.image_size
        return self

    def _encode(self, X):
        check_is_fitted(self, "state_")
        X = check_split(X, allow_empty=True)
        if len(X) and image_size_of(X) != self.image_size_:
            raise ValueError(f"model was fitted on {self.image_size_}px images, got {image_size_of(X)}px")
        return encode_split(X, self.state_.backbone, self.state_.cfg.t_max)

    def predict(self, X) -> np.ndarray:
        enc = self._encode(X)
        return np.array(predict_encoded(self.state_, enc) if len(enc) else [], dtype=object)

    def predict_records(self, X) -> list[PredRecord]:
        enc = self._encode(X)
        answers = predict_encoded(self.state_, enc) if len(enc) else []
        cond = {s.id: s.condition for s in X.scenes}
        return [PredRecord(s.scene_id, s.qtype, cond[s.scene_id], s.question, s.answer, a)
                for s, a in zip(enc.samples, answers)]

    def evaluate(self, X) -> MetricsReport:
        return evaluate(self.predict_records(X))

    def score(self, X, y=None) -> float:
        """Overall exact-match accuracy as a fraction."""
        return self.evaluate(X).oa / 100.0

    # ---------------------------------------------------------------- persistence

    def save(self, directory) -> Path:
        check_is_fitted(self, "state_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.state_.save(d / WEIGHTS_NAME)
        (d / MODEL_NAME).write_text(json.dumps({"model": asdict(self.state_.cfg), "params": self.get_params()},
                                               indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if self.state_.bank is not None:
            save_bank(self.state_.bank, d / BANK_NAME)
        return d

    @classmethod
    def load(cls, directory) -> "MTCNetVQA":
        d = Path(directory)
        try:
            spec = json.loads((d / MODEL_NAME).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FileNotFoundError(f"no model description in {d}") from exc
        est = cls(**spec["params"])
        cfg = ModelConfig.from_dict(spec["model"])
        bank = load_bank(d / BANK_NAME) if cfg.use_pgke else None
        state = ModelState(cfg, bank)
        state.load_weights(d / WEIGHTS_NAME)
        est.state_, est.image_size_, est.trace_ = state, cfg.image_size, []
        return est
