"""Gated parallel residual network: frozen stub encoders, PGKE/QASC branches, tiny decoder."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import MHCABlock, MHCAConfig, causal_mask
from .data import BOS, EOS, PAD, QAPair, RenderedPair, Split
from .memory import MemoryBank, NoReferent, distill_phrase
from .pgke import PGKEModule, alignment_loss, residual_from_indices, retrieve_batch
from .qasc import QASCModule, fuse_static, make_concat_projection, qasc_residuals
from .tensor import (
    DimensionError, EvaluationError, Param, SeededRng, Tensor, add, concat, grad_check, init_ones, init_weight,
    init_zeros, layer_norm, linear, load_params, matmul, mul, no_grad, save_params, take_rows, token_nll,
)

FUSIONS = ("sequence", "add", "concat_project")
MODALITIES = ("mul", "opt", "tir")


class EncodingError(ValueError):
    """Question token outside the vocabulary, or an empty question."""


class TrainingAborted(RuntimeError):
    """Loss became non-finite."""


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    d_head: int = 16
    d_ffn: int = 128
    patch: int = 8
    image_size: int = 64
    vocab_size: int = 64
    t_max: int = 4
    k: int = 8
    tau: float = 0.07
    use_pgke: bool = True
    use_qasc: bool = True
    fusion: str = "sequence"
    modality: str = "mul"
    aux_weight: float = 0.1
    nce_temperature: float = 0.1
    patch_gain: float = 5.0
    question_gain: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.image_size % self.patch:
            raise ValueError("image size must be a multiple of the patch size")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the special tokens")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return g, g

    @property
    def n_tokens(self) -> int:
        r, c = self.grid
        return r * c

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def sinusoidal_2d(rows: int, cols: int, d: int) -> np.ndarray:
    """Row code in the first half of the channels, column code in the second (row-major tokens)."""
    if d % 2:
        raise ValueError("2-d positional code needs an even width")
    r, c = sinusoidal(rows, d // 2), sinusoidal(cols, d // 2)
    return np.concatenate([np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1)


class BackboneStub:
    """Frozen patch embedders and bag-of-tokens question encoder."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        p, D = cfg.patch, cfg.d_model
        self.cfg = cfg
        self.patch_opt = init_weight(rng.child(0), p * p * 3, D, "backbone.patch_opt", trainable=False)
        self.patch_tir = init_weight(rng.child(1), p * p, D, "backbone.patch_tir", trainable=False)
        self.question_embed = init_weight(rng.child(2), cfg.vocab_size, D, "backbone.question_embed",
                                          trainable=False)
        # gains lift content and question codes above the unit-amplitude positional code
        self.patch_opt.data *= cfg.patch_gain
        self.patch_tir.data *= cfg.patch_gain
        self.question_embed.data *= cfg.question_gain
        self.pos_enc = sinusoidal_2d(*cfg.grid, D)

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.cfg.grid

    def params(self):
        return [self.patch_opt, self.patch_tir, self.question_embed]

    def encode_image(self, img, modality: str) -> Tensor:
        return Tensor(self.encode_array(np.asarray(img, dtype=np.float64), modality))

    def encode_array(self, img: np.ndarray, modality: str) -> np.ndarray:
        p = self.cfg.patch
        w = self.patch_opt if modality == "opt" else self.patch_tir
        C, H, W = img.shape
        if H % p or W % p:
            raise DimensionError(f"image {H}x{W} is not divisible by patch {p}")
        if C * p * p != w.shape[0]:
            raise DimensionError(f"{modality} image has {C} channels, embedder expects {w.shape[0] // (p * p)}")
        patches = img.reshape(C, H // p, p, W // p, p).transpose(1, 3, 0, 2, 4).reshape(-1, C * p * p)
        pos = self.pos_enc if (H // p, W // p) == self.cfg.grid else sinusoidal_2d(H // p, W // p, w.shape[1])
        return patches @ w.data + pos

    def encode_pair(self, pair: RenderedPair) -> tuple[np.ndarray, np.ndarray]:
        return self.encode_array(pair.opt, "opt"), self.encode_array(pair.tir, "tir")

    def encode_question(self, tokens) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size == 0:
            raise EncodingError("empty question")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise EncodingError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        return self.question_embed.data[ids].mean(axis=0)


@dataclass
class GateParams:
    alpha: Param = field(default_factory=lambda: Param(np.array(0.0), "gates.alpha"))
    beta: Param = field(default_factory=lambda: Param(np.array(0.0), "gates.beta"))

    def params(self):
        return [self.alpha, self.beta]


class AnswerDecoder:
    """Causal self-attention, cross-attention over visual tokens, vocabulary head."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        D, V = cfg.d_model, cfg.vocab_size
        self.cfg = cfg
        self.tok_emb = init_weight(rng.child(0), V, D, "decoder.tok_emb")
        self.q_proj = init_weight(rng.child(1), D, D, "decoder.q_proj")
        self.pos = sinusoidal(cfg.t_max, D)
        self.self_attn = MHCABlock(MHCAConfig(D, D, cfg.heads, cfg.d_head, cfg.d_ffn, use_ffn=False),
                                   rng.child(2), "decoder.self")
        self.cross = MHCABlock(MHCAConfig(D, D, cfg.heads, cfg.d_head, cfg.d_ffn), rng.child(3), "decoder.cross")
        self.ln_out = (init_ones(D, "decoder.ln_out.scale"), init_zeros(D, "decoder.ln_out.shift"))
        self.w_out = init_weight(rng.child(4), D, V, "decoder.w_out")
        self.b_out = init_zeros(V, "decoder.b_out")
        self.mask = causal_mask(cfg.t_max)

    def params(self):
        return [self.tok_emb, self.q_proj, *self.self_attn.params(), *self.cross.params(),
                *self.ln_out, self.w_out, self.b_out]

    def forward(self, visual: Tensor, q: np.ndarray, dec_in: np.ndarray, attn_log: list | None = None) -> Tensor:
        T = dec_in.shape[-1]
        x = add(add(take_rows(self.tok_emb, dec_in), self.pos[:T]),
                matmul(Tensor(q), self.q_proj).reshape(q.shape[0], 1, -1))
        mask = self.mask[:T, :T]
        if attn_log is None:
            h = add(x, self.self_attn(x, x, mask))
            h = add(h, self.cross(h, visual))
        else:
            d, a1 = self.self_attn(x, x, mask, return_weights=True)
            h = add(x, d)
            d, a2 = self.cross(h, visual, return_weights=True)
            h = add(h, d)
            attn_log += [a1.data, a2.data]
        return linear(layer_norm(h, *self.ln_out), self.w_out, self.b_out)


class ModelState:
    def __init__(self, cfg: ModelConfig, bank: MemoryBank | None = None):
        self.cfg = cfg
        root = SeededRng(cfg.seed, 0xB0)
        self.backbone = BackboneStub(cfg, root.child(0))
        self.bank = bank
        d_proto = bank.width if bank is not None else 2 * cfg.d_model
        D = cfg.d_model
        self.pgke = PGKEModule(D, d_proto, cfg.k, root.child(1), cfg.heads, cfg.d_head, cfg.d_ffn)
        self.qasc = QASCModule(D, root.child(2), cfg.heads, cfg.d_head, cfg.d_ffn)
        self.gates = GateParams()
        self.decoder = AnswerDecoder(cfg, root.child(3))
        self.concat_proj = make_concat_projection(D, root.child(4))

    def uses_concat_proj(self) -> bool:
        return self.cfg.modality == "mul" and self.cfg.fusion == "concat_project"

    def all_params(self) -> list[Param]:
        return [*self.backbone.params(), *self.pgke.params(), *self.qasc.params(), *self.gates.params(),
                *self.decoder.params(), self.concat_proj]

    def trainable_params(self) -> list[Param]:
        ps = [*self.gates.params(), *self.decoder.params()]
        if self.cfg.use_pgke:
            ps += self.pgke.params()
        if self.cfg.use_qasc and self.cfg.modality == "mul":
            ps += self.qasc.params()
        if self.uses_concat_proj():
            ps.append(self.concat_proj)
        return ps

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.all_params()}

    def save(self, path, config_path=None) -> None:
        save_params({n: p.data for n, p in self.named_params().items()}, path)
        if config_path is not None:
            with open(config_path, "w", encoding="utf-8") as fh:
                json.dump(asdict(self.cfg), fh, indent=2, sort_keys=True)

    def load_weights(self, path) -> None:
        values = load_params(path)
        named = self.named_params()
        for name, arr in values.items():
            if name not in named:
                raise KeyError(f"checkpoint has unknown parameter {name}")
            if named[name].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {named[name].shape}")
            named[name].data[...] = arr


# ---------------------------------------------------------------- encoded samples


@dataclass
class Encoded:
    """Frozen features of a split plus per-question tensors ready for batching."""

    f_opt: np.ndarray      # (S, L, D)
    f_tir: np.ndarray      # (S, L, D)
    opt_idx: np.ndarray    # (n,)
    tir_idx: np.ndarray    # (n,)
    q: np.ndarray          # (n, D)
    dec_in: np.ndarray     # (n, T)
    target: np.ndarray     # (n, T)
    mask: np.ndarray       # (n, T)
    scene_ids: np.ndarray  # (n,)
    event_kinds: list
    samples: list

    def __len__(self):
        return len(self.samples)


def answer_arrays(answer_ids, t_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq = list(answer_ids) + [EOS]
    if len(seq) > t_max:
        raise DimensionError(f"answer of {len(seq) - 1} tokens exceeds t_max={t_max}")
    dec_in = np.full(t_max, PAD)
    dec_in[0] = BOS
    dec_in[1:len(seq)] = seq[:-1]
    target = np.full(t_max, PAD)
    target[:len(seq)] = seq
    mask = np.zeros(t_max)
    mask[:len(seq)] = 1.0
    return dec_in, target, mask


def encode_split(split: Split, backbone: BackboneStub, t_max: int) -> Encoded:
    feats = [backbone.encode_pair(p) for p in split.pairs]
    empty = np.zeros((0, backbone.cfg.n_tokens, backbone.cfg.d_model))
    f_opt = np.stack([f[0] for f in feats]) if feats else empty
    f_tir = np.stack([f[1] for f in feats]) if feats else empty
    pos = {s.id: i for i, s in enumerate(split.scenes)}
    samples = split.samples()
    n = len(samples)
    arrays = [answer_arrays(s.answer_ids, t_max) for s in samples]
    kinds = []
    for s in samples:
        try:
            kinds.append(distill_phrase(split.scenes[pos[s.scene_id]], s).event_kind)
        except NoReferent:
            kinds.append(None)
    return Encoded(
        f_opt, f_tir,
        np.array([pos[s.scene_id] for s in samples], dtype=np.int64),
        np.array([pos[s.tir_scene] for s in samples], dtype=np.int64),
        np.stack([backbone.encode_question(s.question_ids) for s in samples]) if n else np.zeros((0, backbone.cfg.d_model)),
        np.stack([a[0] for a in arrays]) if n else np.zeros((0, t_max), dtype=np.int64),
        np.stack([a[1] for a in arrays]) if n else np.zeros((0, t_max), dtype=np.int64),
        np.stack([a[2] for a in arrays]) if n else np.zeros((0, t_max)),
        np.array([s.scene_id for s in samples], dtype=np.int64),
        kinds, samples,
    )


# ---------------------------------------------------------------- forward pass


def fuse_residual(f_m, d_pgke, d_qasc, gates: GateParams) -> Tensor:
    """``f_m + alpha * d_pgke + beta * d_qasc``."""
    f_m = f_m if isinstance(f_m, Tensor) else Tensor(f_m)
    shapes = {f_m.shape, tuple(np.shape(d_pgke.data if isinstance(d_pgke, Tensor) else d_pgke)),
              tuple(np.shape(d_qasc.data if isinstance(d_qasc, Tensor) else d_qasc))}
    if len(shapes) != 1:
        raise DimensionError(f"fuse_residual shape mismatch: {shapes}")
    return add(add(f_m, mul(gates.alpha, d_pgke)), mul(gates.beta, d_qasc))


def visual_tokens(state: ModelState, f_opt: np.ndarray, f_tir: np.ndarray, q: np.ndarray,
                  retrieved: np.ndarray | None = None) -> Tensor:
    """Refined visual prefix (B, L or 2L, D) for a batch of frozen features."""
    cfg = state.cfg
    B = q.shape[0]
    streams = {"opt": f_opt, "tir": f_tir} if cfg.modality == "mul" else {cfg.modality: f_opt if cfg.modality == "opt" else f_tir}
    zero = np.zeros_like(f_opt)
    d_pgke = {m: zero for m in streams}
    d_qasc = {m: zero for m in streams}
    if cfg.use_pgke:
        if retrieved is None:
            retrieved, _ = retrieve_batch(q, state.bank, state.pgke)
        names = list(streams)
        stacked = np.concatenate([streams[m] for m in names]) if len(names) > 1 else streams[names[0]]
        idx = np.concatenate([retrieved] * len(names))
        delta = residual_from_indices(Tensor(stacked), idx, state.bank, state.pgke)
        for j, m in enumerate(names):
            d_pgke[m] = delta if len(names) == 1 else _rows(delta, j * B, (j + 1) * B)
    if cfg.use_qasc and cfg.modality == "mul":
        d_qasc["opt"], d_qasc["tir"] = qasc_residuals(f_opt, f_tir, state.qasc)
    res = {m: fuse_residual(streams[m], d_pgke[m], d_qasc[m], state.gates) for m in streams}
    if cfg.modality != "mul":
        return res[cfg.modality]
    if cfg.fusion == "sequence":
        return concat([res["opt"], res["tir"]], axis=1)
    return fuse_static(res["opt"], res["tir"], cfg.fusion, state.concat_proj)


def _rows(t: Tensor, a: int, b: int) -> Tensor:
    shape = t.shape

    def back(g):
        full = np.zeros(shape)
        full[a:b] = g
        return (full,)

    return Tensor._make(t.data[a:b], (t,), back)


def forward_batch(state: ModelState, f_opt, f_tir, q, dec_in, attn_log: list | None = None) -> Tensor:
    visual = visual_tokens(state, f_opt, f_tir, q)
    return state.decoder.forward(visual, q, dec_in, attn_log)


def forward(opt_img, tir_img, question_tokens, state: ModelState, answer_prefix=()) -> Tensor:
    """Teacher-forced logits (t_max x V) for one image pair and question."""
    bb = state.backbone
    f_opt = bb.encode_array(np.asarray(opt_img, dtype=np.float64), "opt")[None]
    f_tir = bb.encode_array(np.asarray(tir_img, dtype=np.float64), "tir")[None]
    q = bb.encode_question(question_tokens)[None]
    dec_in = np.full((1, state.cfg.t_max), PAD)
    dec_in[0, 0] = BOS
    prefix = list(answer_prefix)[: state.cfg.t_max - 1]
    dec_in[0, 1:1 + len(prefix)] = prefix
    logits = forward_batch(state, f_opt, f_tir, q, dec_in)
    return logits.reshape(state.cfg.t_max, state.cfg.vocab_size)


def nll_loss(logits, target, mask=None) -> Tensor:
    """Summed token negative log-likelihood (main term of the objective)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise DimensionError(f"logits {logits.shape} vs target {target.shape}")
    if target.size < 1:
        raise DimensionError("empty target")
    return token_nll(logits, target, mask)


def batch_loss(state: ModelState, enc: Encoded, idx: np.ndarray) -> tuple[Tensor, float, float]:
    f_opt, f_tir, q = enc.f_opt[enc.opt_idx[idx]], enc.f_tir[enc.tir_idx[idx]], enc.q[idx]
    logits = forward_batch(state, f_opt, f_tir, q, enc.dec_in[idx])
    main = mul(token_nll(logits, enc.target[idx], enc.mask[idx]), 1.0 / len(idx))
    total, aux_val = main, 0.0
    if state.cfg.use_pgke and state.cfg.aux_weight > 0:
        pos = state.bank.positives(enc.scene_ids[idx], [enc.event_kinds[i] for i in idx])
        aux = alignment_loss(q, state.bank, state.pgke, pos, state.cfg.nce_temperature)
        aux_val = float(aux.data)
        total = add(main, mul(aux, state.cfg.aux_weight))
    return total, float(main.data), aux_val


# ---------------------------------------------------------------- optimisation


@dataclass
class Schedule:
    lr: float = 3e-3
    steps: int = 600
    batch: int = 16
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    warmup: int = 0
    gate_lr_mult: float = 1.0

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        t = (step - self.warmup) / max(1, self.steps - self.warmup)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t))


class Optimizer:
    """Plain gradient descent or Adam(W) over a fixed parameter list."""

    def __init__(self, params: list[Param], kind: str = "adam", weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, lr_scale: dict[str, float] | None = None):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params, self.kind, self.wd = params, kind, weight_decay
        self.scale = [(lr_scale or {}).get(p.name, 1.0) for p in params]
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if self.kind == "sgd":
                upd = g
            else:
                self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
                self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
                mh = self.m[i] / (1 - self.b1 ** self.t)
                vh = self.v[i] / (1 - self.b2 ** self.t)
                upd = mh / (np.sqrt(vh) + self.eps)
            if self.wd and p.data.ndim >= 2:
                p.data -= lr * self.wd * p.data
            p.data -= lr * self.scale[i] * upd


def train(enc: Encoded, state: ModelState, schedule: Schedule, log=None) -> list[dict]:
    """Minibatch training of the trainable set only; returns the per-step loss trace."""
    if len(enc) == 0:
        raise ValueError("empty training set")
    params = state.trainable_params()
    gates = {p.name: schedule.gate_lr_mult for p in state.gates.params()}
    opt = Optimizer(params, schedule.optimizer, schedule.weight_decay, lr_scale=gates)
    rng = SeededRng(schedule.seed, 0x7A)
    n, bs = len(enc), min(schedule.batch, len(enc))
    order, cursor, epoch = rng.child(0).permutation(n), 0, 0
    trace = []
    for step in range(schedule.steps):
        if cursor + bs > n:
            epoch += 1
            order, cursor = rng.child(epoch).permutation(n), 0
        idx = np.sort(order[cursor:cursor + bs])
        cursor += bs
        opt.zero_grad()
        total, main, aux = batch_loss(state, enc, idx)
        if not np.isfinite(total.data):
            raise TrainingAborted(f"non-finite loss at step {step}: main={main}, aux={aux}")
        total.backward()
        lr = schedule.lr_at(step)
        opt.step(lr)
        trace.append({"step": step, "loss": float(total.data), "main": main, "aux": aux, "lr": lr})
        if log is not None and (step % 50 == 0 or step == schedule.steps - 1):
            log(f"step {step:5d} loss {float(total.data):.4f} main {main:.4f} aux {aux:.4f} lr {lr:.2e}")
    return trace


def greedy_decode(state: ModelState, f_opt, f_tir, q) -> np.ndarray:
    """Greedy argmax decoding (ties -> lowest id); returns (B, t_max) token ids, EOS-terminated."""
    T = state.cfg.t_max
    B = q.shape[0]
    with no_grad():
        visual = visual_tokens(state, f_opt, f_tir, q)
        dec_in = np.full((B, T), PAD)
        dec_in[:, 0] = BOS
        out = np.full((B, T), PAD)
        done = np.zeros(B, dtype=bool)
        for t in range(T):
            logits = state.decoder.forward(visual, q, dec_in).data
            nxt = np.argmax(logits[:, t], axis=-1)
            nxt = np.where(done, PAD, nxt)
            out[:, t] = nxt
            done |= nxt == EOS
            if t + 1 < T:
                dec_in[:, t + 1] = np.where(done, PAD, nxt)
            if done.all():
                break
    return out


def predict_encoded(state: ModelState, enc: Encoded, batch: int = 256) -> list[str]:
    from .data import detokenize

    answers = []
    for a in range(0, len(enc), batch):
        idx = np.arange(a, min(a + batch, len(enc)))
        ids = greedy_decode(state, enc.f_opt[enc.opt_idx[idx]], enc.f_tir[enc.tir_idx[idx]], enc.q[idx])
        answers += [detokenize(row) for row in ids]
    return answers


def predict_answer(opt_img, tir_img, question_tokens, state: ModelState) -> str:
    from .data import detokenize

    bb = state.backbone
    f_opt = bb.encode_array(np.asarray(opt_img, dtype=np.float64), "opt")[None]
    f_tir = bb.encode_array(np.asarray(tir_img, dtype=np.float64), "tir")[None]
    q = bb.encode_question(question_tokens)[None]
    return detokenize(greedy_decode(state, f_opt, f_tir, q)[0])


def check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise EvaluationError(f"non-finite {what}")


def full_model_grad_check(seed: int = 1, eps: float = 1e-5, L: int = 8, D: int = 16, K: int = 2,
                          V: int = 8, batch: int = 2, n_bank: int = 6) -> dict[str, float]:
    """Finite-difference check of the whole objective on toy shapes with open gates.

    Frozen features, questions and bank rows are random draws; every
    trainable parameter (PGKE, QASC, gates, decoder) is probed.
    """
    cfg = ModelConfig(d_model=D, heads=2, d_head=D // 2, d_ffn=2 * D, patch=2, image_size=4, vocab_size=V,
                      t_max=4, k=K, seed=seed)
    rng = SeededRng(seed, 0x6C)
    meta = [{"phrase": "red vehicle", "event_kind": "lane-driving", "scene_id": i % batch, "entity_id": 0}
            for i in range(n_bank)]
    bank = MemoryBank(rng.child(0).normal(0, 1, (n_bank, 2 * D)), meta, d_model=D)
    state = ModelState(cfg, bank)
    state.gates.alpha.data[...] = 0.7
    state.gates.beta.data[...] = -0.4
    f_opt = rng.child(1).normal(0, 1, (batch, L, D))
    f_tir = rng.child(2).normal(0, 1, (batch, L, D))
    q = rng.child(3).normal(0, 1, (batch, D))
    tokens = rng.child(4).integers(3, V, size=(batch, cfg.t_max))
    dec_in = np.concatenate([np.full((batch, 1), BOS), tokens[:, :-1]], axis=1)
    mask = np.ones((batch, cfg.t_max))
    positives = bank.positives(np.arange(batch))

    def loss():
        logits = forward_batch(state, f_opt, f_tir, q, dec_in)
        main = token_nll(logits, tokens, mask)
        aux = alignment_loss(q, bank, state.pgke, positives, cfg.nce_temperature)
        return add(main, mul(aux, cfg.aux_weight))

    return grad_check(loss, state.trainable_params(), eps)


__all__ = [
    "ModelConfig", "BackboneStub", "GateParams", "AnswerDecoder", "ModelState", "Encoded", "Schedule",
    "Optimizer", "encode_split", "fuse_residual", "visual_tokens", "forward_batch", "forward", "nll_loss",
    "batch_loss", "train", "greedy_decode", "predict_encoded", "predict_answer", "TrainingAborted",
    "EncodingError", "answer_arrays", "QAPair", "full_model_grad_check",
]
