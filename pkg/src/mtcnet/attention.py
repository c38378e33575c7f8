"""Multi-head cross-attention increment block (pre-norm, FFN inside the increment)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError, Param, SeededRng, Tensor, add, as_tensor, gelu, init_ones, init_weight,
    init_zeros, layer_norm, linear, matmul, reshape, softmax_rows, swapaxes,
)

__all__ = ["MHCAConfig", "MHCABlock", "layer_norm", "mhca_forward", "attention_weights", "causal_mask"]


@dataclass(frozen=True)
class MHCAConfig:
    d_model: int = 64
    d_kv_in: int = 64
    heads: int = 4
    d_head: int = 16
    d_ffn: int = 128
    use_ffn: bool = True

    def __post_init__(self):
        for name in ("d_model", "d_kv_in", "heads", "d_head", "d_ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class MHCABlock:
    """Weights of one cross-attention block.

    ``forward`` returns the increment ``O + FFN(LN(O))`` where ``O`` is the
    concatenated-head attention output projected back to ``d_model``; the
    caller owns any residual path.
    """

    def __init__(self, cfg: MHCAConfig, rng: SeededRng, prefix: str = "mhca"):
        self.cfg = cfg
        hd = cfg.heads * cfg.d_head
        p = prefix
        self.w_q = init_weight(rng.child(0), cfg.d_model, hd, f"{p}.w_q")
        self.w_k = init_weight(rng.child(1), cfg.d_kv_in, hd, f"{p}.w_k")
        self.w_v = init_weight(rng.child(2), cfg.d_kv_in, hd, f"{p}.w_v")
        self.w_o = init_weight(rng.child(3), hd, cfg.d_model, f"{p}.w_o")
        self.ln_q = (init_ones(cfg.d_model, f"{p}.ln_q.scale"), init_zeros(cfg.d_model, f"{p}.ln_q.shift"))
        self.ln_kv = (init_ones(cfg.d_kv_in, f"{p}.ln_kv.scale"), init_zeros(cfg.d_kv_in, f"{p}.ln_kv.shift"))
        if cfg.use_ffn:
            self.ffn_w1 = init_weight(rng.child(4), cfg.d_model, cfg.d_ffn, f"{p}.ffn.w1")
            self.ffn_b1 = init_zeros(cfg.d_ffn, f"{p}.ffn.b1")
            self.ffn_w2 = init_weight(rng.child(5), cfg.d_ffn, cfg.d_model, f"{p}.ffn.w2")
            self.ffn_b2 = init_zeros(cfg.d_model, f"{p}.ffn.b2")
            self.ln_ffn = (init_ones(cfg.d_model, f"{p}.ln_ffn.scale"), init_zeros(cfg.d_model, f"{p}.ln_ffn.shift"))

    def params(self) -> list[Param]:
        ps = [self.w_q, self.w_k, self.w_v, self.w_o, *self.ln_q, *self.ln_kv]
        if self.cfg.use_ffn:
            ps += [self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2, *self.ln_ffn]
        return ps

    def _split(self, x: Tensor) -> Tensor:
        # (..., L, H*dh) -> (..., H, L, dh)
        lead = x.shape[:-1]
        x = reshape(x, (*lead, self.cfg.heads, self.cfg.d_head))
        return swapaxes(x, -2, -3)

    def project(self, q_seq, kv_seq):
        q_seq, kv_seq = as_tensor(q_seq), as_tensor(kv_seq)
        cfg = self.cfg
        if q_seq.shape[-1] != cfg.d_model or kv_seq.shape[-1] != cfg.d_kv_in:
            raise DimensionError(
                f"mhca: query {q_seq.shape} / key-value {kv_seq.shape} vs "
                f"d_model={cfg.d_model}, d_kv_in={cfg.d_kv_in}")
        if q_seq.shape[-2] < 1 or kv_seq.shape[-2] < 1:
            raise DimensionError("mhca: empty sequence")
        qn = layer_norm(q_seq, *self.ln_q)
        kvn = layer_norm(kv_seq, *self.ln_kv)
        return (self._split(linear(qn, self.w_q)), self._split(linear(kvn, self.w_k)),
                self._split(linear(kvn, self.w_v)))

    def forward(self, q_seq, kv_seq, mask=None, return_weights: bool = False):
        qh, kh, vh = self.project(q_seq, kv_seq)
        scores = matmul(qh, swapaxes(kh, -1, -2))
        scores = scores * (1.0 / math.sqrt(self.cfg.d_head))
        if mask is not None:
            scores = add(scores, mask)
        attn = softmax_rows(scores)
        ctx = swapaxes(matmul(attn, vh), -2, -3)  # (..., L, H, dh)
        ctx = reshape(ctx, (*ctx.shape[:-2], self.cfg.heads * self.cfg.d_head))
        out = linear(ctx, self.w_o)
        if self.cfg.use_ffn:
            h = layer_norm(out, *self.ln_ffn)
            out = add(out, linear(gelu(linear(h, self.ffn_w1, self.ffn_b1)), self.ffn_w2, self.ffn_b2))
        return (out, attn) if return_weights else out

    __call__ = forward


def mhca_forward(q_seq, kv_seq, block: MHCABlock, mask=None) -> Tensor:
    return block.forward(q_seq, kv_seq, mask)


def attention_weights(q_seq, kv_seq, block: MHCABlock, mask=None) -> np.ndarray:
    """Per-head attention maps ``(..., heads, len_q, len_kv)`` used by ``mhca_forward``."""
    _, attn = block.forward(q_seq, kv_seq, mask, return_weights=True)
    return attn.data


def causal_mask(t: int) -> np.ndarray:
    """Additive mask letting position i see positions <= i."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -1e30
    return m
