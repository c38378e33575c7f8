"""Question-driven prototype retrieval and cross-attention injection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import MHCABlock, MHCAConfig
from .memory import EmptyBank, MemoryBank
from .tensor import (
    ParameterError, SeededRng, Tensor, as_tensor, info_nce, init_weight, l2_normalize, matmul, mul,
)


@dataclass
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray


class PGKEModule:
    def __init__(self, d_model: int, d_proto: int, k: int = 8, rng: SeededRng | None = None,
                 heads: int = 4, d_head: int = 16, d_ffn: int = 128):
        if k < 1:
            raise ParameterError("k must be >= 1")
        rng = rng or SeededRng(0)
        self.k = k
        self.w_q = init_weight(rng.child(0), d_model, d_proto, "pgke.w_q")
        self.mhca = MHCABlock(MHCAConfig(d_model, d_proto, heads, d_head, d_ffn), rng.child(1), "pgke.mhca")

    def params(self):
        return [self.w_q, *self.mhca.params()]


def _check(bank: MemoryBank, k: int) -> None:
    if bank is None or len(bank) == 0:
        raise EmptyBank("retrieval on an empty bank")
    if k > len(bank):
        raise ParameterError(f"k={k} exceeds bank size {len(bank)}")


def cosine_scores(q: np.ndarray, bank: MemoryBank, module: PGKEModule) -> np.ndarray:
    """Cosine similarity of each projected question against every bank row; zero norms give 0."""
    proj = np.atleast_2d(np.asarray(q, dtype=np.float64)) @ module.w_q.data
    norm = np.linalg.norm(proj, axis=1, keepdims=True)
    unit = np.where(norm > 0, proj / np.where(norm > 0, norm, 1.0), 0.0)
    return unit @ bank.unit_rows.T


def retrieve_batch(q: np.ndarray, bank: MemoryBank, module: PGKEModule) -> tuple[np.ndarray, np.ndarray]:
    _check(bank, module.k)
    scores = cosine_scores(q, bank, module)
    k = module.k
    order = np.empty((scores.shape[0], k), dtype=np.int64)
    for b, row in enumerate(scores):
        # every row tied with the k-th best stays a candidate, then a stable sort settles ties
        kth = np.partition(row, len(row) - k)[len(row) - k]
        cand = np.flatnonzero(row >= kth)
        order[b] = cand[np.argsort(-row[cand], kind="stable")[:k]]
    return order, np.take_along_axis(scores, order, axis=1)


def retrieve_topk(q, bank: MemoryBank, module: PGKEModule) -> RetrievalResult:
    """Top-k rows by cosine score; ties go to the lower row index."""
    idx, sc = retrieve_batch(np.asarray(q).reshape(1, -1), bank, module)
    return RetrievalResult(idx[0], sc[0])


def residual_from_indices(f_m, idx: np.ndarray, bank: MemoryBank, module: PGKEModule) -> Tensor:
    """Cross-attend features ``f_m`` (..., L, D) over the bank rows ``idx`` (..., K)."""
    kv = Tensor(bank.vectors[idx])
    return module.mhca.forward(as_tensor(f_m), kv)


def pgke_residual(f_m, q, bank: MemoryBank, module: PGKEModule) -> Tensor:
    res = retrieve_topk(q, bank, module)
    return residual_from_indices(f_m, res.indices, bank, module)


def alignment_loss(q: np.ndarray, bank: MemoryBank, module: PGKEModule, positives: np.ndarray,
                   temperature: float = 0.1) -> Tensor:
    """Multi-positive InfoNCE pulling projected questions towards their own scene's prototypes."""
    proj = l2_normalize(matmul(Tensor(np.atleast_2d(q)), module.w_q))
    sims = matmul(proj, Tensor(bank.unit_rows.T))
    return info_nce(mul(sims, 1.0 / temperature), positives)
