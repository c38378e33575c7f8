"""Bidirectional optical/thermal compensation and the static fusion baselines."""
from __future__ import annotations

from .attention import MHCABlock, MHCAConfig
from .tensor import DimensionError, Param, SeededRng, Tensor, add, as_tensor, concat, init_weight, linear, mul


class QASCModule:
    """Two untied blocks: thermal->optical (query optical) and optical->thermal."""

    def __init__(self, d_model: int, rng: SeededRng | None = None, heads: int = 4, d_head: int = 16,
                 d_ffn: int = 128):
        rng = rng or SeededRng(0)
        cfg = MHCAConfig(d_model, d_model, heads, d_head, d_ffn)
        self.mhca_t2o = MHCABlock(cfg, rng.child(0), "qasc.t2o")
        self.mhca_o2t = MHCABlock(cfg, rng.child(1), "qasc.o2t")

    def params(self):
        return [*self.mhca_t2o.params(), *self.mhca_o2t.params()]


def qasc_residuals(f_opt, f_th, module: QASCModule) -> tuple[Tensor, Tensor]:
    """Both increments are computed from the unmodified inputs."""
    f_opt, f_th = as_tensor(f_opt), as_tensor(f_th)
    if f_opt.shape != f_th.shape:
        raise DimensionError(f"qasc: optical {f_opt.shape} vs thermal {f_th.shape}")
    return module.mhca_t2o(f_opt, f_th), module.mhca_o2t(f_th, f_opt)


def make_concat_projection(d_model: int, rng: SeededRng) -> Param:
    return init_weight(rng, 2 * d_model, d_model, "fusion.concat_proj")


def fuse_static(f_opt, f_th, mode: str, proj: Param | None = None) -> Tensor:
    f_opt, f_th = as_tensor(f_opt), as_tensor(f_th)
    if f_opt.shape != f_th.shape:
        raise DimensionError(f"fuse: optical {f_opt.shape} vs thermal {f_th.shape}")
    if mode == "add":
        return mul(add(f_opt, f_th), 0.5)
    if mode == "concat_project":
        if proj is None:
            raise ValueError("concat_project needs a (2D x D) projection")
        return linear(concat([f_opt, f_th], axis=-1), proj)
    raise ValueError(f"unknown static fusion mode {mode!r}")
