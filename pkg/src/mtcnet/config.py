"""Flat ``key = value`` run configuration shared by the CLI, the estimators and the ablation harness."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import VOCAB, SceneParams
from .model import ModelConfig, Schedule

RESOLVED_NAME = "config.resolved"
SEED_ENV = "MTC_SEED"


class ConfigError(ValueError):
    """Unknown key, unparsable value or malformed line."""


@dataclass
class RunConfig:
    seed: int = 0
    # model
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
    # memory
    jitter: float = 0.05
    # data
    data_seed: int = 1
    test_seed: int = 2
    n_train: int = 2000
    n_test: int = 500
    cell: int = 8
    max_vehicles: int = 8
    # optimisation
    steps: int = 2000
    lr: float = 3e-3
    batch: int = 16
    optimizer: str = "adam"
    weight_decay: float = 0.0
    warmup: int = 0
    gate_lr_mult: float = 1.0
    # ablation
    seeds: str = "0,1,2,3,4"
    # paths
    data_dir: str = ""
    test_dir: str = ""
    bank: str = ""
    checkpoint: str = ""
    out: str = ""

    def __post_init__(self):
        if self.vocab_size < len(VOCAB):
            raise ConfigError(f"vocab_size must be >= {len(VOCAB)} to cover the question vocabulary")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.image_size % self.cell:
            raise ConfigError("image_size must be a multiple of cell")

    # ---------------------------------------------------------------- views

    def model_config(self, **overrides) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw.update(overrides)
        return ModelConfig(**kw)

    def schedule(self, seed: int | None = None) -> Schedule:
        return Schedule(lr=self.lr, steps=self.steps, batch=self.batch,
                        seed=self.seed if seed is None else seed, optimizer=self.optimizer,
                        weight_decay=self.weight_decay, warmup=self.warmup, gate_lr_mult=self.gate_lr_mult)

    def scene_params(self) -> SceneParams:
        return SceneParams(cell=self.cell, max_vehicles=self.max_vehicles)

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in str(self.seeds).replace(" ", "").split(",") if s]
        except ValueError as exc:
            raise ConfigError(f"seeds must be a comma list of integers, got {self.seeds!r}") from exc

    def with_updates(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)

    # ---------------------------------------------------------------- text form

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write_resolved(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / RESOLVED_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def preset(name: str) -> RunConfig:
    """Named starting points. ``bench`` is the small grid used by the ablation suite."""
    if name == "default":
        return RunConfig()
    if name == "bench":
        return RunConfig(d_model=32, heads=2, d_head=16, d_ffn=64, patch=4, image_size=16, cell=4,
                         max_vehicles=6, steps=2000, batch=64)
    if name == "tiny":
        return RunConfig(d_model=16, heads=2, d_head=8, d_ffn=32, patch=4, image_size=16, cell=4,
                         max_vehicles=6, n_train=40, n_test=20, steps=30, batch=8, k=2)
    raise ConfigError(f"unknown preset {name!r}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_pairs(lines, source: str = "<config>") -> dict:
    """``key = value`` lines to typed values; blank lines and ``#`` comments are ignored."""
    out = {}
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value, _TYPES[key])
        except ConfigError as exc:
            raise ConfigError(f"{source}:{no}: {exc}") from exc
    return out


def load_config(path=None, overrides=(), base: RunConfig | None = None, env=None) -> RunConfig:
    """File values, then ``key=value`` overrides, then ``MTC_SEED`` from the environment."""
    cfg = base or RunConfig()
    values = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values.update(parse_pairs(text.splitlines(), str(path)))
    values.update(parse_pairs(list(overrides), "<override>"))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    try:
        return cfg.with_updates(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def read_resolved(path) -> RunConfig:
    return load_config(path, env={})
