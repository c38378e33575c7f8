"""Offline regulation memory: phrase, grounded box and epicenter-pooled prototype per event."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import COLORS, QAPair, SceneSpec, Split
from .tensor import ParameterError, SeededRng

EVENT_KINDS = ("crosswalk-violation", "wrong-way", "lane-driving", "jaywalking")
BANK_MAGIC = b"TRMB"
BANK_VERSION = 1


class NoReferent(LookupError):
    """The question is about the whole scene, not a groundable entity."""


class EmptyBank(ValueError):
    """No prototype available (none groundable, or retrieval on an empty bank)."""


class BankFormatError(ValueError):
    """Bad magic or version in a bank file."""


class BankCorruptionError(BankFormatError):
    """Bank file is truncated or its metadata is unreadable."""


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"degenerate box {self}")

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2


@dataclass(frozen=True)
class SemanticPhrase:
    text: str
    event_kind: str
    entity_id: int

    def __post_init__(self):
        n = len(self.text.split())
        if n == 0 or n > 16:
            raise ValueError("phrase must have 1-16 tokens")


@dataclass(frozen=True)
class Prototype:
    vector: np.ndarray
    phrase: SemanticPhrase
    source_scene: int


class MemoryBank:
    """Prototype matrix (N x Dp) plus per-row phrase metadata."""

    def __init__(self, vectors: np.ndarray, meta: list[dict], d_model: int | None = None,
                 tau_build: float | None = None):
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(meta):
            raise ValueError(f"bank vectors {vectors.shape} vs {len(meta)} metadata rows")
        self.vectors = vectors
        self.meta = [dict(m) for m in meta]
        self.d_model = d_model if d_model is not None else vectors.shape[1] // 2
        self.tau_build = tau_build
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        self._unit = np.where(norms > 0, vectors / np.where(norms > 0, norms, 1.0), 0.0)
        self._scene_ids = np.array([m["scene_id"] for m in meta], dtype=np.int64)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def unit_rows(self) -> np.ndarray:
        return self._unit

    @property
    def scene_ids(self) -> np.ndarray:
        return self._scene_ids

    @property
    def rows(self) -> list[Prototype]:
        return [Prototype(self.vectors[i], SemanticPhrase(m["phrase"], m["event_kind"], m.get("entity_id", -1)),
                          m["scene_id"]) for i, m in enumerate(self.meta)]

    def positives(self, scene_ids, event_kinds=None) -> np.ndarray:
        """Boolean (B, N) mask of rows from each sample's own scene (and event kind when known)."""
        mask = np.asarray(scene_ids)[:, None] == self._scene_ids[None, :]
        if event_kinds is not None:
            kinds = np.array([m["event_kind"] for m in self.meta])
            for b, ek in enumerate(event_kinds):
                if ek is not None and (mask[b] & (kinds == ek)).any():
                    mask[b] &= kinds == ek
        return mask

    def __eq__(self, other):
        return (isinstance(other, MemoryBank) and self.vectors.shape == other.vectors.shape
                and np.array_equal(self.vectors, other.vectors) and self.meta == other.meta)


# ---------------------------------------------------------------- phases


def event_kind_of(scene: SceneSpec, entity_id: int) -> str:
    e = scene.entity(entity_id)
    v = scene.violations[entity_id]
    if e.kind == "pedestrian":
        if not v.jaywalking:
            raise NoReferent("pedestrian without a violation is not an event")
        return "jaywalking"
    if v.crosswalk:
        return "crosswalk-violation"
    if v.wrong_way:
        return "wrong-way"
    return "lane-driving"


_TEMPLATES = {
    "crosswalk-violation": "{kind} in crosswalk zone",
    "wrong-way": "{kind} driving against lane direction",
    "lane-driving": "{kind} driving in its lane",
    "jaywalking": "pedestrian crossing outside crosswalk",
}


def distill_phrase(scene: SceneSpec, qa: QAPair) -> SemanticPhrase:
    if qa.referent is None:
        raise NoReferent(f"{qa.qtype} question has no grounded referent")
    e = scene.entity(qa.referent)
    kind = event_kind_of(scene, e.id)
    noun = "vehicle" if e.kind == "vehicle" else "small vehicle"
    return SemanticPhrase(_TEMPLATES[kind].format(kind=noun), kind, e.id)


def ground_event(scene: SceneSpec, phrase: SemanticPhrase, rng: SeededRng | None,
                 jitter: float = 0.05) -> tuple[BoundingBox, BoundingBox]:
    """Optical and thermal boxes: the true box with independent per-coordinate jitter."""
    if not 0 <= jitter <= 0.1:
        raise ParameterError("jitter must lie in [0, 0.1] of the image side")
    b = scene.entity(phrase.entity_id).box
    W, H = scene.width, scene.height
    out = []
    for m in range(2):
        if rng is None or jitter == 0:
            d = np.zeros(4)
        else:
            d = rng.child(m).uniform(-jitter, jitter, size=4) * np.array([W, H, W, H])
        x0, y0, x1, y1 = b.x0 + d[0], b.y0 + d[1], b.x1 + d[2], b.y1 + d[3]
        x0, x1 = sorted((float(np.clip(x0, 0, W)), float(np.clip(x1, 0, W))))
        y0, y1 = sorted((float(np.clip(y0, 0, H)), float(np.clip(y1, 0, H))))
        out.append(BoundingBox(x0, y0, x1, y1))
    return out[0], out[1]


def union_box(b_opt: BoundingBox, b_th: BoundingBox) -> BoundingBox:
    return BoundingBox(min(b_opt.x0, b_th.x0), min(b_opt.y0, b_th.y0),
                       max(b_opt.x1, b_th.x1), max(b_opt.y1, b_th.y1))


def epicenter_aggregate(f_concat: np.ndarray, b_union: BoundingBox, tau: float,
                        token_grid: tuple[int, int], image_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Softmax(F q_epi / tau)-weighted sum of all token features.

    ``q_epi`` is the mean feature of the 3x3 token window around the box
    centre. Box coordinates are pixels of an ``image_hw`` image (token units
    when omitted).
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    f = np.asarray(f_concat, dtype=np.float64)
    rows, cols = token_grid
    if f.shape[0] != rows * cols:
        raise ValueError(f"{f.shape[0]} tokens do not fill a {rows}x{cols} grid")
    H, W = image_hw if image_hw is not None else (rows, cols)
    cx, cy = b_union.center
    r = min(max(int(cy * rows / H), 0), rows - 1)
    c = min(max(int(cx * cols / W), 0), cols - 1)
    grid = f.reshape(rows, cols, -1)
    window = grid[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2].reshape(-1, f.shape[1])
    q_epi = window.mean(axis=0)
    logits = f @ q_epi / tau
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ f


def build_memory(split: Split, encoder, tau: float = 0.07, rng: SeededRng | None = None,
                 jitter: float = 0.05) -> MemoryBank:
    """One prototype per groundable (scene, event kind); rows sorted by that key.

    ``encoder.encode_pair(pair)`` must return the frozen (L, D) optical and
    thermal token features. Vectors are rounded through float32 so the bank
    equals its own file round-trip.
    """
    if len(split) == 0:
        raise ValueError("dataset is empty")
    rng = rng or SeededRng(0)
    chosen: dict[tuple[int, str], SemanticPhrase] = {}
    for scene, per in zip(split.scenes, split.qa):
        for qa in per:
            try:
                phrase = distill_phrase(scene, qa)
            except NoReferent:
                continue
            chosen.setdefault((scene.id, phrase.event_kind), phrase)
    if not chosen:
        raise EmptyBank("no groundable question in the dataset")
    by_id = {s.id: i for i, s in enumerate(split.scenes)}
    vectors, meta = [], []
    cache: dict[int, np.ndarray] = {}
    for (sid, kind) in sorted(chosen):
        phrase = chosen[(sid, kind)]
        i = by_id[sid]
        scene = split.scenes[i]
        if sid not in cache:
            f_opt, f_th = encoder.encode_pair(split.pairs[i])
            cache[sid] = np.concatenate([np.asarray(f_opt), np.asarray(f_th)], axis=1)
        f = cache[sid]
        b_opt, b_th = ground_event(scene, phrase, rng.child(sid, EVENT_KINDS.index(kind)), jitter)
        grid = encoder.token_grid
        s = epicenter_aggregate(f, union_box(b_opt, b_th), tau, grid, (scene.height, scene.width))
        if not np.all(np.isfinite(s)):
            raise FloatingPointError(f"non-finite prototype for scene {sid}")
        vectors.append(s.astype(np.float32).astype(np.float64))
        meta.append({"phrase": phrase.text, "event_kind": kind, "scene_id": sid, "entity_id": phrase.entity_id})
    return MemoryBank(np.stack(vectors), meta, d_model=vectors[0].shape[0] // 2, tau_build=tau)


def expected_bank_size(split: Split) -> int:
    return len({(s.id, distill_phrase(s, q).event_kind) for s, per in zip(split.scenes, split.qa)
                for q in per if _groundable(s, q)})


def _groundable(scene: SceneSpec, qa: QAPair) -> bool:
    try:
        distill_phrase(scene, qa)
    except NoReferent:
        return False
    return True


# ---------------------------------------------------------------- persistence


def save_bank(bank: MemoryBank, path) -> None:
    meta = json.dumps(bank.meta, sort_keys=True).encode("utf-8")
    n, dp = bank.vectors.shape
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC + struct.pack("<III", BANK_VERSION, n, dp))
        fh.write(bank.vectors.astype("<f4").tobytes(order="C"))
        fh.write(struct.pack("<Q", len(meta)) + meta)


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != BANK_MAGIC:
        raise BankFormatError(f"bad bank magic {buf[:4]!r}")
    if len(buf) < 16:
        raise BankCorruptionError("bank header truncated")
    version, n, dp = struct.unpack("<III", buf[4:16])
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported bank version {version}")
    end = 16 + 4 * n * dp
    if len(buf) < end + 8:
        raise BankCorruptionError("bank truncated inside the vector block")
    vectors = np.frombuffer(buf[16:end], dtype="<f4").astype(np.float64).reshape(n, dp)
    (mlen,) = struct.unpack("<Q", buf[end:end + 8])
    raw = buf[end + 8:]
    if len(raw) != mlen:
        raise BankCorruptionError(f"metadata length {mlen} but {len(raw)} bytes present")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankCorruptionError(f"unreadable bank metadata: {exc}") from exc
    if len(meta) != n:
        raise BankCorruptionError(f"{len(meta)} metadata rows for {n} vectors")
    return MemoryBank(vectors, meta, d_model=dp // 2)


__all__ = [
    "BoundingBox", "SemanticPhrase", "Prototype", "MemoryBank", "NoReferent", "EmptyBank",
    "BankFormatError", "BankCorruptionError", "distill_phrase", "ground_event", "union_box",
    "epicenter_aggregate", "build_memory", "save_bank", "load_bank", "expected_bank_size", "COLORS",
]
