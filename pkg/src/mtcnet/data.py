"""Synthetic paired optical/thermal traffic scenes with templated QA.

A scene is a road (two opposing lanes) crossed by one crosswalk, populated with
vehicles and pedestrians. Violation flags are derived from geometry only, so
``derive_violations`` re-derives them from any stored scene.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import SeededRng

CONDITIONS = ("day", "night", "fog")
KINDS = ("vehicle", "small-vehicle", "pedestrian")
HEADINGS = ("N", "E", "S", "W")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
COLORS = ("red", "green", "blue", "yellow", "gray", "cyan", "orange", "purple")
# every paint has the same channel sum and is brighter than the asphalt
PALETTE = np.array([
    [1.00, 0.30, 0.30], [0.30, 1.00, 0.30], [0.30, 0.30, 1.00], [0.80, 0.80, 0.00],
    [0.54, 0.54, 0.54], [0.00, 0.80, 0.80], [1.00, 0.50, 0.10], [0.80, 0.00, 0.80],
])
QTYPES = ("presence", "count", "location-quadrant", "compare-count", "condition-night",
          "condition-fog", "vehicle-violation", "pedestrian-violation", "modality-match", "deduce")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
QUESTION_WORDS = ("is", "there", "a", "small", "vehicle", "pedestrian", "how", "many", "vehicles",
                  "pedestrians", "are", "where", "the", "more", "fewer", "than", "it", "night",
                  "foggy", "what", "violation", "does", "commit", "any", "jaywalking", "do", "two",
                  "images", "match", "scene", "safe")
ANSWER_WORDS = ("yes", "no", "0", "1", "2", "3", "4", "5", "6", "7", "8", "top", "bottom", "left",
                "right", "none", "crosswalk", "wrong", "way")
VOCAB = SPECIALS + QUESTION_WORDS + COLORS + ANSWER_WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS, UNK = 0, 1, 2, 3

IMAGE_MAGIC = b"TVQP"
MANIFEST = "manifest.jsonl"

# rendering constants
OPT_BG, OPT_ROAD, OPT_STRIPE = 0.3, 0.12, 0.6
TIR_BG, TIR_ROAD, TIR_STRIPE = 0.2, 0.3, 0.36
NIGHT_GAIN, NIGHT_NOISE = 0.15, 0.1
FOG_KERNEL, FOG_GAIN, FOG_VEIL = 5, 0.5, 0.75


class DatasetFormatError(ValueError):
    """Manifest or image file is malformed."""


class DatasetConsistencyError(DatasetFormatError):
    """Image header disagrees with the manifest."""


class GenerationError(RuntimeError):
    """Scene placement failed after the retry budget."""


def tokenize(text: str) -> list[int]:
    return [TOKEN_ID.get(w, UNK) for w in text.split()]


def detokenize(ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        # ids past the word list exist when vocab_size pads the table
        words.append(VOCAB[i] if 0 <= i < len(VOCAB) else VOCAB[UNK])
    return " ".join(words)


# ---------------------------------------------------------------- scene model


@dataclass
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    def intersect_area(self, other: "Box") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(0.0, w) * max(0.0, h)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class Lane:
    box: Box
    direction: str


@dataclass
class Entity:
    id: int
    kind: str
    box: Box
    heading: str
    heat: float
    color: int


@dataclass
class Violations:
    crosswalk: bool = False
    wrong_way: bool = False
    jaywalking: bool = False

    @property
    def any(self) -> bool:
        return self.crosswalk or self.wrong_way or self.jaywalking


@dataclass
class SceneSpec:
    id: int
    condition: str
    width: int
    height: int
    lanes: list[Lane]
    crosswalk: Box
    entities: list[Entity]
    violations: dict[int, Violations] = field(default_factory=dict)

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise KeyError(f"scene {self.id} has no entity {entity_id}")

    def vehicles(self) -> list[Entity]:
        return [e for e in self.entities if e.kind != "pedestrian"]

    def pedestrians(self) -> list[Entity]:
        return [e for e in self.entities if e.kind == "pedestrian"]

    def to_record(self) -> dict:
        return {
            "id": self.id, "condition": self.condition, "grid": [self.width, self.height],
            "lanes": [{"box": ln.box.as_list(), "direction": ln.direction} for ln in self.lanes],
            "crosswalk": self.crosswalk.as_list(),
            "entities": [{"id": e.id, "kind": e.kind, "box": e.box.as_list(), "heading": e.heading,
                          "heat": e.heat, "color": e.color} for e in self.entities],
            "violations": {str(k): asdict(v) for k, v in self.violations.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSpec":
        try:
            return cls(
                id=int(rec["id"]), condition=rec["condition"],
                width=int(rec["grid"][0]), height=int(rec["grid"][1]),
                lanes=[Lane(Box(*ln["box"]), ln["direction"]) for ln in rec["lanes"]],
                crosswalk=Box(*rec["crosswalk"]),
                entities=[Entity(e["id"], e["kind"], Box(*e["box"]), e["heading"], e["heat"], e["color"])
                          for e in rec["entities"]],
                violations={int(k): Violations(**v) for k, v in rec["violations"].items()},
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise DatasetFormatError(f"bad scene record: {exc}") from exc


@dataclass
class SceneParams:
    """Placement knobs. Entities sit one per ``cell`` x ``cell`` tile."""

    min_vehicles: int = 1
    max_vehicles: int = 8
    max_pedestrians: int = 4
    p_no_pedestrians: float = 0.4
    p_no_small: float = 0.4
    p_small: float = 0.5
    p_lawful: float = 0.35
    p_wrong_way: float = 0.3
    p_crosswalk: float = 0.25
    p_jaywalk: float = 0.5
    p_crossing: float = 0.25
    cell: int = 8
    max_retries: int = 200

    @classmethod
    def for_difficulty(cls, level: int) -> "SceneParams":
        if level <= 0:
            return cls(min_vehicles=0, max_vehicles=0, max_pedestrians=0)
        return cls()


def derive_violations(scene: SceneSpec) -> dict[int, Violations]:
    out = {}
    for e in scene.entities:
        v = Violations()
        cx, cy = e.box.center
        if e.kind == "pedestrian":
            on_lane = any(ln.box.contains_point(cx, cy) for ln in scene.lanes)
            v.jaywalking = on_lane and not scene.crosswalk.contains_point(cx, cy)
        else:
            v.crosswalk = e.box.intersect_area(scene.crosswalk) > 0.25 * e.box.area
            lane = next((ln for ln in scene.lanes if ln.box.contains_point(cx, cy)), None)
            v.wrong_way = lane is not None and e.heading == OPPOSITE[lane.direction]
        out[e.id] = v
    return out


def _heat(rng: SeededRng, kind: str, condition: str) -> float:
    # surfaces cool at night, so emitters stand out further from the background
    lo, hi = {"vehicle": (0.68, 0.8), "small-vehicle": (0.6, 0.72), "pedestrian": (0.5, 0.6)}[kind]
    if condition == "night":
        lo, hi = lo + 0.18, hi + 0.18
    return round(float(rng.uniform(lo, hi)), 4)


def generate_scene(rng: SeededRng, condition: str, params: SceneParams | None = None,
                   scene_id: int = 0, size: int = 64) -> SceneSpec:
    """Road of two one-tile lanes crossed by a one-tile crosswalk; at most one entity per tile."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    params = params or SceneParams()
    cell = params.cell
    if size % cell or size // cell < 4:
        raise ValueError(f"size {size} must be a multiple of the tile size {cell} with >= 4 tiles")
    n = size // cell
    W = H = size
    horizontal = bool(rng.integers(0, 2))
    r = int(rng.integers(1, n - 2))           # first road tile row (or column)
    k = int(rng.integers(1, n - 1))           # crosswalk tile along the road
    a0, a1, a2 = r * cell, (r + 1) * cell, (r + 2) * cell
    if horizontal:
        lanes = [Lane(Box(0, a0, W, a1), "W"), Lane(Box(0, a1, W, a2), "E")]
        crosswalk = Box(k * cell, a0, (k + 1) * cell, a2)
    else:
        lanes = [Lane(Box(a0, 0, a1, H), "S"), Lane(Box(a1, 0, a2, H), "N")]
        crosswalk = Box(a0, k * cell, a2, (k + 1) * cell)

    def tile(lane_idx: int, along: int) -> tuple[int, int]:
        return (r + lane_idx, along) if horizontal else (along, r + lane_idx)   # (row, col)

    lane_tiles = {tile(j, t) for j in range(2) for t in range(n)}
    cw_tiles = {tile(j, k) for j in range(2)}
    side_tiles = [(i, j) for i in range(n) for j in range(n) if (i, j) not in lane_tiles]
    used: set[tuple[int, int]] = set()

    def take(cands) -> tuple[int, int] | None:
        cands = sorted(set(cands) - used)
        if not cands:
            return None
        t = cands[int(rng.integers(0, len(cands)))]
        used.add(t)
        return t

    lawful = rng.random() < params.p_lawful
    n_veh = int(rng.integers(params.min_vehicles, params.max_vehicles + 1)) if params.max_vehicles else 0
    n_ped = 0
    if params.max_pedestrians and rng.random() >= params.p_no_pedestrians:
        n_ped = int(rng.integers(1, params.max_pedestrians + 1))
    no_small = rng.random() < params.p_no_small
    colors = rng.permutation(len(COLORS))
    entities: list[Entity] = []

    for i in range(n_veh):
        kind = "small-vehicle" if not no_small and rng.random() < params.p_small else "vehicle"
        lane_idx = int(rng.integers(0, 2))
        lane = lanes[lane_idx]
        wrong = not lawful and rng.random() < params.p_wrong_way
        heading = OPPOSITE[lane.direction] if wrong else lane.direction
        on_cw = not lawful and rng.random() < params.p_crosswalk
        mine = {t for t in lane_tiles if t[int(not horizontal)] == r + lane_idx}
        t = take(mine & cw_tiles) if on_cw else None
        t = t or take(mine - cw_tiles) or take(lane_tiles - cw_tiles)
        if t is None:
            raise GenerationError(f"could not place vehicle {i} in scene {scene_id}")
        if t[int(not horizontal)] != r + lane_idx:      # fell back to the other lane
            lane = lanes[1 - lane_idx]
            heading = OPPOSITE[lane.direction] if wrong else lane.direction
        along, across = (3 * cell // 4, cell // 2) if kind == "small-vehicle" else (cell, 3 * cell // 4)
        w, h = (along, across) if horizontal else (across, along)
        y0 = t[0] * cell + (cell - h) // 2
        x0 = t[1] * cell + (cell - w) // 2
        entities.append(Entity(len(entities), kind, Box(x0, y0, x0 + w, y0 + h), heading,
                               _heat(rng, kind, condition), int(colors[i])))

    for i in range(n_ped):
        u = rng.random()
        if not lawful and u < params.p_jaywalk:
            t = take(lane_tiles - cw_tiles)
        elif u < params.p_jaywalk + params.p_crossing:
            t = take(cw_tiles)
        else:
            t = None
        t = t or take(side_tiles)
        if t is None:
            raise GenerationError(f"could not place pedestrian {i} in scene {scene_id}")
        side = cell // 2
        y0, x0 = t[0] * cell + (cell - side) // 2, t[1] * cell + (cell - side) // 2
        entities.append(Entity(len(entities), "pedestrian", Box(x0, y0, x0 + side, y0 + side),
                               HEADINGS[int(rng.integers(0, 4))], _heat(rng, "pedestrian", condition),
                               int(rng.integers(0, len(COLORS)))))

    scene = SceneSpec(scene_id, condition, W, H, lanes, crosswalk, entities)
    scene.violations = derive_violations(scene)
    return scene


# ---------------------------------------------------------------- rendering


@dataclass
class RenderedPair:
    opt: np.ndarray  # (3, H, W)
    tir: np.ndarray  # (1, H, W)


def _fill(plane: np.ndarray, box: Box, value) -> None:
    x0, y0 = int(np.floor(box.x0)), int(np.floor(box.y0))
    x1, y1 = int(np.ceil(box.x1)), int(np.ceil(box.y1))
    plane[..., max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = np.asarray(value).reshape(-1, 1, 1) \
        if np.ndim(value) else value


def _tile(scene: SceneSpec) -> int:
    cw = scene.crosswalk
    return int(min(cw.x1 - cw.x0, cw.y1 - cw.y0))


def _front(box: Box, heading: str, depth: int = 2) -> Box:
    if heading == "N":
        return Box(box.x0, box.y0, box.x1, box.y0 + depth)
    if heading == "S":
        return Box(box.x0, box.y1 - depth, box.x1, box.y1)
    if heading == "E":
        return Box(box.x1 - depth, box.y0, box.x1, box.y1)
    return Box(box.x0, box.y0, box.x0 + depth, box.y1)


def _stripes(scene: SceneSpec, plane: np.ndarray, value: float) -> None:
    cw = scene.crosswalk
    horizontal_road = scene.lanes[0].direction in ("E", "W")
    x0, y0, x1, y1 = int(cw.x0), int(cw.y0), int(cw.x1), int(cw.y1)
    period = max(2, _tile(scene) // 2)
    if horizontal_road:
        for y in range(y0, y1, period):
            plane[..., y:min(y + period // 2, y1), x0:x1] = value
    else:
        for x in range(x0, x1, period):
            plane[..., y0:y1, x:min(x + period // 2, x1)] = value


def render_clean(scene: SceneSpec) -> RenderedPair:
    """Daylight rendering of both planes (no degradation)."""
    H, W = scene.height, scene.width
    opt = np.full((3, H, W), OPT_BG)
    tir = np.full((1, H, W), TIR_BG)
    for ln in scene.lanes:
        _fill(opt, ln.box, OPT_ROAD)
        _fill(tir, ln.box, TIR_ROAD)
    _stripes(scene, opt, OPT_STRIPE)
    _stripes(scene, tir, TIR_STRIPE)
    for e in scene.entities:
        color = PALETTE[e.color]
        _fill(opt, e.box, color)
        _fill(tir, e.box, e.heat)
        if e.kind != "pedestrian":
            front = _front(e.box, e.heading, max(1, _tile(scene) // 4))
            _fill(opt, front, 0.5 * color + 0.5)
            _fill(tir, front, min(1.0, e.heat + 0.15))
    return RenderedPair(opt, tir)


def render_pair(scene: SceneSpec, seed: int = 0) -> RenderedPair:
    pair = render_clean(scene)
    opt, tir = pair.opt, pair.tir
    if scene.condition == "night":
        noise = SeededRng(seed, 0x4E, scene.id).normal(0.0, NIGHT_NOISE, size=opt.shape)
        opt = opt * NIGHT_GAIN + noise
    elif scene.condition == "fog":
        opt = np.stack([uniform_filter(p, FOG_KERNEL, mode="nearest") for p in opt])
        opt = FOG_GAIN * opt + (1 - FOG_GAIN) * FOG_VEIL
        tir = np.stack([uniform_filter(p, FOG_KERNEL, mode="nearest") for p in tir])
    return RenderedPair(np.clip(opt, 0.0, 1.0), np.clip(tir, 0.0, 1.0))


# ---------------------------------------------------------------- question answering


@dataclass
class QAPair:
    question: str
    answer: str
    qtype: str
    scene_id: int
    tir_scene: int
    referent: int | None = None  # entity id the question is about, if any

    @property
    def question_ids(self) -> list[int]:
        return tokenize(self.question)

    @property
    def answer_ids(self) -> list[int]:
        return tokenize(self.answer)

    def to_record(self) -> dict:
        return {"q": self.question, "a": self.answer, "qtype": self.qtype, "tir_from": self.tir_scene,
                "referent": self.referent}


def quadrant(scene: SceneSpec, e: Entity) -> str:
    cx, cy = e.box.center
    return ("top" if cy < scene.height / 2 else "bottom") + " " + ("left" if cx < scene.width / 2 else "right")


def vehicle_violation_answer(v: Violations) -> str:
    if v.crosswalk:
        return "crosswalk"
    if v.wrong_way:
        return "wrong way"
    return "none"


def generate_qa(scene: SceneSpec, rng: SeededRng, n_scenes: int | None = None) -> list[QAPair]:
    """8-20 templated questions answered from ground truth.

    ``n_scenes`` is the split size; modality-match questions pair this scene's
    optical image with another scene's thermal image half of the time.
    """
    sid = scene.id
    veh, peds = scene.vehicles(), scene.pedestrians()
    n_small = sum(e.kind == "small-vehicle" for e in veh)
    out: list[QAPair] = []

    def qa(q, a, t, ref=None, tir=sid):
        out.append(QAPair(q, a, t, sid, tir, ref))

    yn = lambda b: "yes" if b else "no"  # noqa: E731
    qa("is there a small vehicle", yn(n_small > 0), "presence")
    qa("is there a pedestrian", yn(len(peds) > 0), "presence")
    qa("how many vehicles are there", str(len(veh)), "count")
    qa("how many pedestrians are there", str(len(peds)), "count")
    for e in [veh[i] for i in rng.permutation(len(veh))[:3]]:
        qa(f"where is the {COLORS[e.color]} vehicle", quadrant(scene, e), "location-quadrant", e.id)
    if rng.random() < 0.5:
        qa("are there more pedestrians than small vehicles", yn(len(peds) > n_small), "compare-count")
    else:
        qa("are there fewer pedestrians than small vehicles", yn(len(peds) < n_small), "compare-count")
    qa("is it night", yn(scene.condition == "night"), "condition-night")
    qa("is it foggy", yn(scene.condition == "fog"), "condition-fog")
    if veh:
        violators = [e for e in veh if scene.violations[e.id].crosswalk or scene.violations[e.id].wrong_way]
        picks = []
        for _ in range(min(2, len(veh))):
            pool = [e for e in (violators if violators and rng.random() < 0.5 else veh) if e not in picks]
            pool = pool or [e for e in veh if e not in picks]
            picks.append(pool[int(rng.integers(0, len(pool)))])
        for e in picks:
            qa(f"what violation does the {COLORS[e.color]} vehicle commit",
               vehicle_violation_answer(scene.violations[e.id]), "vehicle-violation", e.id)
    if peds:
        jay = [e for e in peds if scene.violations[e.id].jaywalking]
        qa("is any pedestrian jaywalking", yn(bool(jay)), "pedestrian-violation", jay[0].id if jay else None)
    tir = sid
    if n_scenes and n_scenes > 1 and rng.random() < 0.5:
        other = int(rng.integers(0, n_scenes - 1))
        tir = other if other < sid else other + 1
    qa("do the two images match", yn(tir == sid), "modality-match", tir=tir)
    qa("is the scene safe", yn(not any(v.any for v in scene.violations.values())), "deduce")
    return out


# ---------------------------------------------------------------- splits


@dataclass
class Split:
    scenes: list[SceneSpec]
    pairs: list[RenderedPair]
    qa: list[list[QAPair]]

    def __len__(self):
        return len(self.scenes)

    def samples(self) -> list[QAPair]:
        return [q for per in self.qa for q in per]

    def subset(self, idx) -> "Split":
        """Keep scenes ``idx`` and renumber; cross-scene thermal references outside are dropped."""
        idx = list(idx)
        remap = {self.scenes[i].id: j for j, i in enumerate(idx)}
        scenes, pairs, qas = [], [], []
        for j, i in enumerate(idx):
            rec = self.scenes[i].to_record()
            rec["id"] = j
            scenes.append(SceneSpec.from_record(rec))
            pairs.append(self.pairs[i])
            per = []
            for q in self.qa[i]:
                if q.tir_scene not in remap:
                    continue
                per.append(QAPair(q.question, q.answer, q.qtype, j, remap[q.tir_scene], q.referent))
            qas.append(per)
        return Split(scenes, pairs, qas)


def sample_condition(rng: SeededRng) -> str:
    u = rng.random()
    return "day" if u < 0.5 else ("night" if u < 0.8 else "fog")


def _scene_range(seed: int, lo: int, hi: int, n: int, params: SceneParams | None, size: int):
    out = []
    for i in range(lo, hi):
        rng = SeededRng(seed, 0x5C, i)
        scene = generate_scene(rng, sample_condition(rng), params, scene_id=i, size=size)
        out.append((scene, render_pair(scene, seed), generate_qa(scene, SeededRng(seed, 0x9A, i), n)))
    return out


def generate_split(seed: int, n: int, params: SceneParams | None = None, size: int = 64, jobs: int = 1) -> Split:
    """Scenes are keyed by (seed, id) sub-streams, so generation order and ``jobs`` cannot matter."""
    if jobs <= 1 or n < 2:
        parts = [_scene_range(seed, 0, n, n, params, size)]
    else:
        bounds = np.linspace(0, n, min(jobs, n) + 1).astype(int)
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_scene_range, [seed] * (len(bounds) - 1), bounds[:-1], bounds[1:],
                                  [n] * (len(bounds) - 1), [params] * (len(bounds) - 1), [size] * (len(bounds) - 1)))
    rows = [r for part in parts for r in part]
    return Split([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])


def write_dataset(split: Split, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / MANIFEST, "w", encoding="utf-8") as fh:
        for scene, per in zip(split.scenes, split.qa):
            rec = scene.to_record()
            rec["qa"] = [q.to_record() for q in per]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for scene, pair in zip(split.scenes, split.pairs):
        H, W = pair.opt.shape[1:]
        body = np.concatenate([pair.opt, pair.tir]).astype("<f4").tobytes(order="C")
        with open(d / f"scene_{scene.id}.bin", "wb") as fh:
            fh.write(IMAGE_MAGIC + struct.pack("<II", H, W) + body)


def read_image(path, expect_hw: tuple[int, int] | None = None) -> RenderedPair:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != IMAGE_MAGIC:
        raise DatasetFormatError(f"{path}: bad image magic")
    H, W = struct.unpack("<II", buf[4:12])
    if expect_hw is not None and (H, W) != tuple(expect_hw):
        raise DatasetConsistencyError(f"{path}: header {H}x{W} disagrees with manifest {expect_hw}")
    need = 4 * H * W * 4
    if len(buf) - 12 != need:
        raise DatasetFormatError(f"{path}: expected {need} payload bytes, found {len(buf) - 12}")
    planes = np.frombuffer(buf[12:], dtype="<f4").astype(np.float64).reshape(4, H, W)
    return RenderedPair(planes[:3].copy(), planes[3:].copy())


def read_dataset(directory) -> Split:
    d = Path(directory)
    if not (d / MANIFEST).is_file():
        raise DatasetFormatError(f"missing manifest in {d}")
    scenes, pairs, qas = [], [], []
    with open(d / MANIFEST, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"manifest line {line_no}: {exc}") from exc
            scene = SceneSpec.from_record(rec)
            scenes.append(scene)
            qas.append([QAPair(q["q"], q["a"], q["qtype"], scene.id, q.get("tir_from", scene.id),
                               q.get("referent")) for q in rec.get("qa", [])])
            path = d / f"scene_{scene.id}.bin"
            if not path.is_file():
                raise DatasetFormatError(f"missing image file {path.name}")
            pairs.append(read_image(path, (scene.height, scene.width)))
    return Split(scenes, pairs, qas)


def dataset_exists(directory) -> bool:
    return os.path.isfile(os.path.join(directory, MANIFEST))
