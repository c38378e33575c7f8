"""Ablation matrices, per-seed report tables and the directional ordering checks."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig
from .data import CONDITIONS, QTYPES, Split, generate_split
from .estimator import MTCNetVQA
from .model import TrainingAborted

BASE_COLUMNS = ["cell_id", "pgke", "qasc", "fusion", "modality", "seed", "oa", "aa", "cider"]


@dataclass(frozen=True)
class Cell:
    cell_id: str
    pgke: bool
    qasc: bool
    fusion: str = "sequence"
    modality: str = "mul"


MODULE_MATRIX = (
    Cell("baseline", False, False),
    Cell("pgke", True, False),
    Cell("qasc", False, True),
    Cell("full", True, True),
)

# every row keeps PGKE off so only the way the two streams meet changes
FUSION_MATRIX = (
    Cell("opt-only", False, False, "sequence", "opt"),
    Cell("tir-only", False, False, "sequence", "tir"),
    Cell("add", False, False, "add"),
    Cell("concat", False, False, "concat_project"),
    Cell("qasc", False, True),
)


def paper_matrix() -> list[Cell]:
    seen, out = set(), []
    for c in MODULE_MATRIX + FUSION_MATRIX:
        if c.cell_id not in seen:
            seen.add(c.cell_id)
            out.append(c)
    return out


@dataclass
class ReportRow:
    cell_id: str
    pgke: bool
    qasc: bool
    fusion: str
    modality: str
    seed: int
    oa: float | None = None
    aa: float | None = None
    cider: float | None = None
    per_qtype: dict[str, float] = field(default_factory=dict)
    per_condition: dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class AblationTable:
    rows: list[ReportRow] = field(default_factory=list)

    def cell_ids(self) -> list[str]:
        return list(dict.fromkeys(r.cell_id for r in self.rows))

    def summary(self) -> dict[str, dict]:
        """Per-cell mean and sample standard deviation over successful seeds."""
        out = {}
        for cid in self.cell_ids():
            rows = [r for r in self.rows if r.cell_id == cid and r.ok]
            entry = {"n": len(rows), "failed": sum(1 for r in self.rows if r.cell_id == cid and not r.ok)}
            for key in ("oa", "aa", "cider"):
                entry[key + "_mean"], entry[key + "_std"] = _mean_std([getattr(r, key) for r in rows])
            for name in ("per_qtype", "per_condition"):
                keys = sorted({k for r in rows for k in getattr(r, name)})
                entry[name] = {k: _mean_std([getattr(r, name)[k] for r in rows if k in getattr(r, name)])[0]
                               for k in keys}
            out[cid] = entry
        return out


def _mean_std(xs) -> tuple[float | None, float | None]:
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    m = math.fsum(xs) / len(xs)
    if len(xs) < 2:
        return m, 0.0
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


# ---------------------------------------------------------------- running


def benchmark_data(base: RunConfig) -> tuple[Split, Split]:
    p = base.scene_params()
    return (generate_split(base.data_seed, base.n_train, p, size=base.image_size),
            generate_split(base.test_seed, base.n_test, p, size=base.image_size))


def run_cell(base: RunConfig, cell: Cell, seed: int, train_split: Split, test_split: Split) -> ReportRow:
    cfg = base.with_updates(use_pgke=cell.pgke, use_qasc=cell.qasc, fusion=cell.fusion, modality=cell.modality,
                            seed=seed)
    row = ReportRow(cell.cell_id, cell.pgke, cell.qasc, cell.fusion, cell.modality, seed)
    t0 = time.perf_counter()
    try:
        est = MTCNetVQA.from_config(cfg).fit(train_split)
        rep = est.evaluate(test_split)
    except (TrainingAborted, FloatingPointError) as exc:
        row.status = f"failed: {exc}"
    else:
        row.oa, row.aa, row.cider = rep.oa, rep.aa, rep.cider
        row.per_qtype, row.per_condition = dict(rep.per_qtype), dict(rep.per_condition)
    row.seconds = time.perf_counter() - t0
    return row


_WORKER_DATA: tuple | None = None


def _init_worker(train_split, test_split):
    global _WORKER_DATA
    _WORKER_DATA = (train_split, test_split)


def _run_job(args):
    base, cell, seed = args
    return run_cell(base, cell, seed, *_WORKER_DATA)


def run_ablation(base: RunConfig, matrix, seeds, data: tuple[Split, Split] | None = None, jobs: int = 1,
                 log=None) -> AblationTable:
    """Train every (cell, seed) from scratch on shared data; rows come back in matrix-then-seed order."""
    matrix, seeds = list(matrix), list(seeds)
    ids = [c.cell_id for c in matrix]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate cell ids in matrix: {ids}")
    train_split, test_split = data if data is not None else benchmark_data(base)
    jobs_list = [(base, c, s) for c in matrix for s in seeds]
    rows = []
    if jobs <= 1:
        for base_, cell, seed in jobs_list:
            rows.append(run_cell(base_, cell, seed, train_split, test_split))
            _log_row(log, rows[-1])
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(train_split, test_split)) as pool:
            for row in pool.map(_run_job, jobs_list):
                rows.append(row)
                _log_row(log, row)
    return AblationTable(rows)


def _log_row(log, row: ReportRow) -> None:
    if log is not None:
        oa = "-" if row.oa is None else f"{row.oa:.2f}"
        log(f"cell {row.cell_id} seed {row.seed}: {row.status} oa={oa} ({row.seconds:.1f}s)")


# ---------------------------------------------------------------- ordering checks


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _cond(summary, cid, condition):
    return summary[cid]["per_condition"].get(condition)


def check_orderings(table: AblationTable) -> list[Check]:
    """Directional checks on cell means; a check is skipped when its cells are absent."""
    s = table.summary()
    oa = {cid: e["oa_mean"] for cid, e in s.items() if e["oa_mean"] is not None}
    checks = []
    if all(c in oa for c in ("baseline", "pgke", "qasc", "full")):
        ok = (oa["full"] >= oa["pgke"] >= oa["baseline"] and oa["full"] >= oa["qasc"] >= oa["baseline"]
              and oa["full"] - oa["baseline"] >= 5.0)
        checks.append(Check("A7 module ablation", ok,
                            f"baseline {oa['baseline']:.2f} pgke {oa['pgke']:.2f} qasc {oa['qasc']:.2f} "
                            f"full {oa['full']:.2f} (gap {oa['full'] - oa['baseline']:+.2f}, needs >= 5)"))
    if all(c in oa for c in ("qasc", "concat", "add")):
        ok = oa["qasc"] > oa["concat"] > oa["add"] and oa["qasc"] - oa["concat"] >= 2.0
        checks.append(Check("A8 fusion ordering", ok,
                            f"add {oa['add']:.2f} concat {oa['concat']:.2f} qasc {oa['qasc']:.2f} "
                            f"(qasc - concat {oa['qasc'] - oa['concat']:+.2f}, needs >= 2)"))
    if all(c in oa for c in ("opt-only", "tir-only", "qasc", "concat")):
        od, on = _cond(s, "opt-only", "day"), _cond(s, "opt-only", "night")
        td, tn = _cond(s, "tir-only", "day"), _cond(s, "tir-only", "night")
        mn, cn = _cond(s, "qasc", "night"), _cond(s, "concat", "night")
        if None in (od, on, td, tn, mn, cn):
            checks.append(Check("A9 night robustness", False, "test split lacks day or night questions"))
        else:
            ok = od - on >= 20.0 and abs(td - tn) <= 5.0 and mn >= max(on, cn)
            checks.append(Check("A9 night robustness", ok,
                                f"opt day {od:.2f} night {on:.2f} (drop {od - on:.2f}, needs >= 20); "
                                f"tir day {td:.2f} night {tn:.2f} (|diff| {abs(td - tn):.2f}, needs <= 5); "
                                f"mul night {mn:.2f} vs opt {on:.2f} / concat {cn:.2f}"))
    return checks


# ---------------------------------------------------------------- reports


def _columns(table: AblationTable) -> tuple[list[str], list[str]]:
    qtypes = [q for q in QTYPES if any(q in r.per_qtype for r in table.rows)]
    qtypes += sorted({q for r in table.rows for q in r.per_qtype} - set(qtypes))
    conds = [c for c in CONDITIONS if any(c in r.per_condition for r in table.rows)]
    conds += sorted({c for r in table.rows for c in r.per_condition} - set(conds))
    return qtypes, conds


def _num(x) -> str:
    return "" if x is None else f"{x:.4f}"


def emit_report(table: AblationTable, path, fmt: str = "csv") -> Path:
    """CSV: one line per (cell, seed) with per-qtype ``qt:`` and per-condition ``cond:`` columns."""
    path = Path(path)
    qtypes, conds = _columns(table)
    if fmt == "csv":
        header = BASE_COLUMNS + [f"qt:{q}" for q in qtypes] + [f"cond:{c}" for c in conds] + ["status"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in table.rows:
                w.writerow([r.cell_id, int(r.pgke), int(r.qasc), r.fusion, r.modality, r.seed,
                            _num(r.oa), _num(r.aa), _num(r.cider),
                            *[_num(r.per_qtype.get(q)) for q in qtypes],
                            *[_num(r.per_condition.get(c)) for c in conds], r.status])
    elif fmt == "json":
        doc = {"columns": BASE_COLUMNS, "qtypes": qtypes, "conditions": conds,
               "rows": [_row_dict(r) for r in table.rows], "summary": table.summary()}
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def _row_dict(r: ReportRow) -> dict:
    return {"cell_id": r.cell_id, "pgke": r.pgke, "qasc": r.qasc, "fusion": r.fusion, "modality": r.modality,
            "seed": r.seed, "oa": r.oa, "aa": r.aa, "cider": r.cider, "per_qtype": r.per_qtype,
            "per_condition": r.per_condition, "status": r.status}


def _parse_num(text: str) -> float | None:
    return None if text == "" else float(text)


def read_report(path) -> AblationTable:
    """Inverse of :func:`emit_report` for either format (``seconds`` is not stored)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        doc = json.loads(text)
        return AblationTable([ReportRow(**d) for d in doc["rows"]])
    reader = csv.DictReader(text.splitlines())
    missing = [c for c in BASE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"{path}: report lacks columns {missing}")
    rows = []
    for rec in reader:
        rows.append(ReportRow(
            rec["cell_id"], rec["pgke"] == "1", rec["qasc"] == "1", rec["fusion"], rec["modality"], int(rec["seed"]),
            _parse_num(rec["oa"]), _parse_num(rec["aa"]), _parse_num(rec["cider"]),
            {k[3:]: float(v) for k, v in rec.items() if k.startswith("qt:") and v != ""},
            {k[5:]: float(v) for k, v in rec.items() if k.startswith("cond:") and v != ""},
            rec.get("status", "ok")))
    return AblationTable(rows)


def emit_summary(table: AblationTable, path) -> Path:
    """Per-cell mean/stddev lines next to the per-seed report."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "n", "failed", "oa_mean", "oa_std", "aa_mean", "aa_std", "cider_mean", "cider_std"])
        for cid, e in table.summary().items():
            w.writerow([cid, e["n"], e["failed"], *[_num(e[k]) for k in
                        ("oa_mean", "oa_std", "aa_mean", "aa_std", "cider_mean", "cider_std")]])
    return path
