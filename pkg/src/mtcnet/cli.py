"""``mtc`` command line: gen-data, build-trm, train, eval, ablate, gradcheck.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
Every subcommand writes ``config.resolved`` and ``mtc.log`` into its output
directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .ablation import (
    FUSION_MATRIX, MODULE_MATRIX, benchmark_data, check_orderings, emit_report, emit_summary, paper_matrix,
    run_ablation,
)
from .config import ConfigError, RunConfig, load_config, preset
from .data import DatasetFormatError, GenerationError, generate_split, read_dataset, write_dataset
from .estimator import MTCNetVQA, TRMBuilder
from .memory import BankFormatError, EmptyBank, load_bank, save_bank
from .metrics import evaluate
from .model import EncodingError, TrainingAborted, full_model_grad_check
from .tensor import CheckpointError, DimensionError, EvaluationError, ParameterError

LOG_NAME = "mtc.log"
GRADCHECK_TOL = 1e-3

DOMAIN_ERRORS = (DatasetFormatError, GenerationError, BankFormatError, EmptyBank, CheckpointError, DimensionError,
                 EvaluationError, ParameterError, EncodingError, TrainingAborted, FloatingPointError, OSError,
                 ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--preset", choices=("default", "bench", "tiny"), default="default")
    common.add_argument("--seed", type=int)

    p = _Parser(prog="mtc", description="Optical/thermal traffic VQA toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic split")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)

    b = sub.add_parser("build-trm", parents=[common], help="build the regulation memory bank")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True, help="bank file to write")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--bank", help="prebuilt bank (built from --data when omitted)")
    t.add_argument("--out", required=True, help="model directory")

    e = sub.add_parser("eval", parents=[common], help="score a trained model")
    e.add_argument("--model", required=True, help="directory written by train")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation matrix")
    a.add_argument("--out", required=True)
    a.add_argument("--paper-tables", action="store_true", help="module and fusion tables together")
    a.add_argument("--matrix", choices=("modules", "fusion"), default="modules")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--check", action="store_true", help="exit 1 when an ordering check fails")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    c.add_argument("--out", default="gradcheck")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides, base=preset(args.preset))


def _logger(out_dir: Path) -> logging.Logger:
    out_dir.mkdir(parents=True, exist_ok=True)
    log = logging.getLogger("mtcnet.cli")
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    log.setLevel(logging.INFO)
    log.propagate = False
    fh = logging.FileHandler(out_dir / LOG_NAME, mode="w", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(sh)
    return log


def _out_dir(args) -> Path:
    out = Path(args.out)
    return out.parent if args.command == "build-trm" else out


def cmd_gen_data(args, cfg, log):
    split = generate_split(cfg.seed, args.n, cfg.scene_params(), size=cfg.image_size, jobs=args.jobs)
    write_dataset(split, args.out)
    log.info("wrote %d scenes and %d questions to %s", len(split), len(split.samples()), args.out)
    return 0


def cmd_build_trm(args, cfg, log):
    split = read_dataset(args.data)
    builder = TRMBuilder(cfg.d_model, cfg.heads, cfg.d_head, cfg.d_ffn, cfg.patch, cfg.patch_gain,
                         cfg.question_gain, cfg.tau, cfg.jitter, cfg.seed).fit(split)
    save_bank(builder.bank_, args.out)
    log.info("bank of %d prototypes (width %d) written to %s", len(builder.bank_), builder.bank_.width, args.out)
    return 0


def cmd_train(args, cfg, log):
    split = read_dataset(args.data)
    bank_path = args.bank or cfg.bank
    bank = load_bank(bank_path) if (cfg.use_pgke and bank_path) else None
    est = MTCNetVQA.from_config(cfg)
    est.fit(split, bank=bank, log=log.info)
    out = est.save(args.out)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "main", "aux", "lr"])
        for t in est.trace_:
            w.writerow([t["step"], repr(t["loss"]), repr(t["main"]), repr(t["aux"]), repr(t["lr"])])
    alpha, beta = float(est.state_.gates.alpha.data), float(est.state_.gates.beta.data)
    log.info("trained %d steps; final loss %.4f; alpha %.4f beta %.4f", len(est.trace_),
             est.trace_[-1]["loss"] if est.trace_ else float("nan"), alpha, beta)
    return 0


def cmd_eval(args, cfg, log):
    est = MTCNetVQA.load(args.model)
    split = read_dataset(args.data)
    records = est.predict_records(split)
    rep = evaluate(records)
    out = Path(args.out)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "qtype", "condition", "question", "reference", "predicted"])
        for r in records:
            w.writerow([r.scene_id, r.qtype, r.condition, r.question, r.reference, r.predicted])
    log.info("OA %.2f AA %.2f CIDEr %.4f over %d questions", rep.oa, rep.aa, rep.cider or 0.0, rep.n)
    print(f"oa={rep.oa:.4f} aa={rep.aa:.4f} cider={(rep.cider or 0.0):.4f}")
    return 0


def cmd_ablate(args, cfg, log):
    if args.paper_tables:
        matrix = paper_matrix()
    else:
        matrix = list(MODULE_MATRIX if args.matrix == "modules" else FUSION_MATRIX)
    if cfg.data_dir and cfg.test_dir:
        data = (read_dataset(cfg.data_dir), read_dataset(cfg.test_dir))
    else:
        data = benchmark_data(cfg)
    seeds = cfg.seed_list()
    log.info("%d cells x %d seeds on %d/%d scenes", len(matrix), len(seeds), len(data[0]), len(data[1]))
    table = run_ablation(cfg, matrix, seeds, data, jobs=args.jobs, log=log.info)
    out = Path(args.out)
    emit_report(table, out / "report.csv", "csv")
    emit_report(table, out / "report.json", "json")
    emit_summary(table, out / "summary.csv")
    checks = check_orderings(table)
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in checks]
    (out / "checks.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    for line in lines:
        log.info(line)
    failed_cells = sorted({r.cell_id for r in table.rows if not r.ok})
    if failed_cells:
        log.warning("failed cells: %s", ", ".join(failed_cells))
    if args.check and (any(not c.passed for c in checks) or failed_cells):
        return 1
    return 0


def cmd_gradcheck(args, cfg, log):
    report = full_model_grad_check(cfg.seed)
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    for name in sorted(report):
        log.info("%-28s %.3e", name, report[name])
    print(f"max relative error {worst:.3e} ({worst_name})")
    return 0 if worst <= GRADCHECK_TOL else 1


COMMANDS = {"gen-data": cmd_gen_data, "build-trm": cmd_build_trm, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"mtc: config error: {exc}", file=sys.stderr)
        return 2
    out_dir = _out_dir(args)
    log = None
    try:
        log = _logger(out_dir)
        cfg.write_resolved(out_dir)
        log.info("mtc %s", " ".join(sys.argv[1:] if argv is None else argv))
        return COMMANDS[args.command](args, cfg, log)
    except DOMAIN_ERRORS as exc:
        msg = f"mtc {args.command}: {type(exc).__name__}: {exc}"
        if log is None:
            print(msg, file=sys.stderr)
        else:
            log.error(msg)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
