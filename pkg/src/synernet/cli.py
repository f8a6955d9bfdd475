"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 failed invariant (frozen backbone,
gradient check, corrupted or mismatched data), 1 anything else. Errors are
printed to stderr as one line: ``error kind=<Name> code=<n> msg=<json string>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, config as cfgmod, kernels
from .ablation import dump_embeddings, run_ablation, shots_curve, write_ablation_csv, write_shots_csv
from .datagen import (
    ALLOWED_SHOTS,
    Benchmark,
    DatasetFormatError,
    generate_benchmark,
    load_benchmark,
    load_dataset,
    make_split,
    save_dataset,
    save_split,
    split_filename,
)
from .encoders import backbone_hash
from .evaluation import VocabularyMode, evaluate
from .messaging import write_trace
from .params import AdapterParams
from .training import FrozenBackboneError, GradCheckError, Task, grad_check, train_few_shot

log = logging.getLogger("synernet")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3
INVARIANT_ERRORS = (FrozenBackboneError, GradCheckError, DatasetFormatError)


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(kind: str, code: int, msg: str) -> int:
    print(f"error kind={kind} code={code} msg={json.dumps(msg)}", file=sys.stderr)
    return code


# ---------------------------------------------------------------- helpers

def _config(args, extra: list[str] = ()) -> dict:
    overrides = list(args.set or []) + list(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return cfgmod.load(args.config, overrides)


def _benchmark(args, cfg: dict) -> Benchmark:
    if getattr(args, "data", None):
        benchmark = load_benchmark(args.data)
    else:
        bcfg, bseed = cfgmod.benchmark_config(cfg)
        benchmark = generate_benchmark(bcfg, bseed)
    # echo what is actually in use
    cfg["benchmark"] = {**asdict(benchmark.config), "seed": benchmark.seed}
    return benchmark


def _split(args, benchmark: Benchmark, K: int, seed: int):
    if getattr(args, "data", None):
        f = Path(args.data) / split_filename(K, seed)
        if f.exists():
            return load_dataset(args.data, K, seed)[1]
    return make_split(benchmark, K, seed)


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def _header(command: str, cfg: dict) -> dict:
    return {"command": command, "version": __version__, "kernel_backend": kernels.BACKEND, "config": cfg}


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _config(args)
    bcfg, bseed = cfgmod.benchmark_config(cfg)
    benchmark = generate_benchmark(bcfg, bseed)
    out = _out(args.out)
    save_dataset(benchmark, None, out)
    shots = args.K or []
    for K in shots:
        save_split(make_split(benchmark, K, args.split_seed if args.split_seed is not None else cfg["seed"]), out)
    print(f"wrote {out} classes={len(benchmark.classes)} samples={len(benchmark.labels)} "
          f"backbone={backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab)[:12]}")
    return EXIT_OK


def _eval_both(benchmark, split, params) -> dict:
    return {m.value: evaluate(benchmark, split, params, m).to_json() for m in VocabularyMode}


def cmd_train(args) -> int:
    extra = []
    for key, val in (("train.K", args.K), ("train.epochs", args.epochs), ("train.lr", args.lr),
                     ("train.weight_decay", args.weight_decay), ("train.protocol", args.protocol)):
        if val is not None:
            extra.append(f"{key}={val}")
    if args.ablate is not None:
        extra.append(f"train.ablation_flags={json.dumps([f for f in args.ablate.split(',') if f])}")
    if args.grid is not None:
        extra.append(f"train.grid={json.dumps([float(x) for x in args.grid.split(',')])}")
    cfg = _config(args, extra)
    tcfg = cfgmod.train_config(cfg)
    benchmark = _benchmark(args, cfg)
    split = _split(args, benchmark, tcfg.K, tcfg.seed)
    out = _out(args.out)

    result = train_few_shot(benchmark, split, tcfg, trace_rounds=args.trace)
    params = result.params
    params.save(out, result.backbone_hash)
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(result.log[0]))
        w.writeheader()
        w.writerows(result.log)
    write_trace(result.trace, out / "trace.jsonl")
    dump_embeddings(benchmark, split, params, out)

    trained = _eval_both(benchmark, split, params)
    untrained = _eval_both(benchmark, split, None)
    report = _header("train", cfg)
    report.update({
        "data": None if not args.data else str(args.data),
        "selected_lr": result.config.lr,
        "split": {"K": split.K, "seed": split.seed, "n_train": len(split.train), "n_test": len(split.test)},
        "backbone_hash": result.backbone_hash,
        "adapter_hash": params.content_hash(),
        "final_strategy": result.strategy,
        "loss": {"initial": result.initial.row(0), "final": result.final.row(len(result.log) - 1)},
        "accuracy": {
            "ood_top1": trained["OOD_ONLY"]["ood_top1"],
            "composite_top1": trained["COMPOSITE"]["composite_top1"],
            "sc_top1": trained["COMPOSITE"]["sc_top1"],
            "untrained_ood_top1": untrained["OOD_ONLY"]["ood_top1"],
            "untrained_composite_top1": untrained["COMPOSITE"]["composite_top1"],
            "untrained_sc_top1": untrained["COMPOSITE"]["sc_top1"],
        },
        "results": {"trained": trained, "untrained": untrained},
    })
    _write_json(out / "report.json", report)
    a = report["accuracy"]
    print(f"K={split.K} seed={split.seed} ood_top1={a['ood_top1']:.4f} composite_top1={a['composite_top1']:.4f} "
          f"sc_top1={a['sc_top1']:.4f} j_total={result.initial.j_total:.4f}->{result.final.j_total:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, [f"train.K={args.K}"] if args.K else [])
    benchmark = _benchmark(args, cfg)
    params = None
    if args.run:
        params, stored = AdapterParams.load(args.run)
        current = backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab)
        if stored != current:
            raise InvariantError(f"adapter was trained on backbone {stored[:12]}, dataset has {current[:12]}")
        src = Path(args.run) / "report.json"
        if src.exists() and args.K is None and args.seed is None:
            split_cfg = json.loads(src.read_text())["split"]
            K, seed = split_cfg["K"], split_cfg["seed"]
        else:
            K, seed = int(cfg["train"]["K"]), int(cfg["seed"])
    else:
        K, seed = int(cfg["train"]["K"]), int(cfg["seed"])
    split = _split(args, benchmark, K, seed)
    modes = list(VocabularyMode) if args.mode == "BOTH" else [VocabularyMode(args.mode)]
    reports = {m.value: evaluate(benchmark, split, params, m).to_json() for m in modes}
    out = _header("eval", cfg)
    out.update({"run": args.run, "split": {"K": K, "seed": seed}, "results": reports})
    if args.out:
        _write_json(_out(args.out) / "eval.json", out)
    for m, r in reports.items():
        print(f"mode={m} ood_top1={r['ood_top1']:.4f} sc_top1={r['sc_top1']} composite_top1={r['composite_top1']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    extra = [f"train.K={args.K}"] if args.K else []
    if args.seeds is not None:
        extra.append(f"ablation.seeds={args.seeds}")
    if args.workers is not None:
        extra.append(f"ablation.workers={args.workers}")
    cfg = _config(args, extra)
    tcfg = cfgmod.train_config(cfg)
    benchmark = _benchmark(args, cfg)
    seeds = list(range(int(cfg["ablation"]["seeds"])))
    rows = run_ablation(benchmark, tcfg.K, seeds, base=tcfg, workers=int(cfg["ablation"]["workers"]))
    out = _out(args.out)
    write_ablation_csv(rows, out / "ablation.csv")
    report = _header("ablate", cfg)
    report.update({
        "data": None if not args.data else str(args.data),
        "seeds": seeds,
        "backbone_hash": backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab),
        "rows": [r.csv_row() for r in rows],
    })
    _write_json(out / "report.json", report)
    for r in rows:
        print(f"{r.variant:24s} composite={r.mean:.4f}+-{r.std:.4f} drop={r.drop:+.4f}")
    return EXIT_OK


def cmd_shots(args) -> int:
    extra = [f"eval.seeds={json.dumps(list(range(args.seeds)))}"] if args.seeds else []
    cfg = _config(args, extra)
    tcfg = cfgmod.train_config(cfg)
    benchmark = _benchmark(args, cfg)
    rows = shots_curve(benchmark, cfg["eval"]["seeds"], ALLOWED_SHOTS, base=tcfg)
    out = _out(args.out)
    write_shots_csv(rows, out / "shots_curve.csv")
    report = _header("shots", cfg)
    report.update({"data": None if not args.data else str(args.data), "rows": rows})
    _write_json(out / "report.json", report)
    for r in rows:
        print(f"K={r['K']:2d} ood_top1={r['ood_mean']:.4f}+-{r['ood_std']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    tcfg = cfgmod.train_config(cfg)
    benchmark = _benchmark(args, cfg)
    split = _split(args, benchmark, 16, tcfg.seed)
    task = Task.from_benchmark(benchmark)
    if args.warmup:
        params = train_few_shot(benchmark, split, replace(tcfg, K=16, epochs=args.warmup), trace_rounds="none").params
    else:
        params = task.init_params(tcfg)
    # one shot of each OOD class, at most 8 samples
    per_class = {}
    for s, c in split.train:
        per_class.setdefault(c, s)
    ids = list(per_class.values())[:8]
    rep = grad_check(params, task, task.batch(ids), tolerance=args.tolerance, zero_shot=tcfg.protocol == "zero_shot")
    for g, e in rep.groups.items():
        print(f"group={g} rel_err={e:.3e}")
    print(f"group=vpu.detach rel_err={rep.detach_error:.3e}")
    print(f"max_rel_err={rep.max_error:.3e} tolerance={args.tolerance:g} passed={rep.passed}")
    if args.out:
        out = _out(args.out)
        body = _header("gradcheck", cfg)
        body.update({"groups": rep.groups, "detach_error": rep.detach_error, "max_rel_err": rep.max_error,
                     "passed": rep.passed})
        _write_json(out / "gradcheck.json", body)
    if not rep.passed:
        raise GradCheckError(f"groups over tolerance: {','.join(rep.failing)}")
    return EXIT_OK


REPORT_FIELDS = ["run", "command", "variant", "K", "seed", "ood_top1", "sc_top1", "composite_top1", "std"]


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        rep = json.loads((Path(d) / "report.json").read_text())
        cmd = rep.get("command")
        if cmd == "train":
            a = rep["accuracy"]
            rows.append({"run": str(d), "command": cmd, "variant": "+".join(rep["config"]["train"]["ablation_flags"]) or "full",
                         "K": rep["split"]["K"], "seed": rep["split"]["seed"], "ood_top1": a["ood_top1"],
                         "sc_top1": a["sc_top1"], "composite_top1": a["composite_top1"], "std": ""})
        elif cmd == "ablate":
            for r in rep["rows"]:
                rows.append({"run": str(d), "command": cmd, "variant": r["variant"], "K": rep["config"]["train"]["K"],
                             "seed": " ".join(map(str, rep["seeds"])), "ood_top1": r["ood_mean"],
                             "sc_top1": r["sc_mean"], "composite_top1": r["composite_mean"], "std": r["composite_std"]})
        elif cmd == "shots":
            for r in rep["rows"]:
                rows.append({"run": str(d), "command": cmd, "variant": "full", "K": r["K"],
                             "seed": " ".join(map(str, rep["config"]["eval"]["seeds"])), "ood_top1": r["ood_mean"],
                             "sc_top1": "", "composite_top1": "", "std": r["ood_std"]})
        else:
            raise DatasetFormatError(f"{d}: unsupported report command {cmd!r}")
    return rows


def cmd_report(args) -> int:
    rows = report_rows(args.runs)
    if args.out:
        fh = open(args.out, "w", newline="")
    else:
        fh = sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synernet", description="Multi-agent OOD name learning on a synthetic dual-encoder benchmark.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=100")
        sp.add_argument("--seed", type=int, help=f"global seed (falls back to ${cfgmod.SEED_ENV}, then 0)")
        if data:
            sp.add_argument("--data", help="dataset directory written by `synth` (default: synthesize from config)")

    sp = sub.add_parser("synth", help="generate and save a benchmark")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--K", type=int, action="append", choices=ALLOWED_SHOTS, help="also write split(s) for these K")
    sp.add_argument("--split-seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="few-shot training plus evaluation")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--K", type=int, choices=ALLOWED_SHOTS)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--grid", help="comma-separated learning rates to search")
    sp.add_argument("--ablate", help="comma-separated ablation flags")
    sp.add_argument("--protocol", choices=["few_shot", "zero_shot"])
    sp.add_argument("--trace", choices=["last", "all", "none"], default="last", help="coordination rounds kept in trace.jsonl")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate an adapter (or the bare backbone)")
    common(sp)
    sp.add_argument("--run", help="run directory holding adapter.json/adapter.f32")
    sp.add_argument("--K", type=int, choices=ALLOWED_SHOTS)
    sp.add_argument("--mode", choices=["OOD_ONLY", "COMPOSITE", "BOTH"], default="BOTH")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="ablation table over seeds")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--K", type=int, choices=ALLOWED_SHOTS)
    sp.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("shots", help="OOD accuracy against K")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int)
    sp.set_defaults(func=cmd_shots)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(sp)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--warmup", type=int, default=0, help="training steps before checking")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="CSV summary of run directories (read-only)")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", help="CSV file (default: stdout)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("UsageError", EXIT_USAGE, str(e))
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError) as e:
        return _fail(type(e).__name__, EXIT_USAGE, str(e))
    except INVARIANT_ERRORS + (InvariantError,) as e:
        return _fail(type(e).__name__, EXIT_INVARIANT, str(e))
    except Exception as e:  # noqa: BLE001 - report any failure as one line
        log.debug("failure", exc_info=True)
        return _fail(type(e).__name__, EXIT_ERROR, str(e))


if __name__ == "__main__":
    sys.exit(main())
