"""Command-line entry point: ``dcis {train,search,finetune,eval,budget,sweep}``.

Exit codes: 0 ok, 2 config/usage, 3 training divergence, 4 search/objective
failure, 5 evaluation error.  Logs go to stderr; data goes to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import pipeline
from ._io import atomic_write_text
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evals import EvalError, EvalReport, emit_report, model_fingerprint, passkey_suite, perplexity, ppl_curve
from .model import TrainingDivergedError
from .pipeline import ConfigError
from .rope import ScalingFactors
from .schemes import load_factors, save_factors
from .search import ObjectiveError, SearchConfigError, UnsupportedDimensionError, evo_budget, search_budget

log = logging.getLogger("dcis")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_SEARCH, EXIT_EVAL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _effective_config(args, model=None) -> dict:
    if args.config is not None:
        base = pipeline.load_config(args.config)
    elif model is not None and "config" in model.training_meta:
        base = pipeline.merge_config(pipeline.DEFAULT_CONFIG, model.training_meta["config"])
    else:
        base = pipeline.load_config()
    return base


def _search_overrides(cfg: dict, args) -> dict:
    s = cfg["search"]
    if args.range is not None:
        s["range"] = list(args.range)
    for attr, key in (("increments", "increments"), ("target_length", "target_length"),
                      ("threshold", "threshold"), ("init", "init"), ("samples", "n_samples")):
        value = getattr(args, attr, None)
        if value is not None:
            s[key] = value
    return cfg


def cmd_train(args) -> int:
    cfg = pipeline.load_config(args.config)
    if args.steps is not None:
        cfg["training"]["steps"] = args.steps
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".train.jsonl")
    records = []

    def on_step(rec):
        records.append(rec)
        log.info("step %d loss %.4f", rec["step"], rec["loss"])

    model = pipeline.pretrain(cfg, on_step)
    save_checkpoint(model, out)
    atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    log.info("wrote %s (held-out ppl %.4f)", out, math.exp(model.training_meta["heldout_loss"]))
    return EXIT_OK


def cmd_search(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = _search_overrides(_effective_config(args, model), args)
    factors, trace, sc = pipeline.run_search(cfg, model)
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_name(out.stem + ".trace.jsonl")
    save_factors(factors, out, {"search": sc.to_dict(), "config": cfg,
                                "final_objective": trace.final_objective,
                                "total_evaluations": trace.total_evaluations})
    trace.save(trace_path)
    print(f"final_objective={trace.final_objective!r} total_evaluations={trace.total_evaluations}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = _effective_config(args, model)
    t = cfg["training"]
    for attr, key in (("steps", "finetune_steps"), ("lr", "finetune_learning_rate"), ("context_len", "finetune_context_len")):
        if getattr(args, attr) is not None:
            t[key] = getattr(args, attr)
    factors = _load_factors(args.factors, model)
    pipeline.finetune(cfg, model, factors, lambda r: log.info("step %d loss %.4f", r["step"], r["loss"]))
    save_checkpoint(model, args.out)
    return EXIT_OK


def _load_factors(path, model) -> ScalingFactors:
    if path is None:
        return model.identity_factors()
    try:
        factors = load_factors(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read factors {path}: {exc}") from exc
    if len(factors) != model.cfg.head_dim // 2:
        raise UsageError(f"factors in {path} have {len(factors)} entries, model needs {model.cfg.head_dim // 2}")
    return factors


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = _effective_config(args, model)
    e = cfg["eval"]
    lengths = args.lengths or e["lengths"]
    if args.samples_file:
        e["samples_file"] = args.samples_file
    factors = _load_factors(args.factors, model)
    spec = pipeline.spec_from_model(model)
    fp = model_fingerprint(model)
    if args.metric in ("ppl", "curve"):
        samples = pipeline.eval_samples(spec, e["n_samples"], max(lengths), e["seed"], e["samples_file"])
        if args.metric == "curve":
            report = ppl_curve(model, factors, sorted(lengths), samples, e["seed"])
            report.config = cfg
        else:
            entries = [{"length": n, "ppl": perplexity(model, factors, samples, n)} for n in lengths]
            report = EvalReport(entries, factors.provenance, fp, e["seed"], cfg)
    else:
        n_trials = args.n_trials or e["n_trials"]
        filler = pipeline.passkey_filler(model)
        entries = [
            {"length": n, "recall_rate": passkey_suite(model, factors, n, n_trials, e["key_length"], e["seed"], filler),
             "n_trials": n_trials}
            for n in lengths
        ]
        report = EvalReport(entries, factors.provenance, fp, e["seed"], cfg)
    emit_report(report, args.format, args.out)
    for entry in report.entries:
        log.info("%s", entry)
    return EXIT_OK


def cmd_budget(args) -> int:
    dcis = search_budget(args.head_dim, args.increments)
    rows = [("dcis (d-2)*C", f"({args.head_dim}-2)*{args.increments}", dcis)]
    if args.evo:
        T, P = args.evo
        evo = evo_budget(T, P)
        rows.append(("evolutionary T*P", f"{T}*{P}", evo))
    width = max(len(r[0]) for r in rows)
    for name, formula, value in rows:
        print(f"{name:<{width}}  {formula:<12} {value}")
    if args.evo:
        print(f"{'ratio evo/dcis':<{width}}  {'':<12} {evo / dcis:.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.values:
        raise UsageError("--values needs at least one value")
    model = _load_model(args.checkpoint)
    base = _effective_config(args, model)
    rows = []
    for value in args.values:
        cfg = json.loads(json.dumps(base))
        if args.param == "range":
            cfg["search"]["range"] = [-abs(value), abs(value)]
        else:
            if value != int(value):
                raise UsageError(f"increment count must be an integer, got {value}")
            cfg["search"]["increments"] = int(value)
        factors, trace, _ = pipeline.run_search(cfg, model)
        rows.append({
            "param": args.param,
            "value": value,
            "range": cfg["search"]["range"],
            "increments": cfg["search"]["increments"],
            "final_objective": trace.final_objective,
            "total_evaluations": trace.total_evaluations,
            "lambdas": factors.tolist(),
        })
        log.info("%s=%s final_objective=%s", args.param, value, trace.final_objective)
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        cols = ["param", "value", "range", "increments", "final_objective", "total_evaluations"]
        lines = [",".join(cols)] + [",".join(json.dumps(r[c]).replace(",", ";") for c in cols) for r in rows]
        atomic_write_text(out, "\n".join(lines) + "\n")
    else:
        atomic_write_text(out, json.dumps({"rows": rows, "config": base}, indent=2, sort_keys=True) + "\n")
    for r in rows:
        print(f"{r['param']}={r['value']}\tfinal_objective={r['final_objective']!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcis", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pre-train the toy model")
    t.add_argument("--config", help="JSON config with sections model/training/search/eval")
    t.add_argument("--out", default="model.ckpt")
    t.add_argument("--log", help="training log (JSON Lines); default <out>.train.jsonl")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="run DCIS on a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--range", nargs=2, type=float, metavar=("L", "R"))
    s.add_argument("--increments", type=int)
    s.add_argument("--target-length", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--init", choices=["yarn", "pi", "ntk", "ones"])
    s.add_argument("--samples", type=int, help="number of evaluation samples for the objective")
    s.add_argument("--out", default="factors.json")
    s.add_argument("--trace", help="trace path; default <out stem>.trace.jsonl")
    s.set_defaults(func=cmd_search)

    f = sub.add_parser("finetune", help="continue training with scaling factors installed")
    f.add_argument("checkpoint")
    f.add_argument("--factors")
    f.add_argument("--config")
    f.add_argument("--steps", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--context-len", type=int)
    f.add_argument("--out", default="finetuned.ckpt")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="perplexity / key-recall evaluation")
    e.add_argument("checkpoint")
    e.add_argument("--factors", help="factors JSON; identity when omitted")
    e.add_argument("--config")
    e.add_argument("--metric", default="ppl", choices=["ppl", "passkey", "curve"])
    e.add_argument("--lengths", nargs="+", type=int)
    e.add_argument("--n-trials", type=int)
    e.add_argument("--samples-file", help="newline-delimited token-id sequences to score")
    e.add_argument("--format", choices=["json", "csv"], help="default: from the --out extension")
    e.add_argument("--out", default="report.json")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("budget", help="objective-evaluation budget of DCIS vs evolutionary search")
    b.add_argument("--head-dim", type=int, default=128)
    b.add_argument("--increments", type=int, default=10)
    b.add_argument("--evo", nargs=2, type=int, metavar=("T", "P"))
    b.set_defaults(func=cmd_budget)

    w = sub.add_parser("sweep", help="repeat the search over a hyperparameter")
    w.add_argument("checkpoint")
    w.add_argument("--param", required=True, choices=["range", "C"])
    w.add_argument("--values", nargs="*", type=float, default=[])
    w.add_argument("--config")
    w.add_argument("--out", default="sweep.json")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SearchConfigError, UnsupportedDimensionError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except ObjectiveError as exc:
        log.error("search failed: %s", exc)
        return EXIT_SEARCH
    except EvalError as exc:
        log.error("evaluation failed: %s", exc)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
