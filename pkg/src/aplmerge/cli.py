"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 I/O error.
Set ``APL_LOG`` to ``error``, ``info`` or ``debug`` to control diagnostics.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import bench, toylab
from .calibration import CalibrationConfig, _check_band, linear_rank_drop_ratios, merge_weights, tanh_drop_ratios
from .delta import apply_mask, apply_mask_rescale, compute_delta, make_mask, reconstruct
from .errors import StageError
from .importance import FewShotBatch, ImportanceReport, causal_importance, gradient_importance
from .merge import MergeRecipe, run_recipe
from .store import (
    LEVELS,
    PartitionSchema,
    atomic_write_text,
    build_partitions,
    load_checkpoint,
    model_partition,
    save_checkpoint,
)

log = logging.getLogger("aplmerge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ratio_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aplmerge", description="Activated-parameter-locating checkpoint merging toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help):
        return sub.add_parser(name, help=help, description=help)

    def partition_flags(s, need_schema=False):
        s.add_argument("--schema", required=need_schema, help="partition schema (JSON)")
        s.add_argument("--level", choices=LEVELS, default="layer")

    c = cmd("delta", "Write fine - base as a checkpoint.")
    c.add_argument("--base", required=True)
    c.add_argument("--fine", required=True)
    c.add_argument("--out", required=True)

    c = cmd("prune", "Prune the delta of a fine-tuned checkpoint and write base + pruned delta.")
    c.add_argument("--base", required=True)
    c.add_argument("--fine", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--method", choices=("dare", "magnitude", "apl-tanh", "apl-linear"), default="dare")
    c.add_argument("--ratio", type=float, default=0.9)
    c.add_argument("--epsilon", type=float, default=0.05)
    c.add_argument("--tau1", type=float, default=5.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--importance", help="importance report for the apl methods")
    c.add_argument("--global-rescale", action="store_true", help="rescale by 1/(1-ratio) instead of per-partition")
    partition_flags(c)

    for name, help in (("trace", "Causal importance report (clean vs. corrupted runs)."),
                       ("grad", "Gradient-approximation importance report.")):
        c = cmd(name, help)
        c.add_argument("--base", required=True)
        c.add_argument("--fine", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--batch", help="few-shot batch (JSON)")
        c.add_argument("--net-spec", help="toy net spec (JSON) for the built-in evaluator")
        partition_flags(c)
        if name == "trace":
            c.add_argument("--threads", type=_positive_int, default=1)
        else:
            c.add_argument("--gradient", help="precomputed base gradient checkpoint instead of --net-spec")

    c = cmd("calibrate", "Drop ratios (tanh / linear) or merge weights from importance reports.")
    c.add_argument("--importance", action="append", required=True, help="report path; repeat for weights")
    c.add_argument("--mode", choices=("tanh", "linear", "weights"), default="tanh")
    c.add_argument("--ratio", type=float, default=0.9)
    c.add_argument("--epsilon", type=float, default=0.05)
    c.add_argument("--tau1", type=float, default=5.0)
    c.add_argument("--tau2", type=float, default=5.0)
    c.add_argument("--out", required=True)

    c = cmd("merge", "Run a merge recipe.")
    c.add_argument("--recipe", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", help="run report path (default: OUT.report.json)")
    c.add_argument("--threads", type=_positive_int, default=1)
    c.add_argument("--provider", choices=("causal", "grad", "file"), help="override the recipe's provider")
    c.add_argument("--seed", type=int, help="override the recipe's seed")

    c = cmd("toy-train", "Initialize and/or fine-tune a toy MLP.")
    c.add_argument("--net-spec", required=True)
    c.add_argument("--data", help="training split (JSON); required when --epochs > 0")
    c.add_argument("--base", help="starting checkpoint (default: fresh initialization)")
    c.add_argument("--epochs", type=int, default=0)
    c.add_argument("--step-size", type=float, default=0.2)
    c.add_argument("--freeze", action="append", default=[], help="tensor name prefix to keep fixed")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--schema-out", help="also write the per-layer partition schema here")

    c = cmd("toy-make-tasks", "Generate synthetic tasks.")
    c.add_argument("--count", type=_positive_int, default=2)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--input-dim", type=int, default=16)
    c.add_argument("--classes", type=int, default=4)
    c.add_argument("--separation", type=float, default=3.0)
    c.add_argument("--noise", type=float, default=1.0)
    c.add_argument("--train-size", type=int, default=400)
    c.add_argument("--test-size", type=int, default=400)
    c.add_argument("--fewshot-per-class", type=int, default=5)
    c.add_argument("--angles", type=_ratio_list, help="rotation angles in degrees, comma separated")

    c = cmd("bench", "Pruning comparison: Magnitude vs. Dare vs. APL-linear over a ratio sweep.")
    c.add_argument("--tasks", type=_positive_int, default=2)
    c.add_argument("--ratios", type=_ratio_list, default=bench.DEFAULT_RATIOS)
    c.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds, 0..N-1")
    c.add_argument("--epsilon", type=float, default=0.004)
    c.add_argument("--level", choices=("layer", "hidden"), default="hidden")
    c.add_argument("--provider", choices=("causal", "grad"), default="grad")
    c.add_argument("--preset", choices=sorted(bench.PRESETS), default="default")
    c.add_argument("--csv", required=True)

    c = cmd("report", "Summarize a bench CSV or a merge run report.")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--csv")
    g.add_argument("--run")
    c.add_argument("--out", help="write the summary here instead of stdout")
    return p


# ---------------------------------------------------------------------------


def _partitions(tmap, args):
    if args.level == "model":
        return [model_partition(tmap)]
    if not args.schema:
        raise ValueError(f"level {args.level!r} needs --schema")
    return build_partitions(tmap, PartitionSchema.load(args.schema).with_level(args.level))


def _validate(args) -> None:
    """Flag checks that must pass before any file is touched."""
    if args.command == "prune":
        if args.method.startswith("apl"):
            _check_band(args.ratio, args.epsilon)
            if not args.importance:
                raise UsageError(f"--method {args.method} needs --importance")
        elif not 0.0 <= args.ratio < 1.0:
            raise ValueError(f"--ratio must lie in [0, 1), got {args.ratio}")
    elif args.command == "calibrate":
        if args.mode == "tanh":
            CalibrationConfig(args.ratio, args.epsilon, args.tau1, args.tau2)
        elif args.mode == "linear":
            _check_band(args.ratio, args.epsilon)
        elif not args.tau2 > 0:
            raise ValueError("--tau2 must be positive")
        if args.mode != "weights" and len(args.importance) != 1:
            raise UsageError("--mode tanh/linear takes exactly one --importance")
    elif args.command in ("trace", "grad"):
        if not args.batch and not (args.command == "grad" and args.gradient):
            raise UsageError(f"{args.command} needs --batch")
        if args.command == "trace" or not args.gradient:
            if not args.net_spec:
                raise UsageError(f"{args.command} needs --net-spec for the toy evaluator")
    elif args.command == "toy-train":
        if args.epochs < 0:
            raise ValueError("--epochs must be >= 0")
        if args.epochs > 0 and not args.data:
            raise UsageError("--epochs > 0 needs --data")
    elif args.command == "bench":
        for r in args.ratios:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"bench ratio must lie in [0, 1), got {r}")


def cmd_delta(args):
    base, fine = load_checkpoint(args.base), load_checkpoint(args.fine)
    save_checkpoint(compute_delta(fine, base).astype("float32"), args.out)


def cmd_prune(args):
    base, fine = load_checkpoint(args.base), load_checkpoint(args.fine)
    delta = compute_delta(fine, base)
    if args.method == "magnitude":
        pruned = apply_mask(delta, make_mask(delta, args.ratio, mode="magnitude"))
    elif args.method == "dare":
        pruned = apply_mask_rescale(delta, make_mask(delta, args.ratio, mode="random", seed=args.seed))
    else:
        parts = _partitions(base, args)
        rep = ImportanceReport.load(args.importance)
        if args.method == "apl-tanh":
            ratios = tanh_drop_ratios(rep, CalibrationConfig(args.ratio, args.epsilon, args.tau1))
        else:
            ratios = linear_rank_drop_ratios(rep, args.ratio, args.epsilon, {p.id: p.size for p in parts})
        mask = make_mask(delta, ratios, parts, mode="random", seed=args.seed)
        pruned = apply_mask_rescale(delta, mask, args.ratio if args.global_rescale else None)
    save_checkpoint(reconstruct(base, pruned), args.out)


def cmd_importance(args):
    base, fine = load_checkpoint(args.base), load_checkpoint(args.fine)
    parts = _partitions(base, args)
    batch = FewShotBatch.load(args.batch) if args.batch else None
    if args.command == "trace":
        ev = toylab.ToyEvaluator(toylab.ToyNetSpec.load(args.net_spec))
        rep = causal_importance(ev, fine, base, parts, batch, args.level, args.threads)
    else:
        if args.gradient:
            grad = load_checkpoint(args.gradient)
        else:
            grad = toylab.ToyEvaluator(toylab.ToyNetSpec.load(args.net_spec)).gradient(base, batch)
        task_id = batch.task_id if batch else ""
        fp = batch.fingerprint() if batch else ""
        rep = gradient_importance(compute_delta(fine, base), grad, parts, task_id, args.level, fp)
    rep.save(args.out)


def cmd_calibrate(args):
    reports = [ImportanceReport.load(p) for p in args.importance]
    if args.mode == "weights":
        pairs = []
        for path, rep in zip(args.importance, reports):
            if len(rep.entries) != 1:
                raise ValueError(f"{path}: weights need model-level reports with one entry")
            pairs.append((rep.task_id or str(path), rep.entries[0].magnitude))
        out = {"version": 1, "mode": "weights", "tau2": args.tau2, "weights": merge_weights(pairs, args.tau2)}
    else:
        rep = reports[0]
        if args.mode == "tanh":
            ratios = tanh_drop_ratios(rep, CalibrationConfig(args.ratio, args.epsilon, args.tau1, args.tau2))
        else:
            ratios = linear_rank_drop_ratios(rep, args.ratio, args.epsilon)
        out = {"version": 1, "mode": args.mode, "task_id": rep.task_id, "ratio": args.ratio,
               "epsilon": args.epsilon, "ratios": ratios}
    atomic_write_text(args.out, json.dumps(out, indent=2))


def cmd_merge(args):
    try:
        recipe = MergeRecipe.load(args.recipe)
    except OSError:
        raise
    except ValueError as exc:
        raise StageError("recipe", exc) from exc
    overrides = {}
    if args.provider:
        overrides["provider"] = "gradient" if args.provider == "grad" else args.provider
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses

        try:
            recipe = dataclasses.replace(recipe, **overrides)
        except ValueError as exc:
            raise StageError("recipe", exc) from exc
    merged, report = run_recipe(recipe, threads=args.threads)
    report["recipe"] = recipe.to_dict()
    save_checkpoint(merged, args.out)
    atomic_write_text(args.report or f"{args.out}.report.json", json.dumps(report, indent=2))


def cmd_toy_train(args):
    spec = toylab.ToyNetSpec.load(args.net_spec)
    net = load_checkpoint(args.base).astype("float64") if args.base else toylab.init_net(spec, args.seed)
    if args.epochs:
        data = FewShotBatch.load(args.data)
        net = toylab.train(net, spec, data, args.epochs, args.step_size, args.seed, args.freeze)
    save_checkpoint(toylab.export(net), args.out)
    if args.schema_out:
        atomic_write_text(args.schema_out, json.dumps(toylab.layer_schema(spec).to_dict(), indent=2))


def cmd_toy_make_tasks(args):
    tmpl = toylab.TaskTemplate(
        args.input_dim, args.classes, args.separation, args.noise, args.train_size, args.test_size,
        args.fewshot_per_class, args.angles,
    )
    for t in toylab.make_tasks(args.count, tmpl, args.seed):
        t.save(args.out)


def cmd_bench(args):
    cfg = bench.PRESETS[args.preset]
    provider = "gradient" if args.provider == "grad" else "causal"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        rows = bench.pruning_comparison(
            cfg, args.tasks, args.ratios, range(args.seeds), args.epsilon, args.level, provider
        )
    atomic_write_text(args.csv, bench.rows_to_csv(rows))
    log.info("\n%s", bench.format_summary(bench.summarize(rows)))


def cmd_report(args):
    if args.csv:
        text = bench.format_summary(bench.summarize(bench.read_csv(Path(args.csv).read_text(encoding="utf-8"))))
    else:
        run = json.loads(Path(args.run).read_text(encoding="utf-8"))
        lines = [f"method {run['method']}  pruner {run['pruner']}  provider {run['provider']}  seed {run['seed']}"]
        for t in run["tasks"]:
            w = run["weights"][t["task_id"]] if run.get("weights") else None
            wtxt = "-" if w is None else f"{w:.4f}"
            lines.append(f"{t['task_id']:<16} weight {wtxt:>8}  drop {t['drop_fraction']:.4f}")
        for stage, secs in run.get("timings", {}).items():
            lines.append(f"  {stage:<10} {secs:8.3f}s")
        text = "\n".join(lines)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)


COMMANDS = {
    "delta": cmd_delta,
    "prune": cmd_prune,
    "trace": cmd_importance,
    "grad": cmd_importance,
    "calibrate": cmd_calibrate,
    "merge": cmd_merge,
    "toy-train": cmd_toy_train,
    "toy-make-tasks": cmd_toy_make_tasks,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _setup_logging() -> None:
    level = os.environ.get("APL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    log.setLevel(levels.get(level, logging.ERROR))
    for h in [h for h in log.handlers if getattr(h, "_aplmerge_cli", False)]:
        log.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("aplmerge: %(message)s"))
    h._aplmerge_cli = True
    log.addHandler(h)
    log.propagate = False


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_DATA


def execute(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _validate(args)
    except UsageError as exc:
        print(f"aplmerge: [usage] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"aplmerge: [flags] {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        COMMANDS[args.command](args)
    except (StageError, OSError, ValueError, UsageError, toylab.TrainingError, KeyError, json.JSONDecodeError) as exc:
        stage = exc.stage if isinstance(exc, StageError) else args.command
        msg = exc.cause if isinstance(exc, StageError) else exc
        if isinstance(msg, OSError) and msg.filename and str(msg.filename) not in str(msg):
            msg = f"{msg}: {msg.filename}"
        print(f"aplmerge: [{stage}] {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return _exit_code(exc)
    return EXIT_OK


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
