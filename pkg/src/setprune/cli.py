"""Command line interface for the full pipeline.

Subcommands: gen (synthetic dataset), train (set classifier), select
(subset selection traces plus an accuracy-vs-removals summary), bench
(speed/quality tradeoff table), report (merged tables and figures).

Only the standard library is imported at module level.  The global
--threads flag must take effect before numpy loads its BLAS, so every
command imports the numeric modules lazily after the environment is set.
All randomness is owned by explicit seeds; reruns with the same config
produce byte-identical outputs apart from wall-time columns.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error.  Summary tables are built in memory and written only after the
whole computation succeeds, so a failed run never leaves partial rows.
"""

import argparse
import csv
import dataclasses
import json
import math
import os
import sys

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

EXIT_CODES = {"ok": 0, "config": 2, "data": 3, "numeric": 4}


def _set_thread_env(threads: int) -> None:
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def _apply_precision(precision: str) -> None:
    import numpy as np

    from . import autodiff as ad

    ad.set_default_dtype(np.float32 if precision == "f32" else np.float64)


def _load_model(path, precision):
    import numpy as np

    from . import model as sm

    model = sm.load_model(path)
    if precision == "f32":
        sm.cast_parameters(model, np.float32)
    return model


def _write_config(outdir, command, args, extra=()):
    from . import __version__

    record = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "precision": args.precision,
        "threads": args.threads,
    }
    record.update(extra)
    with open(os.path.join(outdir, "config.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _map_samples(fn, samples, threads):
    """Apply fn to (index, sample) pairs, preserving input order."""
    pairs = list(enumerate(samples))
    if threads <= 1:
        return [fn(pair) for pair in pairs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, pairs))


def _pruned_set(ps, removed_ids):
    import numpy as np

    from . import data

    keep_ids = np.setdiff1d(ps.ids, removed_ids)
    rows = ps.rows_for(keep_ids)
    return data.PointSet(ids=keep_ids, coords=ps.coords[rows],
                         label=ps.label, name=ps.name)


def _take_samples(dataset, count):
    from .errors import ParameterError

    samples = dataset.samples
    if count is not None:
        if count < 1:
            raise ParameterError(f"need --samples >= 1, got {count}")
        if count > len(samples):
            raise ParameterError(
                f"--samples {count} exceeds the {len(samples)} available "
                f"{dataset.split} samples")
        # Manifest order is round-robin over classes, so any prefix is
        # class-balanced.
        samples = samples[:count]
    return samples


def cmd_gen(args):
    from . import data

    classes = tuple(s.strip() for s in args.classes.split(",")) \
        if args.classes else data.FAMILIES
    rows = data.generate_dataset(
        args.outdir,
        classes=classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        n=args.points,
        seed=args.seed,
        size_jitter=args.size_jitter,
    )
    _write_config(args.outdir, "gen", args, {
        "classes": list(classes),
        "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class,
        "points": args.points,
        "size_jitter": args.size_jitter,
        "outdir": args.outdir,
    })
    n_train = sum(1 for _, _, split in rows if split == "train")
    print(f"wrote {len(rows)} samples ({n_train} train, "
          f"{len(rows) - n_train} test) under {args.outdir}")
    return 0


def cmd_train(args):
    import numpy as np

    from . import data, model as sm

    _apply_precision(args.precision)
    train_set = data.load_dataset(args.datadir, "train")
    test_set = data.load_dataset(args.datadir, "test")
    model = sm.SetClassifier.create(
        d=train_set.samples[0].d,
        c=len(train_set.class_names),
        seed=args.seed,
    )
    if args.precision == "f32":
        sm.cast_parameters(model, np.float32)
    history = sm.train(
        model, train_set.samples,
        epochs=args.epochs, batch=args.batch, lr=args.lr,
        momentum=args.momentum, seed=args.seed, jitter=args.jitter,
        eval_samples=test_set.samples,
    )
    os.makedirs(args.outdir, exist_ok=True)
    sm.save_model(os.path.join(args.outdir, "model.sfm"), model)
    columns = list(history[0].keys())
    with open(os.path.join(args.outdir, "metrics.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(history)
    _write_config(args.outdir, "train", args, {
        "datadir": args.datadir,
        "outdir": args.outdir,
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "momentum": args.momentum,
        "jitter": args.jitter,
    })
    last = history[-1]
    print(f"trained {args.epochs} epochs: train_acc {last['train_acc']:.3f} "
          f"test_acc {last['test_acc']:.3f}")
    return 0


def _resolve_strategy(text, m, seed):
    from . import selection

    base = selection.ScoreStrategy.parse(text, seed=seed)
    if m is not None:
        inner = base.inner if base.kind == "hybrid" else base.kind
        base = selection.ScoreStrategy(kind="hybrid", inner=inner, m=m, seed=seed)
    return base


def _run_attacks(model, samples, strategy, k, seed, threads, finalize):
    """One selection trace per sample; per-sample seeds keep random
    strategies independent across samples while staying reproducible."""
    from . import model as sm, objectives, selection

    def run_one(pair):
        idx, ps = pair
        local = sm.clone_model(model)
        strat = dataclasses.replace(strategy, seed=seed + idx)
        obj = objectives.NeuralObjective.for_sample(local, ps)
        return selection.select(obj, ps, strat, k, finalize=finalize)

    return _map_samples(run_one, samples, threads)


def _grid_rows(model, samples, traces, strategy_label, k):
    """Post-attack accuracy at every ceil(k/10) removals, plus step k."""
    import numpy as np

    step = max(1, math.ceil(k / 10))
    grid = sorted(set(range(0, k + 1, step)) | {k})
    rows = []
    for removed in grid:
        hits = 0
        ms, fwd, bwd = [], [], []
        for ps, trace in zip(samples, traces):
            pruned = _pruned_set(ps, trace.removed_ids[:removed])
            hits += int(model.predict(pruned) == ps.label)
            if removed == 0:
                ms.append(0.0); fwd.append(0.0); bwd.append(0.0)
            else:
                st = trace.steps[removed - 1]
                ms.append(st.ms_cum)
                fwd.append(float(st.forwards_cum))
                bwd.append(float(st.backwards_cum))
        rows.append({
            "strategy": strategy_label,
            "removed": removed,
            "accuracy": hits / len(samples),
            "mean_ms_cum": float(np.mean(ms)),
            "mean_forwards_cum": float(np.mean(fwd)),
            "mean_backwards_cum": float(np.mean(bwd)),
        })
    return rows


def cmd_select(args):
    from . import data, report, selection

    _apply_precision(args.precision)
    model = _load_model(args.model, args.precision)
    dataset = data.load_dataset(args.datadir, args.split)
    samples = _take_samples(dataset, args.samples)
    strategy = _resolve_strategy(args.strategy, args.m, args.seed)

    traces = _run_attacks(model, samples, strategy, args.k,
                          args.seed, args.threads, finalize=True)
    summary = _grid_rows(model, samples, traces, strategy.label, args.k)

    os.makedirs(args.outdir, exist_ok=True)
    selection.write_trace_csv(
        os.path.join(args.outdir, "traces.csv"),
        [(ps.name, trace) for ps, trace in zip(samples, traces)],
    )
    report.write_rows(os.path.join(args.outdir, "summary.csv"),
                      summary, report.ACCURACY_COLUMNS)
    _write_config(args.outdir, "select", args, {
        "model": args.model,
        "datadir": args.datadir,
        "outdir": args.outdir,
        "strategy": strategy.label,
        "k": args.k,
        "samples": len(samples),
        "split": args.split,
    })
    final = summary[-1]
    print(f"{strategy.label}: accuracy {final['accuracy']:.3f} after "
          f"{args.k} removals on {len(samples)} {args.split} samples")
    return 0


def cmd_bench(args):
    import numpy as np

    from . import data, report
    from .errors import NumericError, ParameterError

    _apply_precision(args.precision)
    if args.reps < 1:
        raise ParameterError(f"need --reps >= 1, got {args.reps}")
    model = _load_model(args.model, args.precision)
    dataset = data.load_dataset(args.datadir, args.split)
    samples = _take_samples(dataset, args.samples)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not names:
        raise ParameterError("need at least one strategy in --strategies")
    strategies = [_resolve_strategy(name, None, args.seed) for name in names]

    rows = []
    for strategy in strategies:
        reps = [
            _run_attacks(model, samples, strategy, args.k,
                         args.seed, args.threads, finalize=False)
            for _ in range(args.reps)
        ]
        # Repetitions exist only to stabilise timing; everything else must
        # be bitwise identical or the determinism contract is broken.
        first = reps[0]
        for rep in reps[1:]:
            for a, b in zip(first, rep):
                if (a.forwards_total != b.forwards_total
                        or a.backwards_total != b.backwards_total
                        or list(a.removed_ids) != list(b.removed_ids)):
                    raise NumericError(
                        f"nondeterministic rerun for {strategy.label}")
        per_sample_ms = [
            float(np.median([rep[i].wall_ms for rep in reps]))
            for i in range(len(samples))
        ]
        hits = sum(
            int(model.predict(_pruned_set(ps, trace.removed_ids)) == ps.label)
            for ps, trace in zip(samples, first)
        )
        rows.append({
            "strategy": strategy.label,
            "k": args.k,
            "n_samples": len(samples),
            "reps": args.reps,
            "accuracy": hits / len(samples),
            "ms_per_sample": float(np.mean(per_sample_ms)),
            "forwards_per_sample": float(np.mean([t.forwards_total for t in first])),
            "backwards_per_sample": float(np.mean([t.backwards_total for t in first])),
        })

    os.makedirs(args.outdir, exist_ok=True)
    report.write_rows(os.path.join(args.outdir, "bench.csv"),
                      rows, report.TRADEOFF_COLUMNS)
    _write_config(args.outdir, "bench", args, {
        "model": args.model,
        "datadir": args.datadir,
        "outdir": args.outdir,
        "strategies": [s.label for s in strategies],
        "k": args.k,
        "samples": len(samples),
        "split": args.split,
        "reps": args.reps,
    })
    for row in rows:
        print(f"{row['strategy']}: accuracy {row['accuracy']:.3f}, "
              f"{row['ms_per_sample']:.1f} ms/sample, "
              f"{row['forwards_per_sample']:.0f} fwd, "
              f"{row['backwards_per_sample']:.0f} bwd")
    return 0


def _table_paths(entries, default_name):
    paths = []
    for entry in entries:
        if os.path.isdir(entry):
            entry = os.path.join(entry, default_name)
        paths.append(entry)
    return paths


def cmd_report(args):
    from . import report

    select_tables = _table_paths(args.select, "summary.csv")
    bench_tables = _table_paths(args.bench, "bench.csv")
    written = report.emit(args.outdir, select_tables, bench_tables)
    _write_config(args.outdir, "report", args, {
        "select": args.select,
        "bench": args.bench,
        "outdir": args.outdir,
    })
    print(f"wrote {', '.join(written)} under {args.outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setprune",
        description="subset selection pipeline: data, training, attacks, benchmarks",
    )
    parser.add_argument("--seed", type=int, default=0,
                        help="base seed for all randomness (default 0)")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f64",
                        help="floating point width for the numeric pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads and per-sample workers (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic shape dataset")
    g.add_argument("outdir")
    g.add_argument("--classes", default=None,
                   help="comma-separated shape families (default: all five)")
    g.add_argument("--train-per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--points", type=int, default=256,
                   help="points per sample (default 256)")
    g.add_argument("--size-jitter", type=float, default=0.2,
                   help="relative scale/aspect jitter (default 0.2)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the set classifier")
    t.add_argument("datadir")
    t.add_argument("outdir")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--jitter", type=float, default=0.0,
                   help="train-time coordinate noise (default 0)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("select", help="run one selection strategy over samples")
    s.add_argument("model")
    s.add_argument("datadir")
    s.add_argument("outdir")
    s.add_argument("--strategy", required=True,
                   help="exact | sfo-median | sfo-feature-min | saliency | "
                        "random | hybrid[:inner[:m]]")
    s.add_argument("--k", type=int, default=64,
                   help="number of removals (default 64)")
    s.add_argument("--m", type=int, default=None,
                   help="candidate count; makes the strategy hybrid")
    s.add_argument("--samples", type=int, default=None,
                   help="use only the first N samples of the split")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_select)

    b = sub.add_parser("bench", help="speed/quality tradeoff over strategies")
    b.add_argument("model")
    b.add_argument("datadir")
    b.add_argument("outdir")
    b.add_argument("--strategies",
                   default="exact,sfo-median,saliency,random",
                   help="comma-separated strategy specs")
    b.add_argument("--k", type=int, default=50)
    b.add_argument("--samples", type=int, default=32)
    b.add_argument("--split", choices=("train", "test"), default="test")
    b.add_argument("--reps", type=int, default=3,
                   help="timing repetitions; the median is reported")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="merge summaries into tables and figures")
    r.add_argument("outdir")
    r.add_argument("--select", nargs="*", default=[], metavar="PATH",
                   help="select output dirs or summary.csv files")
    r.add_argument("--bench", nargs="*", default=[], metavar="PATH",
                   help="bench output dirs or bench.csv files")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .errors import DataError, NumericError, ParameterError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ParameterError(f"need --threads >= 1, got {args.threads}")
        _set_thread_env(args.threads)
        return args.func(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["numeric"]
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]


if __name__ == "__main__":
    sys.exit(main())
