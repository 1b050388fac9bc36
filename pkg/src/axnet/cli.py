"""Command-line front end.

Subcommands: train, compare, gradcheck, npu, gen-data. A JSON config file
(--config) can pre-set any training flag; explicit flags win over file
values. Exit codes: 0 success, 1 usage/configuration error, 2 numerical
failure. AXNET_THREADS caps the per-cell parallelism of compare.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import backends
from .benchmarks import BENCHMARKS, generate_dataset, save_dataset
from .errors import AxNetError, ConfigError, TrainingDiverged
from .fusion import GatingMode
from .fusion import gradient_check_suite as fused_gradient_check
from .io import load_model, save_model
from .metrics import (
    METHODS,
    REPORT_COLUMNS,
    ExperimentSpec,
    compare_matched,
    median_report,
    run_experiment,
)
from .nn import TrainConfig
from .nn import gradient_check_suite as mlp_gradient_check
from .npu import DEFAULT_CPU_CYCLES, NpuConfig, expected_cost

REPORT_SCHEMA = "axnet-report-v1"
TRACE_SCHEMA = "axnet-trace-v1"
SUMMARY_SCHEMA = "axnet-summary-v1"
GRADCHECK_TOLERANCE = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _write_csv(path, schema, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _append_csv(path, schema, header, rows):
    path = Path(path)
    if not path.exists():
        return _write_csv(path, schema, header, rows)
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return path


def read_csv(path):
    """Read a schema-tagged CSV back: (schema, header, rows-as-dicts)."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema: "):
            raise ConfigError(f"{path}: missing schema line")
        schema = first[len("# schema: "):]
        reader = csv.reader(fh)
        header = next(reader)
        rows = [dict(zip(header, row)) for row in reader]
    return schema, header, rows


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _report_row(report):
    d = report.row()
    return [_fmt(d[c]) for c in REPORT_COLUMNS]


def _write_trace(path, trace_rows):
    header = ["epoch", "iteration", "true_invocation",
              "predicted_invocation", "loss_a", "loss_p"]
    rows = [
        [r.epoch, r.iteration, _fmt(r.true_invocation), _fmt(r.predicted_invocation),
         _fmt(r.loss_a), _fmt(r.loss_p)]
        for r in trace_rows
    ]
    return _write_csv(path, TRACE_SCHEMA, header, rows)


def _append_report(out_dir, reports):
    rows = [_report_row(r) for r in reports]
    csv_path = _append_csv(out_dir / "reports.csv", REPORT_SCHEMA, list(REPORT_COLUMNS), rows)
    json_path = out_dir / "reports.json"
    existing = []
    if json_path.exists():
        existing = json.loads(json_path.read_text())["rows"]
    existing.extend(r.row() for r in reports)
    json_path.write_text(json.dumps({"schema": REPORT_SCHEMA, "rows": existing}, indent=2))
    return csv_path


# ---------------------------------------------------------------------------
# option plumbing


_TRAIN_DEFAULTS = {
    "seed": 0,
    "row": 0,
    "restarts": None,
    "gating": "all_layers",
    "rounds": 5,
    "loss_weight": 1.0,
    "n_train": 10000,
    "n_test": 2000,
    "out": "results",
    "learning_rate": None,
    "batch_size": None,
    "iterations": None,
    "error_bound": None,
    "error_metric": None,
    "approx_topology": None,
    "pred_topology": None,
}


def _add_train_options(p, with_method=True):
    p.add_argument("--benchmark", help=f"one of: {', '.join(sorted(BENCHMARKS))}")
    if with_method:
        p.add_argument("--method", help=f"one of: {', '.join(METHODS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--row", type=int, help="fused-topology table row index")
    p.add_argument("--gating", help="all_layers or single_layer:<k>")
    p.add_argument("--rounds", type=int, help="iterative retraining rounds")
    p.add_argument("--restarts", type=int,
                   help="best-of-N random restarts (default per benchmark)")
    p.add_argument("--loss-weight", dest="loss_weight", type=float,
                   help="weight on the classification loss (fused training)")
    p.add_argument("--approx-topology", dest="approx_topology",
                   help="dash-separated widths, e.g. 2-6-2")
    p.add_argument("--pred-topology", dest="pred_topology",
                   help="dash-separated widths, e.g. 2-4-8")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", type=int, help="total training batch steps")
    p.add_argument("--error-bound", dest="error_bound", type=float)
    p.add_argument("--error-metric", dest="error_metric",
                   choices=["relative", "absolute", "image_diff"])
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON file with defaults for these flags")


def _resolve(args, defaults):
    """flag > config-file value > builtin default."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(file_values) - set(defaults) - {"benchmark", "method", "methods",
                                                      "budget_mode", "seeds"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(file_values)
    for key in list(merged) + ["benchmark", "method", "methods", "budget_mode", "seeds"]:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _parse_topology(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split("-"))
    except ValueError:
        raise ConfigError(f"cannot parse topology {text!r}; expected e.g. 2-6-2") from None


def _build_cfg(opts, benchmark):
    from .benchmarks import default_train_config

    cfg = default_train_config(benchmark, seed=opts["seed"])
    overrides = {}
    if opts.get("learning_rate") is not None:
        overrides["learning_rate"] = opts["learning_rate"]
    if opts.get("batch_size") is not None:
        overrides["batch_size"] = opts["batch_size"]
    if opts.get("iterations") is not None:
        overrides["max_iterations"] = opts["iterations"]
    if opts.get("error_bound") is not None:
        overrides["error_bound"] = opts["error_bound"]
    if opts.get("error_metric") is not None:
        overrides["error_metric"] = opts["error_metric"]
    return cfg.replace(**overrides) if overrides else cfg


def _build_spec(opts):
    if not opts.get("benchmark"):
        raise ConfigError("--benchmark is required")
    if opts["benchmark"] not in BENCHMARKS:
        raise ConfigError(
            f"unknown benchmark {opts['benchmark']!r}; valid: {', '.join(sorted(BENCHMARKS))}"
        )
    method = opts.get("method")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    return ExperimentSpec(
        benchmark=opts["benchmark"],
        method=method,
        seed=opts["seed"],
        row=opts["row"],
        gating=GatingMode.parse(opts["gating"]),
        rounds=opts["rounds"],
        loss_weight=opts["loss_weight"],
        restarts=opts["restarts"],
        approx_topology=_parse_topology(opts["approx_topology"]),
        pred_topology=_parse_topology(opts["pred_topology"]),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    opts = _resolve(args, _TRAIN_DEFAULTS)
    spec = _build_spec(opts)
    cfg = _build_cfg(opts, spec.benchmark)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.benchmark}_{spec.method}_{spec.seed}"
    dataset = generate_dataset(spec.benchmark, opts["n_train"], opts["n_test"], spec.seed)
    try:
        report, result = run_experiment(spec, dataset=dataset, cfg=cfg)
    except TrainingDiverged as exc:
        _write_trace(out_dir / f"{stem}.trace.csv", exc.trace)
        print(f"training diverged (last stable epoch {exc.last_stable_epoch}); "
              f"partial trace written to {stem}.trace.csv", file=sys.stderr)
        return 2
    save_model(result.model, out_dir / f"{stem}.model.json",
               metadata={"benchmark": spec.benchmark, "method": spec.method,
                         "seed": spec.seed, "backend": backends.active_backend()})
    _write_trace(out_dir / f"{stem}.trace.csv", result.trace)
    _append_report(out_dir, [report])
    d = report.row()
    print(f"{stem}: params={d['param_count']} "
          f"true_invocation={d['true_invocation']:.4f} "
          f"predicted_invocation={d['predicted_invocation']:.4f} "
          f"prediction_accuracy={_fmt(d['prediction_accuracy']) or 'n/a'} "
          f"overall_error={_fmt(d['overall_error']) or 'n/a'}")
    return 0


_COMPARE_DEFAULTS = dict(_TRAIN_DEFAULTS, seeds="1,2,3,4,5", budget_mode="match_params",
                         methods="axnet,onepass", tolerance=None, strict=False)


def cmd_compare(args):
    opts = _resolve(args, _COMPARE_DEFAULTS)
    if not opts.get("benchmark"):
        raise ConfigError("--benchmark is required (comma-separated list allowed)")
    benchmarks = [b.strip() for b in str(opts["benchmark"]).split(",") if b.strip()]
    methods = [m.strip() for m in str(opts["methods"]).split(",") if m.strip()]
    seeds = [int(s) for s in str(opts["seeds"]).split(",") if s.strip()]
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgs = {}
    medians_by_benchmark = {}
    for benchmark in benchmarks:
        if benchmark not in BENCHMARKS:
            raise ConfigError(
                f"unknown benchmark {benchmark!r}; valid: {', '.join(sorted(BENCHMARKS))}"
            )
        cfgs[benchmark] = _build_cfg(opts, benchmark)
        result = compare_matched(
            benchmark, methods, budget_mode=opts["budget_mode"], seeds=seeds,
            cfg=cfgs[benchmark], n_train=opts["n_train"], n_test=opts["n_test"],
            tolerance=opts["tolerance"], strict=bool(opts["strict"]),
            rounds=opts["rounds"], gating=GatingMode.parse(opts["gating"]),
            restarts=opts["restarts"],
        )
        rows = [_report_row(r) for r in result.reports]
        rows += [_report_row(m) for m in result.medians]
        _write_csv(out_dir / f"compare_{benchmark}.csv", REPORT_SCHEMA,
                   list(REPORT_COLUMNS), rows)
        medians_by_benchmark[benchmark] = {m.method: m for m in result.medians}
        for note in result.notes:
            print(f"note: {note}")
        for m in result.medians:
            print(f"{benchmark} {m.method}: median true_invocation="
                  f"{m.true_invocation:.4f} predicted={m.predicted_invocation:.4f}")

    summary_rows = []
    baselines = [m for m in methods if m != "axnet"]
    for base in baselines:
        gains = []
        for benchmark in benchmarks:
            meds = medians_by_benchmark[benchmark]
            if "axnet" in meds and base in meds and meds[base].true_invocation > 0:
                gains.append(
                    (meds["axnet"].true_invocation - meds[base].true_invocation)
                    / meds[base].true_invocation
                )
        mean_gain = sum(gains) / len(gains) if gains else None
        summary_rows.append([base, len(gains), _fmt(mean_gain)])
        if mean_gain is not None:
            print(f"mean relative invocation gain vs {base}: {mean_gain:+.1%}")
    _write_csv(out_dir / "compare_summary.csv", SUMMARY_SCHEMA,
               ["baseline_method", "n_benchmarks", "mean_relative_invocation_gain"],
               summary_rows)
    return 0


def cmd_gradcheck(args):
    trials = args.trials
    seed = args.seed if args.seed is not None else 0
    if trials == 0:
        print("warning: 0 trials requested; vacuous pass")
        return 0
    worst_mlp = mlp_gradient_check(np.random.default_rng([seed, 101]), trials=trials)
    worst_approx, worst_pred = fused_gradient_check(
        np.random.default_rng([seed, 102]), trials=max(1, trials // 2)
    )
    components = {
        "mlp-backprop": worst_mlp,
        "fused-approximation-path": worst_approx,
        "fused-prediction-path": worst_pred,
    }
    failed = False
    for name, worst in components.items():
        status = "ok" if worst < GRADCHECK_TOLERANCE else "FAIL"
        if worst >= GRADCHECK_TOLERANCE:
            failed = True
        print(f"{name}: worst relative error {worst:.3e} [{status}]")
    return 2 if failed else 0


def cmd_npu(args):
    npu_cfg = NpuConfig()
    if args.npu_config:
        npu_cfg = NpuConfig.from_json(Path(args.npu_config).read_text())
    try:
        model = load_model(args.model)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load model {args.model}: {exc}") from exc
    if not hasattr(model, "gated_layers"):
        raise ConfigError("the cost model needs a fused model file")
    cpu_cycles = args.cpu_cycles
    if cpu_cycles is None and args.benchmark:
        cpu_cycles = DEFAULT_CPU_CYCLES.get(args.benchmark)
    if args.sweep:
        grid = np.linspace(0.0, 1.0, args.sweep)
        reports = [expected_cost(model, float(v), npu_cfg, cpu_cycles).to_dict() for v in grid]
        print(json.dumps(reports, indent=2))
    else:
        invocation = args.invocation if args.invocation is not None else 1.0
        report = expected_cost(model, invocation, npu_cfg, cpu_cycles)
        print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_gen_data(args):
    if args.benchmark not in BENCHMARKS:
        raise ConfigError(
            f"unknown benchmark {args.benchmark!r}; valid: {', '.join(sorted(BENCHMARKS))}"
        )
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out or "results")
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(args.benchmark, args.n_train, args.n_test, seed)
    path = save_dataset(ds, out_dir / f"{args.benchmark}_{seed}.csv")
    print(f"wrote {path} and {path.with_suffix('.json')}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="axnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model and append a report row")
    _add_train_options(p_train)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="matched-budget comparison across methods")
    _add_train_options(p_cmp, with_method=False)
    p_cmp.add_argument("--methods", help=f"comma list from: {', '.join(METHODS)}")
    p_cmp.add_argument("--budget-mode", dest="budget_mode",
                       choices=["match_params", "match_invocation"])
    p_cmp.add_argument("--seeds", help="comma list of seeds")
    p_cmp.add_argument("--tolerance", type=float, help="matching tolerance")
    p_cmp.add_argument("--strict", action="store_true", default=None,
                       help="reject configurations outside tolerance")
    p_cmp.set_defaults(func=cmd_compare)

    p_gc = sub.add_parser("gradcheck", help="finite-difference validation of backprop")
    p_gc.add_argument("--seed", type=int)
    p_gc.add_argument("--trials", type=int, default=50)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_npu = sub.add_parser("npu", help="invocation-weighted NPU cost of a fused model")
    p_npu.add_argument("--model", required=True, help="fused model JSON file")
    p_npu.add_argument("--invocation", type=float)
    p_npu.add_argument("--sweep", type=int, nargs="?", const=5,
                       help="evaluate an invocation grid of N points")
    p_npu.add_argument("--npu-config", dest="npu_config", help="NpuConfig JSON file")
    p_npu.add_argument("--cpu-cycles", dest="cpu_cycles", type=float)
    p_npu.add_argument("--benchmark", help="use this benchmark's default CPU cost")
    p_npu.set_defaults(func=cmd_npu)

    p_gen = sub.add_parser("gen-data", help="generate a dataset CSV with JSON sidecar")
    p_gen.add_argument("--benchmark", required=True)
    p_gen.add_argument("--n-train", dest="n_train", type=int, default=10000)
    p_gen.add_argument("--n-test", dest="n_test", type=int, default=2000)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out")
    p_gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except AxNetError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
