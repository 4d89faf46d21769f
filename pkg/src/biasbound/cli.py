"""Command-line surface. Exit codes: 0 success, 2 usage/format error,
3 partial sweep failure, 4 bound-violation alarm.

Sweeps are driven by a sectioned key=value config file so the exact
experiment description can be checked into a repo; flags override config
values. Standard output stays human-readable; machine-readable results go to
files. BBL_SEED overrides default seeds, BBL_THREADS sets sweep parallelism.
"""

from __future__ import annotations

import argparse
import difflib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, debias, exact_info, harness, stats
from .datagen import BiasSpec, LabeledDataset
from .harness import MARGIN_TOLERANCE, SweepConfig, SweepResult

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_BOUND_ALARM = 4


class UsageError(Exception):
    """Bad flags, unreadable config, or malformed input files."""


# Known config keys per section; anything else is rejected with its line number.
_CONFIG_SCHEMA: dict[str, set[str]] = {
    "task": {"kind", "n_train", "eval_per_cell", "trials"},
    "grid": {"kind", "values"},
    "methods": {"names"} | {f"{m}_lambda" for m in debias.METHODS},
    "training": {"epochs", "learning_rate", "batch_size", "seed", "hidden_width", "feature_dim"},
    "estimators": {"kind", "k", "bins_per_dim", "dv_iterations"},
    "output": {"dir", "prefix"},
}


def _parse_config_text(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in _CONFIG_SCHEMA:
                raise UsageError(
                    f"line {lineno}: unknown section [{current}]; expected one of "
                    f"{sorted(_CONFIG_SCHEMA)}"
                )
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise UsageError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        known = _CONFIG_SCHEMA[current]
        if key not in known:
            hint = difflib.get_close_matches(key, sorted(known), n=1)
            suffix = f"; nearest valid key is {hint[0]!r}" if hint else ""
            raise UsageError(f"line {lineno}: unknown key {key!r} in [{current}]{suffix}")
        sections[current][key] = value
    return sections


def _env_seed(default: int) -> int:
    env = os.environ.get("BBL_SEED")
    return int(env) if env else default


def build_sweep_config(path: str | Path) -> SweepConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    sections = _parse_config_text(text)

    def get(section: str, key: str, default):
        return sections.get(section, {}).get(key, default)

    try:
        grid_kind = get("grid", "kind", "agreement_prob")
        values = [float(v) for v in str(get("grid", "values", "1.0, 0.5")).split(",") if v.strip()]
        grid = tuple(BiasSpec(grid_kind, v) for v in values)
        methods = tuple(
            m.strip() for m in str(get("methods", "names", "baseline")).split(",") if m.strip()
        )
        lambdas = []
        for method in debias.METHODS:
            raw = get("methods", f"{method}_lambda", None)
            if raw is not None:
                lambdas.append((method, float(raw)))
        config = SweepConfig(
            task=str(get("task", "kind", "gaussian")),
            grid=grid,
            methods=methods,
            trials=int(get("task", "trials", 7)),
            base_seed=_env_seed(int(get("training", "seed", 0))),
            estimator=str(get("estimators", "kind", "knn")),
            eval_per_cell=int(get("task", "eval_per_cell", 250)),
            n_train=int(get("task", "n_train", 2000)),
            epochs=int(get("training", "epochs", 12)),
            learning_rate=float(get("training", "learning_rate", 1e-3)),
            batch_size=int(get("training", "batch_size", 32)),
            hidden_width=int(get("training", "hidden_width", 16)),
            feature_dim=int(get("training", "feature_dim", 8)),
            knn_k=int(get("estimators", "k", 5)),
            bins_per_dim=int(get("estimators", "bins_per_dim", 8)),
            dv_iterations=int(get("estimators", "dv_iterations", 500)),
            lambdas=tuple(lambdas),
            workers=harness.default_workers(),
        )
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid config value: {exc}") from exc
    return config


def _print_resolved(config: SweepConfig) -> None:
    print("resolved sweep configuration:")
    for key, value in sorted(config.to_json_obj().items()):
        print(f"  {key} = {value}")


def cmd_gen_data(args: argparse.Namespace) -> int:
    seed = _env_seed(args.seed)
    if args.task == "gaussian":
        lo, hi = datagen.AGREEMENT_PROB_RANGE
        if not lo <= args.bias_value <= hi:
            raise UsageError(f"--bias-value for gaussian must lie in [{lo}, {hi}]")
        dataset = datagen.gen_gaussian_biased(args.n, args.bias_value, seed=seed)
        generator = "gen_gaussian_biased"
    elif args.task == "colorized":
        lo, hi = datagen.COLOR_VARIANCE_RANGE
        if not lo <= args.bias_value <= hi:
            raise UsageError(f"--bias-value for colorized must lie in [{lo}, {hi}]")
        images, labels = datagen.synth_digit_images(args.n, seed=seed)
        dataset = datagen.colorize(images, labels, args.bias_value, split=args.split, seed=seed + 1)
        generator = "colorize"
    elif args.task == "tabular":
        lo, hi = datagen.CONFLICT_FRACTION_RANGE
        if not lo <= args.bias_value <= hi:
            raise UsageError(f"--bias-value for tabular must lie in [{lo}, {hi}]")
        biased, conflicting = datagen.make_tabular_pools(2 * args.n, seed=seed)
        dataset = datagen.mix_bias(biased, conflicting, args.bias_value, args.n, seed=seed + 1)
        generator = "mix_bias"
    else:
        raise UsageError(f"unknown task {args.task!r}")
    out = Path(args.out)
    dataset.save(out)
    sidecar = datagen.provenance_sidecar(
        dataset, generator, {"task": args.task, "bias_value": args.bias_value, "n": args.n, "seed": seed}
    )
    out.with_suffix(out.suffix + ".json").write_text(sidecar)
    print(f"wrote {dataset.n} samples to {out}")
    print(f"empirical H(Y|A) = {datagen.empirical_hya(dataset.targets, dataset.attributes):.4f} nats")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = build_sweep_config(args.config)
    _print_resolved(config)
    sections = _parse_config_text(Path(args.config).read_text())
    out_dir = Path(args.out_dir or sections.get("output", {}).get("dir", "."))
    prefix = sections.get("output", {}).get("prefix", "sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    result = harness.run_sweep(config)
    harness.emit_report(result, "csv", out_dir / f"{prefix}.csv")
    harness.emit_report(result, "json", out_dir / f"{prefix}.json")
    reports = None
    if "baseline" in config.methods and len(config.methods) > 1:
        reports = harness.sweep_breaking_points(result)
    harness.emit_plot(result, out_dir / f"{prefix}.svg", reports)
    failures = result.failures()
    print(f"sweep complete: {len(result.records)} cells, {len(failures)} failed")
    for record in failures:
        print(f"  FAILED {record.method} level={record.level_index} trial={record.trial}: {record.error}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_verify_bound(args: argparse.Namespace) -> int:
    try:
        model = debias.TrainedModel.from_json(Path(args.model).read_text())
        data = LabeledDataset.load(args.data)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load inputs: {exc}") from exc
    if model.extractor.in_width != data.dim:
        raise UsageError(
            f"model expects {model.extractor.in_width} input features, dataset has {data.dim}"
        )
    report = harness.verify_bound(model, data, estimator=args.estimator, seed=_env_seed(0))
    print(f"I(Z;Y) estimate : {report.izy_hat:.4f} nats")
    print(f"I(Z;A) estimate : {report.iza_hat:.4f} nats")
    print(f"H(Y|A)          : {report.hya:.4f} nats")
    print(f"margin          : {report.margin_hat:.4f} nats")
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    if not report.reliable or not np.isfinite(report.margin_hat):
        print("estimator diverged; margin unreliable")
        return EXIT_BOUND_ALARM
    if report.margin_hat < -MARGIN_TOLERANCE:
        print(f"bound violation alarm: margin below -{MARGIN_TOLERANCE}")
        return EXIT_BOUND_ALARM
    return EXIT_OK


def _reports_from_pvalue_table(doc: dict) -> list[stats.BreakingPointReport]:
    grid = doc["grid"]
    return [
        stats.BreakingPointReport.from_p_values(method, grid, p_values)
        for method, p_values in sorted(doc["methods"].items())
    ]


def cmd_breaking_point(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.sweep).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read sweep file: {exc}") from exc
    result = None
    if "records" in doc:
        result = SweepResult.from_json(json.dumps(doc))
        try:
            reports = harness.sweep_breaking_points(result, baseline=args.baseline)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    elif "grid" in doc and "methods" in doc:
        # Stub form: per-method p-value rows over a shared grid.
        reports = _reports_from_pvalue_table(doc)
    else:
        raise UsageError("sweep file is neither a sweep result nor a p-value table")
    header = "level".rjust(10)
    print("p-value grid (alpha = 0.05):")
    levels = reports[0].grid if reports else []
    print(header + "".join(f"{level:>10g}" for level in levels))
    for report in reports:
        cells = "".join(f"{p:>10.3f}" for p in report.p_values)
        print(report.method.rjust(10) + cells)
    for report in reports:
        where = "none" if report.breaking_point is None else f"{report.breaking_point:g}"
        print(f"breaking point [{report.method}]: {where}")
    if args.out:
        payload = json.dumps([r.to_json_obj() for r in reports], sort_keys=True) + "\n"
        Path(args.out).write_text(payload)
    if args.svg:
        if result is None:
            raise UsageError("--svg needs a full sweep result, not a p-value table")
        harness.emit_plot(result, args.svg, reports)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    if args.corpus < 1:
        raise UsageError(f"--corpus must be >= 1, got {args.corpus}")
    seed = _env_seed(args.seed)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    if len(sizes) != 3:
        raise UsageError(f"--sizes needs three comma-separated integers, got {args.sizes!r}")
    rng = np.random.default_rng(seed)
    if args.degenerate_family:
        worst_izy = 0.0
        for _ in range(args.corpus):
            pz = rng.dirichlet(np.ones(sizes[0]))
            pa = rng.dirichlet(np.ones(sizes[2]))
            mapping = rng.integers(0, sizes[1], size=sizes[2])
            joint = exact_info.attribute_determined_joint(pz, pa, mapping, y_size=sizes[1])
            worst_izy = max(worst_izy, exact_info.mutual_information(joint, "z", "y"))
        print(f"degenerate family: {args.corpus} joints, max I(Z;Y) = {worst_izy:.3e} nats")
        ok = worst_izy <= 1e-9
    else:
        min_margin = np.inf
        min_strong = np.inf
        interaction_ok = True
        for _ in range(args.corpus):
            joint = exact_info.random_joint(sizes, concentration=1.0, seed=rng)
            min_margin = min(min_margin, exact_info.bound_margin(joint).margin)
            min_strong = min(min_strong, exact_info.strong_bound_margin(joint))
            interaction_ok = interaction_ok and exact_info.interaction_min_property(joint)
        print(f"corpus of {args.corpus} random joints over {sizes}:")
        print(f"  min bound margin        = {min_margin:.3e} nats")
        print(f"  min strong bound margin = {min_strong:.3e} nats")
        print(f"  interaction-minimum property: {'ok' if interaction_ok else 'VIOLATED'}")
        ok = min_margin >= -1e-9 and min_strong >= -1e-9 and interaction_ok
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else 1


def cmd_plot(args: argparse.Namespace) -> int:
    try:
        result = harness.load_result(args.sweep)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read sweep result: {exc}") from exc
    reports = None
    if args.breaking_points:
        docs = json.loads(Path(args.breaking_points).read_text())
        reports = [
            stats.BreakingPointReport.from_p_values(d["method"], d["grid"], d["p_values"], d.get("alpha", 0.05))
            for d in docs
        ]
    harness.emit_plot(result, args.out, reports)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbl",
        description="Bias-bound toolkit: generate bias-controlled data, train "
        "debiasing methods, audit the information bound, detect breaking points.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset container plus provenance sidecar")
    p.add_argument("--task", required=True, choices=["gaussian", "colorized", "tabular"])
    p.add_argument("--bias-value", type=float, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sweep", help="run a full sweep from a config file")
    p.add_argument("config")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-bound", help="estimate bound terms for a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", choices=list(harness.ESTIMATORS), default="knn")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("breaking-point", help="KS breaking points from a sweep result or p-value table")
    p.add_argument("--sweep", required=True)
    p.add_argument("--baseline", default="baseline")
    p.add_argument("--out", default=None)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_breaking_point)

    p = sub.add_parser("oracle", help="exact property corpus over random joints")
    p.add_argument("--corpus", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="4,4,4")
    p.add_argument(
        "--degenerate-family",
        action="store_true",
        help="check I(Z;Y)=0 on joints where the attribute determines the target and Z is independent of A",
    )
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot", help="render a sweep result to SVG")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--breaking-points", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
