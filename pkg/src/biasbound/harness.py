"""Sweep orchestration: train across a bias grid, audit the bound, emit reports.

A sweep is a complete (method x bias level x trial) grid. Every cell derives
its own seed from the base seed by hashing its coordinates, so cells are
independent of execution order and the whole sweep is reproducible down to
the output bytes. Failed cells (diverged training, estimator errors) are
recorded, never fatal.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import datagen, debias, mi_estim, stats
from .datagen import BiasSpec, LabeledDataset
from .debias import DebiasConfig, TrainedModel
from .mi_estim import DVConfig, MIEstimate, SamplePairs
from .tinynet import TrainConfig, TrainingDiverged

__all__ = [
    "SweepConfig",
    "TrialRecord",
    "SweepResult",
    "BoundReport",
    "run_sweep",
    "verify_bound",
    "sweep_breaking_points",
    "emit_report",
    "emit_plot",
    "load_result",
]

TASKS = ("gaussian", "colorized_digits", "tabular_mix")
ESTIMATORS = ("binned", "knn", "neural_dv")

CSV_HEADER = "method,bias_kind,bias_value,hya_nats,trial,acc_unbiased,acc_conflicting,iza_nats,izy_nats"

# Tolerance on estimated bound margins: the inequality binds true mutual
# information; estimates get this much slack before a margin counts as a
# violation worth alarming on.
MARGIN_TOLERANCE = 0.05


@dataclass(frozen=True)
class SweepConfig:
    """Full description of a sweep; a value object safe to ship to workers."""

    task: str = "gaussian"
    grid: tuple[BiasSpec, ...] = ()
    methods: tuple[str, ...] = ("baseline",)
    trials: int = 2
    base_seed: int = 0
    estimator: str = "knn"
    eval_per_cell: int = 250
    n_train: int = 2000
    epochs: int = 12
    learning_rate: float = 1e-3
    batch_size: int = 32
    hidden_width: int = 16
    feature_dim: int = 8
    knn_k: int = 5
    bins_per_dim: int = 8
    dv_iterations: int = 500
    lambdas: tuple[tuple[str, float], ...] = ()
    workers: int = 1

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.trials < 2:
            raise ValueError(f"need at least 2 trials for the KS protocol, got {self.trials}")
        if not self.grid:
            raise ValueError("bias grid must be non-empty")
        kinds = {spec.kind for spec in self.grid}
        if len(kinds) != 1:
            raise ValueError(f"grid mixes bias kinds {sorted(kinds)}")
        for method in self.methods:
            if method not in debias.METHODS:
                raise ValueError(f"unknown method {method!r}")
        ordered = tuple(sorted(self.grid, key=lambda s: s.sort_key()))
        object.__setattr__(self, "grid", ordered)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "lambdas", tuple(self.lambdas))

    def lam_for(self, method: str) -> float | None:
        for name, value in self.lambdas:
            if name == method:
                return value
        return None

    def to_json_obj(self) -> dict[str, Any]:
        doc = {
            "task": self.task,
            "grid": [{"kind": s.kind, "value": s.value} for s in self.grid],
            "methods": list(self.methods),
            "trials": self.trials,
            "base_seed": self.base_seed,
            "estimator": self.estimator,
            "eval_per_cell": self.eval_per_cell,
            "n_train": self.n_train,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "hidden_width": self.hidden_width,
            "feature_dim": self.feature_dim,
            "knn_k": self.knn_k,
            "bins_per_dim": self.bins_per_dim,
            "dv_iterations": self.dv_iterations,
            "lambdas": [[name, value] for name, value in self.lambdas],
        }
        return doc

    @classmethod
    def from_json_obj(cls, doc: dict[str, Any]) -> "SweepConfig":
        return cls(
            task=doc["task"],
            grid=tuple(BiasSpec(g["kind"], g["value"]) for g in doc["grid"]),
            methods=tuple(doc["methods"]),
            trials=int(doc["trials"]),
            base_seed=int(doc["base_seed"]),
            estimator=doc["estimator"],
            eval_per_cell=int(doc["eval_per_cell"]),
            n_train=int(doc["n_train"]),
            epochs=int(doc["epochs"]),
            learning_rate=float(doc["learning_rate"]),
            batch_size=int(doc["batch_size"]),
            hidden_width=int(doc["hidden_width"]),
            feature_dim=int(doc["feature_dim"]),
            knn_k=int(doc["knn_k"]),
            bins_per_dim=int(doc["bins_per_dim"]),
            dv_iterations=int(doc["dv_iterations"]),
            lambdas=tuple((name, float(value)) for name, value in doc.get("lambdas", [])),
        )


@dataclass(frozen=True)
class TrialRecord:
    method: str
    level_index: int
    bias_kind: str
    bias_value: float
    trial: int
    hya: float | None = None
    acc_unbiased: float | None = None
    acc_conflicting: float | None = None
    iza: float | None = None
    izy: float | None = None
    failed: bool = False
    error: str = ""

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "level_index": self.level_index,
            "bias_kind": self.bias_kind,
            "bias_value": self.bias_value,
            "trial": self.trial,
            "hya": self.hya,
            "acc_unbiased": self.acc_unbiased,
            "acc_conflicting": self.acc_conflicting,
            "iza": self.iza,
            "izy": self.izy,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_json_obj(cls, doc: dict[str, Any]) -> "TrialRecord":
        return cls(**doc)


@dataclass(frozen=True)
class SweepResult:
    config: SweepConfig
    records: tuple[TrialRecord, ...]

    def cell(self, method: str, level_index: int) -> list[TrialRecord]:
        return [
            r
            for r in self.records
            if r.method == method and r.level_index == level_index and not r.failed
        ]

    def failures(self) -> list[TrialRecord]:
        return [r for r in self.records if r.failed]

    def accuracies(self, method: str, level_index: int) -> np.ndarray:
        return np.array([r.acc_unbiased for r in self.cell(method, level_index)], dtype=float)

    def aggregate(self) -> dict[tuple[str, int], dict[str, float]]:
        """Per-cell mean and standard deviation of the recorded quantities."""
        out: dict[tuple[str, int], dict[str, float]] = {}
        for method in self.config.methods:
            for level in range(len(self.config.grid)):
                rows = self.cell(method, level)
                if not rows:
                    continue
                acc = np.array([r.acc_unbiased for r in rows], dtype=float)
                conf = np.array([r.acc_conflicting for r in rows], dtype=float)
                out[(method, level)] = {
                    "mean_acc_unbiased": float(acc.mean()),
                    "std_acc_unbiased": float(acc.std(ddof=0)),
                    "mean_acc_conflicting": float(conf.mean()),
                    "std_acc_conflicting": float(conf.std(ddof=0)),
                    "mean_iza": float(np.mean([r.iza for r in rows])),
                    "mean_izy": float(np.mean([r.izy for r in rows])),
                    "mean_hya": float(np.mean([r.hya for r in rows])),
                }
        return out

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_json_obj(),
            "records": [r.to_json_obj() for r in self.records],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        doc = json.loads(text)
        return cls(
            config=SweepConfig.from_json_obj(doc["config"]),
            records=tuple(TrialRecord.from_json_obj(r) for r in doc["records"]),
        )


def load_result(path: str | Path) -> SweepResult:
    return SweepResult.from_json(Path(path).read_text())


def _cell_seed(base_seed: int, method: str, level_index: int, trial: int) -> int:
    key = f"{method}|{level_index}|{trial}".encode()
    digest = hashlib.sha256(key).digest()
    return (int(base_seed) ^ int.from_bytes(digest[:8], "little")) % (2**63)


def _estimate_mi(config: SweepConfig, features: np.ndarray, labels: np.ndarray, seed: int) -> MIEstimate:
    if config.estimator == "knn":
        return mi_estim.knn_mi(SamplePairs(features, labels), k=config.knn_k)
    if config.estimator == "binned":
        return mi_estim.binned_mi(SamplePairs(features, labels), bins_per_dim=config.bins_per_dim)
    return mi_estim.neural_dv_mi(
        features, labels.astype(int), DVConfig(iterations=config.dv_iterations, seed=seed)
    )


def _make_train_data(config: SweepConfig, spec: BiasSpec, seed: int) -> LabeledDataset:
    if config.task == "gaussian":
        return datagen.gen_gaussian_biased(config.n_train, spec.value, seed=seed)
    if config.task == "colorized_digits":
        images, labels = datagen.synth_digit_images(config.n_train, seed=seed)
        return datagen.colorize(images, labels, spec.value, split="train", seed=seed + 1)
    pool_n = 2 * config.n_train
    biased, conflicting = datagen.make_tabular_pools(pool_n, seed=seed)
    return datagen.mix_bias(biased, conflicting, spec.value, config.n_train, seed=seed + 1)


def _make_eval_data(config: SweepConfig, spec: BiasSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    per_cell = config.eval_per_cell
    if config.task == "gaussian":
        pool = datagen.gen_gaussian_biased(8 * per_cell, 0.5, seed=seed)
        return datagen.split_eval(pool, per_cell, seed=seed + 1)
    if config.task == "colorized_digits":
        # 100 (digit, color) cells; the pool needs headroom over per_cell * 100.
        images, labels = datagen.synth_digit_images(200 * per_cell, seed=seed)
        pool = datagen.colorize(images, labels, spec.value, split="test", seed=seed + 1)
        return datagen.split_eval(pool, per_cell, seed=seed + 2)
    pool_n = 8 * per_cell
    biased, conflicting = datagen.make_tabular_pools(pool_n, seed=seed)
    pool = datagen.mix_bias(biased, conflicting, 0.5, pool_n, seed=seed + 1)
    return datagen.split_eval(pool, per_cell, seed=seed + 2)


def _run_cell(args: tuple[SweepConfig, str, int, int]) -> TrialRecord:
    config, method, level_index, trial = args
    spec = config.grid[level_index]
    seed = _cell_seed(config.base_seed, method, level_index, trial)
    seeds = np.random.SeedSequence(seed).generate_state(4, dtype=np.uint64)
    data_seed, eval_seed, train_seed, est_seed = (int(s % (2**31)) for s in seeds)
    try:
        train_data = _make_train_data(config, spec, data_seed)
        unbiased, conflicting = _make_eval_data(config, spec, eval_seed)
        model = debias.train(
            method,
            train_data,
            DebiasConfig(
                base=TrainConfig(
                    learning_rate=config.learning_rate,
                    batch_size=config.batch_size,
                    epochs=config.epochs,
                    seed=train_seed,
                ),
                lam=config.lam_for(method),
                hidden_width=config.hidden_width,
                feature_dim=config.feature_dim,
            ),
        )
        features = debias.extract_features(model, train_data)
        iza = _estimate_mi(config, features, train_data.attributes, est_seed)
        izy = _estimate_mi(config, features, train_data.targets, est_seed + 1)
        return TrialRecord(
            method=method,
            level_index=level_index,
            bias_kind=spec.kind,
            bias_value=spec.value,
            trial=trial,
            hya=datagen.empirical_hya(train_data.targets, train_data.attributes),
            acc_unbiased=debias.evaluate_accuracy(model, unbiased),
            acc_conflicting=debias.evaluate_accuracy(model, conflicting),
            iza=iza.value,
            izy=izy.value,
        )
    except (TrainingDiverged, mi_estim.EstimationError, ValueError) as exc:
        return TrialRecord(
            method=method,
            level_index=level_index,
            bias_kind=spec.kind,
            bias_value=spec.value,
            trial=trial,
            failed=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_sweep(config: SweepConfig) -> SweepResult:
    """Run the full grid; deterministic and independent of worker count."""
    cells = [
        (config, method, level, trial)
        for method in config.methods
        for level in range(len(config.grid))
        for trial in range(config.trials)
    ]
    workers = config.workers
    if workers <= 1:
        records = [_run_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell, cells, chunksize=1))
    return SweepResult(config=config, records=tuple(records))


@dataclass(frozen=True)
class BoundReport:
    """Estimated bound terms for one trained model on one dataset."""

    izy_hat: float
    iza_hat: float
    hya: float
    margin_hat: float
    estimator: str
    reliable: bool = True
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "izy_hat": self.izy_hat,
            "iza_hat": self.iza_hat,
            "hya": self.hya,
            "margin_hat": self.margin_hat,
            "estimator": self.estimator,
            "reliable": self.reliable,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True)


def verify_bound(
    model: TrainedModel,
    data: LabeledDataset,
    estimator: str = "knn",
    seed: int = 0,
    knn_k: int = 5,
    bins_per_dim: int = 8,
    dv_iterations: int = 2000,
) -> BoundReport:
    """Estimate I(Z;A), I(Z;Y) and H(Y|A) on `data` and report the margin.

    Margins are reported even when negative; estimator noise is a result, not
    something to hide. A diverged estimator yields an unreliable report.
    """
    features = debias.extract_features(model, data)
    hya = datagen.empirical_hya(data.targets, data.attributes)
    probe = replace(
        SweepConfig(grid=(BiasSpec("agreement_prob", 0.5),), estimator=estimator),
        knn_k=knn_k,
        bins_per_dim=bins_per_dim,
        dv_iterations=dv_iterations,
    )
    try:
        iza = _estimate_mi(probe, features, data.attributes, seed)
        izy = _estimate_mi(probe, features, data.targets, seed + 1)
    except TrainingDiverged as exc:
        return BoundReport(
            izy_hat=float("nan"),
            iza_hat=float("nan"),
            hya=hya,
            margin_hat=float("nan"),
            estimator=estimator,
            reliable=False,
            diagnostics={"error": str(exc), "iteration": exc.iteration},
        )
    return BoundReport(
        izy_hat=izy.value,
        iza_hat=iza.value,
        hya=hya,
        margin_hat=iza.value + hya - izy.value,
        estimator=estimator,
        diagnostics={"iza": iza.diagnostics, "izy": izy.diagnostics},
    )


def sweep_breaking_points(
    result: SweepResult, baseline: str = "baseline", alpha: float = stats.ALPHA_DEFAULT
) -> list[stats.BreakingPointReport]:
    """KS-test every method against the baseline at every level, then locate breaks."""
    if baseline not in result.config.methods:
        raise ValueError(f"baseline method {baseline!r} not present in the sweep")
    levels = [spec.value for spec in result.config.grid]
    reports = []
    for method in result.config.methods:
        if method == baseline:
            continue
        p_values, d_values = [], []
        for level in range(len(levels)):
            m_vals = result.accuracies(method, level)
            b_vals = result.accuracies(baseline, level)
            if b_vals.size < 2:
                raise ValueError(f"baseline has no usable trials at level index {level}")
            if m_vals.size < 2:
                raise ValueError(f"method {method} has no usable trials at level index {level}")
            d, p = stats.ks_one_sided(m_vals, b_vals)
            p_values.append(p)
            d_values.append(d)
        reports.append(
            stats.BreakingPointReport(
                method=method,
                grid=np.asarray(levels),
                p_values=np.asarray(p_values),
                breaking_point=stats.detect_breaking_point(levels, p_values, alpha),
                alpha=alpha,
                statistics=np.asarray(d_values),
            )
        )
    return reports


def _csv_field(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def emit_report(result: SweepResult, format: str, path: str | Path) -> None:
    """Write the sweep as CSV (fixed schema) or JSON (lossless round-trip)."""
    path = Path(path)
    if format == "json":
        path.write_text(result.to_json())
        return
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    lines = [CSV_HEADER]
    for r in result.records:
        lines.append(
            ",".join(
                [
                    r.method,
                    r.bias_kind,
                    repr(float(r.bias_value)),
                    _csv_field(r.hya),
                    str(r.trial),
                    _csv_field(r.acc_unbiased),
                    _csv_field(r.acc_conflicting),
                    _csv_field(r.iza),
                    _csv_field(r.izy),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


_SVG_COLORS = (
    "#1f6fb4",
    "#d1462f",
    "#3e8e41",
    "#8e44ad",
    "#c7811c",
    "#16a2a2",
    "#b43a77",
    "#5d6d7e",
)

_PLOT_W, _PLOT_H = 640.0, 420.0
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 62.0, 160.0, 18.0, 48.0


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def emit_plot(
    result: SweepResult,
    path: str | Path,
    reports: list[stats.BreakingPointReport] | None = None,
) -> None:
    """Self-contained SVG: one mean line per method, +/-1 std bands, breaking-point markers.

    The output is byte-deterministic for identical inputs.
    """
    grid_values = [spec.value for spec in result.config.grid]
    agg = result.aggregate()
    x_lo, x_hi = min(grid_values), max(grid_values)
    span = x_hi - x_lo

    def sx(v: float) -> float:
        if span == 0.0:
            return _MARGIN_L + (_PLOT_W - _MARGIN_L - _MARGIN_R) / 2.0
        return _MARGIN_L + (v - x_lo) / span * (_PLOT_W - _MARGIN_L - _MARGIN_R)

    def sy(acc: float) -> float:
        return _PLOT_H - _MARGIN_B - acc * (_PLOT_H - _MARGIN_T - _MARGIN_B)

    parts: list[str] = []
    parts.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_fmt(_PLOT_W)}" height="{_fmt(_PLOT_H)}" '
        f'viewBox="0 0 {_fmt(_PLOT_W)} {_fmt(_PLOT_H)}">'
    )
    parts.append(f"<!-- config {json.dumps(result.config.to_json_obj(), sort_keys=True)} -->")
    parts.append(f'<rect width="{_fmt(_PLOT_W)}" height="{_fmt(_PLOT_H)}" fill="#ffffff"/>')
    axis_y = _PLOT_H - _MARGIN_B
    parts.append(
        f'<line x1="{_fmt(_MARGIN_L)}" y1="{_fmt(axis_y)}" x2="{_fmt(_PLOT_W - _MARGIN_R)}" '
        f'y2="{_fmt(axis_y)}" stroke="#222222" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{_fmt(_MARGIN_L)}" y1="{_fmt(_MARGIN_T)}" x2="{_fmt(_MARGIN_L)}" '
        f'y2="{_fmt(axis_y)}" stroke="#222222" stroke-width="1"/>'
    )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(tick)
        parts.append(
            f'<line x1="{_fmt(_MARGIN_L - 4)}" y1="{_fmt(y)}" x2="{_fmt(_MARGIN_L)}" '
            f'y2="{_fmt(y)}" stroke="#222222" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(_MARGIN_L - 8)}" y="{_fmt(y + 4)}" font-size="11" '
            f'text-anchor="end" fill="#222222">{tick:g}</text>'
        )
    for v in grid_values:
        x = sx(v)
        parts.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(axis_y)}" x2="{_fmt(x)}" '
            f'y2="{_fmt(axis_y + 4)}" stroke="#222222" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(axis_y + 18)}" font-size="11" '
            f'text-anchor="middle" fill="#222222">{v:g}</text>'
        )
    kind = result.config.grid[0].kind
    parts.append(
        f'<text x="{_fmt((_MARGIN_L + _PLOT_W - _MARGIN_R) / 2)}" y="{_fmt(_PLOT_H - 10)}" '
        f'font-size="12" text-anchor="middle" fill="#222222">{kind}</text>'
    )
    parts.append(
        f'<text x="14" y="{_fmt((_MARGIN_T + axis_y) / 2)}" font-size="12" text-anchor="middle" '
        f'fill="#222222" transform="rotate(-90 14 {_fmt((_MARGIN_T + axis_y) / 2)})">'
        "accuracy (unbiased split)</text>"
    )

    for mi, method in enumerate(result.config.methods):
        color = _SVG_COLORS[mi % len(_SVG_COLORS)]
        points = []
        for level, v in enumerate(grid_values):
            cell = agg.get((method, level))
            if cell is not None:
                points.append((v, cell["mean_acc_unbiased"], cell["std_acc_unbiased"]))
        if not points:
            continue
        if len(points) > 1:
            upper = [(sx(v), sy(min(m + s, 1.0))) for v, m, s in points]
            lower = [(sx(v), sy(max(m - s, 0.0))) for v, m, s in reversed(points)]
            band = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in upper + lower)
            parts.append(f'<polygon class="band" points="{band}" fill="{color}" opacity="0.15"/>')
        line = " ".join(f"{_fmt(sx(v))},{_fmt(sy(m))}" for v, m, _ in points)
        parts.append(
            f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for v, m, _ in points:
            parts.append(
                f'<circle cx="{_fmt(sx(v))}" cy="{_fmt(sy(m))}" r="2.5" fill="{color}"/>'
            )
        ly = _MARGIN_T + 16 + 16 * mi
        lx = _PLOT_W - _MARGIN_R + 12
        parts.append(
            f'<line x1="{_fmt(lx)}" y1="{_fmt(ly - 4)}" x2="{_fmt(lx + 18)}" y2="{_fmt(ly - 4)}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_fmt(lx + 24)}" y="{_fmt(ly)}" font-size="12" fill="#222222">{method}</text>'
        )

    if reports:
        by_method = {r.method: r for r in reports}
        for mi, method in enumerate(result.config.methods):
            report = by_method.get(method)
            if report is None or report.breaking_point is None:
                continue
            color = _SVG_COLORS[mi % len(_SVG_COLORS)]
            x = sx(report.breaking_point)
            parts.append(
                f'<path class="breaking-point" d="M {_fmt(x - 5)} {_fmt(axis_y + 14)} '
                f'L {_fmt(x + 5)} {_fmt(axis_y + 14)} L {_fmt(x)} {_fmt(axis_y + 4)} Z" '
                f'fill="{color}"/>'
            )

    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def default_workers() -> int:
    env = os.environ.get("BBL_THREADS")
    if env:
        return max(int(env), 1)
    return 1
