"""Sample-based mutual-information estimators.

Four estimators with increasing machinery:

* `plugin_mi`   -- discrete/discrete, empirical counts fed to the exact oracle
* `binned_mi`   -- low-dimensional continuous features, equal-width bins
* `knn_mi`      -- k-nearest-neighbour differential entropies,
                   I(Z;A) = H(Z) - sum_a p(a) H(Z|A=a)
* `neural_dv_mi`-- a trained statistics network evaluating the
                   Donsker-Varadhan lower bound on held-out pairs

Reported values are clamped at zero (true mutual information is nonnegative);
the raw value is kept in the diagnostics when clamping fires. Estimates are
invariant to the order of input rows: stochastic estimators canonicalise row
order before any seeded randomness is drawn.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln, logsumexp

from . import exact_info, tinynet
from .tinynet import TrainingDiverged

__all__ = [
    "EstimationError",
    "TrainingDiverged",
    "MIEstimate",
    "SamplePairs",
    "DVConfig",
    "DVCritic",
    "plugin_mi",
    "binned_mi",
    "knn_mi",
    "neural_dv_mi",
]

LOW_SAMPLE_THRESHOLD = 50


class EstimationError(ValueError):
    """Inputs violate an estimator's preconditions."""


@dataclass(frozen=True)
class MIEstimate:
    """A point mutual-information estimate in nats, with provenance."""

    value: float
    estimator: str
    n_samples: int
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise EstimationError(f"estimates need n >= 2 samples, got {self.n_samples}")
        if not np.isfinite(self.value):
            raise EstimationError(f"estimate must be finite, got {self.value}")

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "estimator": self.estimator,
            "value_nats": self.value,
            "n": self.n_samples,
            "diagnostics": self.diagnostics,
        }


def _clamped(raw: float, diagnostics: dict[str, Any]) -> float:
    if raw < 0.0:
        diagnostics["clamped_nonnegative"] = True
        diagnostics["raw_value"] = float(raw)
        return 0.0
    return float(raw)


@dataclass(frozen=True)
class SamplePairs:
    """Continuous feature samples paired with discrete labels."""

    continuous: np.ndarray
    discrete: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.continuous, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise EstimationError(f"continuous samples must be (n, d), got shape {x.shape}")
        labels = np.asarray(self.discrete)
        if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
            raise EstimationError(
                f"label vector of length {labels.shape} does not match {x.shape[0]} feature rows"
            )
        if not np.all(np.isfinite(x)):
            raise EstimationError("continuous samples must be finite")
        object.__setattr__(self, "continuous", x)
        object.__setattr__(self, "discrete", np.asarray(labels, dtype=int))

    @property
    def n(self) -> int:
        return self.continuous.shape[0]

    @property
    def dim(self) -> int:
        return self.continuous.shape[1]


def plugin_mi(x_labels: np.ndarray, y_labels: np.ndarray) -> MIEstimate:
    """Plug-in estimate between two discrete label vectors."""
    x = np.asarray(x_labels).ravel()
    y = np.asarray(y_labels).ravel()
    if x.shape != y.shape:
        raise EstimationError(f"label vectors have unequal lengths {x.size} and {y.size}")
    n = x.size
    if n < 2:
        raise EstimationError(f"plug-in estimate needs n >= 2, got {n}")
    ux, ix = np.unique(x, return_inverse=True)
    uy, iy = np.unique(y, return_inverse=True)
    counts = np.zeros((ux.size, uy.size))
    np.add.at(counts, (ix, iy), 1.0)
    pmf = exact_info.JointPMF((counts / n)[:, :, None])
    value = exact_info.mutual_information(pmf, 0, 1)
    diagnostics: dict[str, Any] = {"support_x": int(ux.size), "support_y": int(uy.size)}
    return MIEstimate(_clamped(value, diagnostics), "plugin", n, diagnostics)


def binned_mi(pairs: SamplePairs, bins_per_dim: int = 8) -> MIEstimate:
    """Equal-width binning of each feature dimension, then plug-in MI with the labels.

    A cheap cross-check for the neural estimator; refuses more than 4 feature
    dimensions, where the empty-bin blow-up makes the estimate meaningless.
    """
    if bins_per_dim < 2:
        raise EstimationError(f"bins_per_dim must be >= 2, got {bins_per_dim}")
    if pairs.dim > 4:
        raise EstimationError(f"binned estimator supports at most 4 dimensions, got {pairs.dim}")
    x = pairs.continuous
    ids = np.zeros(pairs.n, dtype=np.int64)
    for col in range(pairs.dim):
        lo, hi = float(x[:, col].min()), float(x[:, col].max())
        if hi > lo:
            dim_ids = np.clip(((x[:, col] - lo) / (hi - lo) * bins_per_dim).astype(np.int64), 0, bins_per_dim - 1)
        else:
            dim_ids = np.zeros(pairs.n, dtype=np.int64)  # constant column: one bin
        ids = ids * bins_per_dim + dim_ids
    est = plugin_mi(ids, pairs.discrete)
    diagnostics: dict[str, Any] = {
        "bins_per_dim": int(bins_per_dim),
        "occupied_bins": est.diagnostics["support_x"],
    }
    if pairs.n < LOW_SAMPLE_THRESHOLD:
        diagnostics["low_sample"] = True
    return MIEstimate(est.value, "binned", pairs.n, diagnostics)


def _occurrence_ranks(keys: np.ndarray) -> np.ndarray:
    """Rank of each row within its group of identical rows (canonical order)."""
    order = np.lexsort(keys.T[::-1])
    ranks = np.zeros(keys.shape[0], dtype=np.int64)
    run = 0
    for pos in range(1, order.size):
        run = run + 1 if np.array_equal(keys[order[pos]], keys[order[pos - 1]]) else 0
        ranks[order[pos]] = run
    return ranks


def _tie_break_jitter(x: np.ndarray, labels: np.ndarray, magnitude: float = 1e-10) -> np.ndarray:
    """Deterministic, order-independent jitter keyed on (value, label, duplicate rank).

    Exact duplicates make k-NN distances zero; keying the jitter on the row
    content rather than the row index keeps the estimator invariant to input
    permutations.
    """
    keys = np.column_stack([x, labels.astype(float)])
    ranks = _occurrence_ranks(keys)
    out = x.copy()
    for i in range(x.shape[0]):
        digest = hashlib.blake2b(
            keys[i].tobytes() + int(ranks[i]).to_bytes(8, "little"), digest_size=8
        ).digest()
        gen = np.random.Generator(np.random.Philox(int.from_bytes(digest, "little")))
        out[i] += gen.uniform(-magnitude, magnitude, size=x.shape[1])
    return out


def _kl_entropy(x: np.ndarray, k: int) -> float:
    """Kozachenko-Leonenko differential entropy with Euclidean k-th neighbour distances."""
    n, d = x.shape
    dist, _ = cKDTree(x).query(x, k=k + 1, workers=1)
    radii = np.maximum(dist[:, k], 1e-300)
    log_ball = (d / 2.0) * np.log(np.pi) - gammaln(d / 2.0 + 1.0)
    return float(digamma(n) - digamma(k) + log_ball + d * np.mean(np.log(radii)))


def knn_mi(pairs: SamplePairs, k: int = 5) -> MIEstimate:
    """Nearest-neighbour estimate of I(Z; label) via differential entropies.

    I = H(Z) - sum_a p(a) H(Z | A=a), each entropy from the k-NN estimator.
    Deterministic given its inputs.
    """
    if k < 1:
        raise EstimationError(f"k must be >= 1, got {k}")
    labels = pairs.discrete
    classes, counts = np.unique(labels, return_counts=True)
    for cls, cnt in zip(classes, counts):
        if cnt <= k:
            raise EstimationError(f"label class {cls} has {cnt} samples; k-NN needs more than k={k}")
    diagnostics: dict[str, Any] = {"k": int(k), "classes": int(classes.size)}
    if classes.size == 1:
        return MIEstimate(0.0, "knn", pairs.n, diagnostics)
    x = _tie_break_jitter(pairs.continuous, labels)
    h_all = _kl_entropy(x, k)
    h_cond = 0.0
    for cls, cnt in zip(classes, counts):
        h_cond += (cnt / pairs.n) * _kl_entropy(x[labels == cls], k)
    diagnostics["h_marginal"] = h_all
    diagnostics["h_conditional"] = h_cond
    return MIEstimate(_clamped(h_all - h_cond, diagnostics), "knn", pairs.n, diagnostics)


@dataclass(frozen=True)
class DVConfig:
    """Training settings for the Donsker-Varadhan statistics network.

    Defaults are tuned so the estimator lands within 15% of the closed form
    on 1-d jointly Gaussian benchmarks at n = 20,000: two tanh layers of 64,
    Adam at 1e-3, batches of 256 (larger than classifier batches, which keeps
    the bound's gradient bias small), 3,000 iterations, and an exponential
    moving average with rate 0.99 correcting the log-partition gradient.
    """

    hidden_width: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 256
    iterations: int = 3000
    ema_rate: float = 0.99
    holdout_fraction: float = 0.2
    eval_permutations: int = 8
    output_clip: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_width < 1 or self.batch_size < 2 or self.iterations < 1:
            raise EstimationError("hidden_width, batch_size and iterations must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise EstimationError(f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")
        if not 0.0 <= self.ema_rate < 1.0:
            raise EstimationError(f"ema_rate must be in [0, 1), got {self.ema_rate}")


class DVCritic:
    """Statistics network plus optimizer state for the Donsker-Varadhan bound.

    Single-owner mutable state: one instance per training loop. The marginal
    side of each batch is formed by shuffling the code rows within the batch.
    """

    def __init__(self, x_dim: int, code_dim: int, config: DVConfig, rng: np.random.Generator):
        self.config = config
        self.params = tinynet.init_network(
            [x_dim + code_dim, config.hidden_width, config.hidden_width, 1],
            ["tanh", "tanh", "linear"],
            rng,
        )
        self.opt_config = tinynet.TrainConfig(learning_rate=config.learning_rate, batch_size=config.batch_size)
        self.state = tinynet.init_adam(self.params)
        self.rng = rng
        self.steps = 0
        self.ema_denominator: float | None = None

    def statistics(self, x: np.ndarray, code: np.ndarray) -> np.ndarray:
        acts = tinynet.forward(self.params, np.hstack([x, code]))
        return np.clip(acts.logits[:, 0], -self.config.output_clip, self.config.output_clip)

    def train_step(self, x: np.ndarray, code: np.ndarray) -> float:
        """One ascent step on the bound; returns the in-batch bound value."""
        b = x.shape[0]
        perm = self.rng.permutation(b)
        stacked = np.hstack([np.vstack([x, x]), np.vstack([code, code[perm]])])
        acts = tinynet.forward(self.params, stacked)
        t_raw = acts.logits[:, 0]
        clip = self.config.output_clip
        t_all = np.clip(t_raw, -clip, clip)
        t_joint, t_marg = t_all[:b], t_all[b:]
        denominator = float(np.mean(np.exp(t_marg)))
        if self.ema_denominator is None:
            self.ema_denominator = denominator
        else:
            r = self.config.ema_rate
            self.ema_denominator = r * self.ema_denominator + (1.0 - r) * denominator
        value = float(np.mean(t_joint) - np.log(denominator))
        if not np.isfinite(value) or not np.isfinite(self.ema_denominator):
            raise TrainingDiverged("statistics network diverged", self.steps)
        dout = np.empty((2 * b, 1))
        dout[:b, 0] = -1.0 / b
        dout[b:, 0] = np.exp(t_marg) / (b * self.ema_denominator)
        dout[np.abs(t_raw) >= clip, 0] = 0.0
        grads, _ = tinynet.backprop(self.params, acts, dout)
        self.steps += 1
        tinynet.adam_step(self.params, grads, self.state, self.opt_config, self.steps)
        return value

    def bound_value(self, x: np.ndarray, code: np.ndarray, permutations: list[np.ndarray]) -> float:
        """Bound evaluated with the current network; marginal pairs pooled over permutations."""
        t_joint = self.statistics(x, code)
        t_marg = np.concatenate([self.statistics(x, code[p]) for p in permutations])
        return float(np.mean(t_joint) - (logsumexp(t_marg) - np.log(t_marg.size)))

    def input_gradient(self, x: np.ndarray, code: np.ndarray) -> np.ndarray:
        """Gradient of the in-batch bound value with respect to the feature rows."""
        b = x.shape[0]
        perm = self.rng.permutation(b)
        stacked = np.hstack([np.vstack([x, x]), np.vstack([code, code[perm]])])
        acts = tinynet.forward(self.params, stacked)
        t_raw = acts.logits[:, 0]
        clip = self.config.output_clip
        t_marg = np.clip(t_raw[b:], -clip, clip)
        weights = np.exp(t_marg - logsumexp(t_marg))
        dout = np.empty((2 * b, 1))
        dout[:b, 0] = 1.0 / b
        dout[b:, 0] = -weights
        dout[np.abs(t_raw) >= clip, 0] = 0.0
        _, dinput = tinynet.backprop(self.params, acts, dout)
        return dinput[:b, : x.shape[1]] + dinput[b:, : x.shape[1]]


def _encode_pair_columns(y: np.ndarray) -> np.ndarray:
    """Second-variable encoding: small integer alphabets one-hot, reals as columns."""
    y = np.asarray(y)
    if np.issubdtype(y.dtype, np.integer) or np.issubdtype(y.dtype, np.bool_):
        values, inverse = np.unique(y.ravel(), return_inverse=True)
        onehot = np.zeros((y.shape[0], values.size))
        onehot[np.arange(y.shape[0]), inverse] = 1.0
        return onehot
    out = np.asarray(y, dtype=float)
    return out[:, None] if out.ndim == 1 else out


def _standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    return (x - mean) / std


def neural_dv_mi(x: np.ndarray, y: np.ndarray, config: DVConfig | None = None) -> MIEstimate:
    """Donsker-Varadhan neural estimate of I(X;Y) from paired samples.

    `y` may be an integer label vector (one-hot encoded) or a real vector or
    matrix (used directly), so the same estimator covers feature/label pairs
    and fully continuous benchmarks. The reported value is the bound evaluated
    on a 20% held-out split, which avoids the training-set optimism of the
    bound itself. Row order is canonicalised before any randomness is drawn.
    """
    config = config or DVConfig()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    code = _encode_pair_columns(y)
    if x.shape[0] != code.shape[0]:
        raise EstimationError(f"sample counts differ: {x.shape[0]} vs {code.shape[0]}")
    n = x.shape[0]
    if n < 64:
        raise EstimationError(f"neural estimator needs n >= 64, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(code))):
        raise EstimationError("samples must be finite")

    combined = np.hstack([x, code])
    canonical = np.lexsort(combined.T[::-1])
    x = _standardize(x[canonical])
    code = _standardize(code[canonical])

    streams = np.random.SeedSequence(config.seed).spawn(4)
    rng_split, rng_net, rng_batch, rng_eval = (np.random.default_rng(s) for s in streams)

    order = rng_split.permutation(n)
    n_eval = max(int(round(n * config.holdout_fraction)), 2)
    eval_idx, train_idx = order[:n_eval], order[n_eval:]
    x_train, c_train = x[train_idx], code[train_idx]
    x_eval, c_eval = x[eval_idx], code[eval_idx]

    critic = DVCritic(x.shape[1], code.shape[1], config, rng_net)
    batch = min(config.batch_size, x_train.shape[0])
    last_value = 0.0
    for _ in range(config.iterations):
        idx = rng_batch.integers(0, x_train.shape[0], size=batch)
        last_value = critic.train_step(x_train[idx], c_train[idx])

    perms = [rng_eval.permutation(n_eval) for _ in range(config.eval_permutations)]
    raw = critic.bound_value(x_eval, c_eval, perms)
    diagnostics: dict[str, Any] = {
        "iterations": config.iterations,
        "final_train_bound": last_value,
        "n_train": int(x_train.shape[0]),
        "n_eval": int(n_eval),
    }
    return MIEstimate(_clamped(raw, diagnostics), "neural_dv", n, diagnostics)
