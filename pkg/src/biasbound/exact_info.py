"""Exact information quantities on small finite joint distributions.

Everything here operates on a dense joint probability mass function over the
triple (z, y, a), so entropies and mutual informations come out in closed
form. These exact values are the ground truth against which the sample-based
estimators in `mi_estim` are checked, and the oracle for the feature-target
information bound

    0 <= I(Z;Y) <= I(Z;A) + H(Y|A)

and its strengthened form I(Z;Y) + H(Y|Z,A) <= I(Z;A) + H(Y|A).

All values are in nats. The conventions 0*ln(0) := 0 and "conditioning on a
zero-probability event contributes 0" apply throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "InvalidDistributionError",
    "JointPMF",
    "BoundMargin",
    "entropy",
    "conditional_entropy",
    "mutual_information",
    "conditional_mi",
    "interaction_information",
    "bound_margin",
    "strong_bound_margin",
    "interaction_min_property",
    "random_joint",
    "attribute_determined_joint",
]

# Input validation threshold for "entries sum to 1". Renormalisation is never
# silent: a distribution that fails this is a construction bug upstream.
SUM_TOLERANCE = 1e-9

_AXIS_NAMES = {"z": 0, "y": 1, "a": 2}


class InvalidDistributionError(ValueError):
    """The given array is not a valid probability distribution."""


def _resolve_axis(axis: int | str) -> int:
    if isinstance(axis, str):
        try:
            return _AXIS_NAMES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis name {axis!r}; expected one of 'z', 'y', 'a'") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"axis index {axis} out of range for a (z, y, a) joint")
    return axis


def _check_distribution(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)):
        raise InvalidDistributionError("distribution contains non-finite entries")
    if np.any(p < 0.0):
        raise InvalidDistributionError(f"distribution contains negative entries (min {p.min():g})")
    total = float(p.sum())
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise InvalidDistributionError(f"distribution sums to {total!r}, not 1 within {SUM_TOLERANCE:g}")


@dataclass(frozen=True)
class JointPMF:
    """Dense joint distribution over (z, y, a).

    `probs[z, y, a]` is the probability of the cell; the three axis lengths
    are the alphabet sizes. Instances are immutable and safe to share across
    threads.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=float, copy=True)
        if probs.ndim != 3:
            raise InvalidDistributionError(f"joint must be 3-dimensional, got {probs.ndim} axes")
        if min(probs.shape) < 1:
            raise InvalidDistributionError(f"alphabet sizes must be >= 1, got {probs.shape}")
        _check_distribution(probs)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def alphabet_sizes(self) -> tuple[int, int, int]:
        return self.probs.shape  # type: ignore[return-value]

    def marginal(self, axes: Sequence[int | str]) -> np.ndarray:
        """Marginal table over `axes`, in the order given."""
        resolved = [_resolve_axis(ax) for ax in axes]
        if len(set(resolved)) != len(resolved):
            raise ValueError(f"repeated axes in {axes!r}")
        drop = tuple(i for i in range(3) if i not in resolved)
        table = self.probs.sum(axis=drop) if drop else self.probs
        kept = [i for i in range(3) if i not in drop]
        return np.transpose(table, [kept.index(r) for r in resolved])

    def to_json(self) -> str:
        doc = {"sizes": list(self.probs.shape), "probs": self.probs.ravel().tolist()}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "JointPMF":
        doc = json.loads(text)
        sizes = [int(s) for s in doc["sizes"]]
        if len(sizes) != 3:
            raise InvalidDistributionError(f"expected 3 alphabet sizes, got {len(sizes)}")
        flat = np.asarray(doc["probs"], dtype=float)
        expected = int(np.prod(sizes))
        if flat.size != expected:
            raise InvalidDistributionError(f"expected {expected} probabilities, got {flat.size}")
        return cls(flat.reshape(sizes))


def entropy(pmf: np.ndarray | Sequence[float]) -> float:
    """Shannon entropy -sum(p log p) of a distribution, in nats.

    Accepts a table of any shape; the entropy of a joint table equals the
    entropy of its flattened vector.
    """
    p = np.asarray(pmf, dtype=float).ravel()
    if p.size == 0:
        raise InvalidDistributionError("empty distribution")
    _check_distribution(p)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def _pair_mi(pair: np.ndarray) -> float:
    """Mutual information of a 2-d joint table (assumed valid, any total > 0)."""
    px = pair.sum(axis=1)
    py = pair.sum(axis=0)
    mask = pair > 0.0
    if not mask.any():
        return 0.0
    outer = px[:, None] * py[None, :]
    return float((pair[mask] * (np.log(pair[mask]) - np.log(outer[mask]))).sum())


def conditional_entropy(joint: JointPMF, target: int | str, given: int | str) -> float:
    """H(target | given) = sum_g p(g) H(target | given=g), in nats."""
    t, g = _resolve_axis(target), _resolve_axis(given)
    if t == g:
        raise ValueError("target and conditioning axes must be distinct")
    pair = joint.marginal((t, g))
    return entropy(pair) - entropy(pair.sum(axis=0))


def mutual_information(joint: JointPMF, axis1: int | str, axis2: int | str) -> float:
    """I(axis1; axis2) of the pairwise marginal, in nats."""
    i, j = _resolve_axis(axis1), _resolve_axis(axis2)
    if i == j:
        raise ValueError("mutual information requires two distinct axes")
    return _pair_mi(joint.marginal((i, j)))


def conditional_mi(joint: JointPMF, axis1: int | str, axis2: int | str, given: int | str) -> float:
    """I(axis1; axis2 | given), in nats. Zero-probability conditioning values are skipped."""
    i, j, g = _resolve_axis(axis1), _resolve_axis(axis2), _resolve_axis(given)
    if len({i, j, g}) != 3:
        raise ValueError("conditional mutual information requires three distinct axes")
    table = joint.marginal((i, j, g))
    pg = table.sum(axis=(0, 1))
    total = 0.0
    for k in np.flatnonzero(pg > 0.0):
        total += pg[k] * _pair_mi(table[:, :, k] / pg[k])
    return float(total)


def interaction_information(joint: JointPMF) -> float:
    """I(Z;Y;A) = I(Z;Y) - I(Z;Y|A). May be negative (e.g. an XOR triple)."""
    return mutual_information(joint, "z", "y") - conditional_mi(joint, "z", "y", "a")


@dataclass(frozen=True)
class BoundMargin:
    """Terms of the feature-target information bound and its slack."""

    izy: float
    iza: float
    hya: float
    margin: float


def bound_margin(joint: JointPMF) -> BoundMargin:
    """Slack of I(Z;Y) <= I(Z;A) + H(Y|A); non-negative on every valid joint."""
    izy = mutual_information(joint, "z", "y")
    iza = mutual_information(joint, "z", "a")
    hya = conditional_entropy(joint, "y", "a")
    return BoundMargin(izy=izy, iza=iza, hya=hya, margin=iza + hya - izy)


def strong_bound_margin(joint: JointPMF) -> float:
    """Slack of the tighter chain I(Z;Y) + H(Y|Z,A) <= I(Z;A) + H(Y|A).

    Always <= bound_margin(joint).margin, since H(Y|Z,A) >= 0.
    """
    b = bound_margin(joint)
    h_yza = entropy(joint.probs) - entropy(joint.marginal(("z", "a")))
    return b.margin - h_yza


def interaction_min_property(joint: JointPMF, tol: float = 1e-9) -> bool:
    """True iff I(Z;Y;A) <= min{I(Z;Y), I(Y;A), I(Z;A)} within `tol`."""
    ii = interaction_information(joint)
    smallest = min(
        mutual_information(joint, "z", "y"),
        mutual_information(joint, "y", "a"),
        mutual_information(joint, "z", "a"),
    )
    return bool(ii <= smallest + tol)


def random_joint(
    alphabet_sizes: Sequence[int],
    concentration: float = 1.0,
    seed: int | np.random.Generator | None = None,
) -> JointPMF:
    """Dirichlet-random joint over the given alphabets; deterministic per seed.

    Small concentrations give near-deterministic joints, large ones near-uniform,
    so sweeping the concentration covers both regimes of the property corpus.
    """
    sizes = tuple(int(s) for s in alphabet_sizes)
    if len(sizes) != 3:
        raise ValueError(f"expected 3 alphabet sizes, got {len(sizes)}")
    if min(sizes) < 1:
        raise ValueError(f"alphabet sizes must be >= 1, got {sizes}")
    if not concentration > 0.0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = rng.dirichlet(np.full(int(np.prod(sizes)), float(concentration)))
    return JointPMF(flat.reshape(sizes))


def attribute_determined_joint(
    pz: Sequence[float],
    pa: Sequence[float],
    y_of_a: Sequence[int],
    y_size: int | None = None,
) -> JointPMF:
    """Joint with Y a deterministic function of A and Z independent of A.

    Builds p(z, y, a) = p(z) p(a) [y == y_of_a[a]]: the degenerate family in
    which the bias fully determines the target while the feature carries none
    of the attribute. On every such joint I(Z;Y) = 0.
    """
    pz = np.asarray(pz, dtype=float)
    pa = np.asarray(pa, dtype=float)
    _check_distribution(pz)
    _check_distribution(pa)
    mapping = np.asarray(y_of_a, dtype=int)
    if mapping.shape != (pa.size,):
        raise ValueError(f"y_of_a must map each of the {pa.size} attribute values")
    if mapping.min() < 0:
        raise ValueError("y_of_a values must be non-negative")
    size_y = int(mapping.max()) + 1 if y_size is None else int(y_size)
    if size_y <= int(mapping.max()):
        raise ValueError(f"y_size {size_y} too small for mapping with max {mapping.max()}")
    probs = np.zeros((pz.size, size_y, pa.size))
    for a_val, y_val in enumerate(mapping):
        probs[:, y_val, a_val] = pz * pa[a_val]
    return JointPMF(probs)
