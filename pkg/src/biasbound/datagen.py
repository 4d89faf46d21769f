"""Dataset construction with a controllable bias strength H(Y|A).

Three families, all seeded and byte-reproducible:

* Gaussian feature vectors where an agreement probability q couples the
  protected attribute to the target (q=1: attribute determines target,
  q=0.5: independent).
* Colorized digit images: each digit class owns a mean RGB color, a variance
  knob controls how predictive color is of the digit, and the test split
  assigns colors uniformly at random. A binary IDX parser loads real digit
  files; a built-in glyph synthesizer keeps the task self-contained.
* Tabular biased / bias-conflicting pool mixing, in constant-total and
  constant-biased-count modes, for sweeping the conflict fraction.

`empirical_hya` ties every generator back to the exact oracle, and
`split_eval` builds the balanced and conflicting-only evaluation splits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import exact_info

__all__ = [
    "IdxFormatError",
    "LabeledDataset",
    "BiasSpec",
    "CLASS_COLOR_MEANS",
    "gen_gaussian_biased",
    "parse_idx",
    "synth_digit_images",
    "colorize",
    "mix_bias",
    "empirical_hya",
    "split_eval",
    "make_tabular_pools",
]

CONTAINER_MAGIC = b"BBL1"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

COLOR_VARIANCE_RANGE = (0.0, 0.05)
CONFLICT_FRACTION_RANGE = (0.0, 0.5)
AGREEMENT_PROB_RANGE = (0.5, 1.0)


class IdxFormatError(ValueError):
    """Byte payload is not a valid IDX document."""


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log(p) - (1.0 - p) * np.log(1.0 - p))


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with per-sample target and protected-attribute labels."""

    features: np.ndarray
    targets: np.ndarray
    attributes: np.ndarray
    provenance: str = ""

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-d (n, d), got shape {x.shape}")
        y = np.asarray(self.targets, dtype=int)
        a = np.asarray(self.attributes, dtype=int)
        if y.shape != (x.shape[0],) or a.shape != (x.shape[0],):
            raise ValueError("targets and attributes must be vectors matching the feature rows")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if y.min() < 0 or a.min() < 0:
            raise ValueError("labels must be non-negative integers")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "attributes", a)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray, provenance: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.features[indices],
            self.targets[indices],
            self.attributes[indices],
            self.provenance if provenance is None else provenance,
        )

    def to_bytes(self) -> bytes:
        """Single-file container: 16-byte header then features, labels, provenance."""
        n, d = self.features.shape
        y_size = int(self.targets.max()) + 1
        a_size = int(self.attributes.max()) + 1
        header = CONTAINER_MAGIC + struct.pack("<IIHH", n, d, y_size, a_size)
        return (
            header
            + self.features.astype("<f8").tobytes()
            + self.targets.astype("<i4").tobytes()
            + self.attributes.astype("<i4").tobytes()
            + self.provenance.encode("utf-8")
        )

    @classmethod
    def from_bytes(cls, payload: bytes) -> "LabeledDataset":
        if len(payload) < 16 or payload[:4] != CONTAINER_MAGIC:
            raise ValueError("not a BBL1 dataset container")
        n, d, _y_size, _a_size = struct.unpack("<IIHH", payload[4:16])
        need = 16 + n * d * 8 + n * 4 * 2
        if len(payload) < need:
            raise ValueError(f"container truncated: need {need} bytes, have {len(payload)}")
        off = 16
        features = np.frombuffer(payload, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        off += n * d * 8
        targets = np.frombuffer(payload, dtype="<i4", count=n, offset=off)
        off += n * 4
        attributes = np.frombuffer(payload, dtype="<i4", count=n, offset=off)
        off += n * 4
        provenance = payload[off:].decode("utf-8")
        return cls(features.copy(), targets.copy(), attributes.copy(), provenance)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "LabeledDataset":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class BiasSpec:
    """One point on a bias-strength grid.

    `kind` selects the control knob: per-channel color variance for the
    colorized task, conflicting-sample fraction for pool mixing, or
    target/attribute agreement probability for the Gaussian task.
    """

    kind: str
    value: float

    def __post_init__(self) -> None:
        ranges = {
            "color_variance": COLOR_VARIANCE_RANGE,
            "conflict_fraction": CONFLICT_FRACTION_RANGE,
            "agreement_prob": AGREEMENT_PROB_RANGE,
        }
        if self.kind not in ranges:
            raise ValueError(f"unknown bias kind {self.kind!r}; expected one of {sorted(ranges)}")
        lo, hi = ranges[self.kind]
        if not (lo <= self.value <= hi):
            raise ValueError(f"{self.kind} must lie in [{lo}, {hi}], got {self.value}")

    @property
    def derived_hya(self) -> float | None:
        """Closed-form H(Y|A) in nats for binary targets, where one exists."""
        if self.kind == "agreement_prob":
            return _binary_entropy(self.value)
        if self.kind == "conflict_fraction":
            return _binary_entropy(self.value)
        return None  # color variance: only empirically measurable

    def sort_key(self) -> float:
        """Ascending key orders the grid weakest-bias-last (H(Y|A) increasing)."""
        derived = self.derived_hya
        return derived if derived is not None else self.value


def gen_gaussian_biased(
    n: int,
    agreement_prob: float,
    signal_dims: int = 6,
    spurious_dims: int = 2,
    noise_sigma: float = 1.0,
    seed: int = 0,
    signal_scale: float = 0.8,
    spurious_scale: float = 3.0,
    cross_leak: float = 0.3,
) -> LabeledDataset:
    """Synthetic binary task with a tunable attribute shortcut.

    Y is a fair coin; A agrees with Y with probability q. Signal dimensions
    carry the target at `signal_scale` plus a small attribute leak at
    `cross_leak`; spurious dimensions carry the attribute alone at
    `spurious_scale`, the larger margin, so a plain classifier prefers the
    shortcut whenever the agreement is high. The leak entangles the blocks:
    under extreme bias no subspace is target-informative without being
    attribute-informative, while at weaker bias a linear combination of the
    blocks cancels the attribute and keeps the target.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    q = float(agreement_prob)
    if not AGREEMENT_PROB_RANGE[0] <= q <= AGREEMENT_PROB_RANGE[1]:
        raise ValueError(f"agreement_prob must lie in {AGREEMENT_PROB_RANGE}, got {q}")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    flips = rng.random(n) >= q
    a = np.where(flips, 1 - y, y)
    y_sign = (2 * y - 1)[:, None]
    a_sign = (2 * a - 1)[:, None]
    signal = (
        y_sign * signal_scale
        + a_sign * cross_leak
        + rng.normal(0.0, noise_sigma, (n, signal_dims))
    )
    spurious = a_sign * spurious_scale + rng.normal(0.0, noise_sigma, (n, spurious_dims))
    provenance = f"gaussian_biased(n={n}, q={q}, seed={seed})"
    return LabeledDataset(np.hstack([signal, spurious]), y, a, provenance)


def parse_idx(payload: bytes) -> np.ndarray:
    """Parse a big-endian IDX payload.

    Unsigned-byte images (magic 0x00000803) come back as float arrays
    (count, rows, cols) scaled to [0, 1]; unsigned-byte labels (magic
    0x00000801) as an integer vector. Payload length must match the declared
    dimensions exactly.
    """
    if len(payload) < 4:
        raise IdxFormatError("payload too short for a magic number")
    magic = int.from_bytes(payload[:4], "big")
    if magic == IDX_LABEL_MAGIC:
        if len(payload) < 8:
            raise IdxFormatError("label payload too short for its count field")
        (count,) = struct.unpack(">I", payload[4:8])
        if len(payload) != 8 + count:
            raise IdxFormatError(f"label payload length {len(payload)} does not match count {count}")
        return np.frombuffer(payload, dtype=np.uint8, offset=8).astype(np.int64)
    if magic == IDX_IMAGE_MAGIC:
        if len(payload) < 16:
            raise IdxFormatError("image payload too short for its dimension fields")
        count, rows, cols = struct.unpack(">III", payload[4:16])
        if len(payload) != 16 + count * rows * cols:
            raise IdxFormatError(
                f"image payload length {len(payload)} does not match {count}x{rows}x{cols}"
            )
        raw = np.frombuffer(payload, dtype=np.uint8, offset=16)
        return raw.reshape(count, rows, cols).astype(float) / 255.0
    raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}")


_DIGIT_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]


def _glyph_array(digit: int, scale: int = 3) -> np.ndarray:
    rows = _DIGIT_GLYPHS[digit]
    bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=float)
    return np.kron(bitmap, np.ones((scale, scale)))


def synth_digit_images(n: int, seed: int = 0, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale digit-like glyph images in [0, 1] with random placement and brightness.

    A stand-in image source with the same interface contract as parsed IDX
    files, so the colorized task runs without any files on disk.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    glyphs = [_glyph_array(d) for d in range(10)]
    gh, gw = glyphs[0].shape
    if side < max(gh, gw):
        raise ValueError(f"side {side} too small for {gh}x{gw} glyphs")
    images = np.zeros((n, side, side))
    offs_r = rng.integers(0, side - gh + 1, size=n)
    offs_c = rng.integers(0, side - gw + 1, size=n)
    brightness = rng.uniform(0.6, 1.0, size=n)
    for i in range(n):
        r, c = offs_r[i], offs_c[i]
        images[i, r : r + gh, c : c + gw] = glyphs[labels[i]] * brightness[i]
    return images, labels


# Fixed, well-separated mean colors, one per digit class. The exact palette is
# configuration: any set of points with comparable pairwise separation
# preserves how variance trades off against color identifiability.
CLASS_COLOR_MEANS = np.array(
    [
        [1.00, 0.10, 0.10],
        [0.10, 1.00, 0.10],
        [0.15, 0.20, 1.00],
        [1.00, 0.95, 0.10],
        [1.00, 0.15, 1.00],
        [0.10, 1.00, 1.00],
        [1.00, 0.55, 0.05],
        [0.55, 0.10, 1.00],
        [0.55, 1.00, 0.45],
        [0.95, 0.95, 0.95],
    ]
)


def _downsample(images: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return images
    n, h, w, c = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image side {h}x{w} not divisible by downsample factor {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def colorize(
    images: np.ndarray,
    labels: np.ndarray,
    variance: float,
    split: str = "train",
    seed: int = 0,
    downsample: int = 2,
    color_means: np.ndarray | None = None,
) -> LabeledDataset:
    """Tint grayscale images with class colors; variance controls the bias strength.

    Train split: each image's color is drawn around its class mean with the
    given per-channel variance (clipped to [0,1]). Test split: the mean is
    picked uniformly at random, independent of the class. The protected
    attribute is the index of the nearest mean to the realised color, and the
    features are the flattened RGB image after 2x average-pool downsampling
    (a documented deviation from full-resolution training; the phenomenon
    under test does not depend on resolution).
    """
    lo, hi = COLOR_VARIANCE_RANGE
    if not lo <= variance <= hi:
        raise ValueError(f"color variance must lie in [{lo}, {hi}], got {variance}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ValueError("images must be (n, h, w) matching the label vector")
    means = CLASS_COLOR_MEANS if color_means is None else np.asarray(color_means, dtype=float)
    if labels.min() < 0 or labels.max() >= means.shape[0]:
        raise ValueError(f"labels out of range for a {means.shape[0]}-color palette")
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    if split == "train":
        chosen = means[labels]
    else:
        chosen = means[rng.integers(0, means.shape[0], size=n)]
    colors = np.clip(chosen + rng.normal(0.0, np.sqrt(variance), size=(n, 3)), 0.0, 1.0)
    attribute = np.argmin(((colors[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
    rgb = images[..., None] * colors[:, None, None, :]
    rgb = _downsample(rgb, downsample)
    features = rgb.reshape(n, -1)
    provenance = f"colorized(split={split}, variance={variance}, seed={seed})"
    return LabeledDataset(features, labels, attribute, provenance)


def mix_bias(
    biased_pool: LabeledDataset,
    conflicting_pool: LabeledDataset,
    conflict_fraction: float,
    total_n: int,
    seed: int = 0,
    mode: str = "constant_total",
) -> LabeledDataset:
    """Compose a training set from aligned and conflicting pools.

    `constant_total`: the output has exactly `total_n` rows, a
    `conflict_fraction` of them conflicting. `constant_biased`: `total_n` is
    the fixed count of biased rows and the conflicting count grows as
    f/(1-f) of it, so the output size varies with the fraction.
    """
    lo, hi = CONFLICT_FRACTION_RANGE
    if not lo <= conflict_fraction <= hi:
        raise ValueError(f"conflict_fraction must lie in [{lo}, {hi}], got {conflict_fraction}")
    if mode not in ("constant_total", "constant_biased"):
        raise ValueError(f"unknown mode {mode!r}")
    if np.any(biased_pool.targets != biased_pool.attributes):
        raise ValueError("biased pool must contain only target/attribute-aligned samples")
    if np.any(conflicting_pool.targets == conflicting_pool.attributes):
        raise ValueError("conflicting pool must contain only target/attribute-conflicting samples")
    if mode == "constant_total":
        n_conflict = int(round(conflict_fraction * total_n))
        n_biased = total_n - n_conflict
    else:
        n_biased = int(total_n)
        n_conflict = int(round(conflict_fraction / (1.0 - conflict_fraction) * n_biased))
    if n_biased > biased_pool.n:
        raise ValueError(f"need {n_biased} biased samples, pool has {biased_pool.n}")
    if n_conflict > conflicting_pool.n:
        raise ValueError(f"need {n_conflict} conflicting samples, pool has {conflicting_pool.n}")
    rng = np.random.default_rng(seed)
    take_b = rng.choice(biased_pool.n, size=n_biased, replace=False)
    take_c = rng.choice(conflicting_pool.n, size=n_conflict, replace=False)
    features = np.vstack([biased_pool.features[take_b], conflicting_pool.features[take_c]])
    targets = np.concatenate([biased_pool.targets[take_b], conflicting_pool.targets[take_c]])
    attributes = np.concatenate([biased_pool.attributes[take_b], conflicting_pool.attributes[take_c]])
    order = rng.permutation(features.shape[0])
    provenance = f"mix_bias(mode={mode}, fraction={conflict_fraction}, seed={seed})"
    return LabeledDataset(features[order], targets[order], attributes[order], provenance)


def empirical_hya(targets: np.ndarray, attributes: np.ndarray) -> float:
    """Conditional entropy H(Y|A) in nats of the empirical label counts."""
    y = np.asarray(targets).ravel()
    a = np.asarray(attributes).ravel()
    if y.shape != a.shape:
        raise ValueError(f"label vectors have unequal lengths {y.size} and {a.size}")
    if y.size < 1:
        raise ValueError("need at least one sample")
    _, iy = np.unique(y, return_inverse=True)
    _, ia = np.unique(a, return_inverse=True)
    counts = np.zeros((iy.max() + 1, ia.max() + 1))
    np.add.at(counts, (iy, ia), 1.0)
    pmf = exact_info.JointPMF((counts / y.size)[None, :, :])
    return exact_info.conditional_entropy(pmf, "y", "a")


def split_eval(
    source: LabeledDataset, per_cell: int, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Balanced evaluation splits.

    The first split draws exactly `per_cell` samples from every (target,
    attribute) cell, which makes the two labels exactly independent. The
    second keeps only its conflicting cells (target != attribute), half the
    rows for binary tasks.
    """
    if per_cell < 1:
        raise ValueError(f"per_cell must be >= 1, got {per_cell}")
    y_vals = np.unique(source.targets)
    a_vals = np.unique(source.attributes)
    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []
    for y in y_vals:
        for a in a_vals:
            cell = np.flatnonzero((source.targets == y) & (source.attributes == a))
            if cell.size < per_cell:
                raise ValueError(
                    f"cell (y={y}, a={a}) has {cell.size} samples, need {per_cell}"
                )
            chosen.append(rng.choice(cell, size=per_cell, replace=False))
    unbiased_idx = np.concatenate(chosen)
    unbiased = source.subset(unbiased_idx, provenance=f"{source.provenance}|unbiased")
    conflict_mask = unbiased.targets != unbiased.attributes
    conflicting = unbiased.subset(
        np.flatnonzero(conflict_mask), provenance=f"{source.provenance}|bias_conflicting"
    )
    return unbiased, conflicting


def make_tabular_pools(
    pool_n: int,
    dims: int = 6,
    seed: int = 0,
    signal_scale: float = 0.9,
    spurious_scale: float = 3.0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Synthetic record pools for the mixing protocol: one aligned, one conflicting.

    Stands in for census-style source data; counts and H(Y|A) behaviour under
    mixing are what matter, not the raw records.
    """
    if pool_n < 2:
        raise ValueError(f"pool_n must be >= 2, got {pool_n}")
    rng = np.random.default_rng(seed)

    def build(conflicting: bool) -> LabeledDataset:
        y = rng.integers(0, 2, size=pool_n)
        a = 1 - y if conflicting else y.copy()
        half = dims // 2
        signal = (2 * y - 1)[:, None] * signal_scale + rng.normal(0.0, 1.0, (pool_n, half))
        spurious = (2 * a - 1)[:, None] * spurious_scale + rng.normal(0.0, 1.0, (pool_n, dims - half))
        tag = "conflicting" if conflicting else "biased"
        return LabeledDataset(np.hstack([signal, spurious]), y, a, f"tabular_pool({tag}, seed={seed})")

    return build(False), build(True)


def provenance_sidecar(dataset: LabeledDataset, generator: str, params: dict) -> str:
    """JSON sidecar describing how a dataset file was produced."""
    doc = {
        "generator": generator,
        "parameters": params,
        "n": dataset.n,
        "dim": dataset.dim,
        "hya_nats": empirical_hya(dataset.targets, dataset.attributes),
        "provenance": dataset.provenance,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
