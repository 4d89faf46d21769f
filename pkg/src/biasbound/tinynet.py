"""Minimal dense-network training core.

Fixed feedforward topology, double precision, explicit parameter containers,
bias-corrected Adam. Every source of randomness is an explicit seed or
generator; identical seeds give bit-identical trajectories. Classifiers use
rectifier hidden layers; statistics networks for the variational mutual
information bound use tanh, which keeps outputs smooth and unbounded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "ShapeError",
    "TrainingDiverged",
    "LayerSpec",
    "NetworkParams",
    "Activations",
    "TrainConfig",
    "AdamState",
    "init_network",
    "forward",
    "backprop",
    "backward",
    "softmax",
    "softmax_ce",
    "gradient_reversal",
    "init_adam",
    "adam_step",
]

ACTIVATIONS = ("linear", "relu", "tanh")

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Array shapes are incompatible with the network topology."""


class TrainingDiverged(RuntimeError):
    """A training loop produced a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.in_width < 1 or self.out_width < 1:
            raise ShapeError(f"layer widths must be positive, got {self.in_width}x{self.out_width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")


@dataclass
class NetworkParams:
    """Ordered dense layers: weight matrices (in x out) and bias vectors."""

    specs: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.specs:
            raise ShapeError("network needs at least one layer")
        if not (len(self.specs) == len(self.weights) == len(self.biases)):
            raise ShapeError("specs, weights and biases must have equal length")
        for prev, nxt in zip(self.specs, self.specs[1:]):
            if prev.out_width != nxt.in_width:
                raise ShapeError(f"adjacent layer widths {prev.out_width} -> {nxt.in_width} incompatible")
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            if w.shape != (spec.in_width, spec.out_width) or b.shape != (spec.out_width,):
                raise ShapeError(f"parameter shapes {w.shape}/{b.shape} do not match spec {spec}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")

    @property
    def in_width(self) -> int:
        return self.specs[0].in_width

    @property
    def out_width(self) -> int:
        return self.specs[-1].out_width

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in fixed order: W0, b0, W1, b1, ..."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            specs=list(self.specs),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def to_json(self) -> str:
        doc = {
            "version": CHECKPOINT_VERSION,
            "layers": [
                {
                    "in": s.in_width,
                    "out": s.out_width,
                    "activation": s.activation,
                    "weights": w.ravel().tolist(),
                    "biases": b.tolist(),
                }
                for s, w, b in zip(self.specs, self.weights, self.biases)
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "NetworkParams":
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        specs, weights, biases = [], [], []
        for layer in doc["layers"]:
            spec = LayerSpec(int(layer["in"]), int(layer["out"]), str(layer["activation"]))
            specs.append(spec)
            weights.append(np.asarray(layer["weights"], dtype=float).reshape(spec.in_width, spec.out_width))
            biases.append(np.asarray(layer["biases"], dtype=float))
        return cls(specs=specs, weights=weights, biases=biases)


def init_network(
    widths: Sequence[int],
    activations: Sequence[str],
    rng: int | np.random.Generator | None = 0,
) -> NetworkParams:
    """Fan-in-scaled uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ShapeError("need at least input and output widths")
    if len(activations) != len(widths) - 1:
        raise ShapeError(f"{len(widths) - 1} layers need {len(widths) - 1} activations, got {len(activations)}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    specs, weights, biases = [], [], []
    for i, act in enumerate(activations):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        specs.append(LayerSpec(fan_in, fan_out, act))
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(specs=specs, weights=weights, biases=biases)


@dataclass
class Activations:
    """Per-layer forward state: input to each layer, pre-activations, final output."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    logits: np.ndarray


def _apply(activation: str, pre: np.ndarray) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "tanh":
        return np.tanh(pre)
    return pre


def _derivative(activation: str, pre: np.ndarray) -> np.ndarray:
    if activation == "relu":
        return (pre > 0.0).astype(float)
    if activation == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    return np.ones_like(pre)


def forward(params: NetworkParams, batch: np.ndarray) -> Activations:
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d (n, width), got shape {x.shape}")
    if x.shape[1] != params.in_width:
        raise ShapeError(f"batch width {x.shape[1]} does not match input width {params.in_width}")
    layer_inputs, pres = [], []
    for spec, w, b in zip(params.specs, params.weights, params.biases):
        layer_inputs.append(x)
        pre = x @ w + b
        pres.append(pre)
        x = _apply(spec.activation, pre)
    return Activations(layer_inputs=layer_inputs, pre_activations=pres, logits=x)


def backprop(
    params: NetworkParams, acts: Activations, dout: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate a gradient on the final output.

    Returns gradients in `arrays()` order plus the gradient with respect to
    the input batch (for chaining networks).
    """
    d = np.asarray(dout, dtype=float)
    grads: list[np.ndarray] = []
    for i in reversed(range(len(params.specs))):
        dpre = d * _derivative(params.specs[i].activation, acts.pre_activations[i])
        grads.append(dpre.sum(axis=0))  # bias
        grads.append(acts.layer_inputs[i].T @ dpre)  # weight
        d = dpre @ params.weights[i].T
    grads.reverse()
    return grads, d


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(
    logits: np.ndarray,
    targets: np.ndarray,
    sample_weight: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy loss and its gradient on the logits.

    The loss is the batch mean of (optionally weighted) per-sample negative
    log-likelihoods; the gradient is consistent with that normalisation.
    """
    targets = np.asarray(targets, dtype=int)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch size {n}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"targets out of range for {k} classes")
    p = softmax(logits)
    nll = -np.log(np.maximum(p[np.arange(n), targets], 1e-300))
    dlogits = p.copy()
    dlogits[np.arange(n), targets] -= 1.0
    if sample_weight is None:
        return float(nll.mean()), dlogits / n
    w = np.asarray(sample_weight, dtype=float)
    return float((w * nll).mean()), (w[:, None] * dlogits) / n


def backward(
    params: NetworkParams,
    batch: np.ndarray,
    targets: np.ndarray,
    loss: str = "softmax_ce",
) -> tuple[list[np.ndarray], float]:
    """Full forward/backward pass for a supported loss tag."""
    if loss != "softmax_ce":
        raise ValueError(f"unknown loss tag {loss!r}")
    acts = forward(params, batch)
    value, dlogits = softmax_ce(acts.logits, targets)
    grads, _ = backprop(params, acts, dlogits)
    return grads, value


def gradient_reversal(grad: np.ndarray, lam: float) -> np.ndarray:
    """Adversarial coupling: identity on the forward pass, -lam * grad backwards."""
    return -float(lam) * np.asarray(grad, dtype=float)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    seed: int = 0
    lam: float = 0.0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(arrays: Sequence[np.ndarray] | NetworkParams) -> AdamState:
    if isinstance(arrays, NetworkParams):
        arrays = arrays.arrays()
    return AdamState(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    params: Sequence[np.ndarray] | NetworkParams,
    grads: Sequence[np.ndarray],
    state: AdamState,
    config: TrainConfig,
    t: int,
) -> tuple[Sequence[np.ndarray] | NetworkParams, AdamState]:
    """Bias-corrected Adam update at step index t >= 1. Updates in place."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    arrays = params.arrays() if isinstance(params, NetworkParams) else list(params)
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("parameter, gradient and state lists must have equal length")
    b1, b2 = config.beta1, config.beta2
    for x, g, m, v in zip(arrays, grads, state.m, state.v):
        if x.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {x.shape}")
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        x[...] = x - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state
