"""Desk-scale bias-removal training methods.

Every method trains the same backbone, a dense feature extractor f: X -> Z
plus a classifier head g: Z -> Y, and differs only in how it discourages the
extractor from encoding the protected attribute:

* `baseline`  plain cross-entropy, no bias removal
* `lnl_adv`   attribute-prediction adversary coupled through gradient reversal
* `mine_adv`  a Donsker-Varadhan statistics network estimates I(Z;A); the
              extractor is penalised by the estimated bound, one critic update
              per classifier update
* `end`       same-attribute feature pairs pushed towards orthogonality
              (squared cosine similarity penalty); an optional entangling term
              on cross-attribute pairs ships disabled
* `lff`       a generalized-cross-entropy "easy feature" model reweights the
              main model's per-sample losses by relative difficulty
* `di`        one classifier head per attribute domain, trained on its own
              domain; inference sums per-domain logits
* `blindeye`  an attribute classifier on Z is pushed towards uniform output
              via cross-entropy against the uniform distribution

With lam=0 the adversarial and regularised methods reduce exactly to the
baseline: auxiliary networks draw from their own seed stream, so the main
parameter trajectory is bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tinynet
from .datagen import LabeledDataset
from .mi_estim import DVConfig, DVCritic
from .tinynet import NetworkParams, TrainConfig, TrainingDiverged

__all__ = [
    "METHODS",
    "DEFAULT_LAMBDA",
    "DebiasConfig",
    "TrainedModel",
    "train",
    "extract_features",
    "evaluate_accuracy",
    "end_regularizer",
    "lff_weight",
    "blindeye_regularizer",
]

METHODS = ("baseline", "lnl_adv", "mine_adv", "end", "lff", "di", "blindeye")

# Frozen defaults from a coarse grid {0.1, 0.5, 1, 5} on the q=0.9 Gaussian
# task (scripts/tune_lambda.py); chosen for the best unbiased-split accuracy
# that still collapses to chance at q=1.0.
DEFAULT_LAMBDA = {
    "baseline": 0.0,
    "lnl_adv": 1.0,
    "mine_adv": 0.5,
    "end": 1.0,
    "lff": 0.0,
    "di": 0.0,
    "blindeye": 1.0,
}


@dataclass
class DebiasConfig:
    """Training configuration shared by all methods plus method-specific knobs."""

    base: TrainConfig = field(default_factory=TrainConfig)
    lam: float | None = None  # None: method default from DEFAULT_LAMBDA
    hidden_width: int = 16
    feature_dim: int = 8
    adversary_width: int = 32
    adversary_steps: int = 3
    adversary_warmup: int = 300
    lff_gce_exponent: float = 0.7
    lff_biased_lr_scale: float = 1.0
    lff_weight_floor: float = 0.5
    end_entangle_weight: float = 0.0
    dv_hidden_width: int = 32
    dv_ema_rate: float = 0.99

    def __post_init__(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 < self.lff_gce_exponent <= 1.0:
            raise ValueError(f"lff_gce_exponent must lie in (0, 1], got {self.lff_gce_exponent}")

    def resolved_lam(self, method: str) -> float:
        return DEFAULT_LAMBDA[method] if self.lam is None else float(self.lam)


@dataclass
class TrainedModel:
    """Feature extractor plus one or more classifier heads and the training log."""

    extractor: NetworkParams
    heads: list[NetworkParams]
    method: str
    feature_dim: int
    log: list[dict[str, Any]]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def head(self) -> NetworkParams:
        return self.heads[0]

    def predict_logits(self, features_in: np.ndarray) -> np.ndarray:
        z = tinynet.forward(self.extractor, features_in).logits
        logits = tinynet.forward(self.heads[0], z).logits
        for head in self.heads[1:]:
            logits = logits + tinynet.forward(head, z).logits
        return logits

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "method": self.method,
            "feature_dim": self.feature_dim,
            "extractor": json.loads(self.extractor.to_json()),
            "heads": [json.loads(h.to_json()) for h in self.heads],
            "log": self.log,
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainedModel":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        return cls(
            extractor=NetworkParams.from_json(json.dumps(doc["extractor"])),
            heads=[NetworkParams.from_json(json.dumps(h)) for h in doc["heads"]],
            method=doc["method"],
            feature_dim=int(doc["feature_dim"]),
            log=doc["log"],
            meta=doc.get("meta", {}),
        )


def extract_features(model: TrainedModel, data: LabeledDataset | np.ndarray) -> np.ndarray:
    """Extractor output Z for every row; deterministic."""
    x = data.features if isinstance(data, LabeledDataset) else np.asarray(data, dtype=float)
    return tinynet.forward(model.extractor, x).logits


def evaluate_accuracy(model: TrainedModel, data: LabeledDataset) -> float:
    logits = model.predict_logits(data.features)
    return float(np.mean(np.argmax(logits, axis=1) == data.targets))


def lff_weight(ce_biased: float, ce_debiased: float) -> float:
    """Relative-difficulty weight: large when the easy-feature model struggles."""
    if ce_biased < 0 or ce_debiased < 0:
        raise ValueError("cross-entropy losses must be non-negative")
    total = ce_biased + ce_debiased
    if total == 0.0:
        return 0.5
    return float(ce_biased / total)


def end_regularizer(features: np.ndarray, attributes: np.ndarray) -> float:
    """Mean squared cosine similarity over same-attribute pairs.

    Zero exactly when all same-attribute pairs are orthogonal. Zero-norm rows
    are treated as similarity 0 to every partner.
    """
    value, _, _ = _end_reg_grad(np.asarray(features, dtype=float), np.asarray(attributes))
    return value


def _end_reg_grad(z: np.ndarray, attributes: np.ndarray) -> tuple[float, np.ndarray, bool]:
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need a batch of at least 2 feature vectors")
    norms = np.linalg.norm(z, axis=1)
    zero_norm = norms == 0.0
    safe = np.where(zero_norm, 1.0, norms)
    u = z / safe[:, None]
    u[zero_norm] = 0.0
    cos = u @ u.T
    same = attributes[:, None] == attributes[None, :]
    np.fill_diagonal(same, False)
    pair_count = int(same.sum()) // 2
    if pair_count == 0:
        return 0.0, np.zeros_like(z), bool(zero_norm.any())
    masked = np.where(same, cos, 0.0)
    value = float((masked**2).sum() / (2 * pair_count))
    # dV/du_i = (2/P) sum_j m_ij cos_ij u_j; then project through u = z/|z|.
    du = (2.0 / pair_count) * (masked @ u)
    inner = (du * u).sum(axis=1, keepdims=True)
    dz = (du - inner * u) / safe[:, None]
    dz[zero_norm] = 0.0
    return value, dz, bool(zero_norm.any())


def _cross_reg_grad(z: np.ndarray, attributes: np.ndarray) -> tuple[float, np.ndarray]:
    """Entangling companion term: squared cosine over cross-attribute pairs."""
    flipped = np.asarray(attributes).copy()
    # Reuse the same-pair machinery by masking on inequality instead.
    norms = np.linalg.norm(z, axis=1)
    zero_norm = norms == 0.0
    safe = np.where(zero_norm, 1.0, norms)
    u = z / safe[:, None]
    u[zero_norm] = 0.0
    cos = u @ u.T
    diff = flipped[:, None] != flipped[None, :]
    pair_count = int(diff.sum()) // 2
    if pair_count == 0:
        return 0.0, np.zeros_like(z)
    masked = np.where(diff, cos, 0.0)
    value = float((masked**2).sum() / (2 * pair_count))
    du = (2.0 / pair_count) * (masked @ u)
    inner = (du * u).sum(axis=1, keepdims=True)
    dz = (du - inner * u) / safe[:, None]
    dz[zero_norm] = 0.0
    return value, dz


def blindeye_regularizer(attribute_logits: np.ndarray) -> float:
    """Mean cross-entropy between the attribute classifier's softmax and uniform.

    Minimised (= ln |A|) exactly when every output distribution is uniform.
    """
    logits = np.asarray(attribute_logits, dtype=float)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("attribute logits must be (n, |A|) with |A| >= 2")
    p = tinynet.softmax(logits)
    return float(-np.mean(np.log(np.maximum(p, 1e-300)).sum(axis=1)) / logits.shape[1])


def _gce_loss_grad(logits: np.ndarray, targets: np.ndarray, q: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Generalized cross-entropy (1 - p_y^q)/q: confidence-amplified gradients.

    Returns (mean loss, gradient on logits, per-sample plain CE) so the caller
    can reuse the CE values for difficulty weighting.
    """
    n = logits.shape[0]
    p = tinynet.softmax(logits)
    p_target = np.maximum(p[np.arange(n), targets], 1e-300)
    loss = float(np.mean((1.0 - p_target**q) / q))
    dlogits = p.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits *= (p_target**q)[:, None] / n
    ce = -np.log(p_target)
    return loss, dlogits, ce


class _Net:
    """A network with its optimizer state and step counter."""

    def __init__(self, params: NetworkParams, opt: TrainConfig):
        self.params = params
        self.state = tinynet.init_adam(params)
        self.opt = opt
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        tinynet.adam_step(self.params, grads, self.state, self.opt, self.t)


def train(method: str, data: LabeledDataset, config: DebiasConfig | None = None) -> TrainedModel:
    """Train one method on one dataset; deterministic per config.base.seed."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    config = config or DebiasConfig()
    base = config.base
    if base.epochs < 1:
        raise ValueError(f"training needs at least 1 epoch, got {base.epochs}")
    if data.n < 1:
        raise ValueError("training data is empty")
    lam = config.resolved_lam(method)

    x, y, a = data.features, data.targets, data.attributes
    n, in_dim = x.shape
    y_size = max(int(y.max()) + 1, 2)
    a_size = max(int(a.max()) + 1, 2)

    s_ext, s_head, s_batch, s_aux = np.random.SeedSequence(base.seed).spawn(4)
    extractor = _Net(
        tinynet.init_network(
            [in_dim, config.hidden_width, config.feature_dim],
            ["relu", "linear"],
            np.random.default_rng(s_ext),
        ),
        base,
    )
    head_rng = np.random.default_rng(s_head)
    n_heads = a_size if method == "di" else 1
    heads = [
        _Net(tinynet.init_network([config.feature_dim, y_size], ["linear"], head_rng), base)
        for _ in range(n_heads)
    ]

    rng_batch = np.random.default_rng(s_batch)
    rng_aux = np.random.default_rng(s_aux)

    adversary: _Net | None = None
    critic: DVCritic | None = None
    biased_ext: _Net | None = None
    biased_head: _Net | None = None
    if method in ("lnl_adv", "blindeye") and lam > 0:
        adversary = _Net(
            tinynet.init_network(
                [config.feature_dim, config.adversary_width, a_size], ["relu", "linear"], rng_aux
            ),
            base,
        )
        # Warm-start on the untrained extractor's features so the coupling
        # resists the shortcut from the first real batch.
        for _ in range(max(config.adversary_warmup, 0)):
            idx = rng_aux.integers(0, n, size=min(base.batch_size, n))
            z0 = tinynet.forward(extractor.params, x[idx]).logits
            warm_acts = tinynet.forward(adversary.params, z0)
            _, warm_dlogits = tinynet.softmax_ce(warm_acts.logits, a[idx])
            warm_grads, _ = tinynet.backprop(adversary.params, warm_acts, warm_dlogits)
            adversary.step(warm_grads)
    elif method == "mine_adv" and lam > 0:
        dv_cfg = DVConfig(
            hidden_width=config.dv_hidden_width,
            learning_rate=base.learning_rate,
            batch_size=max(base.batch_size, 2),
            iterations=1,
            ema_rate=config.dv_ema_rate,
            seed=0,
        )
        critic = DVCritic(config.feature_dim, a_size, dv_cfg, rng_aux)
    elif method == "lff":
        # Separate easy-feature model: confidence-amplified training makes it
        # commit to whatever separates the data fastest; its per-sample losses
        # then down-weight those samples for the main model.
        biased_opt = dataclasses.replace(
            base, learning_rate=base.learning_rate * config.lff_biased_lr_scale
        )
        biased_ext = _Net(
            tinynet.init_network(
                [in_dim, config.hidden_width, config.feature_dim], ["relu", "linear"], rng_aux
            ),
            biased_opt,
        )
        biased_head = _Net(
            tinynet.init_network([config.feature_dim, y_size], ["linear"], rng_aux), biased_opt
        )

    a_onehot = np.eye(a_size)[a] if method == "mine_adv" else None

    log: list[dict[str, Any]] = []
    for epoch in range(base.epochs):
        order = rng_batch.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        extras: dict[str, float] = {}
        extras_count = 0
        for start in range(0, n, base.batch_size):
            idx = order[start : start + base.batch_size]
            xb, yb, ab = x[idx], y[idx], a[idx]
            e_acts = tinynet.forward(extractor.params, xb)
            z = e_acts.logits

            if method == "di":
                dz = np.zeros_like(z)
                batch_loss = 0.0
                correct = 0
                for dom, head in enumerate(heads):
                    mask = ab == dom
                    if not mask.any():
                        continue
                    h_acts = tinynet.forward(head.params, z[mask])
                    p = tinynet.softmax(h_acts.logits)
                    nll = -np.log(np.maximum(p[np.arange(mask.sum()), yb[mask]], 1e-300))
                    batch_loss += float(nll.sum()) / idx.size
                    dlogits = p
                    dlogits[np.arange(mask.sum()), yb[mask]] -= 1.0
                    dlogits /= idx.size
                    hg, dzm = tinynet.backprop(head.params, h_acts, dlogits)
                    head.step(hg)
                    dz[mask] += dzm
                full_logits = sum(tinynet.forward(h.params, z).logits for h in heads)
                correct = int((np.argmax(full_logits, axis=1) == yb).sum())
            else:
                h_acts = tinynet.forward(heads[0].params, z)
                if method == "lff" and biased_ext is not None and biased_head is not None:
                    b_acts = tinynet.forward(biased_ext.params, xb)
                    bh_acts = tinynet.forward(biased_head.params, b_acts.logits)
                    gce_loss, gce_dlogits, ce_b = _gce_loss_grad(
                        bh_acts.logits, yb, config.lff_gce_exponent
                    )
                    bh_grads, db = tinynet.backprop(biased_head.params, bh_acts, gce_dlogits)
                    be_grads, _ = tinynet.backprop(biased_ext.params, b_acts, db)
                    p_main = tinynet.softmax(h_acts.logits)
                    ce_d = -np.log(np.maximum(p_main[np.arange(idx.size), yb], 1e-300))
                    weights = np.where(
                        ce_b + ce_d > 0.0, ce_b / np.maximum(ce_b + ce_d, 1e-300), 0.5
                    )
                    # Floor keeps the bulk of the batch training; without it the
                    # late-stage weights concentrate on label noise at desk scale.
                    weights = np.maximum(weights, config.lff_weight_floor)
                    batch_loss, dlogits = tinynet.softmax_ce(h_acts.logits, yb, weights)
                    biased_head.step(bh_grads)
                    biased_ext.step(be_grads)
                    extras["lff_gce_loss"] = extras.get("lff_gce_loss", 0.0) + gce_loss
                else:
                    batch_loss, dlogits = tinynet.softmax_ce(h_acts.logits, yb)
                h_grads, dz = tinynet.backprop(heads[0].params, h_acts, dlogits)
                heads[0].step(h_grads)
                correct = int((np.argmax(h_acts.logits, axis=1) == yb).sum())

                if adversary is not None:
                    # The attribute net takes several steps per batch so it tracks
                    # the extractor instead of lagging behind it.
                    adv_loss = 0.0
                    for _ in range(max(config.adversary_steps, 1)):
                        adv_acts = tinynet.forward(adversary.params, z)
                        adv_loss, adv_dlogits = tinynet.softmax_ce(adv_acts.logits, ab)
                        adv_grads, _ = tinynet.backprop(adversary.params, adv_acts, adv_dlogits)
                        adversary.step(adv_grads)
                    adv_acts = tinynet.forward(adversary.params, z)
                    if method == "lnl_adv":
                        adv_loss, adv_dlogits = tinynet.softmax_ce(adv_acts.logits, ab)
                        _, dz_adv = tinynet.backprop(adversary.params, adv_acts, adv_dlogits)
                        dz = dz + tinynet.gradient_reversal(dz_adv, lam)
                        extras["adversary_loss"] = extras.get("adversary_loss", 0.0) + adv_loss
                    else:  # blindeye
                        p_attr = tinynet.softmax(adv_acts.logits)
                        reg_dlogits = (p_attr - 1.0 / a_size) / idx.size
                        _, dz_reg = tinynet.backprop(adversary.params, adv_acts, reg_dlogits)
                        dz = dz + lam * dz_reg
                        extras["uniformity_penalty"] = extras.get(
                            "uniformity_penalty", 0.0
                        ) + blindeye_regularizer(adv_acts.logits)
                elif critic is not None:
                    dv_value = critic.train_step(z, a_onehot[idx])
                    dz = dz + lam * critic.input_gradient(z, a_onehot[idx])
                    extras["dv_bound"] = extras.get("dv_bound", 0.0) + dv_value
                elif method == "end" and lam > 0:
                    reg_value, dreg, _ = _end_reg_grad(z, ab) if idx.size >= 2 else (0.0, np.zeros_like(z), False)
                    dz = dz + lam * dreg
                    if config.end_entangle_weight > 0 and idx.size >= 2:
                        ent_value, dent = _cross_reg_grad(z, ab)
                        dz = dz - config.end_entangle_weight * dent
                        extras["entangle_term"] = extras.get("entangle_term", 0.0) + ent_value
                    extras["orthogonality_term"] = extras.get("orthogonality_term", 0.0) + reg_value

            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"{method} training loss became non-finite", extractor.t)
            e_grads, _ = tinynet.backprop(extractor.params, e_acts, dz)
            extractor.step(e_grads)
            epoch_loss += batch_loss * idx.size
            epoch_correct += correct
            extras_count += 1

        record: dict[str, Any] = {
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "train_acc": epoch_correct / n,
        }
        for key, total in extras.items():
            record[key] = total / max(extras_count, 1)
        log.append(record)

    return TrainedModel(
        extractor=extractor.params,
        heads=[h.params for h in heads],
        method=method,
        feature_dim=config.feature_dim,
        log=log,
        meta={
            "lam": lam,
            "seed": base.seed,
            "epochs": base.epochs,
            "data_provenance": data.provenance,
            "y_size": y_size,
            "a_size": a_size,
        },
    )
