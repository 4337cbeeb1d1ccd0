"""Two-layer encoder plus linear classifier, trained with Adam.

Backpropagation is written out by hand.  The training loop follows the
label-distribution schedule: the tracking matrix is updated every
iteration from the forward-pass softmax, the label-distribution targets are
committed once per epoch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .ldl_engine import LDLEngine, mass_law_residual, similarity_summary
from .synth_data import Dataset, pk_batches, rng_stream

log = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc")
CHECKPOINT_VERSION = 1

TRAIN_VARIANTS = ("baseline", "LDL-1", "LDL-2", "LDL-3", "onehot", "pinned")
CONFIG_VARIANTS = TRAIN_VARIANTS + ("onehot-compare",)


class ShapeMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def expand_variant(name: str) -> list[str]:
    """``onehot-compare`` names a pair of runs: one-hot CE vs pinned-diagonal LDL."""
    if name == "onehot-compare":
        return ["onehot", "pinned"]
    if name not in TRAIN_VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {CONFIG_VARIANTS}")
    return [name]


@dataclass
class TrainConfig:
    learning_rate: float = 3.5e-4
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    total_epochs: int = 60
    momentum_m: float = 0.2
    lam: float = 1.0
    ids_per_domain_per_batch: int = 16
    images_per_id: int = 4
    seed: int = 0
    variant: str = "LDL-3"
    hidden_dim: int = 128
    feature_dim: int = 64
    smoothing: float = 0.1
    margin: float = 0.3
    pinned_diagonal: float = 0.88

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.validate()

    def validate(self) -> None:
        de = self.decay_epochs
        if any(b <= a for a, b in zip(de, de[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {de}")
        if de and de[-1] >= self.total_epochs:
            raise ValueError("decay epochs must fall before total_epochs")
        if self.learning_rate <= 0 or self.decay_factor <= 0:
            raise ValueError("rates must be positive")
        if not 0.0 <= self.momentum_m <= 1.0:
            raise ValueError("momentum_m must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.variant not in CONFIG_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.images_per_id < 2 or self.ids_per_domain_per_batch < 1:
            raise ValueError("need >= 1 id per domain and >= 2 images per id")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        for k, w in self.weights.items():
            self.adam_m.setdefault(k, np.zeros_like(w))
            self.adam_v.setdefault(k, np.zeros_like(w))

    @property
    def input_dim(self) -> int:
        return self.weights["w1"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights["wc"].shape[1]

    def copy(self) -> "ModelParams":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelParams(cp(self.weights), cp(self.adam_m), cp(self.adam_v), self.step_count)


def init_params(input_dim: int, hidden_dim: int, feature_dim: int, num_classes: int, rng) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    w1, b1 = layer(input_dim, hidden_dim)
    w2, b2 = layer(hidden_dim, feature_dim)
    wc, bc = layer(feature_dim, num_classes)
    return ModelParams(dict(w1=w1, b1=b1, w2=w2, b2=b2, wc=wc, bc=bc))


@dataclass
class Cache:
    x: np.ndarray
    h: np.ndarray
    f: np.ndarray
    step: int
    owner: int


def forward(params: ModelParams, inputs) -> tuple[np.ndarray, np.ndarray, Cache]:
    w = params.weights
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != w["w1"].shape[0]:
        raise ShapeMismatch(f"expected (B, {w['w1'].shape[0]}) inputs, got {x.shape}")
    h = np.tanh(x @ w["w1"] + w["b1"])
    f = h @ w["w2"] + w["b2"]
    logits = f @ w["wc"] + w["bc"]
    return f, logits, Cache(x, h, f, params.step_count, id(params))


def encode(params: ModelParams, inputs) -> np.ndarray:
    return forward(params, inputs)[0]


def backward(params: ModelParams, cache: Cache, grad_logits, grad_features) -> dict[str, np.ndarray]:
    """Reverse-mode gradients; the logit path and the feature path meet at the features."""
    if cache.owner != id(params) or cache.step != params.step_count:
        raise StaleCache("cache was produced by a different parameter state")
    w = params.weights
    gl = np.asarray(grad_logits, dtype=float)
    gf = np.asarray(grad_features, dtype=float) + gl @ w["wc"].T
    gh = (gf @ w["w2"].T) * (1.0 - cache.h ** 2)
    return {
        "wc": cache.f.T @ gl,
        "bc": gl.sum(axis=0),
        "w2": cache.h.T @ gf,
        "b2": gf.sum(axis=0),
        "w1": cache.x.T @ gh,
        "b1": gh.sum(axis=0),
    }


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {k} is not finite")
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m, v = params.adam_m[k], params.adam_v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.weights[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def scheduled_lr(config: TrainConfig, epoch: int) -> float:
    n_decays = sum(1 for e in config.decay_epochs if e <= epoch)
    # dividing by 1/factor keeps 3.5e-4 -> 3.5e-5 -> 3.5e-6 exact in binary floating point
    return config.learning_rate / (1.0 / config.decay_factor) ** n_decays


# --------------------------------------------------------------------------
# loss assembly
# --------------------------------------------------------------------------

def compute_losses(variant: str, config: TrainConfig, logits, features, labels, targets=None):
    """Loss breakdown plus upstream gradients ``(grad_logits, grad_features)``."""
    probs = losses.softmax(logits)
    tri, g_feat = losses.batch_hard_triplet(features, labels, config.margin)
    zero = np.zeros_like(probs)
    mode = "standard"
    if variant == "pinned":
        cls, g_cls = 0.0, zero
        mode = "distribution"
    else:
        eps = 0.0 if variant == "onehot" else config.smoothing
        cls, g_cls = losses.smoothed_ce_loss(probs, labels, eps)
    lam = config.lam
    if variant in ("baseline", "onehot"):
        ldl, g_ldl = 0.0, zero
    else:
        ldl, g_ldl = losses.ldl_loss(probs, targets)
    breakdown = losses.overall_loss(cls, tri, ldl, lam, mode)
    return breakdown, probs, g_cls + lam * g_ldl, g_feat


def _ldl_diagnostics(engine: LDLEngine, variant: str) -> dict:
    ml = engine.label_dist
    diag = {
        "committed_epoch": engine.committed_epoch,
        "row_sum_error": float(np.max(np.abs(ml.sum(axis=1) - 1.0))),
        "mean_diagonal": float(np.mean(np.diag(ml))),
        "same_domain_max": float(np.max(ml[engine.layout.same_domain_mask()], initial=0.0)),
    }
    if variant in ("LDL-3", "pinned"):
        diag["mass_law_residual"] = mass_law_residual(ml, engine.layout)
    diag.update(similarity_summary(engine.similarity_report()))
    return diag


def make_engine(config: TrainConfig, dataset: Dataset) -> LDLEngine | None:
    layout = dataset.layout
    if layout is None or layout.domain_count < 2:
        return None
    pinned = config.pinned_diagonal if config.variant == "pinned" else None
    return LDLEngine(layout, pinned_diagonal=pinned)


def train(config: TrainConfig, dataset: Dataset, engine: LDLEngine | None = None):
    """Run the full schedule and return ``(params, history)``.

    ``engine`` is created from the dataset layout when omitted; pass one in
    to inspect the tracking and label-distribution matrices afterwards.
    Baseline-style variants still track class similarities, they just never
    use them as targets.
    """
    variant = config.variant
    if variant == "onehot-compare":
        raise ValueError("onehot-compare is a pair of runs; train 'onehot' and 'pinned' separately")
    layout = dataset.layout
    if layout is None:
        raise ValueError("training data needs a domain layout")
    uses_targets = variant not in ("baseline", "onehot")
    if engine is None:
        engine = make_engine(config, dataset)
    if uses_targets and engine is None:
        raise ValueError(f"variant {variant} needs at least two source domains")

    params = init_params(dataset.x.shape[1], config.hidden_dim, config.feature_dim,
                         layout.class_count, rng_stream(config.seed, "init"))
    sampler_rng = rng_stream(config.seed, "sampler")
    commit_variant = "LDL-3" if variant == "pinned" else variant
    history = []
    for epoch in range(config.total_epochs):
        lr = scheduled_lr(config, epoch)
        totals = np.zeros(4)
        n_iter = 0
        for idx in pk_batches(dataset, layout, config.ids_per_domain_per_batch, config.images_per_id, sampler_rng):
            x, y = dataset.x[idx], dataset.class_ids[idx]
            feats, logits, cache = forward(params, x)
            targets = engine.targets(y) if uses_targets else None
            br, probs, g_logits, g_feats = compute_losses(variant, config, logits, feats, y, targets)
            if engine is not None:
                engine.batch_update(y, probs, config.momentum_m)
            adam_step(params, backward(params, cache, g_logits, g_feats), lr)
            totals += (br.cls, br.tri, br.ldl, br.total)
            n_iter += 1
        if uses_targets:
            engine.commit_epoch(commit_variant)
        mean = totals / max(n_iter, 1)
        record = {
            "epoch": epoch,
            "lr": lr,
            "iterations": n_iter,
            "loss": {"cls": mean[0], "tri": mean[1], "ldl": mean[2], "total": mean[3], "lambda": config.lam},
            "ldl": _ldl_diagnostics(engine, variant) if uses_targets else {},
        }
        history.append(record)
        log.debug("epoch %d lr %.2e loss %.4f", epoch, lr, mean[3])
    return params, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    def pack(d):
        return {k: {"shape": list(v.shape), "data": [repr(float(t)) for t in v.ravel()]} for k, v in d.items()}

    doc = {
        "format_version": CHECKPOINT_VERSION,
        "step_count": params.step_count,
        "weights": pack(params.weights),
        "adam_m": pack(params.adam_m),
        "adam_v": pack(params.adam_v),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")

    def unpack(d):
        out = {}
        for k, entry in d.items():
            arr = np.array([float(t) for t in entry["data"]], dtype=float)
            out[k] = arr.reshape(entry["shape"])
        return out

    params = ModelParams(unpack(doc["weights"]), unpack(doc["adam_m"]), unpack(doc["adam_v"]), doc["step_count"])
    missing = set(PARAM_NAMES) - set(params.weights)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    return params, doc.get("extra", {})
