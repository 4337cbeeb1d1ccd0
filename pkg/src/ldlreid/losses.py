"""Loss terms with closed-form gradients.

Every loss returns ``(value, grad)``.  Batched inputs (2-D) are averaged over
rows, and the returned gradient already carries the ``1/N`` factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

LOG_CLAMP = 1e-12


class NonFiniteInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class InvalidEpsilon(ValueError):
    pass


class NoValidTriplet(ValueError):
    pass


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logits contain NaN or inf")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _soft_ce(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    n = probs.shape[0] if probs.ndim == 2 else 1
    loss = -np.sum(target * np.log(np.maximum(probs, LOG_CLAMP))) / n
    return float(loss), (probs - target) / n


def ldl_loss(probs, target_row) -> tuple[float, np.ndarray]:
    """Cross entropy against a soft target; gradient is w.r.t. the logits.

    ``p - l`` is the logit gradient only because each target row sums to one.
    """
    p = np.asarray(probs, dtype=float)
    l = np.asarray(target_row, dtype=float)
    if p.shape != l.shape:
        raise LengthMismatch(f"probs {p.shape} vs target {l.shape}")
    return _soft_ce(p, l)


def smoothed_targets(labels, num_classes: int, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise InvalidEpsilon(f"epsilon must lie in [0, 1), got {epsilon}")
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    y = np.full((labels.size, num_classes), epsilon / num_classes)
    y[np.arange(labels.size), labels] += 1.0 - epsilon
    return y


def smoothed_ce_loss(probs, label, epsilon: float = 0.1) -> tuple[float, np.ndarray]:
    """Label-smoothed cross entropy.  ``label`` is an int, or an int array for a batch."""
    p = np.asarray(probs, dtype=float)
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    n_rows = p.shape[0] if p.ndim == 2 else 1
    if labels.size != n_rows:
        raise LengthMismatch(f"{labels.size} labels for {n_rows} prediction rows")
    c = p.shape[-1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise LengthMismatch(f"label outside 0..{c - 1}")
    y = smoothed_targets(labels, c, epsilon)
    return _soft_ce(p, y if p.ndim == 2 else y[0])


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    return cdist(x, x)


def batch_hard_triplet(features, ids, margin: float = 0.3) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss on raw Euclidean distances.

    For each anchor the farthest positive and nearest negative are selected;
    the subgradient flows only through those pairs.  Coincident points get a
    zero distance derivative.
    """
    x = np.asarray(features, dtype=float)
    ids = np.asarray(ids)
    n = x.shape[0]
    if ids.shape != (n,):
        raise LengthMismatch(f"{ids.shape[0]} ids for {n} feature rows")
    dist = pairwise_distances(x)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not (pos_mask.any(axis=1).all() and neg_mask.any(axis=1).all()):
        raise NoValidTriplet("every anchor needs a positive and a negative in the batch")

    hard_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    rows = np.arange(n)
    d_pos = dist[rows, hard_pos]
    d_neg = dist[rows, hard_neg]
    hinge = np.maximum(0.0, margin + d_pos - d_neg)
    loss = math.fsum(hinge) / n

    grad = np.zeros_like(x)
    a = np.flatnonzero(hinge > 0)
    p, q = hard_pos[a], hard_neg[a]
    u = _unit(x[a] - x[p], d_pos[a])
    v = _unit(x[a] - x[q], d_neg[a])
    np.add.at(grad, a, u - v)
    np.add.at(grad, p, -u)
    np.add.at(grad, q, v)
    return loss, grad / n


def _unit(diff: np.ndarray, norm: np.ndarray) -> np.ndarray:
    out = np.zeros_like(diff)
    nz = norm > 0
    out[nz] = diff[nz] / norm[nz, None]
    return out


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    tri: float
    ldl: float
    total: float
    lam: float

    def as_dict(self) -> dict[str, float]:
        return {"cls": self.cls, "tri": self.tri, "ldl": self.ldl, "total": self.total, "lambda": self.lam}


def overall_loss(cls: float, tri: float, ldl: float, lam: float = 1.0, mode: str = "standard") -> LossBreakdown:
    """Combine the three terms.

    ``mode="distribution"`` is the one-hot comparison arm: the classification
    term is dropped and only ``tri + lam * ldl`` remains.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if mode == "distribution":
        cls = 0.0
    elif mode != "standard":
        raise ValueError(f"unknown composition mode {mode!r}")
    vals = (cls, tri, ldl, lam)
    if not all(np.isfinite(v) for v in vals):
        raise NonFiniteInput(f"non-finite loss component in {vals}")
    return LossBreakdown(float(cls), float(tri), float(ldl), float(cls + tri + lam * ldl), float(lam))
