"""Class-similarity tracking and label-distribution construction.

The engine owns two C x C row-stochastic matrices:

* ``tracking`` is refreshed every iteration with a momentum average of the
  classifier's softmax outputs, one row per class.
* ``label_dist`` is committed from ``tracking`` once per epoch and then
  reshaped per variant (same-domain zeroing, cross-domain redistribution).
  Its rows are the soft targets for the label-distribution loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VARIANTS = ("LDL-1", "LDL-2", "LDL-3")
DEGENERATE_TOL = 1e-12
PROB_TOL = 1e-6


class InvalidLayout(ValueError):
    pass


class NotAProbabilityVector(ValueError):
    pass


class SameDomainQuery(ValueError):
    pass


class DegenerateSimilarity(ArithmeticError):
    pass


@dataclass(frozen=True)
class DomainLayout:
    """Partition of classes ``0..C-1`` into domains.

    Build it from ``phi``, the per-class domain index.  ``domain_count`` may be
    given explicitly; a domain that owns no class is rejected.
    """

    phi: tuple[int, ...]
    domain_count: int
    index_sets: tuple[tuple[int, ...], ...] = field(init=False)
    counts: tuple[int, ...] = field(init=False)

    def __init__(self, phi: Sequence[int], domain_count: int | None = None):
        phi = tuple(int(d) for d in phi)
        if len(phi) == 0:
            raise InvalidLayout("layout has no classes")
        if min(phi) < 0:
            raise InvalidLayout("negative domain index")
        k = max(phi) + 1 if domain_count is None else int(domain_count)
        if max(phi) >= k:
            raise InvalidLayout(f"domain index {max(phi)} >= domain_count {k}")
        index_sets = tuple(tuple(j for j, d in enumerate(phi) if d == dom) for dom in range(k))
        empty = [dom for dom, members in enumerate(index_sets) if not members]
        if empty:
            raise InvalidLayout(f"domains without classes: {empty}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "domain_count", k)
        object.__setattr__(self, "index_sets", index_sets)
        object.__setattr__(self, "counts", tuple(len(s) for s in index_sets))

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "DomainLayout":
        """Contiguous layout: the first ``counts[0]`` classes in domain 0, etc."""
        if any(int(n) < 1 for n in counts):
            raise InvalidLayout(f"every domain needs at least one class, got {list(counts)}")
        phi = [d for d, n in enumerate(counts) for _ in range(int(n))]
        return cls(phi, len(counts))

    @property
    def class_count(self) -> int:
        return len(self.phi)

    def cross_domains(self, i: int) -> list[int]:
        return [d for d in range(self.domain_count) if d != self.phi[i]]

    def same_domain_mask(self) -> np.ndarray:
        """Boolean C x C mask, True where (i, j) share a domain and j != i."""
        phi = np.asarray(self.phi)
        mask = phi[:, None] == phi[None, :]
        np.fill_diagonal(mask, False)
        return mask

    def to_dict(self) -> dict:
        return {"class_count": self.class_count, "domain_count": self.domain_count, "phi": list(self.phi)}


def _check_engine_layout(layout: DomainLayout) -> None:
    if layout.class_count < 2:
        raise InvalidLayout("need at least two classes")
    if layout.domain_count < 2:
        raise InvalidLayout("need at least two domains (redistribution divides by K-1)")


# --------------------------------------------------------------------------
# Pure row/matrix functions.  The engine methods below are thin wrappers.
# --------------------------------------------------------------------------

def zero_same_domain(matrix: np.ndarray, layout: DomainLayout) -> np.ndarray:
    out = np.array(matrix, dtype=float, copy=True)
    out[layout.same_domain_mask()] = 0.0
    return out


def domain_similarity_row(row: np.ndarray, layout: DomainLayout, i: int, d: int) -> float:
    """Mean of ``row`` over the classes of domain ``d`` (``d`` must differ from ``phi(i)``)."""
    if d == layout.phi[i]:
        raise SameDomainQuery(f"class {i} belongs to domain {d}")
    idx = list(layout.index_sets[d])
    return float(np.sum(np.asarray(row)[idx]) / layout.counts[d])


def redistribute(
    matrix: np.ndarray,
    layout: DomainLayout,
    variant: str = "LDL-3",
    pinned_diagonal: float | None = None,
) -> np.ndarray:
    """Turn a copy of the tracking matrix into a label-distribution set.

    ``LDL-1`` returns the copy unchanged.  ``LDL-2`` zeroes same-domain
    entries and rescales the cross-domain ones by one common factor.
    ``LDL-3`` zeroes same-domain entries and sets every cross-domain entry to
    ``l_j * (1 - l_i) / (s_i^{phi(j)} * sum of cross-domain class counts)``,
    which gives each cross domain mass proportional to its class count.

    With ``pinned_diagonal`` the diagonal is overwritten before reshaping
    (one-hot comparison protocol).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    out = np.array(matrix, dtype=float, copy=True)
    c = layout.class_count
    if out.shape != (c, c):
        raise ValueError(f"matrix shape {out.shape} does not match {c} classes")
    if pinned_diagonal is not None:
        np.fill_diagonal(out, float(pinned_diagonal))
    if variant == "LDL-1":
        return out

    out[layout.same_domain_mask()] = 0.0
    counts = np.asarray(layout.counts, dtype=float)
    for i in range(c):
        row = out[i]
        l_i = row[i]
        cross = layout.cross_domains(i)
        if variant == "LDL-2":
            idx = [j for d in cross for j in layout.index_sets[d]]
            total = float(np.sum(row[idx]))
            if total <= DEGENERATE_TOL:
                raise DegenerateSimilarity(f"class {i}: cross-domain mass {total:g}")
            row[idx] *= (1.0 - l_i) / total
            continue
        n_cross = float(np.sum(counts[cross]))
        for d in cross:
            idx = list(layout.index_sets[d])
            s = float(np.sum(row[idx]) / counts[d])
            if s <= DEGENERATE_TOL:
                raise DegenerateSimilarity(f"class {i}, domain {d}: similarity {s:g}")
            row[idx] = row[idx] * (1.0 - l_i) / (s * n_cross)
    return out


def per_domain_mass_row(row: np.ndarray, layout: DomainLayout, i: int) -> dict[int, float]:
    row = np.asarray(row)
    return {d: float(np.sum(row[list(layout.index_sets[d])])) for d in layout.cross_domains(i)}


def mass_law_residual(matrix: np.ndarray, layout: DomainLayout) -> float:
    """Largest deviation of per-domain mass from ``(1 - l_i) N_d / sum N``."""
    worst = 0.0
    counts = layout.counts
    for i in range(layout.class_count):
        cross = layout.cross_domains(i)
        n_cross = sum(counts[d] for d in cross)
        l_i = matrix[i, i]
        for d, mass in per_domain_mass_row(matrix[i], layout, i).items():
            worst = max(worst, abs(mass - (1.0 - l_i) * counts[d] / n_cross))
    return worst


@dataclass
class SimilarityRow:
    class_id: int
    domain_id: int
    similarities: dict[int, float]

    @property
    def diff(self) -> float:
        vals = list(self.similarities.values())
        return max(vals) - min(vals)


# --------------------------------------------------------------------------


class LDLEngine:
    """Holds the tracking matrix and the committed label-distribution set.

    Mutated only from the training loop.  ``snapshot()`` returns an
    immutable copy of the committed targets.
    """

    def __init__(self, layout: DomainLayout, pinned_diagonal: float | None = None):
        _check_engine_layout(layout)
        self.layout = layout
        c = layout.class_count
        self.tracking = np.full((c, c), 1.0 / c)
        self.label_dist = np.full((c, c), 1.0 / c)
        self.committed_epoch = 0
        self.pinned_diagonal = pinned_diagonal
        # committed row with same-domain zeros, before cross-domain reshaping
        self._pre_redistribution = zero_same_domain(self.label_dist, layout)
        if pinned_diagonal is not None:
            # targets are usable from the first epoch under the pinned protocol
            self.label_dist = redistribute(self.tracking, layout, "LDL-3", pinned_diagonal)

    @property
    def class_count(self) -> int:
        return self.layout.class_count

    def momentum_update(self, i: int, prediction, m: float) -> None:
        p = np.asarray(prediction, dtype=float)
        self._check_prediction(p[None, :] if p.ndim == 1 else p, [i])
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {m}")
        p = p / p.sum()
        self.tracking[i] = (1.0 - m) * self.tracking[i] + m * p

    def _check_prediction(self, p: np.ndarray, classes) -> None:
        if p.ndim != 2 or p.shape[1] != self.class_count:
            raise NotAProbabilityVector(f"expected length {self.class_count}, got shape {p.shape}")
        sums = p.sum(axis=1)
        bad = ~np.isfinite(sums) | np.any(p < 0, axis=1) | (np.abs(sums - 1.0) > PROB_TOL)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise NotAProbabilityVector(f"prediction for class {classes[k]} is not a distribution (sum={sums[k]:g})")

    def batch_update(self, labels, probs, m: float) -> None:
        """Average the softmax outputs per class present, then one momentum step per class."""
        labels = np.asarray(labels, dtype=int)
        if labels.size == 0:
            return
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] != labels.size:
            raise NotAProbabilityVector(f"{labels.size} labels but predictions of shape {probs.shape}")
        classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
        means = np.zeros((classes.size, probs.shape[1]))
        np.add.at(means, inverse, probs)
        means /= counts[:, None]
        self._check_prediction(means, classes)
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {m}")
        means /= means.sum(axis=1, keepdims=True)
        self.tracking[classes] = (1.0 - m) * self.tracking[classes] + m * means

    def commit_epoch(self, variant: str = "LDL-3") -> None:
        layout = self.layout
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if self.pinned_diagonal is not None and variant != "LDL-3":
            raise ValueError("pinned diagonal is only defined for LDL-3")
        copied = self.tracking.copy()
        if self.pinned_diagonal is not None:
            np.fill_diagonal(copied, self.pinned_diagonal)
        pre = zero_same_domain(copied, layout)
        self.label_dist = redistribute(copied, layout, variant)
        self._pre_redistribution = pre
        self.committed_epoch += 1

    def targets(self, labels) -> np.ndarray:
        return self.label_dist[np.asarray(labels, dtype=int)]

    def snapshot(self) -> np.ndarray:
        snap = self.label_dist.copy()
        snap.setflags(write=False)
        return snap

    def domain_similarity(self, i: int, d: int) -> float:
        return domain_similarity_row(self._pre_redistribution[i], self.layout, i, d)

    def mean_cross_similarity(self, i: int) -> float:
        cross = self.layout.cross_domains(i)
        return sum(self.domain_similarity(i, d) for d in cross) / (self.layout.domain_count - 1)

    def per_domain_mass(self, i: int) -> dict[int, float]:
        return per_domain_mass_row(self.label_dist[i], self.layout, i)

    def similarity_report(self) -> list[SimilarityRow]:
        """Per-class mean tracking mass on each cross domain, with max-min spread."""
        return similarity_report(self.tracking, self.layout)


def similarity_report(tracking: np.ndarray, layout: DomainLayout) -> list[SimilarityRow]:
    rows = []
    for i in range(layout.class_count):
        sims = {d: domain_similarity_row(tracking[i], layout, i, d) for d in layout.cross_domains(i)}
        rows.append(SimilarityRow(i, layout.phi[i], sims))
    return rows


def similarity_summary(rows: list[SimilarityRow]) -> dict[str, float]:
    sims = [v for r in rows for v in r.similarities.values()]
    return {"mean_similarity": float(np.mean(sims)), "mean_diff": float(np.mean([r.diff for r in rows]))}


# --------------------------------------------------------------------------
# CSV snapshots
# --------------------------------------------------------------------------

MATRIX_MAGIC = "# ldl-matrix v1"


def save_matrix(path, matrix: np.ndarray, layout: DomainLayout, kind: str, epoch: int = 0) -> None:
    """One row per class: ``class_id, domain_id, p0..p{C-1}``; first line carries metadata."""
    c = layout.class_count
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"{MATRIX_MAGIC} kind={kind} class_count={c} domain_count={layout.domain_count} epoch={epoch}\n")
        w = csv.writer(fh)
        w.writerow(["class_id", "domain_id"] + [f"p{j}" for j in range(c)])
        for i in range(c):
            w.writerow([i, layout.phi[i]] + [repr(float(x)) for x in matrix[i]])


def load_matrix(path) -> tuple[np.ndarray, DomainLayout, dict[str, str]]:
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith(MATRIX_MAGIC):
            raise ValueError(f"{path}: not an ldl matrix file")
        meta = dict(tok.split("=", 1) for tok in first[len(MATRIX_MAGIC):].split())
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    phi = [int(r[1]) for r in rows]
    matrix = np.array([[float(x) for x in r[2:]] for r in rows])
    layout = DomainLayout(phi, int(meta["domain_count"]))
    if matrix.shape != (layout.class_count, layout.class_count):
        raise ValueError(f"{path}: matrix shape {matrix.shape} inconsistent with header")
    return matrix, layout, meta
