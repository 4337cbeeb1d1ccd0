"""Synthetic multi-domain identity data and the per-domain PK sampler.

Each identity lives in exactly one domain.  A sample is generated as::

    x = A_d @ (P @ (mu_c + eps)) + b_d + v_{d, view}

with a shared latent-to-input projection ``P``, a per-domain style map
``A_d = I + shift * R_d`` and bias ``b_d = b_0 + shift * beta_d``, and a
per-(domain, view) offset standing in for a camera.  The last domain is the
held-out target.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .ldl_engine import DomainLayout


class InvalidSpec(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class SyntheticSpec:
    domain_count: int = 4
    classes_per_domain: tuple[int, ...] = (20, 20, 20, 20)
    samples_per_class: int = 24
    latent_dim: int = 16
    input_dim: int = 32
    identity_scale: float = 1.0
    within_class_noise: float = 0.7
    domain_shift: float = 1.0
    view_count: int = 4
    view_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        cpd = self.classes_per_domain
        if isinstance(cpd, int):
            cpd = (cpd,) * self.domain_count
        object.__setattr__(self, "classes_per_domain", tuple(int(n) for n in cpd))
        self.validate()

    @property
    def source_count(self) -> int:
        return self.domain_count - 1

    def validate(self) -> None:
        if self.domain_count < 2:
            raise InvalidSpec("need at least one source and one target domain")
        if len(self.classes_per_domain) != self.domain_count:
            raise InvalidSpec("classes_per_domain must list one count per domain")
        if any(n < 1 for n in self.classes_per_domain):
            raise InvalidSpec("every domain needs at least one class")
        if self.samples_per_class < 2:
            raise InvalidSpec("samples_per_class must be >= 2")
        if self.latent_dim < 1 or self.input_dim < self.latent_dim:
            raise InvalidSpec("need 1 <= latent_dim <= input_dim")
        if self.view_count < 2:
            raise InvalidSpec("view_count must be >= 2 to form query/gallery splits")
        scales = (self.identity_scale, self.within_class_noise, self.domain_shift, self.view_noise)
        if any(s < 0 or not np.isfinite(s) for s in scales):
            raise InvalidSpec("scales must be finite and non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes_per_domain"] = list(self.classes_per_domain)
        return d


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable bundle of samples.

    ``class_ids`` are global; for a source dataset they run ``0..C-1`` and
    ``layout`` maps them to domains.  Target datasets carry no layout.
    """

    x: np.ndarray
    class_ids: np.ndarray
    domain_ids: np.ndarray
    view_ids: np.ndarray
    layout: DomainLayout | None = field(default=None, compare=False)

    def __post_init__(self):
        for arr in (self.x, self.class_ids, self.domain_ids, self.view_ids):
            arr.setflags(write=False)
        n = self.x.shape[0]
        if not (self.class_ids.shape == self.domain_ids.shape == self.view_ids.shape == (n,)):
            raise ValueError("sample arrays disagree in length")
        if self.layout is not None:
            phi = np.asarray(self.layout.phi)
            if self.class_ids.max() >= phi.size or np.any(phi[self.class_ids] != self.domain_ids):
                raise ValueError("class_ids inconsistent with the domain layout")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.class_ids[mask], self.domain_ids[mask], self.view_ids[mask])


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Return ``(source, target)``.  Deterministic in ``spec.seed``."""
    spec.validate()
    rng = rng_stream(spec.seed, "data")
    k_all, n_in, n_lat = spec.domain_count, spec.input_dim, spec.latent_dim

    # Draw every random quantity at unit scale so different shift/noise
    # settings share the same underlying draws.
    proj, _ = np.linalg.qr(rng.standard_normal((n_in, n_lat)))
    base_bias = rng.standard_normal(n_in)
    style = rng.standard_normal((k_all, n_in, n_in)) / np.sqrt(n_in)
    style_bias = rng.standard_normal((k_all, n_in))
    view_off = rng.standard_normal((k_all, spec.view_count, n_in))

    xs, cls, dom, views = [], [], [], []
    next_class = 0
    eye = np.eye(n_in)
    for d in range(k_all):
        a_d = eye + spec.domain_shift * style[d]
        b_d = base_bias + spec.domain_shift * style_bias[d]
        for _ in range(spec.classes_per_domain[d]):
            mu = spec.identity_scale * rng.standard_normal(n_lat)
            eps = spec.within_class_noise * rng.standard_normal((spec.samples_per_class, n_lat))
            v = np.arange(spec.samples_per_class) % spec.view_count
            z = (mu + eps) @ proj.T
            xs.append(z @ a_d.T + b_d + spec.view_noise * view_off[d, v])
            cls.append(np.full(spec.samples_per_class, next_class))
            dom.append(np.full(spec.samples_per_class, d))
            views.append(v)
            next_class += 1

    x = np.concatenate(xs)
    class_ids = np.concatenate(cls)
    domain_ids = np.concatenate(dom)
    view_ids = np.concatenate(views)
    is_src = domain_ids < spec.source_count
    layout = DomainLayout.from_counts(spec.classes_per_domain[: spec.source_count])
    source = Dataset(x[is_src], class_ids[is_src], domain_ids[is_src], view_ids[is_src], layout)
    target = Dataset(x[~is_src], class_ids[~is_src], domain_ids[~is_src], view_ids[~is_src])
    return source, target


def pk_batches(
    dataset: Dataset,
    layout: DomainLayout,
    ids_per_domain: int,
    images_per_id: int,
    seed: int | np.random.Generator,
) -> Iterator[np.ndarray]:
    """Yield index arrays, each holding ``ids_per_domain x images_per_id`` samples per domain.

    Each class's samples are shuffled and cut into chunks of ``images_per_id``
    (the last chunk is topped up by resampling).  Every batch draws, per
    domain, the classes with the most unused chunks, ties broken at random,
    so every class appears before any class repeats.  The epoch stops when
    some domain can no longer supply ``ids_per_domain`` distinct classes.
    """
    if images_per_id < 2:
        raise InsufficientSamples("images_per_id must be >= 2 for triplet mining")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pools = []
    for d in range(layout.domain_count):
        if layout.counts[d] < ids_per_domain:
            raise InsufficientSamples(f"domain {d} has {layout.counts[d]} classes < {ids_per_domain} ids per batch")
        chunks = {}
        for c in layout.index_sets[d]:
            idx = np.flatnonzero(dataset.class_ids == c)
            if idx.size < images_per_id:
                raise InsufficientSamples(f"class {c} has {idx.size} samples < {images_per_id}")
            idx = rng.permutation(idx)
            pad = (-idx.size) % images_per_id
            if pad:
                idx = np.concatenate([idx, rng.choice(idx[: idx.size - (images_per_id - pad)], pad, replace=False)])
            chunks[c] = list(idx.reshape(-1, images_per_id))
        pools.append(chunks)

    while True:
        batch = []
        for chunks in pools:
            live = [c for c, rest in chunks.items() if rest]
            if len(live) < ids_per_domain:
                return
            remaining = np.array([len(chunks[c]) for c in live])
            order = np.lexsort((rng.random(len(live)), -remaining))
            for c in (live[i] for i in order[:ids_per_domain]):
                batch.append(chunks[c].pop())
        yield np.concatenate(batch)


def batches_per_epoch(layout: DomainLayout, samples_per_class: int, ids_per_domain: int, images_per_id: int) -> int:
    chunks = -(-samples_per_class // images_per_id)
    return min(n * chunks // ids_per_domain for n in layout.counts)


# --------------------------------------------------------------------------
# CSV import/export
# --------------------------------------------------------------------------

def save_dataset(path, ds: Dataset) -> None:
    dim = ds.x.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dim)] + ["class_id", "domain_id", "view_id"])
        for row, c, d, v in zip(ds.x, ds.class_ids, ds.domain_ids, ds.view_ids):
            w.writerow([repr(float(t)) for t in row] + [int(c), int(d), int(v)])


def load_dataset(path, layout: DomainLayout | None = None) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    dim = len(header) - 3
    if header[dim:] != ["class_id", "domain_id", "view_id"]:
        raise ValueError(f"{path}: unexpected header tail {header[dim:]}")
    x = np.array([[float(t) for t in r[:dim]] for r in rows]).reshape(len(rows), dim)
    ints = np.array([[int(t) for t in r[dim:]] for r in rows], dtype=int).reshape(len(rows), 3)
    return Dataset(x, ints[:, 0].copy(), ints[:, 1].copy(), ints[:, 2].copy(), layout)


def centroid_gap(ds: Dataset) -> float:
    """Mean pairwise distance between per-domain input centroids."""
    doms = np.unique(ds.domain_ids)
    cents = np.array([ds.x[ds.domain_ids == d].mean(axis=0) for d in doms])
    dists = [np.linalg.norm(cents[a] - cents[b]) for a in range(len(doms)) for b in range(a + 1, len(doms))]
    return float(np.mean(dists))

