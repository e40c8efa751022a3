"""Seeded Gaussian-cluster datasets shaped like a class x domain stream."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ortho_group

from .data import Dataset, DatasetManifest, DomainEntry, LayerEntry, SampleIndex, Task


class ConditioningWarning(UserWarning):
    """Too few samples per class for a well-conditioned covariance."""


@dataclass(frozen=True)
class LayerSpec:
    """One tapped layer.

    ``separation_scale`` multiplies the dataset separation for this layer.
    ``collapse`` > 1 makes consecutive groups of that many classes share one
    mean, so the layer carries no signal to tell them apart.
    """

    dim: int
    separation_scale: float = 1.0
    collapse: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"layer dim must be positive, got {self.dim}")
        if self.collapse < 1:
            raise ValueError("collapse must be at least 1")


@dataclass(frozen=True)
class SyntheticSpec:
    domains: int = 2
    tasks: int = 5
    classes_per_task: int = 2
    dim: int = 32
    separation: float = 10.0
    anisotropy: float = 2.0
    sigma: float = 1.0
    samples_per_class: int = 100
    objects_per_class: int = 3
    object_spread: float = 0.0
    test_fraction: float = 0.2
    # within-class noise multiplier for test samples (covariate shift)
    test_spread: float = 1.0
    seed: int = 0
    # per-layer structure; empty means a single layer of ``dim``
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)
    # per-domain override of ``separation``
    domain_separation: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.domains < 1 or self.tasks < 1 or self.classes_per_task < 1:
            raise ValueError("domains, tasks and classes_per_task must be positive")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.separation < 0 or self.sigma <= 0 or self.anisotropy < 1:
            raise ValueError("need separation >= 0, sigma > 0, anisotropy >= 1")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be at least 2")
        if self.objects_per_class < 1:
            raise ValueError("objects_per_class must be positive")
        if self.test_spread <= 0:
            raise ValueError("test_spread must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.domain_separation and len(self.domain_separation) != self.domains:
            raise ValueError("domain_separation needs one entry per domain")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "domain_separation", tuple(self.domain_separation))

    @property
    def num_classes(self) -> int:
        return self.tasks * self.classes_per_task

    @property
    def layer_specs(self) -> tuple[LayerSpec, ...]:
        return self.layers or (LayerSpec(self.dim),)


def class_means(n: int, dim: int, distance: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` points whose smallest pairwise distance is exactly ``distance``.

    Orthogonal directions on a sphere when ``dim >= n``; otherwise the most
    spread of several random direction draws, rescaled.
    """
    if n == 1 or distance == 0:
        return np.zeros((n, dim))
    if dim >= n:
        q = ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.ones((1, 1))
        return q[:n] * (distance / np.sqrt(2.0))
    best, best_gap = None, -1.0
    for _ in range(64):
        u = rng.standard_normal((n, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        gaps = np.linalg.norm(u[:, None] - u[None, :], axis=2)
        gap = gaps[np.triu_indices(n, 1)].min()
        if gap > best_gap:
            best, best_gap = u, gap
    if best_gap <= 0:
        raise ValueError("could not place distinct class means")
    return best * (distance / best_gap)


def _rotated_cov(dim: int, sigma: float, anisotropy: float, rng) -> np.ndarray:
    scales = rng.uniform(1.0, anisotropy, size=dim) * sigma**2
    if dim == 1:
        return np.diag(scales)
    q = ortho_group.rvs(dim, random_state=rng)
    return (q * scales) @ q.T


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build an in-memory dataset of Gaussian class clusters.

    Every (domain, layer, class) gets a cluster with an anisotropic rotated
    covariance. Samples cycle through ``objects_per_class`` object instances,
    each shifted by its own offset of scale ``object_spread * sigma``.
    The train/test split is shared by all domains, so test items pair up by
    (class, within-class index).
    """
    if spec.samples_per_class < max(l.dim for l in spec.layer_specs) / 4:
        warnings.warn(
            f"{spec.samples_per_class} samples per class for dim "
            f"{max(l.dim for l in spec.layer_specs)}: covariance will be poorly conditioned",
            ConditioningWarning,
            stacklevel=2,
        )
    root = np.random.SeedSequence(spec.seed)
    split_seed, *domain_seeds = root.spawn(1 + spec.domains)
    k, n = spec.num_classes, spec.samples_per_class

    tasks = [Task(t, tuple(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task)))
             for t in range(spec.tasks)]
    cls = np.repeat(np.arange(k), n)
    obj = np.tile(np.arange(n) % spec.objects_per_class, k)
    task = cls // spec.classes_per_task
    split_rng = np.random.default_rng(split_seed)
    is_test = np.zeros(k * n, dtype=bool)
    n_test = max(1, int(round(n * spec.test_fraction)))
    for c in range(k):
        is_test[c * n + split_rng.choice(n, n_test, replace=False)] = True

    domains, features = [], {}
    for d in range(spec.domains):
        rng = np.random.default_rng(domain_seeds[d])
        sep = spec.domain_separation[d] if spec.domain_separation else spec.separation
        layers, entries = [], []
        for li, ls in enumerate(spec.layer_specs):
            groups = -(-k // ls.collapse)
            means = class_means(groups, ls.dim, sep * ls.separation_scale * spec.sigma, rng)
            x = np.empty((k * n, ls.dim))
            for c in range(k):
                cov = _rotated_cov(ls.dim, spec.sigma, spec.anisotropy, rng)
                chol = np.linalg.cholesky(cov)
                offsets = rng.standard_normal((spec.objects_per_class, ls.dim)) * (
                    spec.object_spread * spec.sigma
                )
                z = rng.standard_normal((n, ls.dim)) @ chol.T
                rows = slice(c * n, (c + 1) * n)
                z[is_test[rows]] *= spec.test_spread
                x[rows] = means[c // ls.collapse] + offsets[obj[rows]] + z
            layers.append(x)
            entries.append(LayerEntry(li, ls.dim, f"domain{d}_layer{li}.csv"))
        features[d] = layers
        index = SampleIndex(task.copy(), cls.copy(), obj.copy(), is_test.copy())
        domains.append(DomainEntry(d, f"domain{d}", entries, list(tasks), index))
    return Dataset(DatasetManifest(domains, name=f"synthetic-seed{spec.seed}"), features)
