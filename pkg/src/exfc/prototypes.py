"""Per-(domain, class) prototype store and the Mahalanobis classifier built on it."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DimensionError,
    EmptyInputError,
    MisalignedDomainsError,
    SingularMatrixError,
    StaleClassifierError,
    UnknownDomainError,
)
from .linalg import (
    MomentPack,
    SpdInverse,
    as_batch,
    batch_moments,
    invert_spd,
    mahalanobis_many,
    merge_moments,
    merge_moments_equal_weight,
    normalize_corr,
    shrink,
)

log = logging.getLogger(__name__)

MERGE_MODES = ("count_weighted", "paper_equal_weight")
METRICS = ("mahalanobis", "euclidean")


class EmptyBatchWarning(UserWarning):
    pass


class ClassKey(NamedTuple):
    domain_id: int
    class_id: int


@dataclass(frozen=True)
class StoreConfig:
    gamma1: float = 1.0
    gamma2: float = 1.0
    epsilon: float = 1e-8
    merge_mode: str = "count_weighted"

    def __post_init__(self):
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("shrinkage coefficients must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class Prototype:
    key: ClassKey
    moments: MomentPack
    first_seen_task: int = 0


class PrototypeStore:
    """Keyed prototypes plus the per-domain feature dimensions.

    Single writer: calls to :func:`observe_batch` must be serialized by the
    caller. Every mutation bumps ``generation`` so prepared classifiers can
    detect that they are stale.
    """

    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self.prototypes: dict[ClassKey, Prototype] = {}
        self.domain_dims: dict[int, int] = {}
        self.generation = 0

    def __len__(self):
        return len(self.prototypes)

    def __contains__(self, key):
        return ClassKey(*key) in self.prototypes

    def __getitem__(self, key) -> Prototype:
        return self.prototypes[ClassKey(*key)]

    def keys(self) -> list[ClassKey]:
        return sorted(self.prototypes)

    def domains(self) -> list[int]:
        return sorted({k.domain_id for k in self.prototypes})

    def class_ids(self, domain_id: int) -> list[int]:
        return sorted(k.class_id for k in self.prototypes if k.domain_id == domain_id)

    def register_domain(self, domain_id: int, dim: int) -> None:
        if dim < 1:
            raise DimensionError(f"domain {domain_id}: dimension must be positive")
        known = self.domain_dims.get(domain_id)
        if known is not None and known != dim:
            raise DimensionError(
                f"domain {domain_id} already registered with dim {known}, not {dim}"
            )
        self.domain_dims[domain_id] = dim

    def put(self, proto: Prototype) -> None:
        """Insert or replace a prototype verbatim (used by loaders)."""
        self.register_domain(proto.key.domain_id, proto.moments.dim)
        self.prototypes[proto.key] = proto
        self.generation += 1


def observe_batch(store: PrototypeStore, key, batch, task_id: int = 0) -> PrototypeStore:
    """Fold one labeled batch into the prototype for ``key``.

    The first batch of a class creates its prototype; later ones are merged
    under the store's ``merge_mode``. An empty batch is a no-op and emits an
    :class:`EmptyBatchWarning`.
    """
    key = ClassKey(*key)
    try:
        x = as_batch(batch)
    except EmptyInputError:
        warnings.warn(f"empty batch for {key}; nothing observed", EmptyBatchWarning, stacklevel=2)
        return store
    dim = store.domain_dims.get(key.domain_id)
    if dim is not None and x.shape[1] != dim:
        raise DimensionError(
            f"{key}: batch dim {x.shape[1]} does not match domain dim {dim}"
        )
    store.register_domain(key.domain_id, x.shape[1])
    new = batch_moments(x)
    old = store.prototypes.get(key)
    if old is None:
        store.prototypes[key] = Prototype(key, new, task_id)
    else:
        if store.config.merge_mode == "paper_equal_weight":
            merged = merge_moments_equal_weight(old.moments, new)
        else:
            merged = merge_moments(old.moments, new)
        store.prototypes[key] = Prototype(key, merged, old.first_seen_task)
    store.generation += 1
    return store


@dataclass(frozen=True)
class Prediction:
    """Ranked distances and softmax scores for one query.

    ``ranking`` is sorted by distance, ties by class id. ``scores`` is the
    softmax of negative distances keyed by class id.
    """

    ranking: tuple[tuple[int, float], ...]
    scores: dict[int, float]

    @property
    def winner(self) -> int:
        return self.ranking[0][0]

    @property
    def distances(self) -> dict[int, float]:
        return dict(self.ranking)


@dataclass(frozen=True)
class _DomainModel:
    class_ids: NDArray[np.int64]
    means: NDArray[np.float64]  # (k, d)
    inverses: tuple[SpdInverse | None, ...]


@dataclass(frozen=True)
class PreparedClassifier:
    """Immutable snapshot of the inverted class geometries of a store."""

    domains: dict[int, _DomainModel]
    gamma1: float
    gamma2: float
    epsilon: float
    metric: str
    generation: int
    _store: PrototypeStore | None = field(default=None, repr=False, compare=False)

    @property
    def keys(self) -> list[ClassKey]:
        return [
            ClassKey(d, int(c)) for d in sorted(self.domains) for c in self.domains[d].class_ids
        ]

    def check_fresh(self) -> None:
        if self._store is not None and self._store.generation != self.generation:
            raise StaleClassifierError(
                f"classifier prepared at generation {self.generation}, "
                f"store is now at {self._store.generation}"
            )

    def model(self, domain_id: int) -> _DomainModel:
        try:
            return self.domains[domain_id]
        except KeyError:
            raise UnknownDomainError(f"no prototypes for domain {domain_id}") from None

    def inverse(self, key) -> SpdInverse | None:
        key = ClassKey(*key)
        m = self.model(key.domain_id)
        idx = np.flatnonzero(m.class_ids == key.class_id)
        if idx.size == 0:
            raise KeyError(key)
        return m.inverses[idx[0]]


def prepare(
    store: PrototypeStore,
    gamma1: float | None = None,
    gamma2: float | None = None,
    epsilon: float | None = None,
    metric: str = "mahalanobis",
) -> PreparedClassifier:
    """Shrink, normalize and invert every class covariance of ``store``.

    Parameters default to the store's config. ``metric="euclidean"`` skips
    the covariance entirely and yields a nearest-class-mean classifier.

    Raises
    ------
    SingularMatrixError
        If a regularized covariance is still not positive definite; the
        error's ``key`` names the offending class.
    """
    if len(store) == 0:
        raise EmptyInputError("cannot prepare an empty store")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    cfg = store.config
    g1 = cfg.gamma1 if gamma1 is None else gamma1
    g2 = cfg.gamma2 if gamma2 is None else gamma2
    eps = cfg.epsilon if epsilon is None else epsilon

    domains = {}
    for d in store.domains():
        cids = store.class_ids(d)
        protos = [store.prototypes[ClassKey(d, c)] for c in cids]
        means = np.stack([p.moments.mean for p in protos])
        invs: list[SpdInverse | None] = []
        for p in protos:
            if metric == "euclidean":
                invs.append(None)
                continue
            reg = normalize_corr(shrink(p.moments.covariance(), g1, g2), eps)
            try:
                invs.append(invert_spd(reg))
            except SingularMatrixError as exc:
                raise SingularMatrixError(
                    f"class {tuple(p.key)}: regularized covariance is singular "
                    f"(smallest pivot {exc.smallest_pivot:.3e}); increase gamma1",
                    exc.smallest_pivot,
                    key=p.key,
                ) from None
        means.setflags(write=False)
        domains[d] = _DomainModel(np.asarray(cids, dtype=np.int64), means, tuple(invs))
    return PreparedClassifier(domains, g1, g2, eps, metric, store.generation, store)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EXFC_THREADS", "1")))
    except ValueError:
        return 1


def distance_matrix(prepared: PreparedClassifier, domain_id: int, queries) -> NDArray:
    """Squared distances of every query row to every class of the domain.

    Returns an ``(n, k)`` array whose columns follow
    ``prepared.domains[domain_id].class_ids``.
    """
    prepared.check_fresh()
    m = prepared.model(domain_id)
    x = as_batch(queries)
    if x.shape[1] != m.means.shape[1]:
        raise DimensionError(
            f"domain {domain_id}: query dim {x.shape[1]} != prototype dim {m.means.shape[1]}"
        )

    def column(j: int) -> NDArray:
        inv = m.inverses[j]
        if inv is None:
            diff = x - m.means[j]
            return np.einsum("ij,ij->i", diff, diff)
        return mahalanobis_many(x, m.means[j], inv)

    k = len(m.class_ids)
    threads = min(_threads(), k)
    if threads > 1 and x.shape[0] * k > 4096:
        with ThreadPoolExecutor(threads) as pool:
            cols = list(pool.map(column, range(k)))
    else:
        cols = [column(j) for j in range(k)]
    return np.stack(cols, axis=1)


def softmax_neg(distances: NDArray, temperature: float = 1.0) -> NDArray:
    z = -np.asarray(distances, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _argmin_rows(dist: NDArray) -> NDArray:
    # np.argmin returns the first minimum, i.e. the smallest class id because
    # columns are sorted by class id.
    return np.argmin(dist, axis=1)


def classify_many(prepared: PreparedClassifier, domain_id: int, queries) -> NDArray[np.int64]:
    """Winning class id for each query row."""
    dist = distance_matrix(prepared, domain_id, queries)
    return prepared.model(domain_id).class_ids[_argmin_rows(dist)]


def _prediction(class_ids: NDArray, dist: NDArray, scores: NDArray) -> Prediction:
    order = np.lexsort((class_ids, dist))
    ranking = tuple((int(class_ids[i]), float(dist[i])) for i in order)
    return Prediction(ranking, {int(c): float(s) for c, s in zip(class_ids, scores)})


def classify(prepared: PreparedClassifier, domain_id: int, x, temperature: float = 1.0) -> Prediction:
    """Rank all classes of ``domain_id`` by Mahalanobis distance to ``x``."""
    dist = distance_matrix(prepared, domain_id, np.asarray(x, dtype=np.float64)[None, :])[0]
    cids = prepared.model(domain_id).class_ids
    return _prediction(cids, dist, softmax_neg(dist, temperature))


def _aligned_columns(
    prepared: PreparedClassifier, domain_ids: Iterable[int], class_ids: Iterable[int] | None
) -> tuple[NDArray, dict[int, NDArray]]:
    domain_ids = list(domain_ids)
    if not domain_ids:
        raise EmptyInputError("late fusion needs at least one domain")
    per_domain = {d: prepared.model(d).class_ids for d in domain_ids}
    if class_ids is None:
        ref = per_domain[domain_ids[0]]
        for d, cids in per_domain.items():
            if not np.array_equal(cids, ref):
                raise MisalignedDomainsError(
                    f"domain {d} classes {cids.tolist()} differ from "
                    f"domain {domain_ids[0]} classes {ref.tolist()}"
                )
        target = ref
    else:
        target = np.asarray(sorted(set(int(c) for c in class_ids)), dtype=np.int64)
        for d, cids in per_domain.items():
            missing = np.setdiff1d(target, cids)
            if missing.size:
                raise MisalignedDomainsError(
                    f"domain {d} has no prototypes for classes {missing.tolist()}"
                )
    cols = {d: np.searchsorted(per_domain[d], target) for d in domain_ids}
    return target, cols


def fused_scores(
    prepared: PreparedClassifier,
    inputs: Mapping[int, object],
    class_ids: Iterable[int] | None = None,
    temperature: float = 1.0,
) -> tuple[NDArray, NDArray]:
    """Equal-weight average of per-domain softmax scores over query blocks.

    ``inputs`` maps domain id to an ``(n, d_domain)`` block; rows are paired
    across domains. Returns ``(class_ids, scores)`` with scores ``(n, k)``.
    """
    target, cols = _aligned_columns(prepared, inputs.keys(), class_ids)
    total = None
    for d, block in inputs.items():
        dist = distance_matrix(prepared, d, block)[:, cols[d]]
        s = softmax_neg(dist, temperature)
        total = s if total is None else total + s
    return target, total / len(inputs)


def classify_fused(
    prepared: PreparedClassifier,
    per_domain_inputs: Mapping[int, object],
    class_ids: Iterable[int] | None = None,
    temperature: float = 1.0,
) -> Prediction:
    """Late fusion of one paired query across domains.

    Without ``class_ids`` every domain must hold exactly the same class set;
    with it, each domain's prototypes are restricted to those classes.
    The ranking is by fused score (highest first) and the reported distance
    is ``1 - score`` so that ``winner`` stays the first entry.
    """
    blocks = {d: np.asarray(x, dtype=np.float64)[None, :] for d, x in per_domain_inputs.items()}
    target, scores = fused_scores(prepared, blocks, class_ids, temperature)
    s = scores[0]
    return _prediction(target, 1.0 - s, s)


def classify_fused_many(
    prepared: PreparedClassifier,
    inputs: Mapping[int, object],
    class_ids: Iterable[int] | None = None,
    temperature: float = 1.0,
) -> NDArray[np.int64]:
    target, scores = fused_scores(prepared, inputs, class_ids, temperature)
    # argmax picks the first maximum, the smallest class id on ties
    return target[np.argmax(scores, axis=1)]
