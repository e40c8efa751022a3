"""The class-incremental x domain-incremental task loop.

Domains are trained one after another; inside a domain, tasks arrive in
order and each task streams its labeled batches, stocks the reference
buffer, then pseudo-labels its unlabeled batches. After every task the
classifier is re-prepared and evaluated on all classes seen so far.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, PROTOCOLS, class_rows, inject_noise, split_ssl
from .errors import ScenarioError
from .ilfr import IlfrConfig, build_block
from .metrics import EvalPoint, RunReport, TaskAccuracy, confusion_matrix
from .prototypes import (
    ClassKey,
    PrototypeStore,
    StoreConfig,
    classify_fused_many,
    classify_many,
    observe_batch,
    prepare,
)
from .ssl import (
    ReferenceBuffer,
    SslConfig,
    SslStats,
    ThresholdSearch,
    ThresholdTrial,
    apply_unlabeled_batch,
    end_task,
    grid_search_threshold,
    stock,
)

log = logging.getLogger(__name__)

CLASSIFIERS = ("exfc", "ncm", "joint")


@dataclass(frozen=True)
class NoiseSpec:
    domain_id: int
    sigma: float
    applies_to: str = "test"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.applies_to not in ("train", "test", "both"):
            raise ValueError("applies_to must be train, test or both")


@dataclass(frozen=True)
class ScenarioSpec:
    domain_order: tuple[int, ...] = ()
    tasks_per_domain: int | None = None
    labeled_fraction: float = 1.0
    ssl_protocol: str = "none"
    noise: tuple[NoiseSpec, ...] = ()
    seed: int = 0
    store: StoreConfig = field(default_factory=StoreConfig)
    ilfr: IlfrConfig = field(default_factory=lambda: IlfrConfig(k=1, normalize=False))
    ssl: SslConfig = field(default_factory=SslConfig)
    batch_size: int = 32
    classifier: str = "exfc"
    fusion_temperature: float = 1.0

    def __post_init__(self):
        if self.ssl_protocol not in PROTOCOLS:
            raise ValueError(f"ssl_protocol must be one of {PROTOCOLS}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}")
        if not self.fusion_temperature > 0:
            raise ValueError("fusion_temperature must be positive")
        object.__setattr__(self, "domain_order", tuple(self.domain_order))
        object.__setattr__(self, "noise", tuple(self.noise))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_order"] = list(self.domain_order)
        d["noise"] = [asdict(n) for n in self.noise]
        d["ilfr"]["target_dims"] = list(self.ilfr.target_dims)
        return d


@dataclass(frozen=True)
class StreamEvent:
    domain_id: int
    task_id: int
    batch_index: int
    kind: str  # "labeled" or "unlabeled"
    size: int


@dataclass
class ScenarioResult:
    report: RunReport
    store: PrototypeStore
    events: list[StreamEvent]
    ssl: dict[tuple[int, int], SslStats]
    # store snapshots (raw moments) after each task, keyed (domain, task)
    snapshots: dict[tuple[int, int], dict] = field(default_factory=dict)


def _representations(dataset: Dataset, spec: ScenarioSpec) -> dict[int, np.ndarray]:
    reps = {}
    for dom in dataset.manifest.domains:
        layers = [np.array(x, dtype=np.float64) for x in dataset.features[dom.domain_id]]
        is_test = dom.samples.is_test
        for nz in spec.noise:
            if nz.domain_id != dom.domain_id or nz.sigma == 0:
                continue
            rows = {"train": ~is_test, "test": is_test, "both": np.ones_like(is_test)}[nz.applies_to]
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, 0x4E, dom.domain_id, ("train", "test", "both").index(nz.applies_to)])
            )
            for x in layers:
                x[rows] = inject_noise(x[rows], nz.sigma, rng)
        reps[dom.domain_id] = build_block(layers, spec.ilfr)
    return reps


def _batches(rows: np.ndarray, size: int):
    for start in range(0, rows.size, size):
        yield rows[start : start + size]


def _snapshot(store: PrototypeStore) -> dict:
    return {
        k: (p.moments.count, p.moments.mean.tobytes(), p.moments.m2.tobytes())
        for k, p in store.prototypes.items()
    }


def _evaluate(
    prepared,
    reps: dict[int, np.ndarray],
    dataset: Dataset,
    seen: dict[int, list[int]],
    domain_id: int,
    task_id: int,
    spec: ScenarioSpec,
) -> EvalPoint:
    dom = dataset.manifest.domain(domain_id)
    idx = dom.samples
    classes = seen[domain_id]
    rows = class_rows(idx, classes, idx.is_test)
    winners = classify_many(prepared, domain_id, reps[domain_id][rows])
    truths = idx.cls[rows]
    acc = TaskAccuracy(domain_id, task_id, int((winners == truths).sum()), int(rows.size))
    per_task = {}
    for t in dom.tasks:
        sel = np.isin(truths, t.class_ids)
        if sel.any() and set(t.class_ids) <= set(classes):
            per_task[t.task_id] = (int((winners[sel] == truths[sel]).sum()), int(sel.sum()))

    cross = {}
    for other, other_classes in seen.items():
        if other == domain_id or not other_classes:
            continue
        oidx = dataset.manifest.domain(other).samples
        orows = class_rows(oidx, other_classes, oidx.is_test)
        ow = classify_many(prepared, other, reps[other][orows])
        cross[other] = (int((ow == oidx.cls[orows]).sum()), int(orows.size))

    fused = None
    partners = [d for d, cl in seen.items() if d != domain_id and set(classes) <= set(cl)]
    if partners:
        fused = _fused_accuracy(prepared, reps, dataset, [domain_id, *partners], classes, spec)
    return EvalPoint(acc, list(classes), confusion_matrix(winners, truths, classes),
                     per_task, cross, fused)


def _fused_accuracy(prepared, reps, dataset, domains, classes, spec) -> tuple[int, int]:
    """Pair test items across domains by (class, within-class index)."""
    blocks = {d: [] for d in domains}
    truths = []
    for c in classes:
        per_dom = []
        for d in domains:
            idx = dataset.manifest.domain(d).samples
            per_dom.append(np.flatnonzero(idx.is_test & (idx.cls == c)))
        m = min(r.size for r in per_dom)
        for d, r in zip(domains, per_dom):
            blocks[d].append(reps[d][r[:m]])
        truths.extend([c] * m)
    inputs = {d: np.concatenate(b) for d, b in blocks.items()}
    winners = classify_fused_many(prepared, inputs, classes, spec.fusion_temperature)
    truths = np.asarray(truths)
    return int((winners == truths).sum()), int(truths.size)


def run_scenario(spec: ScenarioSpec, dataset: Dataset, keep_snapshots: bool = False) -> ScenarioResult:
    """Train and evaluate the full stream described by ``spec``.

    Raises
    ------
    ScenarioError
        Wrapping whatever failed, tagged with the domain and task.
    """
    manifest = dataset.manifest
    order = list(spec.domain_order) or manifest.domain_ids
    reps = _representations(dataset, spec)
    unlabeled = split_ssl(manifest, spec.ssl_protocol, spec.labeled_fraction, spec.seed)
    store = PrototypeStore(spec.store)
    metric = "euclidean" if spec.classifier == "ncm" else "mahalanobis"
    joint = spec.classifier == "joint"
    events: list[StreamEvent] = []
    ssl_stats: dict[tuple[int, int], SslStats] = {}
    snapshots = {}
    points = []
    seen: dict[int, list[int]] = {}
    batch_index = 0

    for d in order:
        dom = manifest.domain(d)
        idx = dom.samples
        x = reps[d]
        train = ~idx.is_test
        tasks = dom.tasks[: spec.tasks_per_domain] if spec.tasks_per_domain else dom.tasks
        seen[d] = []
        for task in tasks:
            try:
                rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A, d, task.task_id]))
                buffer = ReferenceBuffer(
                    spec.ssl.capacity_per_class, task.task_id,
                    np.random.SeedSequence([spec.seed, 0xB0, d, task.task_id]),
                )
                lab_mask = train if joint else train & ~unlabeled[d]
                lab_rows = rng.permutation(class_rows(idx, task.class_ids, lab_mask))
                size = lab_rows.size if joint else spec.batch_size
                for rows in _batches(lab_rows, max(size, 1)):
                    events.append(StreamEvent(d, task.task_id, batch_index, "labeled", rows.size))
                    batch_index += 1
                    for c in sorted(set(idx.cls[rows].tolist())):
                        grp = x[rows[idx.cls[rows] == c]]
                        observe_batch(store, ClassKey(d, c), grp, task.task_id)
                        if spec.ssl.enabled and not joint:
                            stock(buffer, ClassKey(d, c), grp)

                stats = SslStats()
                unl_rows = rng.permutation(class_rows(idx, task.class_ids, train & unlabeled[d]))
                if spec.ssl.enabled and not joint and unl_rows.size:
                    for rows in _batches(unl_rows, spec.batch_size):
                        events.append(StreamEvent(d, task.task_id, batch_index, "unlabeled", rows.size))
                        batch_index += 1
                        _, s = apply_unlabeled_batch(store, buffer, x[rows], spec.ssl,
                                                     task.task_id, truth=idx.cls[rows])
                        stats.add(s)
                end_task(buffer)
                ssl_stats[(d, task.task_id)] = stats
                seen[d] = sorted(seen[d] + list(task.class_ids))

                prepared = prepare(store, metric=metric)
                point = _evaluate(prepared, reps, dataset, seen, d, task.task_id, spec)
                point.ssl = stats.to_dict()
                points.append(point)
                if keep_snapshots:
                    snapshots[(d, task.task_id)] = _snapshot(store)
                log.info("domain %d task %d: a_t=%.4f", d, task.task_id, point.accuracy.a_t)
            except Exception as exc:
                raise ScenarioError(
                    f"domain {d} task {task.task_id} failed: {exc}", d, task.task_id
                ) from exc

    report = RunReport.build(points, spec.seed, spec.to_dict())
    return ScenarioResult(report, store, events, ssl_stats, snapshots)


def search_threshold(
    dataset: Dataset, spec: ScenarioSpec, candidates: Sequence[float]
) -> ThresholdSearch:
    """Grid search of the pseudo-label threshold by downstream A_D."""

    def evaluate(threshold: float) -> ThresholdTrial:
        ssl = SslConfig(threshold, spec.ssl.capacity_per_class, True)
        res = run_scenario(replace(spec, ssl=ssl), dataset)
        total = SslStats()
        for s in res.ssl.values():
            total.add(s)
        return ThresholdTrial(threshold, res.report.A_D, total.precision, total.matched,
                              total.discarded)

    return grid_search_threshold(evaluate, candidates)

