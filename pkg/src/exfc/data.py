"""Dataset manifests, feature files and labeled/unlabeled split protocols.

A manifest is a YAML document listing domains, their tapped layers and one
feature file per layer, plus the ordered task list. Feature files are CSV
with header ``domain,task,class,object,split,layer,f0..f{d-1}``; rows of the
layer files of one domain are aligned (row ``i`` is the same sample in
every layer). Files ending in ``.bin`` use the binary feature records of
:mod:`exfc.storage` instead.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from numpy.typing import NDArray

from .errors import (
    ManifestClassError,
    ManifestDimensionError,
    ManifestEmptyError,
    ManifestError,
    ManifestMissingFileError,
    ProtocolError,
)
from .storage import FeatureRecord, load_features, save_features

MANIFEST_FORMAT = "exfc-manifest/1"
SPLITS = ("train", "test")
PROTOCOLS = ("none", "random_images", "unseen_objects")
META_COLUMNS = ["domain", "task", "class", "object", "split", "layer"]


@dataclass(frozen=True)
class Task:
    task_id: int
    class_ids: tuple[int, ...]


@dataclass(frozen=True)
class LayerEntry:
    layer_id: int
    dim: int
    file: str


@dataclass
class SampleIndex:
    """Per-sample metadata of one domain; position = row offset in its files."""

    task: NDArray[np.int64]
    cls: NDArray[np.int64]
    obj: NDArray[np.int64]
    is_test: NDArray[np.bool_]

    def __len__(self):
        return len(self.cls)

    @property
    def offset(self) -> NDArray[np.int64]:
        return np.arange(len(self.cls))

    def within_class_index(self, mask: NDArray[np.bool_]) -> NDArray[np.int64]:
        """Rank of each masked sample among masked samples of its class."""
        out = np.full(len(self.cls), -1, dtype=np.int64)
        for c in np.unique(self.cls[mask]):
            rows = np.flatnonzero(mask & (self.cls == c))
            out[rows] = np.arange(rows.size)
        return out


@dataclass
class DomainEntry:
    domain_id: int
    name: str
    layers: list[LayerEntry]
    tasks: list[Task]
    samples: SampleIndex | None = None

    @property
    def layer_dims(self) -> list[int]:
        return [l.dim for l in self.layers]

    def classes(self) -> list[int]:
        return sorted(c for t in self.tasks for c in t.class_ids)


@dataclass
class DatasetManifest:
    domains: list[DomainEntry]
    root: Path = field(default_factory=Path)
    name: str = "dataset"

    def domain(self, domain_id: int) -> DomainEntry:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"domain {domain_id} not in manifest")

    @property
    def domain_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]


@dataclass
class Dataset:
    """A manifest together with its feature arrays.

    ``features[domain_id]`` is a list of ``(n, d_layer)`` arrays, one per
    layer, rows aligned with the domain's :class:`SampleIndex`.
    """

    manifest: DatasetManifest
    features: dict[int, list[NDArray[np.float64]]]


def _check_tasks(tasks: list[Task], where: str) -> None:
    if not tasks:
        raise ManifestEmptyError(f"{where}: task list is empty")
    seen: dict[int, int] = {}
    ids = set()
    for t in tasks:
        if t.task_id in ids:
            raise ManifestClassError(f"{where}: task id {t.task_id} listed twice")
        ids.add(t.task_id)
        if not t.class_ids:
            raise ManifestEmptyError(f"{where}: task {t.task_id} has no classes")
        for c in t.class_ids:
            if c in seen:
                raise ManifestClassError(
                    f"{where}: class {c} appears in tasks {seen[c]} and {t.task_id}"
                )
            seen[c] = t.task_id


def _parse_tasks(raw, where: str) -> list[Task]:
    if raw is None:
        raise ManifestEmptyError(f"{where}: missing task list")
    try:
        tasks = [Task(int(t["id"]), tuple(int(c) for c in t["classes"])) for t in raw]
    except (TypeError, KeyError, ValueError) as exc:
        raise ManifestError(f"{where}: malformed task entry ({exc})") from None
    _check_tasks(tasks, where)
    return tasks


def parse_manifest(doc: dict, root: Path) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a mapping")
    fmt = doc.get("format", MANIFEST_FORMAT)
    if fmt != MANIFEST_FORMAT:
        raise ManifestError(f"unsupported manifest format {fmt!r}")
    global_tasks = doc.get("tasks")
    if global_tasks is not None:
        global_tasks = _parse_tasks(global_tasks, "manifest")
    raw_domains = doc.get("domains") or []
    if not raw_domains:
        raise ManifestEmptyError("manifest: no domains")
    domains = []
    for i, rd in enumerate(raw_domains):
        where = f"domain[{i}]"
        try:
            did = int(rd["id"])
            layers = [LayerEntry(int(l.get("id", j)), int(l["dim"]), str(l["file"]))
                      for j, l in enumerate(rd["layers"])]
        except (TypeError, KeyError, ValueError) as exc:
            raise ManifestError(f"{where}: malformed domain entry ({exc})") from None
        if not layers:
            raise ManifestEmptyError(f"{where}: no layers")
        for l in layers:
            if l.dim < 1:
                raise ManifestDimensionError(f"{where} layer {l.layer_id}: dim must be positive")
        if "tasks" in rd:
            tasks = _parse_tasks(rd["tasks"], where)
        elif global_tasks is not None:
            tasks = global_tasks
        else:
            raise ManifestEmptyError(f"{where}: no task list")
        domains.append(DomainEntry(did, str(rd.get("name", f"domain{did}")), layers, tasks))
    if len({d.domain_id for d in domains}) != len(domains):
        raise ManifestError("manifest: duplicate domain ids")
    return DatasetManifest(domains, root, str(doc.get("name", "dataset")))


def _read_csv_layer(path: Path, domain: DomainEntry, layer: LayerEntry):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestDimensionError(f"{path}: empty feature file") from None
        if header[:6] != META_COLUMNS:
            raise ManifestError(f"{path}:1: header must start with {','.join(META_COLUMNS)}")
        dim = len(header) - 6
        if dim != layer.dim:
            raise ManifestDimensionError(
                f"{path}:1: {dim} feature columns, manifest declares dim {layer.dim}"
            )
        meta, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6 + dim:
                raise ManifestDimensionError(
                    f"{path}:{lineno}: {len(row) - 6} values, expected {dim}"
                )
            try:
                d, t, c, o = (int(v) for v in row[:4])
                s = SPLITS.index(row[4])
                lay = int(row[5])
                vals.append([float(v) for v in row[6:]])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if d != domain.domain_id or lay != layer.layer_id:
                raise ManifestError(
                    f"{path}:{lineno}: row tagged domain {d} layer {lay}, expected "
                    f"domain {domain.domain_id} layer {layer.layer_id}"
                )
            meta.append((t, c, o, s))
    return np.asarray(meta, dtype=np.int64).reshape(-1, 4), np.asarray(vals, dtype=np.float64).reshape(-1, dim)


def _read_bin_layer(path: Path, domain: DomainEntry, layer: LayerEntry):
    records = [r for r in load_features(path.read_bytes())
               if r.domain_id == domain.domain_id and r.layer_id == layer.layer_id]
    records.sort(key=lambda r: r.sample_index)
    for r in records:
        if r.values.size != layer.dim:
            raise ManifestDimensionError(
                f"{path}: record {r.sample_index} has dim {r.values.size}, expected {layer.dim}"
            )
    meta = np.asarray([(r.task_id, r.class_id, r.object_id, SPLITS.index(r.split))
                       for r in records], dtype=np.int64).reshape(-1, 4)
    vals = np.stack([r.values for r in records]) if records else np.empty((0, layer.dim))
    return meta, vals


def _load_domain(manifest: DatasetManifest, dom: DomainEntry) -> list[NDArray]:
    layers, meta0 = [], None
    for layer in dom.layers:
        path = manifest.root / layer.file
        if not path.is_file():
            raise ManifestMissingFileError(
                f"domain {dom.domain_id} layer {layer.layer_id}: missing feature file {path}"
            )
        reader = _read_bin_layer if path.suffix == ".bin" else _read_csv_layer
        meta, vals = reader(path, dom, layer)
        if meta0 is None:
            meta0 = meta
        elif not np.array_equal(meta, meta0):
            raise ManifestError(
                f"{path}: sample metadata not aligned with the first layer file of "
                f"domain {dom.domain_id}"
            )
        layers.append(vals)
    if meta0 is None or len(meta0) == 0:
        raise ManifestEmptyError(f"domain {dom.domain_id}: no samples")
    task_of = {c: t.task_id for t in dom.tasks for c in t.class_ids}
    for i, (t, c, _, _) in enumerate(meta0):
        if task_of.get(int(c)) != int(t):
            raise ManifestClassError(
                f"domain {dom.domain_id} sample {i}: class {c} does not belong to task {t}"
            )
    dom.samples = SampleIndex(meta0[:, 0].copy(), meta0[:, 1].copy(), meta0[:, 2].copy(),
                              meta0[:, 3] == 1)
    return layers


def load_dataset(path) -> Dataset:
    """Parse a manifest, read every feature file and validate the whole index.

    Raises
    ------
    ManifestError
        Subclasses distinguish missing files, dimension mismatches, class
        assignment errors and empty task lists; messages carry locations.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestMissingFileError(f"manifest not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path}: invalid YAML ({exc})") from None
    manifest = parse_manifest(doc, path.parent)
    features = {d.domain_id: _load_domain(manifest, d) for d in manifest.domains}
    return Dataset(manifest, features)


def load_manifest(path) -> DatasetManifest:
    return load_dataset(path).manifest


def manifest_document(manifest: DatasetManifest) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "name": manifest.name,
        "domains": [
            {
                "id": d.domain_id,
                "name": d.name,
                "layers": [{"id": l.layer_id, "dim": l.dim, "file": l.file} for l in d.layers],
                "tasks": [{"id": t.task_id, "classes": list(t.class_ids)} for t in d.tasks],
            }
            for d in manifest.domains
        ],
    }


def _csv_layer_text(dom: DomainEntry, layer: LayerEntry, values: NDArray) -> str:
    s = dom.samples
    buf = io.StringIO()
    buf.write(",".join(META_COLUMNS + [f"f{i}" for i in range(layer.dim)]) + "\n")
    for i in range(len(s)):
        head = f"{dom.domain_id},{s.task[i]},{s.cls[i]},{s.obj[i]},{SPLITS[int(s.is_test[i])]},{layer.layer_id}"
        buf.write(head + "," + ",".join(repr(float(v)) for v in values[i]) + "\n")
    return buf.getvalue()


def write_dataset(dataset: Dataset, directory, fmt: str = "csv") -> Path:
    """Write features and ``manifest.yaml``; returns the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    for dom in manifest.domains:
        new_layers = []
        for layer, values in zip(dom.layers, dataset.features[dom.domain_id]):
            if fmt == "csv":
                name = f"domain{dom.domain_id}_layer{layer.layer_id}.csv"
                (out / name).write_text(_csv_layer_text(dom, layer, values))
            elif fmt == "bin":
                name = f"domain{dom.domain_id}_layer{layer.layer_id}.bin"
                s = dom.samples
                recs = [FeatureRecord(dom.domain_id, int(s.cls[i]), i, int(s.task[i]),
                                      int(s.obj[i]), layer.layer_id, SPLITS[int(s.is_test[i])],
                                      values[i]) for i in range(len(s))]
                (out / name).write_bytes(save_features(recs))
            else:
                raise ValueError(f"unknown feature format {fmt!r}")
            new_layers.append(LayerEntry(layer.layer_id, layer.dim, name))
        dom.layers = new_layers
    manifest.root = out
    path = out / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest_document(manifest), sort_keys=False))
    return path


def split_ssl(
    manifest: DatasetManifest, protocol: str, labeled_fraction: float = 1.0, seed: int = 0
) -> dict[int, NDArray[np.bool_]]:
    """Mark which training samples lose their labels.

    Returns, per domain, a boolean mask over the sample index that is true
    for unlabeled training samples. Test samples are never marked.

    ``random_images`` keeps ``round(n * labeled_fraction)`` random samples of
    each class labeled; ``unseen_objects`` moves every sample of one randomly
    chosen object instance per class to the unlabeled pool.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown SSL protocol {protocol!r}; choose from {PROTOCOLS}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ProtocolError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")
    out = {}
    for dom in manifest.domains:
        s = dom.samples
        mask = np.zeros(len(s), dtype=bool)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x55, dom.domain_id]))
        train = ~s.is_test
        for c in np.unique(s.cls):
            rows = np.flatnonzero(train & (s.cls == c))
            if protocol == "random_images":
                n_lab = int(round(rows.size * labeled_fraction))
                mask[rng.permutation(rows)[n_lab:]] = True
            elif protocol == "unseen_objects":
                objs = np.unique(s.obj[rows])
                if objs.size < 2:
                    raise ProtocolError(
                        f"domain {dom.domain_id} class {c}: unseen_objects needs at least "
                        f"2 object instances, found {objs.size}"
                    )
                held = rng.choice(objs)
                mask[rows[s.obj[rows] == held]] = True
        out[dom.domain_id] = mask
    return out


def inject_noise(batch, sigma: float, seed=0) -> NDArray[np.float64]:
    """Add i.i.d. zero-mean Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.array(batch, dtype=np.float64)
    if sigma == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


def class_rows(index: SampleIndex, classes: Sequence[int], mask: NDArray | None = None) -> NDArray:
    sel = np.isin(index.cls, list(classes))
    if mask is not None:
        sel &= mask
    return np.flatnonzero(sel)
