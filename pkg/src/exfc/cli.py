"""Command-line entry point: ``exfc gen | run | inspect | search-threshold | repeat``.

Configuration is a YAML document with the sections ``synthetic``,
``scenario``, ``store``, ``ilfr``, ``ssl`` and ``noise``. Any key can be
overridden on the command line as ``--section.key value`` or, when the key
name is unique across sections, ``--key value``. Flags win over the file.

Exit codes: 0 success, 2 usage or configuration error, 3 data-integrity
error, 4 numerical failure (singular covariance).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .data import load_dataset, write_dataset
from .errors import (
    ExfcError,
    ManifestError,
    ManifestMissingFileError,
    ProtocolError,
    ScenarioError,
    SingularMatrixError,
    StoreFormatError,
)
from .ilfr import IlfrConfig
from .metrics import aggregate, config_hash, export_report
from .prototypes import StoreConfig
from .scenario import NoiseSpec, ScenarioSpec, run_scenario, search_threshold
from .ssl import SslConfig
from .storage import read_store, write_store
from .synthetic import LayerSpec, SyntheticSpec, generate_synthetic

log = logging.getLogger("exfc")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_SINGULAR = 0, 2, 3, 4

_SCENARIO_KEYS = ("domain_order", "tasks_per_domain", "labeled_fraction", "ssl_protocol",
                  "batch_size", "classifier", "fusion_temperature")
SECTIONS = {
    "synthetic": tuple(f.name for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"),
    "scenario": _SCENARIO_KEYS,
    "store": tuple(f.name for f in dataclasses.fields(StoreConfig)),
    "ilfr": tuple(f.name for f in dataclasses.fields(IlfrConfig)),
    "ssl": tuple(f.name for f in dataclasses.fields(SslConfig)),
}


class UsageError(Exception):
    """Bad command line or configuration; maps to exit code 2."""


# -- configuration ---------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{p}: invalid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: config must be a mapping")
    for section in doc:
        if section not in SECTIONS and section != "noise":
            raise UsageError(f"{p}: unknown config section {section!r}")
    return doc


def _resolve_key(name: str) -> tuple[str, str]:
    name = name.replace("-", "_")
    if "." in name:
        section, key = name.split(".", 1)
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise UsageError(f"unknown config key --{name}")
        return section, key
    hits = [s for s, keys in SECTIONS.items() if name in keys]
    if not hits:
        raise UsageError(f"unknown option --{name}")
    if len(hits) > 1:
        raise UsageError(f"ambiguous option --{name}; use one of "
                         + ", ".join(f"--{s}.{name}" for s in hits))
    return hits[0], name


def apply_overrides(config: dict, extra: Sequence[str]) -> dict:
    """Fold ``--key value`` pairs into ``config``; values are parsed as YAML."""
    config = {k: (dict(v) if isinstance(v, dict) else v) for k, v in config.items()}
    items = list(extra)
    i = 0
    while i < len(items):
        tok = items[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            name, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise UsageError(f"option {tok} needs a value")
            name, raw = tok[2:], items[i + 1]
            i += 2
        section, key = _resolve_key(name)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        config.setdefault(section, {})[key] = value
    return config


def _section(config: dict, name: str) -> dict:
    sec = config.get(name) or {}
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    unknown = set(sec) - set(SECTIONS[name])
    if unknown:
        raise UsageError(f"unknown key(s) in section {name!r}: {', '.join(sorted(unknown))}")
    return sec


def synthetic_spec(config: dict, seed: int) -> SyntheticSpec:
    sec = dict(_section(config, "synthetic"))
    if "layers" in sec:
        sec["layers"] = tuple(LayerSpec(**l) if isinstance(l, dict) else LayerSpec(int(l))
                              for l in sec["layers"])
    try:
        return SyntheticSpec(seed=seed, **sec)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic config: {exc}") from None


def scenario_spec(config: dict, seed: int) -> ScenarioSpec:
    try:
        noise = tuple(NoiseSpec(**n) for n in (config.get("noise") or []))
        return ScenarioSpec(
            seed=seed,
            noise=noise,
            store=StoreConfig(**_section(config, "store")),
            ilfr=IlfrConfig(**{"k": 1, "normalize": False, **_section(config, "ilfr")}),
            ssl=SslConfig(**_section(config, "ssl")),
            **_section(config, "scenario"),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from None


def _apply_flags(config: dict, args) -> dict:
    if getattr(args, "no_ssl", False):
        config.setdefault("ssl", {})["enabled"] = False
    if getattr(args, "merge_mode", None):
        config.setdefault("store", {})["merge_mode"] = args.merge_mode
    if getattr(args, "ilfr_k", None) is not None:
        config.setdefault("ilfr", {})["k"] = args.ilfr_k
    if getattr(args, "noise_sigma", None) is not None:
        config["noise"] = [{"domain_id": args.noise_domain, "sigma": args.noise_sigma,
                            "applies_to": "test"}]
    return config


def parse_candidates(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if not text:
        raise UsageError("empty candidate list")
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0 or stop < start:
                raise UsageError(f"bad candidate range {text!r}")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse candidates {text!r}") from None


# -- commands --------------------------------------------------------------


def _dataset(args, config: dict, seed: int):
    if args.manifest:
        return load_dataset(args.manifest)
    return generate_synthetic(synthetic_spec(config, seed))


def cmd_gen(args, config) -> int:
    spec = synthetic_spec(config, args.seed)
    ds = generate_synthetic(spec)
    path = write_dataset(ds, args.out, args.format)
    n_files = sum(len(d.layers) for d in ds.manifest.domains)
    for dom in ds.manifest.domains:
        print(f"domain {dom.domain_id}: {len(dom.classes())} classes, {len(dom.tasks)} tasks, "
              f"{len(dom.samples)} samples, layer dims {dom.layer_dims}")
    print(f"wrote {path} and {n_files} feature files")
    return EXIT_OK


def cmd_run(args, config) -> int:
    spec = scenario_spec(config, args.seed)
    ds = _dataset(args, config, args.seed)
    result = run_scenario(spec, ds)
    out = Path(args.out)
    export_report(result.report, out)
    store_path = Path(args.store) if args.store else out / f"store_seed{args.seed}.exfc"
    store_path.parent.mkdir(parents=True, exist_ok=True)
    nbytes = write_store(result.store, store_path, args.precision)
    for p in result.report.points:
        fused = "" if p.fused_a_t is None else f"  fused {p.fused_a_t:.4f}"
        print(f"domain {p.domain_id} task {p.task_id}: a_t {p.accuracy.a_t:.4f}{fused}")
    for d, v in sorted(result.report.A_T.items()):
        print(f"A_T[{d}] = {v:.4f}")
    print(f"A_D = {result.report.A_D:.4f}")
    print(f"store: {store_path} ({nbytes} bytes)")
    return EXIT_OK


def cmd_inspect(args, config) -> int:
    path = Path(args.store)
    if not path.is_file():
        raise UsageError(f"store file not found: {path}")
    size = path.stat().st_size
    if size == 0:
        print(f"0 prototypes, {size} bytes")
        return EXIT_OK
    store = read_store(path)
    for key in store.keys():
        m = store[key].moments
        print(f"domain {key.domain_id} class {key.class_id}: count {m.count} dim {m.dim} "
              f"trace {float(np.trace(m.covariance())):.6g}")
    print(f"{len(store)} prototypes, {size} bytes")
    return EXIT_OK


def cmd_search_threshold(args, config) -> int:
    cands = parse_candidates(args.candidates)
    if not cands:
        raise UsageError("empty candidate list")
    spec = scenario_spec(config, args.seed)
    ds = _dataset(args, config, args.seed)
    res = search_threshold(ds, spec, cands)
    lines = ["threshold,accuracy,precision,matched,discarded,best"]
    for t in res.trials:
        lines.append(f"{t.threshold!r},{t.accuracy!r},{t.precision!r},{t.matched},{t.discarded},"
                     f"{int(t.threshold == res.best)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)
    print(f"best threshold {res.best!r}")
    return EXIT_OK


def cmd_repeat(args, config) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    reports = []
    out = Path(args.out)
    for seed in range(args.seed, args.seed + args.runs):
        spec = scenario_spec(config, seed)
        result = run_scenario(spec, _dataset(args, config, seed))
        export_report(result.report, out)
        reports.append(result.report)
        print(f"seed {seed}: A_D = {result.report.A_D:.4f}")
    agg = aggregate(reports)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"aggregate_seed{args.seed}x{args.runs}_{config_hash(reports[0].config)}.json"
    path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    print(f"A_D = {agg['A_D']['mean']:.4f} +/- {agg['A_D']['std']:.4f} over {args.runs} runs")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "inspect": cmd_inspect,
    "search-threshold": cmd_search_threshold,
    "repeat": cmd_repeat,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exfc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, required=True, help="RNG seed (mandatory)")
        if data:
            p.add_argument("--manifest", help="dataset manifest; synthetic data if omitted")
            p.add_argument("--no-ssl", action="store_true", help="disable pseudo-labeling")
            p.add_argument("--noise-sigma", type=float, help="test-time noise on --noise-domain")
            p.add_argument("--noise-domain", type=int, default=1)
            p.add_argument("--merge-mode", choices=("count_weighted", "paper_equal_weight"))
            p.add_argument("--ilfr-k", type=int)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("csv", "bin"), default="csv")

    p = sub.add_parser("run", help="train and evaluate one scenario")
    common(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--store", help="store file (default: inside --out)")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")

    p = sub.add_parser("inspect", help="summarize a store file")
    p.add_argument("store")

    p = sub.add_parser("search-threshold", help="grid search of the pseudo-label threshold")
    common(p)
    p.add_argument("--candidates", default="0.5:0.95:0.05")
    p.add_argument("--out", help="CSV table path")

    p = sub.add_parser("repeat", help="run several seeds and aggregate")
    common(p)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out", required=True, help="report directory")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ScenarioError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, SingularMatrixError):
        return EXIT_SINGULAR
    if isinstance(exc, (UsageError, ManifestMissingFileError, ProtocolError)):
        return EXIT_USAGE
    if isinstance(exc, (StoreFormatError, ManifestError)):
        return EXIT_INTEGRITY
    # other library errors are bad data; plain ValueErrors are bad config
    if isinstance(exc, ExfcError):
        return EXIT_INTEGRITY
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            if extra:
                raise UsageError(f"unexpected arguments: {' '.join(extra)}")
            config = {}
        else:
            config = apply_overrides(load_config(args.config), extra)
            config = _apply_flags(config, args)
        return COMMANDS[args.command](args, config)
    except (ExfcError, UsageError, ValueError) as exc:
        code = _exit_code(exc)
        print(f"exfc {args.command}: error: {exc}", file=sys.stderr)
        return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
