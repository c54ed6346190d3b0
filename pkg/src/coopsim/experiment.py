"""Experiment matrices: variants x seeds, loaded from YAML and executed to run logs on disk."""
from __future__ import annotations

import copy
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .pipeline import RunConfig, run
from .scenario import GeneratorConfig, Scenario, generate_synthetic, load_scenario

DEFAULT_OUT = "coopsim_runs"
OUT_ENV = "COOPSIM_OUT"
SECTIONS = ("seeds", "scenario", "run", "variants")

DEFAULT_EXPERIMENT: dict[str, Any] = {
    "seeds": [0, 1, 2, 3, 4],
    "scenario": {"n_frames": 200, "n_agents": 20, "n_cavs": 3},
    "run": {},
    "variants": [
        {"label": "no_coop", "mode": "NoCooperation"},
        {"label": "perc_ideal_1x", "mode": "CooperativePerceptionOnly", "delay": False, "compression": 1},
        {"label": "perc_delay_1x", "mode": "CooperativePerceptionOnly", "delay": True, "compression": 1},
        {"label": "perc_delay_256x", "mode": "CooperativePerceptionOnly", "delay": True, "compression": 256},
        {"label": "pred_delay_256x", "mode": "CooperativePrediction", "delay": True, "compression": 256},
    ],
}


class ConfigError(ValueError):
    """Experiment configuration that cannot be turned into a matrix."""


@dataclass
class ExperimentMatrix:
    variants: list[tuple[str, RunConfig]]
    seeds: list[int]
    scenario: dict[str, Any] = field(default_factory=dict)
    out: Path = Path(DEFAULT_OUT)

    def __post_init__(self):
        if not self.variants or not self.seeds:
            raise ConfigError("experiment matrix needs at least one variant and one seed")
        labels = [v[0] for v in self.variants]
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            raise ConfigError(f"duplicate variant labels: {dupes}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be unique")

    def __len__(self) -> int:
        return len(self.variants) * len(self.seeds)

    def generator_config(self, seed_index: int) -> GeneratorConfig:
        d = dict(self.scenario)
        d.pop("file", None)
        cycle = d.pop("n_cavs_cycle", None)
        if cycle:
            d["n_cavs"] = cycle[seed_index % len(cycle)]
        return GeneratorConfig.from_dict(d)

    def scenario_for(self, seed_index: int) -> Scenario:
        if self.scenario.get("file"):
            return load_scenario(self.scenario["file"])
        return generate_synthetic(self.generator_config(seed_index), self.seeds[seed_index])


# ----------------------------------------------------------------------------
# config documents
# ----------------------------------------------------------------------------

def parse_value(text: str) -> Any:
    """YAML scalar semantics for ``--set`` values (``256`` -> int, ``false`` -> bool, ``[1, 2]`` -> list)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def parse_overrides(items: Sequence[str]) -> list[tuple[list[str], Any]]:
    out = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path = key.strip().split(".")
        if any(not p for p in path):
            raise ConfigError(f"override key {key!r} has an empty path component")
        if path[0] not in SECTIONS:
            path = ["run", *path]  # bare keys address the run config
        out.append((path, parse_value(value)))
    return out


def _set_path(doc: dict, path: list[str], value: Any) -> None:
    node = doc
    for p in path[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {p!r} is not a section")
        node = nxt
    node[path[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_document(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return copy.deepcopy(DEFAULT_EXPERIMENT)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}; expected {list(SECTIONS)}")
    # sections left out fall back to the built-in defaults
    return {**copy.deepcopy(DEFAULT_EXPERIMENT), **doc}


def build_matrix(
    doc: dict[str, Any],
    overrides: Sequence[str] = (),
    seed: int | None = None,
    out: str | Path | None = None,
) -> ExperimentMatrix:
    """Resolve a config document, CLI overrides and output location into a matrix.

    Overrides addressed to ``run.*`` (or bare keys) are applied after each
    variant's own settings, so a CLI flag always wins.
    """
    doc = copy.deepcopy(doc)
    run_over: dict[str, Any] = {}
    for path, value in parse_overrides(overrides):
        if path[0] == "run":
            if len(path) == 1:
                raise ConfigError("override must name a run config field, e.g. compression=256")
            _set_path(run_over, path[1:], value)
        else:
            _set_path(doc, path, value)

    seeds = doc.get("seeds")
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a list of integers (or a count)")
    if seed is not None:
        seeds = [seed]

    base = doc.get("run") or {}
    if not isinstance(base, dict):
        raise ConfigError("run must be a mapping of run config fields")
    variants = doc.get("variants")
    if not isinstance(variants, list) or not variants:
        raise ConfigError("variants must be a non-empty list")
    resolved = []
    for i, v in enumerate(variants):
        if not isinstance(v, dict) or "label" not in v:
            raise ConfigError(f"variants[{i}] needs a label")
        fields = {k: val for k, val in v.items() if k != "label"}
        merged = _merge(_merge(base, fields), run_over)
        try:
            cfg = RunConfig.from_dict({**merged, "seed": 0})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"variant {v['label']!r}: {exc}") from None
        resolved.append((str(v["label"]), cfg))

    scen = doc.get("scenario") or {}
    if not isinstance(scen, dict):
        raise ConfigError("scenario must be a mapping")
    out_dir = Path(out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    matrix = ExperimentMatrix(resolved, seeds, scen, out_dir)
    try:
        for i in range(len(seeds)):
            if not scen.get("file"):
                matrix.generator_config(i).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None
    return matrix


def resolved_document(matrix: ExperimentMatrix) -> dict[str, Any]:
    """The fully expanded experiment, as written next to the logs."""
    return {
        "seeds": list(matrix.seeds),
        "scenario": copy.deepcopy(matrix.scenario),
        "variants": [{"label": label, **cfg.to_dict()} for label, cfg in matrix.variants],
    }


# ----------------------------------------------------------------------------
# execution
# ----------------------------------------------------------------------------

def log_path(out: Path, label: str, seed: int) -> Path:
    return out / "logs" / label / f"seed_{seed}.json"


def dump_log(log: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(_finite(log), sort_keys=True, separators=(",", ":")) + "\n")
    tmp.replace(path)


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


def _job(args) -> tuple[str, int, str | None]:
    matrix, label, cfg_dict, seed_index = args
    seed = matrix.seeds[seed_index]
    try:
        scenario = matrix.scenario_for(seed_index)
        cfg = RunConfig.from_dict({**cfg_dict, "seed": seed})
        dump_log(run(scenario, cfg), log_path(matrix.out, label, seed))
        return label, seed, None
    except Exception as exc:  # isolate failures per (variant, seed)
        return label, seed, f"{type(exc).__name__}: {exc}"


def execute(matrix: ExperimentMatrix, jobs: int = 1) -> list[tuple[str, int, str]]:
    """Run every (variant, seed) cell, writing one log per cell; returns the failures."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    matrix.out.mkdir(parents=True, exist_ok=True)
    (matrix.out / "experiment.yaml").write_text(yaml.safe_dump(resolved_document(matrix), sort_keys=True))
    tasks = [
        (matrix, label, cfg.to_dict(), i) for label, cfg in matrix.variants for i in range(len(matrix.seeds))
    ]
    if jobs == 1:
        results = [_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    return [(label, seed, err) for label, seed, err in results if err]
