"""Experiment configuration, orchestration and result persistence.

A config is a JSON object with a ``schema_version`` and a fixed set of
sections. Unknown sections or fields are rejected. Every run directory gets
the fully resolved config so it can be re-run on its own.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

from ufhlab.evolution import (
    ConfigError,
    EvolutionConfig,
    run_classic_tournament,
    run_regularized_evolution,
)
from ufhlab.hashing import HashConfig, hash_hex, unified_functional_hash
from ufhlab.metrics import (
    SCATTER_FIELDS,
    ExperimentSummary,
    mean_sem,
    paired_rows,
    run_counterfactual,
    summarize,
    write_csv,
    write_jsonl,
)
from ufhlab.scheduler import CostModel, Scheduler
from ufhlab.spaces import SPACES, EvalConfig, InvalidCandidate, Task, make_space

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "UFHLAB_OUTPUT_ROOT"

# section -> field -> (accepted types, default)
_NUM = (int, float)
SCHEMA: dict[str, dict[str, tuple]] = {
    "space": {
        "kind": ((str,), "program"),
        # remaining keys depend on the kind, see SPACE_FIELDS
    },
    "task": {
        "kind": ((str,), "affine_regression"),
        "seed": ((int,), 0),
        "meta_seed": ((int, type(None)), None),
    },
    "evaluation": {
        "n_train": ((int,), 100),
        "n_valid": ((int,), 20),
        "noise_sigma": (_NUM, 0.0),
        "c_eval": (_NUM, 1.0),
    },
    "evolution": {
        "controller": ((str,), "regularized"),
        "population_size": ((int,), 100),
        "tournament_size": ((int,), 10),
        "n_candidates": ((int,), 1000),
        "technique": ((str,), "none"),
        "forget_prob": (_NUM, 0.1),
        "max_evals": ((int,), 10),
        "tabulist_k": (_NUM + (type(None),), 3),
        "max_retry": ((int,), 32),
        "cache_capacity": ((int,), 1_000_000),
    },
    "hashing": {
        "m_bits": ((int,), 24),
        "n_examples": ((int,), 10),
        "n_seeds": ((int,), 3),
        "fixed_seed": ((int,), 0x5EED_F00D),
    },
    "cost": {
        "hash_cost": (_NUM, 10.0),
    },
    "scheduler": {
        "mode": ((str,), "serial"),
        "workers": ((int,), 1),
        "budget": (_NUM + (type(None),), None),
    },
    "counterfactual": {
        "tolerance": (_NUM, 1e-9),
    },
    "sweep": {
        "axes": ((dict,), {}),
        "techniques": ((list, type(None)), None),
        "baseline": ((str,), "none"),
        "max_runs": ((int,), 1000),
        "counterfactual": ((bool,), False),
    },
}
TOP_LEVEL = {"schema_version": ((int,), SCHEMA_VERSION), "seeds": ((list,), [0]),
             "output_dir": ((str, type(None)), None)}
SPACE_FIELDS = {
    "program": {"max_len": ((int, list), 8), "n_scalars": ((int,), 8), "n_vectors": ((int,), 8),
                "n_matrices": ((int,), 2), "dim": ((int,), 4)},
    "graph": {"max_v": ((int,), 20), "n_inputs": ((int,), 2)},
}
CONTROLLERS = ("regularized", "classic")


class HarnessIOError(OSError):
    pass


def _check_type(path: str, value, types) -> None:
    # bool is an int subclass; only accept it where bool is listed
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {_type_names(types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {_type_names(types)}, got {type(value).__name__}")


def _type_names(types) -> str:
    names = {int: "integer", float: "number", str: "string", list: "list", dict: "object",
             bool: "boolean", type(None): "null"}
    return " or ".join(names.get(t, t.__name__) for t in types)


def _fill(section: str, raw, fields: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown field")
    out = {}
    for key, (types, default) in fields.items():
        value = raw.get(key, copy.deepcopy(default))
        if key in raw:
            _check_type(f"{section}.{key}", value, types)
        out[key] = value
    return out


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and return it with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    known = set(SCHEMA) | set(TOP_LEVEL)
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    cfg = {}
    for key, (types, default) in TOP_LEVEL.items():
        value = raw.get(key, copy.deepcopy(default))
        if key in raw:
            _check_type(key, value, types)
        cfg[key] = value
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {cfg['schema_version']} "
                          f"(expected {SCHEMA_VERSION})")
    for section, fields in SCHEMA.items():
        if section == "space":
            sraw = raw.get("space", {})
            if not isinstance(sraw, dict):
                raise ConfigError("space: expected an object")
            kind = sraw.get("kind", "program")
            if kind not in SPACE_FIELDS:
                raise ConfigError(f"space.kind: must be one of {sorted(SPACE_FIELDS)}, got {kind!r}")
            cfg["space"] = _fill("space", sraw, {**fields, **SPACE_FIELDS[kind]})
        else:
            cfg[section] = _fill(section, raw.get(section, {}), fields)
    seeds = cfg["seeds"]
    if not seeds:
        raise ConfigError("seeds: must list at least one seed")
    for i, s in enumerate(seeds):
        _check_type(f"seeds[{i}]", s, (int,))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate seeds")
    _validate_semantics(cfg)
    return cfg


def _guard(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _validate_semantics(cfg: dict) -> None:
    build_space(cfg)
    build_task(cfg)
    _guard("evaluation", build_eval_config, cfg)
    _guard("hashing", build_hash_config, cfg)
    _guard("evolution", build_evolution_config, cfg, cfg["seeds"][0])
    if cfg["evolution"]["controller"] not in CONTROLLERS:
        raise ConfigError(f"evolution.controller: must be one of {CONTROLLERS}")
    _guard("scheduler", build_scheduler, cfg)
    if cfg["counterfactual"]["tolerance"] < 0:
        raise ConfigError("counterfactual.tolerance: must be non-negative")
    if cfg["sweep"]["max_runs"] < 1:
        raise ConfigError("sweep.max_runs: must be >= 1")


def build_space(cfg: dict):
    params = {k: v for k, v in cfg["space"].items() if k != "kind"}
    if isinstance(params.get("max_len"), list):
        params["max_len"] = tuple(params["max_len"])
    return _guard("space", make_space, cfg["space"]["kind"], **params)


def build_task(cfg: dict, seed: int | None = None) -> Task:
    t = cfg["task"]
    return _guard("task", Task, t["kind"], t["seed"] if seed is None else seed)


def meta_task(cfg: dict) -> Task:
    t = cfg["task"]
    meta_seed = t["meta_seed"] if t["meta_seed"] is not None else t["seed"] + 1
    return Task(t["kind"], meta_seed)


def build_eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig(**cfg["evaluation"])


def build_hash_config(cfg: dict) -> HashConfig:
    return HashConfig(**cfg["hashing"])


def build_evolution_config(cfg: dict, seed: int) -> EvolutionConfig:
    e = dict(cfg["evolution"])
    e.pop("controller")
    if e["tabulist_k"] is None:
        e["tabulist_k"] = math.inf
    ec = EvolutionConfig(seed=seed, **e)
    ec.validate()
    return ec


def build_scheduler(cfg: dict) -> Scheduler:
    s = cfg["scheduler"]
    budget = math.inf if s["budget"] is None else float(s["budget"])
    return Scheduler(s["mode"], s["workers"], budget, CostModel(float(cfg["cost"]["hash_cost"])))


def load_config(path: str | os.PathLike) -> dict:
    """Read and resolve a config file.

    Raises ConfigError (with a line number for JSON syntax errors) or
    HarnessIOError when the file cannot be read.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise HarnessIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return resolve_config(raw)


def output_root(cfg: dict, config_path: str | os.PathLike | None = None,
                override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    stem = Path(config_path).stem if config_path else "experiment"
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "ufhlab_runs")) / stem


# -- running ---------------------------------------------------------------------


@dataclass
class RunArtifacts:
    summary: ExperimentSummary
    result: object
    report: object = None


def execute(cfg: dict, seed: int, counterfactual: bool = False) -> RunArtifacts:
    """Run one seed of ``cfg`` in memory."""
    space = build_space(cfg)
    task = build_task(cfg)
    kwargs = dict(hash_config=build_hash_config(cfg), eval_config=build_eval_config(cfg))
    config = build_evolution_config(cfg, seed)
    scheduler = build_scheduler(cfg)
    report = None
    if counterfactual:
        if cfg["evolution"]["controller"] != "regularized":
            raise ConfigError("counterfactual runs use the regularized controller")
        report, result = run_counterfactual(space, task, config, scheduler,
                                            tolerance=cfg["counterfactual"]["tolerance"], **kwargs)
    elif cfg["evolution"]["controller"] == "classic":
        result = run_classic_tournament(space, task, config, scheduler, **kwargs)
    else:
        result = run_regularized_evolution(space, task, config, scheduler, **kwargs)
    return RunArtifacts(summarize(result, meta_task(cfg)), result, report)


def _write(path: Path, writer) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer(fh)
    except OSError as exc:
        raise HarnessIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _dump_json(obj):
    return lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_json(path: Path, obj) -> None:
    _write(path, _dump_json(obj))


def write_run(run_dir: Path, cfg: dict, seed: int, art: RunArtifacts) -> None:
    """The four per-seed files: time-course, events, summary and resolved config."""
    result = art.result
    search = result.search
    best = result.best
    key = best.key
    if key is None:
        key = unified_functional_hash(best.candidate, search.space, search.hash_config, task=search.task)
    summary = art.summary.to_dict()
    summary.update(schema_version=SCHEMA_VERSION, counters=result.counters,
                   best_hash=hash_hex(key), best_candidate=search.space.to_json(best.candidate))
    if art.report is not None:
        summary["collision_report"] = art.report.to_dict()
    resolved = dict(cfg, seeds=[seed])
    _write(run_dir / "timecourse.csv", result.timecourse.write_csv)
    _write(run_dir / "events.jsonl", lambda fh: write_jsonl(fh, search.events))
    _write(run_dir / "summary.json", _dump_json(summary))
    _write(run_dir / "config.json", _dump_json(resolved))


def run_seeds(cfg: dict, out: Path, counterfactual: bool = False) -> list[ExperimentSummary]:
    summaries = []
    for seed in cfg["seeds"]:
        art = execute(cfg, seed, counterfactual=counterfactual)
        write_run(out / f"seed_{seed}", cfg, seed, art)
        summaries.append(art.summary)
    return summaries


# -- sweeps ----------------------------------------------------------------------


def _set_path(cfg: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if not key or section not in SCHEMA or section == "sweep":
        raise ConfigError(f"sweep.axes.{dotted}: axis must be 'section.field'")
    cfg[section][key] = value


def sweep_cells(cfg: dict) -> list[tuple[str, dict, str, dict]]:
    """Expand the sweep into (config_id, point, technique, resolved config) cells."""
    sweep = cfg["sweep"]
    axes = sweep["axes"]
    names = sorted(axes)
    for name in names:
        values = axes[name]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.axes.{name}: must be a non-empty list")
    techniques = sweep["techniques"] or [cfg["evolution"]["technique"]]
    if not techniques:
        raise ConfigError("sweep.techniques: must be a non-empty list")
    points = list(itertools.product(*(axes[n] for n in names)))
    n_runs = len(points) * len(techniques) * len(cfg["seeds"])
    if n_runs > sweep["max_runs"]:
        raise ConfigError(f"sweep: {n_runs} runs exceed sweep.max_runs={sweep['max_runs']}")
    cells = []
    for i, values in enumerate(points):
        point = dict(zip(names, values))
        for technique in techniques:
            raw = copy.deepcopy(cfg)
            raw.pop("sweep")
            for name, value in point.items():
                _set_path(raw, name, value)
            raw["evolution"]["technique"] = technique
            try:
                resolved = resolve_config(raw)
            except ConfigError as exc:
                raise ConfigError(f"sweep point {point}, technique {technique}: {exc}") from None
            cells.append((f"p{i:03d}", point, technique, resolved))
    return cells


AGGREGATE_METRICS = ("auc", "final_fitness", "meta_validation_fitness", "best_fitness",
                     "hit_fraction", "collision_rate", "eval_calls")


def run_sweep(cfg: dict, out: Path) -> dict:
    cells = sweep_cells(cfg)
    use_cf = cfg["sweep"]["counterfactual"]
    scatter, by_cell, agg_rows = [], {}, []
    for config_id, point, technique, cell_cfg in cells:
        cf = use_cf and technique == "fec"
        summaries = run_seeds(cell_cfg, out / config_id / technique, counterfactual=cf)
        by_cell[(config_id, technique)] = summaries
        for s in summaries:
            scatter.append({"config_id": config_id, "technique": technique, "seed": s.seed,
                            "auc": s.auc, "hit_fraction": s.hit_fraction,
                            "collision_rate": s.collision_rate})
    auc_aggs = {}
    for (config_id, technique), summaries in by_cell.items():
        point = next(p for c, p, t, _ in cells if c == config_id)
        row = {"config_id": config_id, "technique": technique, "n": len(summaries),
               "point": json.dumps(point, sort_keys=True)}
        for metric in AGGREGATE_METRICS:
            values = [getattr(s, metric) for s in summaries]
            if len(values) >= 2:
                agg = mean_sem(values)
                row[f"{metric}_mean"], row[f"{metric}_sem"] = agg.mean, agg.sem
            else:
                row[f"{metric}_mean"], row[f"{metric}_sem"] = float(values[0]), math.nan
            if metric == "auc" and len(values) >= 2:
                auc_aggs[(config_id, technique)] = agg
        agg_rows.append(row)
    columns = ["config_id", "technique", "point", "n"] + [
        f"{m}_{s}" for m in AGGREGATE_METRICS for s in ("mean", "sem")]
    paired = paired_rows(auc_aggs, baseline=cfg["sweep"]["baseline"])
    _write(out / "aggregate.csv", lambda fh: write_csv(fh, agg_rows, columns))
    _write(out / "scatter.jsonl", lambda fh: write_jsonl(
        fh, ({k: r[k] for k in ("technique",) + SCATTER_FIELDS} for r in scatter)))
    _write(out / "paired.csv", lambda fh: write_csv(fh, paired, [
        "config_id", "technique", "baseline_auc", "baseline_sem", "technique_auc",
        "technique_sem", "n"]))
    _write(out / "config.json", _dump_json(cfg))
    return {"cells": len(cells), "runs": len(scatter), "aggregate": agg_rows, "paired": paired}


# -- replay ----------------------------------------------------------------------


def load_candidate(path: str | os.PathLike, space):
    """Read a candidate from a bare candidate JSON or a run's summary.json."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise HarnessIOError(f"cannot read candidate {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidCandidate(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if isinstance(data, dict) and "best_candidate" in data:
        data = data["best_candidate"]
    if not isinstance(data, dict):
        raise InvalidCandidate("candidate JSON must be an object")
    if data.get("space") != space.kind:
        raise InvalidCandidate(f"candidate is for space {data.get('space')!r}, "
                               f"config uses {space.kind!r}")
    return space.from_json(data)


def replay(cfg: dict, candidate_path, task_seed: int | None = None) -> dict:
    space = build_space(cfg)
    candidate = load_candidate(candidate_path, space)
    task = build_task(cfg, task_seed)
    eval_config = replace(build_eval_config(cfg), noise_sigma=0.0)
    record = space.evaluate(candidate, task, eval_config)
    key = unified_functional_hash(candidate, space, build_hash_config(cfg), task=task)
    return {"task_seed": task.seed, "fitness": record.fitness, "hash": hash_hex(key)}


__all__ = [
    "SCHEMA_VERSION", "OUTPUT_ROOT_ENV", "ConfigError", "HarnessIOError", "SPACES",
    "resolve_config", "load_config", "output_root", "execute", "write_run", "write_json",
    "run_seeds",
    "sweep_cells", "run_sweep", "load_candidate", "replay",
]
