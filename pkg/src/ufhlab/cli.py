"""``ufhlab`` command-line entry point.

Exit codes: 0 success, 2 invalid config or candidate, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from ufhlab.evolution import ConfigError
from ufhlab.harness import (
    HarnessIOError,
    execute,
    load_config,
    output_root,
    replay,
    resolve_config,
    run_seeds,
    run_sweep,
    write_json,
    write_run,
)
from ufhlab.spaces import InvalidCandidate

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _load(args) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg["seeds"] = args.seeds
        cfg = resolve_config(cfg)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = output_root(cfg, args.config, args.out)
    for s in run_seeds(cfg, out):
        print(f"seed {s.seed}: best={s.best_fitness:.6f} final={s.final_fitness:.6f} "
              f"auc={s.auc:.6f} hit_fraction={s.hit_fraction:.4f} evals={s.eval_calls}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = output_root(cfg, args.config, args.out)
    info = run_sweep(cfg, out)
    for row in info["paired"]:
        print(f"{row['config_id']} {row['technique']}: auc {row['technique_auc']:.6f} "
              f"vs baseline {row['baseline_auc']:.6f}")
    print(f"{info['runs']} runs; wrote {out}")
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    cfg = _load(args)
    if cfg["evolution"]["technique"] != "fec":
        raise ConfigError("evolution.technique: counterfactual runs require 'fec'")
    out = output_root(cfg, args.config, args.out)
    reports = []
    for seed in cfg["seeds"]:
        art = execute(cfg, seed, counterfactual=True)
        write_run(out / f"seed_{seed}", cfg, seed, art)
        rep = dict(art.report.to_dict(), seed=seed)
        reports.append(rep)
        print(f"seed {seed}: hits={rep['hits']} collisions={rep['collisions']} "
              f"collision_rate={rep['collision_rate']:.6g}")
    hits = sum(r["hits"] for r in reports)
    collisions = sum(r["collisions"] for r in reports)
    overall = {"schema_version": 1, "hits": hits, "collisions": collisions,
               "collision_rate": collisions / hits if hits else 0.0, "runs": reports}
    write_json(out / "collision_report.json", overall)
    print(f"overall collision_rate={overall['collision_rate']:.6g}; wrote {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args.config)
    res = replay(cfg, args.candidate, args.task_seed)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufhlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        if seeds:
            sp.add_argument("--out", help="output directory (overrides config and $UFHLAB_OUTPUT_ROOT)")
            sp.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds, e.g. 0,1,2")

    sp = sub.add_parser("run", help="run one experiment per seed")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a hyperparameter sweep")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("counterfactual", help="FEC run that re-evaluates every cache hit")
    common(sp)
    sp.set_defaults(func=cmd_counterfactual)

    sp = sub.add_parser("replay", help="re-evaluate a saved candidate")
    common(sp, seeds=False)
    sp.add_argument("--candidate", required=True, help="candidate JSON or a run's summary.json")
    sp.add_argument("--task-seed", type=int, default=None,
                    help="evaluate on this task seed instead of the config's (meta-validation)")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidCandidate) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HarnessIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
