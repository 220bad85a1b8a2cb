"""Command-line entry point: ``tsclab <subcommand> [options]``.

Worker parallelism for seed sweeps is read from ``TSCLAB_WORKERS`` (default 1).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import experiments as ex
from .harness.config import ConfigError, load_config

log = logging.getLogger("tsclab")


def _seeds(text: str) -> list[int]:
    """Parse ``0,1,2`` or ``0-9`` (or a mix) into a list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsclab", description="Traffic signal control experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("-c", "--config", type=Path, help="experiment YAML file")
        sp.add_argument("-s", "--seeds", type=_seeds, help="seed list, e.g. 0-9 or 0,3,5")
        sp.add_argument("-o", "--out", type=Path, default=Path("runs"), help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, help="policy checkpoint (.npz)")

    sp = sub.add_parser("train", help="train a NAPO policy")
    common(sp, checkpoint=True)
    sp.add_argument("--episodes", type=int, help="override the configured episode count")
    sp.add_argument("--state", help="override the state representation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate the configured controller")
    common(sp, checkpoint=True)
    sp.add_argument("--controller", help="override the configured controller")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="evaluate rule-based and random baselines")
    common(sp)
    sp.add_argument("--controllers", default="fixed,maxpressure,advanced-mp,random")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("ablate-state", help="train one policy per state kind and seed")
    common(sp)
    sp.add_argument("--states", default="QDSE,VC")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("noise-sweep", help="evaluate a QDSE policy under sensor noise")
    common(sp, checkpoint=True)
    sp.add_argument("--sigmas", type=_floats, help="noise levels in metres, e.g. 0,10,20,30")
    sp.set_defaults(func=cmd_noise)

    sp = sub.add_parser("ingest-check", help="load CityFlow files and report totals")
    sp.add_argument("--roadnet", type=Path)
    sp.add_argument("--flow", type=Path, action="append", default=[])
    sp.add_argument("-o", "--out", type=Path)
    sp.set_defaults(func=cmd_ingest)
    return p


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg = cfg.replace(seeds=args.seeds)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    trainer = ex.run_train(cfg, args.out, resume=args.checkpoint, episodes=args.episodes,
                           state=args.state)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.episode} episodes; last travel time "
          f"{last.get('travel_time', float('nan')):.1f} s; checkpoint {args.out / 'final.npz'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    res = ex.run_eval(cfg, args.checkpoint, args.controller)
    ex.write_json(args.out / f"eval_{res['controller']}.json", res)
    rows = [{"metric": k, "mean": v["mean"], "std": v["std"]} for k, v in res["summary"].items()]
    print(ex.format_table(rows, ["metric", "mean", "std"]))
    if res["empty"]:
        print("note: no vehicles entered the network (empty flow)")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load(args)
    kinds = [k.strip() for k in args.controllers.split(",") if k.strip()]
    results = ex.run_baselines(cfg, kinds)
    rows = []
    for kind, res in results.items():
        ex.write_json(args.out / f"baseline_{kind}.json", res)
        s = res["summary"]
        rows.append({"controller": kind, "travel_time": s["travel_time"]["mean"],
                     "tt_std": s["travel_time"]["std"], "queue": s["mean_queue"]["mean"],
                     "speed": s["mean_speed"]["mean"]})
    table = ex.format_table(rows, ["controller", "travel_time", "tt_std", "queue", "speed"])
    (args.out / "baselines.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    states = [s.strip() for s in args.states.split(",") if s.strip()]
    seeds = args.seeds or [0, 1, 2]
    res = ex.run_ablation(cfg, args.out, states, seeds, args.episodes)
    ex.write_json(args.out / "ablation.json", res)
    rows = [{"state": k, **{c: v[c] for c in ("episodes", "mean_queue", "final_mean_queue",
                                              "travel_time")}} for k, v in res["states"].items()]
    print(ex.format_table(rows, ["state", "episodes", "mean_queue", "final_mean_queue",
                                 "travel_time"]))
    return 0


def cmd_noise(args) -> int:
    cfg = _load(args)
    if args.checkpoint is None:
        raise ConfigError("noise-sweep needs --checkpoint")
    res = ex.run_noise_sweep(cfg, args.checkpoint, args.sigmas)
    ex.write_json(args.out / "noise_sweep.json", res)
    table = ex.format_table(res["rows"], ["sigma", "travel_time", "travel_time_std",
                                          "degradation_pct"])
    (args.out / "noise_sweep.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_ingest(args) -> int:
    if args.roadnet is None and not args.flow:
        raise ConfigError("ingest-check needs --roadnet and/or --flow")
    res = ex.ingest_check(args.roadnet, args.flow)
    if args.out:
        ex.write_json(args.out, res)
    if "roadnet" in res:
        print(f"{res['roadnet']['path']}: {res['roadnet']['intersections']} intersections")
    for row in res["flows"]:
        print(f"{row['path']}: {row['vehicles']} vehicles")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"tsclab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
