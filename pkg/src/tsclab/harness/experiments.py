"""Experiment runners: baselines, evaluation, training, state ablation, noise sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import __version__
from ..controllers import (advanced_mp_decide, fixed_time_decide, max_pressure_decide,
                           policy_decide)
from ..encoding import StateConfig
from ..nn.checkpoint import CheckpointError, load_checkpoint
from ..napo.trainer import Trainer, _jsonable, build_networks
from ..sim.cityflow import ingest_flow, ingest_roadnet
from ..sim.engine import SimConfig
from ..sim.flow import ScheduledVehicle, expand_flows, synthetic_flow
from ..sim.network import NUM_PHASES, RoadNetwork, build_grid
from . import metrics
from .config import ExperimentConfig
from .env import TrafficEnv

log = logging.getLogger(__name__)

# Stream tags: every random stream is derived from (seed, tag[, episode]) so that
# changing one list of seeds never shifts another stream.
TRAIN_DEMAND, EVAL_DEMAND, EVAL_NOISE, RANDOM_POLICY = 7, 11, 13, 17

NOISE_LEVELS = (0.0, 10.0, 20.0, 30.0)


def workers() -> int:
    raw = os.environ.get("TSCLAB_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TSCLAB_WORKERS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn: Callable, items: Sequence) -> list:
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- construction ------------------------------------------------------------------


def make_network(cfg: ExperimentConfig) -> RoadNetwork:
    if "grid" in cfg.network:
        rows, cols = cfg.network["grid"]
        return build_grid(int(rows), int(cols))
    return ingest_roadnet(cfg.network["roadnet"])


def make_env(cfg: ExperimentConfig, net: RoadNetwork | None = None, state: str | None = None,
             noise_sigma: float = 0.0) -> TrafficEnv:
    net = net or make_network(cfg)
    return TrafficEnv(net, StateConfig(kind=state or cfg.state),
                      SimConfig(decision_interval=cfg.decision_interval),
                      horizon=cfg.horizon, noise_sigma=noise_sigma)


def demand(cfg: ExperimentConfig, net: RoadNetwork, seed: int, tag: int,
           episode: int | None = None) -> list[ScheduledVehicle]:
    """Vehicle schedule for one episode. File-based flows are deterministic."""
    if "flow" in cfg.flow:
        return expand_flows(net, ingest_flow(cfg.flow["flow"]), horizon=cfg.horizon)
    key = [seed, tag] if episode is None else [seed, tag, episode]
    return synthetic_flow(net, float(cfg.flow["synthetic"]), cfg.horizon,
                          np.random.default_rng(key))


# -- controllers -----------------------------------------------------------------------


class FixedTimeController:
    def __init__(self, plan):
        self.plan = [(int(p), float(d)) for p, d in plan]

    def reset(self, env: TrafficEnv, seed: int) -> None:
        pass

    def act(self, env: TrafficEnv) -> tuple[int, ...]:
        return fixed_time_decide(env.sim.clock, self.plan, env.n_agents).phases


class MaxPressureController:
    def reset(self, env, seed):
        pass

    def act(self, env):
        return max_pressure_decide(env.meas, env.net).phases


class AdvancedMPController:
    def __init__(self, effective_range: float | None = None):
        self.effective_range = effective_range

    def reset(self, env, seed):
        if self.effective_range is None:
            self._range = max(env.net.lane_speed) * env.sim_cfg.decision_interval
        else:
            self._range = self.effective_range

    def act(self, env):
        return advanced_mp_decide(env.meas, env.net, self._range).phases


class RandomController:
    """Uniform random phase per agent per decision step."""

    def reset(self, env, seed):
        self.rng = np.random.default_rng([seed, RANDOM_POLICY])

    def act(self, env):
        return tuple(int(a) for a in self.rng.integers(0, NUM_PHASES, env.n_agents))


class PolicyController:
    """Shared actor acting greedily; recurrent state reset at each episode."""

    def __init__(self, actor):
        self.actor = actor

    def reset(self, env, seed):
        self.h = self.actor.initial_hidden(env.n_agents)

    def act(self, env):
        tokens, mask = env.observe()
        decision, self.h, _ = policy_decide(tokens, mask, self.h, self.actor, "greedy")
        return decision.phases


def checkpoint_id(path: str | Path) -> dict:
    """File name and content digest; the directory is left out so that summaries
    of identical runs made in different places are byte-identical."""
    data = Path(path).read_bytes()
    return {"file": Path(path).name, "sha256": hashlib.sha256(data).hexdigest()}


def load_actor(checkpoint: str | Path, cfg: ExperimentConfig, token_dim: int):
    if not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    arrays, meta = load_checkpoint(checkpoint)
    if meta.get("token_dim") not in (None, token_dim):
        raise CheckpointError(f"checkpoint token dim {meta['token_dim']} does not match "
                              f"the configured network ({token_dim})")
    actor, _ = build_networks(token_dim, cfg.train)
    actor.load_state_dict({k[len("actor/"):]: v for k, v in arrays.items()
                           if k.startswith("actor/")})
    return actor


def make_controller(cfg: ExperimentConfig, env: TrafficEnv, kind: str | None = None,
                    checkpoint: str | Path | None = None):
    kind = kind or cfg.controller
    if kind == "fixed":
        return FixedTimeController(cfg.fixed_plan)
    if kind == "maxpressure":
        return MaxPressureController()
    if kind == "advanced-mp":
        return AdvancedMPController()
    if kind == "random":
        return RandomController()
    if kind == "napo":
        if checkpoint is None:
            raise CheckpointError("the napo controller needs a checkpoint")
        return PolicyController(load_actor(checkpoint, cfg, env.token_dim))
    raise ValueError(f"unknown controller {kind!r}")


# -- episodes and evaluation ------------------------------------------------------------


def run_episode(env: TrafficEnv, controller, schedule: Sequence[ScheduledVehicle], seed: int,
                noise_rng: np.random.Generator | None = None) -> dict:
    env.reset(schedule, noise_rng)
    controller.reset(env, seed)
    while not env.done:
        env.step(controller.act(env))
    row = env.episode_metrics()
    row["seed"] = seed
    row["intersections"] = env.intersection_stats()
    return row


def _eval_cell(args) -> dict:
    cfg, kind, checkpoint, seed, sigma = args
    env = make_env(cfg, noise_sigma=sigma)
    controller = make_controller(cfg, env, kind, checkpoint)
    noise_rng = np.random.default_rng([seed, EVAL_NOISE]) if sigma else None
    return run_episode(env, controller, demand(cfg, env.net, seed, EVAL_DEMAND), seed, noise_rng)


def run_eval(cfg: ExperimentConfig, checkpoint: str | Path | None = None,
             controller: str | None = None, seeds: Sequence[int] | None = None,
             noise_sigma: float = 0.0) -> dict:
    """Evaluate one controller over seeded episodes and summarize."""
    kind = controller or cfg.controller
    seeds = list(cfg.seeds if seeds is None else seeds)
    if kind == "napo" and (checkpoint is None or not Path(checkpoint).exists()):
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    rows = _map(_eval_cell, [(cfg, kind, checkpoint, s, noise_sigma) for s in seeds])
    summary = {key: metrics.summarize([r[key] for r in rows])
               for key in ("travel_time", "mean_queue", "mean_speed", "queue_std")}
    n_int = len(rows[0]["intersections"])
    per_int = []
    for i in range(n_int):
        means = [r["intersections"][i]["mean"] for r in rows]
        per_int.append({"intersection": i, **metrics.summarize(means)})
    return {
        "controller": kind,
        "checkpoint": checkpoint_id(checkpoint) if checkpoint else None,
        "noise_sigma": noise_sigma,
        "seeds": seeds,
        "version": __version__,
        "config": cfg.resolved(),
        "empty": all(r["empty"] for r in rows),
        "n_vehicles": int(sum(r["n_vehicles"] for r in rows)),
        "deferred": int(sum(r["deferred"] for r in rows)),
        "summary": summary,
        "intersections": per_int,
        "episodes": rows,
    }


def run_baselines(cfg: ExperimentConfig, kinds: Sequence[str] = ("fixed", "maxpressure",
                                                                  "advanced-mp", "random"),
                  seeds: Sequence[int] | None = None) -> dict[str, dict]:
    return {k: run_eval(cfg, controller=k, seeds=seeds) for k in kinds}


# -- training -----------------------------------------------------------------------------


def make_trainer(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                 state: str | None = None, seed: int | None = None) -> Trainer:
    train_cfg = cfg.train if seed is None else type(cfg.train)(**{**asdict(cfg.train),
                                                                   "seed": seed})
    env = make_env(cfg, state=state)
    net = env.net

    def schedule(episode: int) -> list[ScheduledVehicle]:
        return demand(cfg, net, train_cfg.seed, TRAIN_DEMAND, episode)

    return Trainer(env, train_cfg, schedule, out_dir)


def run_train(cfg: ExperimentConfig, out_dir: str | Path, resume: str | Path | None = None,
              episodes: int | None = None, state: str | None = None,
              seed: int | None = None) -> Trainer:
    """Train, writing ``curves.jsonl`` (one row per episode) and ``final.npz``.

    On resume the curve log is truncated to the checkpoint's episode count so
    the file matches an uninterrupted run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(cfg, out, state=state, seed=seed)
    log_path = out / "curves.jsonl"
    if resume is not None:
        trainer.load(resume)
        _write_rows(log_path, trainer.history)
    elif log_path.exists():
        log_path.unlink()
    trainer.run(episodes, log_path=log_path)
    trainer.save(out / "final.npz", {"config": cfg.resolved(), "version": __version__})
    return trainer


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")


def read_curves(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _ablation_cell(args) -> dict:
    cfg, state, seed, episodes, out_dir = args
    trainer = run_train(cfg, Path(out_dir) / f"{state}_seed{seed}", episodes=episodes,
                        state=state, seed=seed)
    return {"state": state, "seed": seed, "curves": trainer.history}


FINAL_WINDOW = 10  # episodes averaged for the queue level reached at the end of training


def final_queue(queue) -> float:
    """Mean queue over the last FINAL_WINDOW episodes; ``queue`` is (runs, episodes)."""
    queue = np.atleast_2d(np.asarray(queue, dtype=float))
    return float(queue[:, -FINAL_WINDOW:].mean())


def run_ablation(cfg: ExperimentConfig, out_dir: str | Path, states: Sequence[str] = ("QDSE", "VC"),
                 seeds: Sequence[int] = (0, 1, 2), episodes: int | None = None) -> dict:
    """Train one policy per (state kind, seed) and compare mean queue at matched episodes."""
    cells = [(cfg, s, seed, episodes, str(out_dir)) for s in states for seed in seeds]
    results = _map(_ablation_cell, cells)
    table = {}
    for state in states:
        runs = [r["curves"] for r in results if r["state"] == state]
        n = min(len(c) for c in runs)
        queue = np.array([[row["mean_queue"] for row in c[:n]] for c in runs])
        tt = np.array([[row["travel_time"] for row in c[:n]] for c in runs])
        table[state] = {"episodes": n, "mean_queue": float(queue.mean()),
                        "travel_time": float(np.nanmean(tt)),
                        "final_mean_queue": final_queue(queue),
                        "queue_curve": queue.mean(axis=0).tolist()}
    return {"seeds": list(seeds), "version": __version__, "config": cfg.resolved(),
            "states": table}


def run_noise_sweep(cfg: ExperimentConfig, checkpoint: str | Path,
                    sigmas: Sequence[float] | None = None,
                    seeds: Sequence[int] | None = None) -> dict:
    """Evaluate a clean-trained QDSE policy under D_fr sensor noise."""
    if cfg.state != "QDSE":
        raise ValueError("noise sweeps are defined only for the QDSE state")
    sigmas = list(NOISE_LEVELS if sigmas is None else sigmas)
    if 0.0 not in sigmas:
        sigmas = [0.0] + sigmas
    evals = {s: run_eval(cfg, checkpoint, "napo", seeds, noise_sigma=s) for s in sigmas}
    base = evals[0.0]["summary"]["travel_time"]["mean"]
    rows = []
    for s in sigmas:
        tt = evals[s]["summary"]["travel_time"]
        rows.append({"sigma": s, "travel_time": tt["mean"], "travel_time_std": tt["std"],
                     "degradation_pct": (tt["mean"] - base) / base * 100.0})
    return {"checkpoint": checkpoint_id(checkpoint), "seeds": evals[0.0]["seeds"],
            "version": __version__, "config": cfg.resolved(), "rows": rows}


# -- ingestion ----------------------------------------------------------------------------


def ingest_check(roadnet: str | Path | None = None, flows: Sequence[str | Path] = ()) -> dict:
    """Load CityFlow files and report intersection and vehicle totals."""
    out: dict = {}
    net = None
    if roadnet is not None:
        net = ingest_roadnet(roadnet)
        out["roadnet"] = {"path": str(roadnet), "intersections": net.num_intersections,
                          "links": len(net.links)}
    out["flows"] = []
    for path in flows:
        entries = ingest_flow(path)
        row = {"path": str(path), "entries": len(entries),
               "vehicles": int(sum(len(e.departures()) for e in entries))}
        if net is not None:
            row["scheduled"] = len(expand_flows(net, entries))
        out["flows"].append(row)
    return out


# -- reporting -------------------------------------------------------------------------------


def write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return "" if v is None else str(v)
