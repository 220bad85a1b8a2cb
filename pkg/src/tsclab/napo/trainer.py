"""Neighbour-aware PPO training loop with parameter sharing across agents.

Rollouts are cut into chunks of ``chunk_len`` decision steps (720 agent-steps
per update by default). Each chunk is replayed ``epochs`` times from the
recurrent states stored at its first step; advantages and one-step TD targets
are fixed before the epochs start. A chunk that ends mid-episode bootstraps
from the critic's value at the following step, which is computed before the
update is applied.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..controllers import policy_decide
from ..errors import TrainingFault
from ..nn import autodiff as ad
from ..nn.checkpoint import load_checkpoint, save_checkpoint
from ..nn.optim import Adam, NonFiniteGradient
from ..sim.flow import ScheduledVehicle
from . import losses as L
from .networks import Actor, Critic

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.98
    lam: float = 0.98
    clip_eps: float = 0.2
    epochs: int = 6
    batch_size: int = 720  # agent-steps per update
    lr_actor: float = 3e-4
    lr_critic: float = 5e-4
    ent_coef: float = 0.01
    pred_coef: float = 0.005
    value_coef: float = 0.5
    max_grad_norm: float = 10.0
    reward_scale: float = 0.01
    episodes: int = 100
    hidden: int = 128
    heads: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # episodes; 0 = only at the end

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")

    def chunk_len(self, n_agents: int) -> int:
        return max(1, self.batch_size // n_agents)


@dataclass
class Chunk:
    tokens: list = field(default_factory=list)
    mask: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    neighbor_actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    q_next: list = field(default_factory=list)
    h_actor0: np.ndarray | None = None
    h_critic0: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.stack(getattr(self, k)) for k in
                ("tokens", "mask", "actions", "probs", "neighbor_actions", "rewards", "values",
                 "q_next")}


def build_networks(token_dim: int, cfg: TrainConfig) -> tuple[Actor, Critic]:
    seq = np.random.SeedSequence([cfg.seed, 101])
    ra, rc = (np.random.default_rng(s) for s in seq.spawn(2))
    return (Actor(token_dim, cfg.hidden, cfg.heads, ra),
            Critic(token_dim, cfg.hidden, cfg.heads, rc))


def policy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 202])


class Trainer:
    """Owns the shared actor/critic, their optimizers and the rollout RNG."""

    def __init__(self, env, cfg: TrainConfig,
                 schedule_fn: Callable[[int], Sequence[ScheduledVehicle]],
                 out_dir: str | Path | None = None):
        self.env = env
        self.cfg = cfg
        self.schedule_fn = schedule_fn
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.actor, self.critic = build_networks(env.token_dim, cfg)
        self.opt_actor = Adam(self.actor.parameters(), cfg.lr_actor, max_grad_norm=cfg.max_grad_norm)
        self.opt_critic = Adam(self.critic.parameters(), cfg.lr_critic,
                               max_grad_norm=cfg.max_grad_norm)
        self.rng = policy_rng(cfg.seed)
        self.episode = 0
        self.history: list[dict] = []

    # -- persistence ----------------------------------------------------------

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for k, v in self.actor.state_dict().items():
            arrays[f"actor/{k}"] = v
        for k, v in self.critic.state_dict().items():
            arrays[f"critic/{k}"] = v
        for k, v in self.opt_actor.state_arrays().items():
            arrays[f"adam_actor/{k}"] = v
        for k, v in self.opt_critic.state_arrays().items():
            arrays[f"adam_critic/{k}"] = v
        return arrays

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {
            "episode": self.episode,
            "rng_state": self.rng.bit_generator.state,
            "token_dim": self.env.token_dim,
            "train_config": asdict(self.cfg),
            "state_kind": self.env.state_cfg.kind,
            "history": self.history,
        }
        meta.update(extra or {})
        return save_checkpoint(path, self.checkpoint_arrays(), _jsonable(meta))

    def load(self, path: str | Path) -> None:
        arrays, meta = load_checkpoint(path)
        self.load_arrays(arrays)
        self.episode = int(meta["episode"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.history = list(meta.get("history", []))

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        def part(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.actor.load_state_dict(part("actor/"))
        self.critic.load_state_dict(part("critic/"))
        self.opt_actor.load_state_arrays(part("adam_actor/"))
        self.opt_critic.load_state_arrays(part("adam_critic/"))

    # -- training -------------------------------------------------------------

    def run(self, episodes: int | None = None, log_path: str | Path | None = None,
            on_episode: Callable[[dict], None] | None = None) -> list[dict]:
        """Train until ``episodes`` total episodes have run (continues after a resume)."""
        target = self.cfg.episodes if episodes is None else episodes
        while self.episode < target:
            row = self.train_episode()
            self.history.append(row)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")
            if on_episode is not None:
                on_episode(row)
            every = self.cfg.checkpoint_every
            if self.out_dir is not None and every and self.episode % every == 0:
                self.save(self.out_dir / f"checkpoint_ep{self.episode:05d}.npz")
        return self.history

    def train_episode(self) -> dict:
        env, cfg = self.env, self.cfg
        env.reset(self.schedule_fn(self.episode))
        n = env.n_agents
        T = cfg.chunk_len(n)
        h_a = self.actor.initial_hidden(n)
        h_c = self.critic.initial_hidden(n)
        tokens, mask = env.observe()
        chunk = Chunk(h_actor0=h_a, h_critic0=h_c)
        pending: Chunk | None = None
        stats: list[dict] = []
        ep_reward = 0.0
        while not env.done:
            decision, h_a_next, probs = policy_decide(tokens, mask, h_a, self.actor, "sample",
                                                      self.rng)
            actions = np.array(decision.phases)
            na = env.neighbor_actions(actions)
            with ad.no_grad():
                cout = self.critic.forward(tokens, mask, na, h_c)
            value = cout.value.data.copy()
            if pending is not None:
                stats.append(self.update(pending, bootstrap=value))
                pending = None
            rewards = env.step(actions)
            ep_reward += float(rewards.sum())
            chunk.tokens.append(tokens)
            chunk.mask.append(mask)
            chunk.actions.append(actions)
            chunk.probs.append(probs)
            chunk.neighbor_actions.append(na)
            chunk.rewards.append(rewards)
            chunk.values.append(value)
            chunk.q_next.append(env.queue_targets())
            h_a, h_c = h_a_next, cout.hidden.data
            tokens, mask = env.observe()
            if len(chunk) == T and not env.done:
                pending = chunk
                chunk = Chunk(h_actor0=h_a, h_critic0=h_c)
        if pending is not None:
            # chunk cut exactly one step before the end: bootstrap from the last state
            with ad.no_grad():
                decision, _, _ = policy_decide(tokens, mask, h_a, self.actor, "greedy")
                v = self.critic.forward(tokens, mask, env.neighbor_actions(np.array(decision.phases)),
                                        h_c).value.data
            stats.append(self.update(pending, bootstrap=v))
        if len(chunk):
            stats.append(self.update(chunk, bootstrap=np.zeros(n)))
        self.episode += 1
        row = {"episode": self.episode, "reward": ep_reward / n}
        row.update(env.episode_metrics())
        for key in stats[0] if stats else ():
            row[key] = float(np.mean([s[key] for s in stats]))
        return row

    def update(self, chunk: Chunk, bootstrap: np.ndarray) -> dict:
        cfg = self.cfg
        d = chunk.arrays()
        rewards = d["rewards"] * cfg.reward_scale
        values = np.concatenate([d["values"], bootstrap[None]], axis=0)
        adv = L.compute_gae(rewards, values, cfg.gamma, cfg.lam)
        targets = L.td_targets(rewards, values, cfg.gamma)
        adv_n = L.normalize_advantages(adv)
        rec = {"policy_loss": [], "entropy": [], "value_loss": [], "pred_loss_actor": [],
               "pred_loss_critic": [], "grad_norm_actor": [], "grad_norm_critic": []}
        for _ in range(cfg.epochs):
            aout = self.actor.forward_sequence(d["tokens"], d["mask"], chunk.h_actor0)
            pl = L.ppo_policy_loss(aout.log_policy, d["probs"], d["actions"], adv_n, cfg.clip_eps)
            el = L.entropy_loss(aout.policy, aout.log_policy)
            pa = L.prediction_loss(aout.prediction, d["q_next"])
            actor_loss = pl + cfg.ent_coef * el + cfg.pred_coef * pa
            cout = self.critic.forward_sequence(d["tokens"], d["mask"], d["neighbor_actions"],
                                                chunk.h_critic0)
            vl = L.value_loss(cout.value, targets)
            pc = L.prediction_loss(cout.prediction, d["q_next"])
            critic_loss = cfg.value_coef * vl + cfg.pred_coef * pc
            for loss in (actor_loss, critic_loss):
                if not math.isfinite(loss.item()):
                    self._fault("non-finite loss")
            self.opt_actor.zero_grad()
            actor_loss.backward()
            self.opt_critic.zero_grad()
            critic_loss.backward()
            try:
                rec["grad_norm_actor"].append(self.opt_actor.step())
                rec["grad_norm_critic"].append(self.opt_critic.step())
            except NonFiniteGradient:
                self._fault("non-finite gradient")
            rec["policy_loss"].append(pl.item())
            rec["entropy"].append(-el.item())
            rec["value_loss"].append(vl.item())
            rec["pred_loss_actor"].append(pa.item())
            rec["pred_loss_critic"].append(pc.item())
        return {k: float(np.mean(v)) for k, v in rec.items()}

    def _fault(self, what: str) -> None:
        path = None
        if self.out_dir is not None:
            path = str(self.save(self.out_dir / f"fault_ep{self.episode:05d}.npz"))
        raise TrainingFault(f"{what} at episode {self.episode}", path)


def train(env, cfg: TrainConfig, schedule_fn, out_dir=None, resume: str | Path | None = None,
          log_path=None) -> Trainer:
    trainer = Trainer(env, cfg, schedule_fn, out_dir)
    if resume is not None:
        trainer.load(resume)
    trainer.run(log_path=log_path)
    return trainer


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else obj
    return obj
