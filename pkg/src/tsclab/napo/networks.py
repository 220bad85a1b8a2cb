"""Neighbour-aware actor and privileged critic.

Actor: each of the five observation tokens (ego, N, S, E, W) is embedded by a
two-layer ReLU MLP and layer-normalized; the ego row queries the four
neighbour rows through masked multi-head attention; the concatenated head
outputs plus the ego row go through a GRU; a softmax head gives the phase
policy and a linear head predicts next-step queues on the 24 tracked lanes.

Critic: a separately parameterized copy of the same state encoder produces an
aggregated state feature. Neighbour actions (phase one-hot + slot one-hot)
are embedded and attended to with that feature as the query; the result is
added back, passed through its own GRU and read out by value and queue heads.
The ego agent's own action never enters the critic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor
from ..nn.layers import GRUCell, LayerNorm, Linear, Module, MultiHeadAttention
from ..sim.network import NUM_PHASES

N_NEIGHBORS = 4
N_TRACKED_LANES = 24
ACTION_TOKEN_DIM = NUM_PHASES + N_NEIGHBORS


@dataclass
class ActorOutput:
    policy: Tensor  # (..., 8) probabilities
    log_policy: Tensor
    prediction: Tensor  # (..., 24)
    hidden: Tensor  # (..., d) new recurrent state (last step for sequences)
    alpha: Tensor  # (..., heads, 4)
    hiddens: Tensor | None = None  # (T, B, d) for sequences


@dataclass
class CriticOutput:
    value: Tensor  # (...,)
    prediction: Tensor
    hidden: Tensor
    beta: Tensor
    hiddens: Tensor | None = None


def _zero_absent(tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero neighbour rows whose mask bit is clear, whatever they contained."""
    keep = np.concatenate([np.ones(mask.shape[:-1] + (1,), dtype=bool), mask.astype(bool)], axis=-1)
    return np.where(keep[..., None], tokens, 0.0)


class StateEncoder(Module):
    """Token embedding, shared layer norm and ego-query neighbour attention."""

    def __init__(self, token_dim: int, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.embed1 = Linear(token_dim, dim, rng)
        self.embed2 = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """tokens (B, 5, token_dim), mask (B, 4) -> features (B, d), alpha (B, H, 4)."""
        tokens = _zero_absent(np.asarray(tokens, dtype=float), np.asarray(mask))
        e = ad.relu(self.embed2(ad.relu(self.embed1(tokens))))
        e = self.norm(e)
        ego = e[:, 0]
        neigh = e[:, 1:]
        agg, alpha = self.attn(ego, neigh, neigh, np.asarray(mask, dtype=bool))
        return agg + ego, alpha


def _scan_gru(cell: GRUCell, x: Tensor, h0) -> tuple[Tensor, Tensor]:
    """Run ``cell`` over x (T, B, d_in) from h0 (B, d); returns all states (T, B, d) and the last."""
    xp = cell.input_part(x)
    h = ad.as_tensor(h0)
    states = []
    for t in range(x.shape[0]):
        h = cell.step(xp[t], h)
        states.append(h)
    return ad.stack(states, axis=0), h


class Actor(Module):
    def __init__(self, token_dim: int, dim: int = 128, heads: int = 8,
                 rng: np.random.Generator | None = None, n_actions: int = NUM_PHASES,
                 n_pred: int = N_TRACKED_LANES):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.token_dim = token_dim
        self.encoder = StateEncoder(token_dim, dim, heads, rng)
        self.gru = GRUCell(dim, dim, rng)
        self.policy_head = Linear(dim, n_actions, rng)
        self.pred_head = Linear(dim, n_pred, rng)

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.dim))

    def _check(self, tokens: np.ndarray, mask: np.ndarray) -> None:
        if tokens.shape[-2:] != (1 + N_NEIGHBORS, self.token_dim):
            raise ValueError(f"expected tokens (..., 5, {self.token_dim}), got {tokens.shape}")
        if mask.shape[-1] != N_NEIGHBORS or mask.shape[:-1] != tokens.shape[:-2]:
            raise ValueError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")

    def forward(self, tokens, mask, h) -> ActorOutput:
        """One decision step for a batch of agents: tokens (B, 5, D), mask (B, 4), h (B, d)."""
        tokens, mask = np.asarray(tokens, dtype=float), np.asarray(mask)
        self._check(tokens, mask)
        if np.shape(h) != (tokens.shape[0], self.dim):
            raise ValueError(f"hidden shape {np.shape(h)} != {(tokens.shape[0], self.dim)}")
        feat, alpha = self.encoder(tokens, mask)
        h_new = self.gru(feat, h)
        logits = self.policy_head(h_new)
        return ActorOutput(ad.softmax(logits), ad.log_softmax(logits), self.pred_head(h_new),
                           h_new, alpha)

    __call__ = forward

    def forward_sequence(self, tokens, mask, h0) -> ActorOutput:
        """Replay a sequence: tokens (T, B, 5, D), mask (T, B, 4), h0 (B, d)."""
        tokens, mask = np.asarray(tokens, dtype=float), np.asarray(mask)
        self._check(tokens, mask)
        T, B = tokens.shape[:2]
        feat, alpha = self.encoder(tokens.reshape(T * B, *tokens.shape[2:]),
                                   mask.reshape(T * B, N_NEIGHBORS))
        hs, h_last = _scan_gru(self.gru, feat.reshape(T, B, self.dim), h0)
        logits = self.policy_head(hs)
        return ActorOutput(ad.softmax(logits), ad.log_softmax(logits), self.pred_head(hs),
                           h_last, alpha.reshape(T, B, *alpha.shape[1:]), hs)


def neighbor_action_tokens(actions: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(..., 4) neighbour phase ids + presence mask -> (..., 4, 12) one-hot tokens.

    Absent slots are all-zero rows (no phase bit, no slot bit).
    """
    actions = np.asarray(actions, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(actions.shape + (ACTION_TOKEN_DIM,))
    safe = np.where(mask, actions, 0)
    np.put_along_axis(out, safe[..., None], 1.0, axis=-1)
    out[..., NUM_PHASES:] = np.eye(N_NEIGHBORS)
    return np.where(mask[..., None], out, 0.0)


class Critic(Module):
    def __init__(self, token_dim: int, dim: int = 128, heads: int = 8,
                 rng: np.random.Generator | None = None, n_pred: int = N_TRACKED_LANES):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(1)
        self.dim = dim
        self.token_dim = token_dim
        self.encoder = StateEncoder(token_dim, dim, heads, rng)
        self.action_embed = Linear(ACTION_TOKEN_DIM, dim, rng)
        self.query_norm = LayerNorm(dim)
        self.action_norm = LayerNorm(dim)
        self.action_attn = MultiHeadAttention(dim, heads, rng)
        self.gru = GRUCell(dim, dim, rng)
        self.value_head = Linear(dim, 1, rng)
        self.pred_head = Linear(dim, n_pred, rng)

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.dim))

    def _features(self, tokens, mask, neighbor_actions) -> tuple[Tensor, Tensor]:
        tokens, mask = np.asarray(tokens, dtype=float), np.asarray(mask)
        if tokens.shape[-2:] != (1 + N_NEIGHBORS, self.token_dim):
            raise ValueError(f"expected tokens (..., 5, {self.token_dim}), got {tokens.shape}")
        acts = neighbor_action_tokens(neighbor_actions, mask)
        h_s, _ = self.encoder(tokens, mask)
        e_a = self.action_norm(ad.relu(self.action_embed(acts)))
        agg, beta = self.action_attn(self.query_norm(h_s), e_a, e_a, np.asarray(mask, dtype=bool))
        return agg + h_s, beta

    def forward(self, tokens, mask, neighbor_actions, h) -> CriticOutput:
        """tokens (B, 5, D), mask (B, 4), neighbor_actions (B, 4) ints, h (B, d)."""
        feat, beta = self._features(tokens, mask, neighbor_actions)
        if np.shape(h) != (feat.shape[0], self.dim):
            raise ValueError(f"hidden shape {np.shape(h)} != {(feat.shape[0], self.dim)}")
        h_new = self.gru(feat, h)
        value = self.value_head(h_new)[..., 0]
        return CriticOutput(value, self.pred_head(h_new), h_new, beta)

    __call__ = forward

    def forward_sequence(self, tokens, mask, neighbor_actions, h0) -> CriticOutput:
        tokens, mask = np.asarray(tokens, dtype=float), np.asarray(mask)
        T, B = tokens.shape[:2]
        feat, beta = self._features(tokens.reshape(T * B, *tokens.shape[2:]),
                                    mask.reshape(T * B, N_NEIGHBORS),
                                    np.asarray(neighbor_actions).reshape(T * B, N_NEIGHBORS))
        hs, h_last = _scan_gru(self.gru, feat.reshape(T, B, self.dim), h0)
        value = self.value_head(hs)[..., 0]
        return CriticOutput(value, self.pred_head(hs), h_last,
                            beta.reshape(T, B, *beta.shape[1:]), hs)
