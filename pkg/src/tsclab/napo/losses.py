"""Advantage estimation and the PPO loss terms."""

from __future__ import annotations

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor


class DataCorruption(ValueError):
    """Stored rollout data is inconsistent with the loss being computed."""


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates along axis 0.

    ``values`` has one more entry than ``rewards``: the bootstrap value after
    the last step (0 when the episode ended there).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    if values.shape[0] != T + 1:
        raise ValueError(f"need T+1 values for T rewards, got {values.shape[0]} for {T}")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def td_targets(rewards: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    """One-step targets r_t + gamma * V_{t+1}."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    return rewards + gamma * values[1:]


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_policy_loss(new_log_policy: Tensor, old_policy: np.ndarray, actions: np.ndarray,
                    advantages: np.ndarray, clip_eps: float) -> Tensor:
    """Negative clipped surrogate, averaged over all samples."""
    actions = np.asarray(actions, dtype=np.int64)
    old_p = np.take_along_axis(np.asarray(old_policy, dtype=float), actions[..., None], -1)[..., 0]
    if not (old_p > 0).all():
        raise DataCorruption("stored behaviour probability is 0 for a taken action")
    new_logp = ad.gather_last(new_log_policy, actions)
    ratio = ad.exp(new_logp - np.log(old_p))
    adv = np.asarray(advantages, dtype=float)
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -ad.mean(ad.minimum(unclipped, clipped))


def entropy_loss(policy: Tensor, log_policy: Tensor | None = None) -> Tensor:
    """Mean over samples of sum_a pi log pi (negative entropy; minimizing it spreads the policy)."""
    if log_policy is None:
        log_policy = ad.log(policy)
    per_sample = ad.tsum(policy * log_policy, axis=-1)
    return ad.mean(per_sample)


def value_loss(values: Tensor, targets: np.ndarray) -> Tensor:
    return ad.mean((values - np.asarray(targets, dtype=float)) ** 2)


def prediction_loss(pred: Tensor, truth: np.ndarray) -> Tensor:
    return ad.mean((pred - np.asarray(truth, dtype=float)) ** 2)
