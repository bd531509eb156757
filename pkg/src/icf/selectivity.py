"""Selectivity of a latent feature under an action, and the joint objective.

For a transition s -> s' with latent change dh = f(s') - f(s),

    sel(s, a, k) = |dh_k| / (sum_k' |dh_k'| + eps)      (undirected)
    sel(s, a, k) =  dh_k  / (sum_k' |dh_k'| + eps)      (directed)

and the per-policy reward is log(sel + eps_log) or log(max(1 + sel, eps_log)).
Both environments are deterministic, so the expectation over s' is a single
term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# extrinsic reward hook: r(state, action, next_state) -> float
RewardFn = Callable[[object, int, object], float]


@dataclass(frozen=True)
class SelectivityConfig:
    mode: str = "directed"
    denom_epsilon: float = 1e-8
    log_floor_epsilon: float = 1e-8
    lam: float = 0.1

    def __post_init__(self):
        if self.mode not in ("directed", "undirected"):
            raise ValueError(f"unknown selectivity mode {self.mode!r}")
        if self.denom_epsilon <= 0 or self.log_floor_epsilon <= 0:
            raise ValueError("selectivity epsilons must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.mode == "undirected" else (-1.0, 1.0)


def selectivity(h: Tensor, h_next: Tensor, k: int, config: SelectivityConfig) -> Tensor:
    """Selectivity of feature ``k``. Rows of a 2-D input are separate transitions."""
    h = h if isinstance(h, Tensor) else ad.tensor(h)
    h_next = h_next if isinstance(h_next, Tensor) else ad.tensor(h_next)
    if h.shape[-1] != h_next.shape[-1]:
        raise ValueError(f"feature vectors differ in length: {h.shape} vs {h_next.shape}")
    if not 0 <= k < h.shape[-1]:
        raise IndexError(f"feature index {k} out of range for {h.shape[-1]} features")
    delta = h_next - h
    denom = delta.abs().sum(axis=-1) + config.denom_epsilon
    num = delta[..., k]
    if config.mode == "undirected":
        num = num.abs()
    return num / denom


def selectivity_all(h: Tensor, h_next: Tensor, config: SelectivityConfig) -> Tensor:
    """All features at once: shape (..., n), entry k is sel for feature k."""
    delta = h_next - h
    denom = delta.abs().sum(axis=-1, keepdims=True) + config.denom_epsilon
    num = delta.abs() if config.mode == "undirected" else delta
    return num / denom


def disentanglement_reward(sel, config: SelectivityConfig):
    """log sel (undirected) or log(1 + sel) (directed), floored to stay finite.

    Accepts a Tensor (differentiable) or plain floats/arrays.
    """
    eps = config.log_floor_epsilon
    if isinstance(sel, Tensor):
        if config.mode == "undirected":
            return (sel + eps).log()
        return (sel + 1.0).clamp_min(eps).log()
    sel = np.asarray(sel, dtype=np.float64)
    if config.mode == "undirected":
        out = np.log(sel + eps)
    else:
        out = np.log(np.maximum(1.0 + sel, eps))
    return float(out) if out.ndim == 0 else out


def transition_batch(env, state) -> np.ndarray:
    """Observations of ``state`` followed by each successor: (1 + A, C, H, W)."""
    succ = env.successors(state)
    return np.stack([state.observation] + [t.observation for t in succ])


def encode_transitions(model, env, state) -> tuple[Tensor | None, Tensor, Tensor]:
    """One batched encoder pass; returns (trunk of s or None, h of s (n,), h' per action (A, n))."""
    x = ad.tensor(transition_batch(env, state))
    trunk, hs = model.features(x)
    trunk_s = None if trunk is None else trunk[0:1]
    return trunk_s, hs[0], hs[1:]


def extrinsic_rewards(env, state, reward_fn: RewardFn | None) -> np.ndarray | None:
    if reward_fn is None:
        return None
    return np.array([reward_fn(state, a, nxt) for a, nxt in enumerate(env.successors(state))],
                    dtype=np.float64)


def policy_objective(model, env, state, k: int, config: SelectivityConfig,
                     reward_fn: RewardFn | None = None) -> Tensor:
    """E_{a ~ pi_k(.|s)}[reward(sel(s, a, k)) (+ r(s, a, s'))] by enumeration over actions."""
    trunk, h, h_next = encode_transitions(model, env, state)
    x = ad.tensor(state.observation[None])
    probs = ad.softmax(model.policy_logits(x, k, trunk), axis=-1)[0]
    rewards = disentanglement_reward(selectivity(h, h_next, k, config), config)
    extra = extrinsic_rewards(env, state, reward_fn)
    if extra is not None:
        rewards = rewards + extra
    return (probs * rewards).sum()


def disentanglement_term(model, env, state, config: SelectivityConfig,
                         reward_fn: RewardFn | None = None) -> Tensor:
    """sum_k sum_a pi_k(a|s) reward(sel(s, a, k)), sharing one encoder pass."""
    trunk, h, h_next = encode_transitions(model, env, state)
    x = ad.tensor(state.observation[None])
    rewards = disentanglement_reward(selectivity_all(h, h_next, config), config)  # (A, n)
    extra = extrinsic_rewards(env, state, reward_fn)
    total = None
    for k in range(model.n_policies):
        probs = ad.softmax(model.policy_logits(x, k, trunk), axis=-1)[0]
        r_k = rewards[:, k]
        if extra is not None:
            r_k = r_k + extra
        term = (probs * r_k).sum()
        total = term if total is None else total + term
    return total


def joint_objective(model, state, env, config: SelectivityConfig,
                    reward_fn: RewardFn | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(recon_loss, disent_term, recon_loss - lambda * disent_term), all differentiable."""
    recon = model.reconstruction_loss(state.observation)
    disent = disentanglement_term(model, env, state, config, reward_fn)
    if config.lam == 0:
        return recon, disent, recon
    return recon, disent, recon - disent * config.lam
