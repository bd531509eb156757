"""Interleaved autoencoder / policy-selectivity training.

One step, for a sampled state ``s``:

1. ``W_f -= lr_f * grad_{W_f} recon(s)``
2. ``W_g -= lr_g * grad_{W_g} recon(s)``
3. for each policy ``k``:
   ``W_f += lr_f * lam * grad_{W_f} J_k(s)`` then
   ``theta_k += lr_k * lam * grad_{theta_k} J_k(s)``

where ``J_k(s) = E_{a ~ pi_k}[reward(sel(s, a, k))]``. Every line recomputes its
gradient on the parameters as they stand when the line runs.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .environments import EnvConfig, GridWorld
from .models import Model, ModelConfig, build_model
from .selectivity import (
    RewardFn,
    SelectivityConfig,
    disentanglement_reward,
    encode_transitions,
    extrinsic_rewards,
    policy_objective,
    selectivity,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite values in {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    lr_f: float = 0.01
    lr_g: float = 0.01
    lr_k: float = 0.01
    lam: float = 0.1
    estimator: str = "exact"  # exact | reinforce
    reinforce_samples: int = 1
    seed: int = 0
    eval_interval: int = 1000
    batch_size: int = 1
    aggregate_policy_updates: bool = False
    probe_size: int = 256
    eval_seed: int = 12345

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if min(self.lr_f, self.lr_g, self.lr_k) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.estimator not in ("exact", "reinforce"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.reinforce_samples < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("reinforce_samples, batch_size and eval_interval must be >= 1")
        if self.probe_size < 1:
            raise ValueError("probe_size must be >= 1")


@dataclass
class StepRecord:
    step: int
    recon_loss: float
    disent_term: float
    entropies: np.ndarray
    blocked: int


@dataclass
class IntervalRecord:
    step: int
    recon_loss: float
    disent_term: float
    heldout_recon: float
    entropies: np.ndarray
    wall_clock: float
    blocked: int = 0


@dataclass
class TrainLog:
    n_policies: int
    records: list[IntervalRecord] = field(default_factory=list)
    recon_monotone: bool | None = None

    def header(self) -> list[str]:
        return (["step", "recon_loss", "disent_term", "heldout_recon", "blocked"]
                + [f"entropy_{k}" for k in range(self.n_policies)])

    def rows(self) -> list[list[str]]:
        return [[str(r.step), repr(r.recon_loss), repr(r.disent_term), repr(r.heldout_recon),
                 str(r.blocked)]
                + [repr(float(e)) for e in r.entropies] for r in self.records]

    def write_csv(self, path) -> None:
        # wall-clock stays out of the file so identical runs give identical bytes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            w.writerows(self.rows())


# ---------------------------------------------------------------------------
# parameter updates


def _apply(model: Model, names: list[str], grads: list[np.ndarray], scale: float) -> None:
    for n, g in zip(names, grads):
        p = model.params[n]
        p.data = p.data + scale * g


def _mean_grads(per_state: list[list[np.ndarray]]) -> list[np.ndarray]:
    if len(per_state) == 1:
        return per_state[0]
    return [sum(gs) / len(per_state) for gs in zip(*per_state)]


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _reinforce_surrogate(model: Model, env: GridWorld, state, k: int, config: SelectivityConfig,
                         actions: np.ndarray, reward_fn: RewardFn | None) -> ad.Tensor:
    """Mean over sampled actions of R(a) + stop(R(a)) * log pi_k(a|s).

    Its gradient is the score-function estimate of grad E_{a~pi_k}[R]: the
    first term carries the pathwise part through the encoder, the second the
    part through the policy.
    """
    trunk, h, h_next = encode_transitions(model, env, state)
    x = ad.tensor(state.observation[None])
    logp = ad.log_softmax(model.policy_logits(x, k, trunk), axis=-1)[0]
    rewards = disentanglement_reward(selectivity(h, h_next, k, config), config)
    extra = extrinsic_rewards(env, state, reward_fn)
    if extra is not None:
        rewards = rewards + extra
    counts = np.bincount(actions, minlength=env.num_actions) / len(actions)
    weights = counts * rewards.data
    return (rewards * counts).sum() + (logp * weights).sum()


def reinforce_gradient(model: Model, state, k: int, env: GridWorld, n_samples: int,
                       rng: np.random.Generator, config: SelectivityConfig,
                       reward_fn: RewardFn | None = None) -> dict[str, np.ndarray]:
    """Monte-Carlo estimate of grad_{theta_k} E_{a~pi_k}[reward]: mean of R(a) grad log pi_k(a|s)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    names = model.policy_group(k)
    with ad.no_grad():
        probs = model.policy_probs(state.observation, k).data
    actions = rng.choice(len(probs), size=n_samples, p=probs)
    with ad.no_grad():
        trunk, h, h_next = encode_transitions(model, env, state)
        rewards = disentanglement_reward(selectivity(h, h_next, k, config), config).data
    extra = extrinsic_rewards(env, state, reward_fn)
    if extra is not None:
        rewards = rewards + extra
    weights = np.bincount(actions, minlength=env.num_actions) / n_samples * rewards
    x = ad.tensor(state.observation[None])
    trunk = None if trunk is None else trunk.detach()
    logp = ad.log_softmax(model.policy_logits(x, k, trunk), axis=-1)[0]
    grads = ad.grad((logp * weights).sum(), model.tensors(names))
    return dict(zip(names, grads))


def exact_policy_gradient(model: Model, state, k: int, env: GridWorld, config: SelectivityConfig,
                          reward_fn: RewardFn | None = None) -> dict[str, np.ndarray]:
    """grad_{theta_k} of sum_a pi_k(a|s) reward(sel(s, a, k)) by enumeration."""
    names = model.policy_group(k)
    with ad.no_grad():
        trunk, h, h_next = encode_transitions(model, env, state)
        rewards = disentanglement_reward(selectivity(h, h_next, k, config), config).data
    extra = extrinsic_rewards(env, state, reward_fn)
    if extra is not None:
        rewards = rewards + extra
    x = ad.tensor(state.observation[None])
    trunk = None if trunk is None else trunk.detach()
    probs = ad.softmax(model.policy_logits(x, k, trunk), axis=-1)[0]
    grads = ad.grad((probs * rewards).sum(), model.tensors(names))
    return dict(zip(names, grads))


def _check_finite(model: Model, step: int, names=None) -> None:
    for n in (names or model.params):
        if not np.all(np.isfinite(model.params[n].data)):
            raise DivergenceError(step, f"parameter {n}")


def train_step(model: Model, env: GridWorld, config: TrainConfig, rng: np.random.Generator,
               selectivity_config: SelectivityConfig | None = None,
               reward_fn: RewardFn | None = None, step: int = 0, states=None) -> StepRecord:
    """One iteration of the interleaved update. Mutates ``model`` in place.

    ``states`` overrides sampling (used by tests); otherwise ``batch_size``
    states are drawn with ``env.reset(rng)``.
    """
    sel_cfg = replace(selectivity_config or SelectivityConfig(), lam=config.lam)
    if states is None:
        states = [env.reset(rng) for _ in range(config.batch_size)]
    enc = model.group("encoder")
    dec = model.group("decoder")

    # encoder step on reconstruction
    losses, per = [], []
    for s in states:
        loss = model.reconstruction_loss(s.observation)
        losses.append(loss.item())
        per.append(ad.grad(loss, model.tensors(enc)))
    _apply(model, enc, _mean_grads(per), -config.lr_f)

    # decoder step on reconstruction, after the encoder moved
    per = []
    for s in states:
        with ad.no_grad():
            h = model.encode(s.observation)
        per.append(ad.grad(model.reconstruction_loss_from(h, s.observation), model.tensors(dec)))
    _apply(model, dec, _mean_grads(per), -config.lr_g)

    disent = 0.0
    n_pol = model.n_policies
    if config.lam == 0:
        with ad.no_grad():
            for s in states:
                for k in range(n_pol):
                    disent += policy_objective(model, env, s, k, sel_cfg, reward_fn).item()
    elif config.aggregate_policy_updates:
        per = []
        for s in states:
            total = None
            for k in range(n_pol):
                term = _encoder_objective(model, env, s, k, sel_cfg, config, rng, reward_fn)
                total = term if total is None else total + term
            disent += total.item()
            per.append(ad.grad(total, model.tensors(enc)))
        _apply(model, enc, _mean_grads(per), config.lr_f * config.lam)
        for k in range(n_pol):
            _policy_update(model, env, states, k, sel_cfg, config, rng, reward_fn)
    else:
        for k in range(n_pol):
            per = []
            for s in states:
                obj = _encoder_objective(model, env, s, k, sel_cfg, config, rng, reward_fn)
                disent += obj.item()
                per.append(ad.grad(obj, model.tensors(enc)))
            _apply(model, enc, _mean_grads(per), config.lr_f * config.lam)
            _policy_update(model, env, states, k, sel_cfg, config, rng, reward_fn)

    _check_finite(model, step)
    with ad.no_grad():
        s0 = states[0]
        probs = model.all_policy_probs(s0.observation)[0]
        entropies = np.array([_entropy(p) for p in probs])
        blocked = sum(int(nxt == s0) for nxt in env.successors(s0))
    rec = StepRecord(step, float(np.mean(losses)), disent / len(states), entropies, blocked)
    if not (np.isfinite(rec.recon_loss) and np.isfinite(rec.disent_term)):
        raise DivergenceError(step, "losses")
    return rec


def _encoder_objective(model, env, state, k, sel_cfg, config, rng, reward_fn):
    if config.estimator == "exact":
        return policy_objective(model, env, state, k, sel_cfg, reward_fn)
    with ad.no_grad():
        probs = model.policy_probs(state.observation, k).data
    actions = rng.choice(len(probs), size=config.reinforce_samples, p=probs)
    return _reinforce_surrogate(model, env, state, k, sel_cfg, actions, reward_fn)


def _policy_update(model, env, states, k, sel_cfg, config, rng, reward_fn):
    names = model.policy_group(k)
    per = []
    for s in states:
        if config.estimator == "exact":
            g = exact_policy_gradient(model, s, k, env, sel_cfg, reward_fn)
        else:
            g = reinforce_gradient(model, s, k, env, config.reinforce_samples, rng, sel_cfg, reward_fn)
        per.append([g[n] for n in names])
    _apply(model, names, _mean_grads(per), config.lr_k * config.lam)


# ---------------------------------------------------------------------------
# outer loop


def probe_states(env: GridWorld, n: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [env.reset(rng) for _ in range(n)]


def heldout_reconstruction(model: Model, states) -> float:
    """Mean over states of 0.5 * ||s - g(f(s))||^2."""
    with ad.no_grad():
        x = np.stack([s.observation for s in states])
        return model.reconstruction_loss(x).item() / len(states)


def _smoothed_monotone(records: list[IntervalRecord], window: int) -> bool | None:
    if not records:
        return None
    buckets: dict[int, list[float]] = {}
    for r in records:
        buckets.setdefault((r.step - 1) // window, []).append(r.heldout_recon)
    means = [float(np.mean(buckets[b])) for b in sorted(buckets)]
    return all(b <= a + 1e-12 for a, b in zip(means, means[1:]))


def default_model_config(env_config: EnvConfig, **overrides) -> ModelConfig:
    variant = "shared" if env_config.variant == "basic" else "separate"
    n = 4 if env_config.variant == "basic" else 8
    kw = dict(variant=variant, obs_shape=env_config.obs_shape, n_features=n,
              num_actions=env_config.num_actions)
    kw.update(overrides)
    return ModelConfig(**kw)


def train(config: TrainConfig, env_config: EnvConfig, model_config: ModelConfig | None = None,
          selectivity_config: SelectivityConfig | None = None, reward_fn: RewardFn | None = None,
          on_eval: Callable[[int, Model, TrainLog], None] | None = None, compute_metrics: bool = True):
    """Run ``config.steps`` training steps; returns (model, TrainLog, MetricsBundle or None)."""
    from .metrics import compute_metrics as _metrics

    env = GridWorld(env_config)
    model_config = model_config or default_model_config(env_config, seed=config.seed)
    if model_config.num_actions != env.num_actions or tuple(model_config.obs_shape) != env_config.obs_shape:
        raise ValueError("model config does not match the environment (actions or observation shape)")
    sel_cfg = replace(selectivity_config or SelectivityConfig(), lam=config.lam)
    model = build_model(model_config)
    rng = np.random.default_rng([config.seed, env_config.seed])
    probes = probe_states(env, config.probe_size, config.eval_seed)
    tlog = TrainLog(model.n_policies)
    acc: list[StepRecord] = []
    start = time.perf_counter()
    for t in range(1, config.steps + 1):
        acc.append(train_step(model, env, config, rng, sel_cfg, reward_fn, step=t))
        if t % config.eval_interval == 0 or t == config.steps:
            rec = IntervalRecord(
                step=t,
                recon_loss=float(np.mean([r.recon_loss for r in acc])),
                disent_term=float(np.mean([r.disent_term for r in acc])),
                heldout_recon=heldout_reconstruction(model, probes),
                entropies=np.mean([r.entropies for r in acc], axis=0),
                wall_clock=time.perf_counter() - start,
                blocked=sum(r.blocked for r in acc),
            )
            acc = []
            if not np.isfinite(rec.heldout_recon):
                raise DivergenceError(t, "held-out reconstruction")
            tlog.records.append(rec)
            log.info("step %d recon %.5f disent %.4f heldout %.5f", t, rec.recon_loss,
                     rec.disent_term, rec.heldout_recon)
            if on_eval is not None:
                on_eval(t, model, tlog)
    tlog.recon_monotone = _smoothed_monotone(tlog.records, 1000)
    if tlog.recon_monotone is False:
        log.warning("smoothed held-out reconstruction loss was not monotone")
    metrics = _metrics(model, env, probes, sel_cfg) if compute_metrics else None
    return model, tlog, metrics
