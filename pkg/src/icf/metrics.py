"""Read-only diagnostics of a trained model on a fixed probe set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .selectivity import SelectivityConfig, disentanglement_reward, selectivity_all, transition_batch

_CHUNK = 64


@dataclass
class MetricsBundle:
    slope_matrix: np.ndarray        # (n, num_factors) standardized slopes
    raw_slope_matrix: np.ndarray    # (n, num_factors) factor-on-feature OLS slopes
    policy_matrix: np.ndarray       # (K, A)
    selectivity_matrix: np.ndarray  # (K, A)
    objective_matrix: np.ndarray    # (K, A)
    recon_mse: float
    probe_set_size: int
    factor_names: tuple = ()
    action_names: tuple = ()
    samples: list = field(default_factory=list, repr=False)  # (original, reconstruction) pairs


def encode_states(model, states) -> np.ndarray:
    obs = np.stack([s.observation for s in states])
    with ad.no_grad():
        return np.concatenate([model.encode(obs[i:i + _CHUNK]).data
                               for i in range(0, len(obs), _CHUNK)])


def slopes_from_features(h: np.ndarray, factors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(standardized, raw) slopes, both shaped (n_features, n_factors).

    Standardized slopes regress the unit-variance factor on the unit-variance
    feature, which equals their correlation. Zero-variance columns give 0.
    """
    if len(h) < 2:
        raise ValueError("slope matrix needs at least two probe states")
    hc = h - h.mean(axis=0)
    fc = factors - factors.mean(axis=0)
    var_h = (hc ** 2).mean(axis=0)
    var_f = (fc ** 2).mean(axis=0)
    cov = hc.T @ fc / len(h)  # (n, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(var_h[:, None] > 0, cov / var_h[:, None], 0.0)
        denom = np.sqrt(var_h[:, None] * var_f[None, :])
        std = np.where(denom > 0, cov / denom, 0.0)
    tiny = 1e-24
    raw[var_h <= tiny, :] = 0.0
    std[var_h <= tiny, :] = 0.0
    std[:, var_f <= tiny] = 0.0
    return std, raw


def slope_matrix(model, env, probe_states) -> np.ndarray:
    if not probe_states:
        raise ValueError("empty probe set")
    h = encode_states(model, probe_states)
    factors = np.stack([env.factors(s) for s in probe_states])
    return slopes_from_features(h, factors)[0]


def policy_matrix(model, probe_states) -> np.ndarray:
    if not probe_states:
        raise ValueError("empty probe set")
    obs = np.stack([s.observation for s in probe_states])
    probs = np.concatenate([model.all_policy_probs(obs[i:i + _CHUNK])
                            for i in range(0, len(obs), _CHUNK)])
    return probs.mean(axis=0)


def selectivity_and_objective_matrices(model, env, probe_states,
                                       config: SelectivityConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean sel(s, a, k) and mean -pi_k(a|s) reward(sel(s, a, k)) over probes, both (K, A)."""
    if not probe_states:
        raise ValueError("empty probe set")
    a_n = env.num_actions
    sel_sum = np.zeros((model.n_policies, a_n))
    obj_sum = np.zeros((model.n_policies, a_n))
    step = max(1, _CHUNK // (a_n + 1))
    for i in range(0, len(probe_states), step):
        chunk = probe_states[i:i + step]
        x = np.concatenate([transition_batch(env, s) for s in chunk])
        with ad.no_grad():
            h = model.encode(x).data.reshape(len(chunk), a_n + 1, -1)
        probs = model.all_policy_probs(np.stack([s.observation for s in chunk]))  # (c, K, A)
        sel = selectivity_all(ad.tensor(h[:, :1]), ad.tensor(h[:, 1:]), config).data  # (c, A, n)
        sel = sel.transpose(0, 2, 1)[:, :model.n_policies]  # (c, K, A)
        sel_sum += sel.sum(axis=0)
        obj_sum += (-probs * disentanglement_reward(sel, config)).sum(axis=0)
    n = len(probe_states)
    return sel_sum / n, obj_sum / n


def reconstruction_report(model, probe_states, n_samples: int = 4) -> tuple[float, list]:
    """Mean per-pixel squared error, plus (original, reconstruction) pairs."""
    if not probe_states:
        raise ValueError("empty probe set")
    obs = np.stack([s.observation for s in probe_states])
    with ad.no_grad():
        rec = np.concatenate([model.decode(model.encode(obs[i:i + _CHUNK])).data
                              for i in range(0, len(obs), _CHUNK)])
    mse = float(((obs - rec) ** 2).mean())
    pairs = [(obs[i, 0], rec[i, 0]) for i in range(min(n_samples, len(obs)))]
    return mse, pairs


def compute_metrics(model, env, probe_states, config: SelectivityConfig,
                    n_samples: int = 4) -> MetricsBundle:
    h = encode_states(model, probe_states)
    factors = np.stack([env.factors(s) for s in probe_states])
    if len(probe_states) >= 2:
        std, raw = slopes_from_features(h, factors)
    else:
        std = raw = np.zeros((model.n_features, factors.shape[1]))
    sel, obj = selectivity_and_objective_matrices(model, env, probe_states, config)
    mse, pairs = reconstruction_report(model, probe_states, n_samples)
    return MetricsBundle(
        slope_matrix=std,
        raw_slope_matrix=raw,
        policy_matrix=policy_matrix(model, probe_states),
        selectivity_matrix=sel,
        objective_matrix=obj,
        recon_mse=mse,
        probe_set_size=len(probe_states),
        factor_names=env.config.factor_names,
        action_names=env.actions,
        samples=pairs,
    )
