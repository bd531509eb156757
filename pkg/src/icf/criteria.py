"""Pass/fail checks on a :class:`~icf.metrics.MetricsBundle`.

These are the figure-level reproduction thresholds reported in a run's
``summary.txt`` and exercised by the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SLOPE_THRESHOLD = 0.8
POLICY_PEAK_THRESHOLD = 0.85
RECON_MSE_THRESHOLD = 0.005
REDUNDANT_TOL = 1e-9
DOWN_MASS_THRESHOLD = 0.85


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


def factor_assignment(slopes: np.ndarray, threshold: float = SLOPE_THRESHOLD) -> dict[int, int] | None:
    """Map each factor to a distinct feature with |slope| > threshold, or None.

    ``slopes`` is (n_features, n_factors). Small sizes, so brute force.
    """
    from itertools import permutations

    n, m = slopes.shape
    strong = np.abs(slopes) > threshold
    for feats in permutations(range(n), m):
        if all(strong[f, j] for j, f in enumerate(feats)):
            return {j: f for j, f in enumerate(feats)}
    return None


def check_slopes(bundle, threshold: float = SLOPE_THRESHOLD) -> Check:
    assign = factor_assignment(bundle.slope_matrix, threshold)
    best = np.abs(bundle.slope_matrix).max(axis=0)
    detail = "max |slope| per factor " + ", ".join(
        f"{name}={v:.3f}" for name, v in zip(bundle.factor_names, best))
    if assign is not None:
        detail += "; features " + ", ".join(
            f"{bundle.factor_names[j]}<-h{f}" for j, f in sorted(assign.items()))
    return Check("slope_assignment", assign is not None, detail)


def check_policies(bundle, threshold: float = POLICY_PEAK_THRESHOLD) -> Check:
    pm = bundle.policy_matrix
    peaks = pm.max(axis=1)
    argmax = pm.argmax(axis=1)
    covers = set(argmax.tolist()) == set(range(pm.shape[1]))
    ok = bool(np.all(peaks > threshold) and covers)
    detail = "peaks " + ", ".join(f"{p:.3f}" for p in peaks) + "; argmax " + ", ".join(
        bundle.action_names[a] if bundle.action_names else str(a) for a in argmax)
    return Check("policy_peaks_cover_actions", ok, detail)


def check_reconstruction(bundle, threshold: float = RECON_MSE_THRESHOLD) -> Check:
    return Check("reconstruction_mse", bundle.recon_mse < threshold,
                 f"mse {bundle.recon_mse:.6f} < {threshold}")


def check_redundant_columns(bundle, tol: float = REDUNDANT_TOL) -> Check:
    diff = float(np.abs(bundle.selectivity_matrix[:, 0] - bundle.selectivity_matrix[:, 1]).max())
    return Check("redundant_actions_same_selectivity", diff <= tol, f"max |diff| {diff:.3e}")


def down_policy(bundle) -> int:
    """The policy whose feature reacts most selectively to moving down."""
    return int(np.argmax(bundle.selectivity_matrix[:, 0]))


def check_down_policy(bundle, threshold: float = DOWN_MASS_THRESHOLD) -> Check:
    k = down_policy(bundle)
    mass = float(bundle.policy_matrix[k, 0] + bundle.policy_matrix[k, 1])
    return Check("down_policy_on_redundant_pair", mass > threshold,
                 f"policy {k}: mass on actions 0,1 = {mass:.3f} (split "
                 f"{bundle.policy_matrix[k, 0]:.3f}/{bundle.policy_matrix[k, 1]:.3f})")


def finite_bundle(bundle) -> Check:
    arrays = [bundle.slope_matrix, bundle.policy_matrix, bundle.selectivity_matrix,
              bundle.objective_matrix, np.array([bundle.recon_mse])]
    ok = all(np.all(np.isfinite(a)) for a in arrays)
    return Check("finite_metrics", ok, "all metric values finite" if ok else "non-finite metric values")


def run_checks(bundle, variant: str) -> list[Check]:
    checks = [finite_bundle(bundle)]
    if variant == "basic":
        checks += [check_slopes(bundle), check_policies(bundle), check_reconstruction(bundle)]
    else:
        checks += [check_redundant_columns(bundle), check_down_policy(bundle)]
    return checks
