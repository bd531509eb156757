import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icf import autodiff as ad
from icf import criteria
from icf.environments import EnvConfig, GridWorld, all_states
from icf.metrics import (
    MetricsBundle,
    compute_metrics,
    policy_matrix,
    reconstruction_report,
    selectivity_and_objective_matrices,
    slopes_from_features,
)
from icf.selectivity import SelectivityConfig
from icf.training import probe_states

from conftest import separate_model


def ols_slope(x, y):
    """Slope of y on x by the normal equations with an intercept column."""
    design = np.column_stack([np.ones_like(x), x])
    coef = np.linalg.solve(design.T @ design, design.T @ y)
    return coef[1]


def test_slopes_match_normal_equations():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(200, 3))
    f = np.column_stack([2 * h[:, 0] + rng.normal(scale=0.1, size=200), rng.normal(size=200)])
    std, raw = slopes_from_features(h, f)
    for i in range(3):
        for j in range(2):
            assert raw[i, j] == pytest.approx(ols_slope(h[:, i], f[:, j]), rel=1e-9, abs=1e-12)
            zh = (h[:, i] - h[:, i].mean()) / h[:, i].std()
            zf = (f[:, j] - f[:, j].mean()) / f[:, j].std()
            assert std[i, j] == pytest.approx(ols_slope(zh, zf), rel=1e-9, abs=1e-12)
    assert std[0, 0] > 0.99


def test_perfect_linear_relation():
    x = np.linspace(-1, 1, 50)
    std, raw = slopes_from_features(np.column_stack([x, -x]), (3 * x + 1)[:, None])
    np.testing.assert_allclose(std[:, 0], [1, -1], atol=1e-12)
    np.testing.assert_allclose(raw[:, 0], [3, -3], atol=1e-12)


def test_constant_feature_gives_zero_slope():
    h = np.column_stack([np.full(10, 0.3), np.arange(10.0)])
    std, raw = slopes_from_features(h, np.arange(10.0)[:, None] ** 2)
    assert std[0, 0] == 0 and raw[0, 0] == 0
    assert np.all(np.isfinite(std))


def test_too_few_probes():
    with pytest.raises(ValueError):
        slopes_from_features(np.zeros((1, 2)), np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (20, 2), elements=st.floats(-1, 1)), st.floats(-5, 5), st.floats(0.1, 10))
def test_standardized_slopes_affine_invariant(h, shift, scale):
    f = np.random.default_rng(1).normal(size=(20, 2))
    std, _ = slopes_from_features(h, f)
    std2, _ = slopes_from_features(h * scale + shift, f - shift)
    np.testing.assert_allclose(std, std2, atol=1e-8)
    assert np.all(np.abs(std) <= 1 + 1e-12)


def test_policy_matrix_rows_sum_to_one(basic_env, shared_model):
    probes = probe_states(basic_env, 30, 0)
    pm = policy_matrix(shared_model, probes)
    assert pm.shape == (4, 4)
    np.testing.assert_allclose(pm.sum(axis=1), 1, atol=1e-12)
    manual = np.mean([[shared_model.policy_probs(s.observation, k).data for k in range(4)]
                      for s in probes], axis=0)
    np.testing.assert_allclose(pm, manual, atol=1e-14)


def test_redundant_columns_identical_in_extended(extended_env):
    model = separate_model(n_features=8, hidden=32)
    probes = probe_states(extended_env, 50, 3)
    cfg = SelectivityConfig(mode="undirected")
    sel, obj = selectivity_and_objective_matrices(model, extended_env, probes, cfg)
    assert sel.shape == obj.shape == (8, 8)
    assert np.abs(sel[:, 0] - sel[:, 1]).max() <= 1e-9
    bundle = compute_metrics(model, extended_env, probes, cfg)
    assert criteria.check_redundant_columns(bundle).passed


def test_selectivity_matrix_matches_per_state_loop(basic_env, shared_model):
    probes = probe_states(basic_env, 9, 4)
    cfg = SelectivityConfig(mode="directed")
    sel, obj = selectivity_and_objective_matrices(shared_model, basic_env, probes, cfg)
    expect_sel = np.zeros((4, 4))
    expect_obj = np.zeros((4, 4))
    for s in probes:
        h = shared_model.encode(s.observation).data
        for a, nxt in enumerate(basic_env.successors(s)):
            d = shared_model.encode(nxt.observation).data - h
            for k in range(4):
                v = d[k] / (np.abs(d).sum() + 1e-8)
                expect_sel[k, a] += v / len(probes)
                p = shared_model.policy_probs(s.observation, k).data[a]
                expect_obj[k, a] += -p * np.log(max(1 + v, 1e-8)) / len(probes)
    np.testing.assert_allclose(sel, expect_sel, atol=1e-12)
    np.testing.assert_allclose(obj, expect_obj, atol=1e-12)


class ZeroDecoder:
    def encode(self, x):
        return ad.tensor(np.zeros((len(x), 2)))

    def decode(self, h):
        return ad.tensor(np.zeros((len(h.data), 1, 10, 10)))


class IdentityAE(ZeroDecoder):
    def decode(self, h):
        return ad.tensor(self._x)

    def encode(self, x):
        self._x = np.asarray(x)
        return super().encode(x)


def test_reconstruction_mse_oracles(basic_env):
    probes = probe_states(basic_env, 20, 0)
    mse, pairs = reconstruction_report(ZeroDecoder(), probes, n_samples=3)
    assert mse == pytest.approx(4 / 100, abs=1e-15)
    assert len(pairs) == 3 and pairs[0][0].shape == (10, 10)
    mse, _ = reconstruction_report(IdentityAE(), probes)
    assert mse == 0.0


def test_metrics_are_read_only(basic_env, shared_model):
    before = {n: t.data.copy() for n, t in shared_model.params.items()}
    probes = probe_states(basic_env, 10, 0)
    a = compute_metrics(shared_model, basic_env, probes, SelectivityConfig())
    b = compute_metrics(shared_model, basic_env, probes, SelectivityConfig())
    assert all(np.array_equal(shared_model.params[n].data, v) for n, v in before.items())
    assert a.slope_matrix.tobytes() == b.slope_matrix.tobytes()
    assert a.recon_mse == b.recon_mse


def test_single_probe(basic_env, shared_model):
    bundle = compute_metrics(shared_model, basic_env, probe_states(basic_env, 1, 0), SelectivityConfig())
    assert bundle.probe_set_size == 1
    assert np.all(bundle.slope_matrix == 0)
    assert criteria.finite_bundle(bundle).passed


def test_factor_assignment():
    slopes = np.array([[0.9, 0.1], [0.95, 0.2], [0.1, -0.85]])
    assert criteria.factor_assignment(slopes) in ({0: 0, 1: 2}, {0: 1, 1: 2})
    assert criteria.factor_assignment(np.array([[0.9, 0.9], [0.1, 0.1]])) is None


def bundle_with(policy=None, sel=None, slopes=None, mse=0.0):
    z = np.zeros((4, 4))
    return MetricsBundle(slope_matrix=z[:, :2] if slopes is None else slopes, raw_slope_matrix=z[:, :2],
                         policy_matrix=z if policy is None else policy,
                         selectivity_matrix=z if sel is None else sel, objective_matrix=z,
                         recon_mse=mse, probe_set_size=1, factor_names=("row", "col"),
                         action_names=("up", "down", "left", "right"))


def test_policy_check_requires_coverage():
    assert criteria.check_policies(bundle_with(policy=np.eye(4) * 0.9 + 0.025)).passed
    dup = np.eye(4)[[0, 0, 2, 3]] * 0.9 + 0.025
    assert not criteria.check_policies(bundle_with(policy=dup)).passed
    assert not criteria.check_policies(bundle_with(policy=np.eye(4) * 0.6 + 0.1)).passed


def test_down_policy_check():
    sel = np.zeros((4, 4))
    sel[2, 0] = sel[2, 1] = 0.9
    pol = np.full((4, 4), 0.25)
    pol[2] = [0.5, 0.4, 0.05, 0.05]
    b = bundle_with(policy=pol, sel=sel)
    assert criteria.down_policy(b) == 2
    assert criteria.check_down_policy(b).passed
    pol[2] = [0.4, 0.4, 0.1, 0.1]
    assert not criteria.check_down_policy(bundle_with(policy=pol, sel=sel)).passed


def test_reconstruction_check_threshold():
    assert criteria.check_reconstruction(bundle_with(mse=0.0049)).passed
    assert not criteria.check_reconstruction(bundle_with(mse=0.005)).passed


def test_all_basic_states_are_distinct_observations():
    cfg = EnvConfig()
    seen = {s.observation.tobytes() for s in all_states(cfg)}
    assert len(seen) == 81
    assert GridWorld(cfg).num_actions == 4
