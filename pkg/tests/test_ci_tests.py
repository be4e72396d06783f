import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from urbanvkt.ci_tests import (
    CiTestConfig,
    CMIknn,
    RobustParCorr,
    cmiknn_test,
    knn_cmi,
    make_ci_test,
    parcorr_pvalue,
    partial_correlation,
    rank_normal_transform,
    robust_parcorr_test,
)
from urbanvkt.exceptions import ConfigError, DataError


def test_rank_normal_quantile_round_trip():
    n = 1000
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    rng = np.random.default_rng(0)
    perm = rng.permutation(n)
    np.testing.assert_allclose(rank_normal_transform(q[perm]), q[perm], atol=1e-12)
    sample = rng.standard_normal(n)
    assert np.median(np.abs(rank_normal_transform(sample) - sample)) < 0.02


def test_rank_normal_skewed_and_monotone():
    x = np.random.default_rng(1).lognormal(0, 2, 5000)
    z = rank_normal_transform(x)
    assert abs(stats.skew(z)) < 0.1 and abs(z.mean()) < 1e-12
    assert np.all(np.diff(rank_normal_transform(np.arange(10.0))) > 0)
    ties = rank_normal_transform([1.0, 2.0, 2.0, 3.0])
    assert ties[1] == ties[2]
    with pytest.raises(DataError):
        rank_normal_transform([2.0, 2.0, 2.0])
    with pytest.raises(DataError):
        rank_normal_transform([1.0, 2.0])


def test_partial_correlation_examples():
    rng = np.random.default_rng(2)
    n = 10_000
    x = rng.standard_normal(n)
    y = 0.8 * x + rng.standard_normal(n)
    z = 0.8 * y + rng.standard_normal(n)
    data = np.column_stack([x, y, z])
    assert partial_correlation(0, 0, (), data) == pytest.approx(1.0)
    assert abs(partial_correlation(0, 2, (1,), data)) < 2 / np.sqrt(n)
    assert partial_correlation(0, 2, (), data) == pytest.approx(np.corrcoef(x, z)[0, 1])
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    c = a + b + 0.5 * rng.standard_normal(n)
    col = np.column_stack([a, b, c])
    assert abs(partial_correlation(0, 1, (), col)) < 3 / np.sqrt(n)
    assert partial_correlation(0, 1, (2,), col) < -0.5
    with pytest.raises(DataError, match="collinear"):
        partial_correlation(0, 1, (2, 3), np.column_stack([a, b, c, 2 * c]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10))
def test_partial_correlation_symmetry_affine(seed, sx, shift, sy):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((60, 3))
    data[:, 1] += 0.5 * data[:, 0]
    rho = partial_correlation(0, 1, (2,), data)
    assert partial_correlation(1, 0, (2,), data) == pytest.approx(rho, abs=1e-12)
    moved = data.copy()
    moved[:, 0] = sx * moved[:, 0] + shift
    moved[:, 1] = sy * moved[:, 1] - shift
    assert partial_correlation(0, 1, (2,), moved) == pytest.approx(rho, abs=1e-9)


def test_parcorr_t_statistic():
    p, t = parcorr_pvalue(0.28, 1542, 0)
    oracle_t = 0.28 * np.sqrt(1540 / (1 - 0.28 ** 2))
    assert t == pytest.approx(oracle_t)
    assert p == pytest.approx(2 * stats.t.sf(oracle_t, 1540)) and p < 1e-20
    with pytest.raises(DataError):
        parcorr_pvalue(0.1, 4, 2)


def test_robust_parcorr_near_deterministic():
    rng = np.random.default_rng(3)
    y = rng.standard_normal(500)
    data = np.column_stack([y + 1e-6 * rng.standard_normal(500), y])
    out = robust_parcorr_test(0, 1, (), data)
    assert out.p_value < 1e-10 and out.partial_correlation > 0.99 and out.n_effective == 500


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_robust_parcorr_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((80, 3))
    data[:, 1] += 0.3 * data[:, 0] + 0.3 * data[:, 2]
    base = robust_parcorr_test(0, 1, (2,), data)
    warped = data.copy()
    warped[:, 0] = np.exp(2 * warped[:, 0])
    warped[:, 1] = warped[:, 1] ** 3
    again = robust_parcorr_test(0, 1, (2,), warped)
    assert again.p_value == base.p_value and again.partial_correlation == base.partial_correlation


def test_null_pvalues_uniform_small():
    rng = np.random.default_rng(4)
    test_p = [RobustParCorr(rng.standard_normal((200, 3)))(0, 1, (2,)).p_value for _ in range(300)]
    assert stats.kstest(test_p, "uniform").pvalue > 0.01


def test_cmiknn_conditional_null_uniform():
    # x and y both depend on z; the local permutation must keep that link
    rng = np.random.default_rng(8)
    pvals = []
    for r in range(100):
        z = rng.standard_normal(300)
        data = np.column_stack([z + rng.standard_normal(300), z ** 2 + rng.standard_normal(300), z])
        cfg = CiTestConfig(test_kind="cmiknn", n_permutations=50, seed=r)
        pvals.append(CMIknn(data, cfg)(0, 1, (2,)).p_value)
    assert stats.kstest(pvals, "uniform").pvalue > 0.01


def test_knn_cmi_gaussian_reference():
    # I(X;Y) = -0.5 log(1 - r^2) for a bivariate normal
    rng = np.random.default_rng(5)
    r = 0.6
    x = rng.standard_normal(4000)
    y = r * x + np.sqrt(1 - r * r) * rng.standard_normal(4000)
    est = knn_cmi(x[:, None], y[:, None], np.empty((4000, 0)), 10)
    assert est == pytest.approx(-0.5 * np.log(1 - r * r), abs=0.03)


def test_cmiknn_nonlinear_and_config():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, 400)
    data = np.column_stack([x, x ** 2 + 0.05 * rng.standard_normal(400)])
    cfg = CiTestConfig(test_kind="cmiknn", n_permutations=100, seed=1)
    assert cmiknn_test(0, 1, (), data, cfg).p_value < 0.05
    assert robust_parcorr_test(0, 1, (), data).p_value > 0.05
    out = CMIknn(data, cfg)(0, 1)
    assert out.partial_correlation is None and out.statistic > 0
    assert out.p_value == CMIknn(data, cfg)(0, 1).p_value
    with pytest.raises(DataError):
        CMIknn(data[:40], cfg)
    with pytest.raises(ConfigError):
        CMIknn(data[:80], cfg)
    assert cfg.metadata()["assumed_defaults"] is True


def test_cmiknn_handles_duplicate_rows():
    rng = np.random.default_rng(7)
    base = rng.integers(0, 5, size=(200, 3)).astype(float)
    cfg = CiTestConfig(test_kind="cmiknn", n_permutations=20)
    out = CMIknn(base, cfg)(0, 1, (2,))
    assert 0 <= out.p_value <= 1 and np.isfinite(out.statistic)


def test_config_validation_and_factory():
    with pytest.raises(ConfigError):
        CiTestConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        CiTestConfig(test_kind="gpdc")
    data = np.random.default_rng(8).standard_normal((100, 2))
    assert isinstance(make_ci_test(data, CiTestConfig()), RobustParCorr)
    assert isinstance(make_ci_test(data, CiTestConfig("cmiknn", knn_k=5)), CMIknn)
    assert CiTestConfig().alpha == 0.025
