import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanvkt.causal_shapley import (
    CausalChain,
    ShapleyConfig,
    ShapleyExplainer,
    causal_shapley_values,
    explanations_to_frame,
    interventional_expectation,
    marginal_shapley_values,
    mean_absolute_importance,
    permutation_shapley,
)
from urbanvkt.exceptions import ConfigError, DataError
from urbanvkt.gbdt import GradientBoostedTrees
from urbanvkt.pipeline import CHAIN_ORDER
from urbanvkt.synth_city import urban_form_scm

CHAIN3 = CausalChain.from_order([0, 1, 2])


def _chain_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = 0.8 * a + rng.normal(0, 0.6, n)
    c = 0.5 * b + rng.normal(0, 0.8, n)
    X = np.column_stack([a, b, c])
    y = np.sin(a) + b * c + rng.normal(0, 0.1, n)
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = _chain_data()
    return GradientBoostedTrees(n_trees=60, max_depth=3).fit(X, y), X


def _coalition_value(expl):
    return lambda S: expl.coalition_values[sum(1 << i for i in S)]


def test_efficiency_on_gbdt(fitted):
    model, X = fitted
    for r in range(20):
        for expl in (causal_shapley_values(model, X[r], CHAIN3, X, ShapleyConfig(50), instance_key=r),
                     marginal_shapley_values(model, X[r], X, ShapleyConfig(50), instance_key=r)):
            assert expl.efficiency_gap <= 1e-9
            assert expl.coalition_values[-1] == expl.prediction


def test_full_coalition_and_constant_model(fitted):
    model, X = fitted
    x = X[3]
    assert interventional_expectation(model, [0, 1, 2], x, CHAIN3, X, n_samples=1) == model.predict(x[None])[0]
    const = lambda Z: np.full(len(Z), 7.0)
    assert interventional_expectation(const, [], x, CHAIN3, X) == 7.0
    expl = causal_shapley_values(const, x, CHAIN3, X)
    np.testing.assert_array_equal(expl.phi, 0.0)
    assert expl.base_value == 7.0


def test_expectation_matches_shared_draws(fitted):
    model, X = fitted
    cfg = ShapleyConfig(40, seed=5)
    expl = causal_shapley_values(model, X[7], CHAIN3, X, cfg, instance_key=7)
    for mask in range(7):
        S = [i for i in range(3) if mask >> i & 1]
        v = interventional_expectation(model, S, X[7], CHAIN3, X, 40, seed=5, instance_key=7)
        assert v == pytest.approx(expl.coalition_values[mask], abs=1e-9)


def test_exact_equals_permutation_oracle(fitted):
    model, X = fitted
    for r in range(5):
        for expl in (causal_shapley_values(model, X[r], CHAIN3, X, ShapleyConfig(30)),
                     marginal_shapley_values(model, X[r], X, ShapleyConfig(30))):
            oracle = permutation_shapley(_coalition_value(expl), 3)
            np.testing.assert_allclose(expl.phi, oracle, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_permutation_oracle_up_to_five(d, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(d, d))
    model = lambda Z: np.tanh(Z @ W).sum(axis=1)
    ref = rng.normal(size=(60, d))
    chain = CausalChain.from_order(list(rng.permutation(d)))
    expl = causal_shapley_values(model, ref[0], chain, ref, ShapleyConfig(20, k_neighbors=5))
    np.testing.assert_allclose(expl.phi, permutation_shapley(_coalition_value(expl), d), atol=1e-10)
    assert expl.efficiency_gap <= 1e-9


def test_dummy_feature_gets_zero(fitted):
    X, y = _chain_data()
    # feature 2 is last in the chain and never used by the model
    model = GradientBoostedTrees(n_trees=40).fit(X[:, :2].copy(), y)
    f = lambda Z: model.predict(Z[:, :2])
    for r in range(10):
        causal = causal_shapley_values(f, X[r], CHAIN3, X, ShapleyConfig(40), instance_key=r)
        marginal = marginal_shapley_values(f, X[r], X, ShapleyConfig(40), instance_key=r)
        assert causal.phi[2] == 0.0 and marginal.phi[2] == 0.0
    # a tree model that never splits on a middle feature: marginal values still exact zero
    g = GradientBoostedTrees(n_trees=40).fit(X[:, [0, 2]], y)
    h = lambda Z: g.predict(Z[:, [0, 2]])
    assert marginal_shapley_values(h, X[0], X, ShapleyConfig(40)).phi[1] == 0.0


def test_closed_form_linear_independent():
    rng = np.random.default_rng(3)
    ref = rng.normal(loc=[1.0, -2.0, 0.5], scale=[1.0, 2.0, 0.5], size=(2000, 3))
    beta, b0 = np.array([2.0, -1.0, 3.0]), 0.7
    model = lambda Z: Z @ beta + b0
    mu, var = ref.mean(axis=0), ref.var(axis=0)
    one_root = CausalChain(((0, 1, 2),))
    n = 400
    for r in range(10):
        x = rng.normal(size=3) * 2
        for expl in (causal_shapley_values(model, x, one_root, ref, ShapleyConfig(n, seed=3), instance_key=r),
                     marginal_shapley_values(model, x, ref, ShapleyConfig(n, seed=3), instance_key=r)):
            for mask in range(8):
                inside = np.array([mask >> i & 1 for i in range(3)], dtype=bool)
                exact = b0 + beta[inside] @ x[inside] + beta[~inside] @ mu[~inside]
                se = np.sqrt((beta[~inside] ** 2 * var[~inside]).sum() / n)
                assert abs(expl.coalition_values[mask] - exact) <= 3 * se + 1e-12
            closed = beta * (x - mu)
            assert np.all(np.abs(expl.phi - closed) <= 3 * expl.mc_se + 1e-12)


def test_symmetry():
    rng = np.random.default_rng(4)
    a = rng.normal(size=300)
    ref = np.column_stack([a, a, rng.normal(size=300)])
    model = lambda Z: Z[:, 0] + Z[:, 1] + 0.5 * Z[:, 2] ** 2
    x = np.array([1.3, 1.3, -0.4])
    chain = CausalChain(((0, 1), (2,)))
    for expl in (causal_shapley_values(model, x, chain, ref, ShapleyConfig(100)),
                 marginal_shapley_values(model, x, ref, ShapleyConfig(100))):
        assert expl.phi[0] == pytest.approx(expl.phi[1], abs=1e-12)


def test_determinism(fitted):
    model, X = fitted
    a = ShapleyExplainer(model, chain=CHAIN3, n_samples=30, random_state=9).fit(X).transform(X[:5])
    b = ShapleyExplainer(model, chain=CHAIN3, n_samples=30, random_state=9).fit(X).transform(X[:5])
    assert a.tobytes() == b.tobytes()
    c = ShapleyExplainer(model, chain=CHAIN3, n_samples=30, random_state=10).fit(X).transform(X[:5])
    assert not np.array_equal(a, c)


def test_causal_root_attribution_exceeds_marginal():
    scm = urban_form_scm()
    names = list(scm.variables)
    data = scm.sample(1500, seed=2)
    cols = [names.index(f) for f in CHAIN_ORDER]
    X, y = data[:, cols], data[:, names.index("mean_vkt_km")]
    model = GradientBoostedTrees(n_trees=100, max_depth=3).fit(X, y)
    chain = CausalChain.from_order(range(4))
    cfg = ShapleyConfig(60)
    causal = [causal_shapley_values(model, X[r], chain, X, cfg, instance_key=r) for r in range(60)]
    marginal = [marginal_shapley_values(model, X[r], X, cfg, instance_key=r) for r in range(60)]
    root_c = mean_absolute_importance(causal, normalize=True)["x0"]
    root_m = mean_absolute_importance(marginal, normalize=True)["x0"]
    assert root_c > root_m


def test_single_cause_importance_concentrated():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(600, 4))
    y = 2 * X[:, 0] + rng.normal(0, 0.2, 600)
    model = GradientBoostedTrees(n_trees=80).fit(X, y)
    expl = ShapleyExplainer(model, chain=CausalChain.from_order(range(4)), n_samples=50).fit(X).explain(X[:40])
    assert mean_absolute_importance(expl, normalize=True)["x0"] > 0.7


def test_importance_basics(fitted):
    model, X = fitted
    e = causal_shapley_values(model, X[0], CHAIN3, X, ShapleyConfig(20), feature_names=("a", "b", "c"))
    assert mean_absolute_importance([e]) == pytest.approx(dict(zip("abc", np.abs(e.phi))))
    import copy

    neg = copy.copy(e)
    neg.phi = -e.phi
    assert mean_absolute_importance([e]) == mean_absolute_importance([neg])
    assert mean_absolute_importance({"c1": [e], "c2": [neg]}) == pytest.approx(mean_absolute_importance([e]))
    with pytest.raises(DataError):
        mean_absolute_importance([])


def test_frame_and_errors(fitted):
    model, X = fitted
    expl = ShapleyExplainer(model, chain=CHAIN3, n_samples=10, feature_names=("a", "b", "c")).fit(X).explain(X[:2])
    frame = explanations_to_frame(expl, ids=["z1", "z2"], scale=100.0)
    assert list(frame.columns) == ["taz_id", "base_value", "phi_a", "phi_b", "phi_c", "prediction", "value_kind", "seed"]
    assert frame["phi_a"].iloc[0] == pytest.approx(100 * expl[0].phi[0])
    with pytest.raises(ConfigError, match="at most 15"):
        marginal_shapley_values(lambda Z: Z.sum(axis=1), np.zeros(16), np.zeros((3, 16)))
    with pytest.raises(DataError):
        causal_shapley_values(model, X[0], CHAIN3, np.zeros((0, 3)))
    with pytest.raises(ConfigError):
        CausalChain(((0, 1), (1,)))
    with pytest.raises(ConfigError):
        causal_shapley_values(model, X[0], CausalChain.from_order([0, 1]), X)
    with pytest.raises(ConfigError):
        ShapleyExplainer(model).fit(X)


def test_chain_from_names():
    chain = CausalChain.from_names(["inc", "c", "d"], ["c", "d"])
    assert chain.components == ((0,), (1,), (2,))
    with pytest.raises(ConfigError):
        CausalChain.from_names(["inc", "c"], ["c"], prepend_unlisted=False)
