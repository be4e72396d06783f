import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanvkt.analysis import ring_destination_shares
from urbanvkt.causal_discovery import urban_form_knowledge
from urbanvkt.ci_tests import partial_correlation
from urbanvkt.exceptions import ConfigError, DataError
from urbanvkt.geo_features import EmploymentField, RoadNetwork, urban_centrality_index
from urbanvkt.synth_city import (
    LINK_TARGETS,
    CityConfig,
    StructuralCausalModel,
    calibrate_scm,
    generate_city,
    implied_link_strengths,
    sample_scm,
    scm_city_datasets,
    urban_form_scm,
)

CENTER, EMP = "distance_to_center_km", "distance_to_employment_km"


@pytest.fixture(scope="module")
def scm():
    return urban_form_scm()


def test_urban_form_scm_structure(scm):
    assert len(scm.variables) == 6
    assert "income" not in scm.parents and CENTER not in scm.parents
    assert set(scm.edges()) == set(LINK_TARGETS)
    order = scm.topological_order()
    for p, c in scm.edges():
        assert order.index(p) < order.index(c)


def test_implied_strengths_hit_targets(scm):
    implied = implied_link_strengths(scm, knowledge=urban_form_knowledge())
    assert set(implied) == {frozenset(e) for e in LINK_TARGETS}
    for edge, target in LINK_TARGETS.items():
        assert implied[frozenset(edge)][0] == pytest.approx(target, abs=0.02)


def test_center_employment_monte_carlo(scm):
    rho_pop, cond = implied_link_strengths(scm)[frozenset((CENTER, EMP))]
    X = scm.sample(1_000_000, seed=7)
    names = list(scm.variables)
    rho = partial_correlation(names.index(CENTER), names.index(EMP), [names.index(c) for c in cond], X)
    assert rho == pytest.approx(0.37, abs=0.02)
    assert rho == pytest.approx(rho_pop, abs=0.005)


def test_zero_coefficients_give_null_model(scm):
    null = scm.with_coefficients({e: 0.0 for e in scm.edges()})
    n = 20_000
    C = np.corrcoef(null.sample(n, seed=1).T)
    off = C[~np.eye(6, dtype=bool)]
    assert np.all(np.abs(off) <= 3 / np.sqrt(n))


def test_sampling_basics(scm):
    assert scm.sample(1, seed=0).shape == (1, 6)
    np.testing.assert_array_equal(sample_scm(scm, 50, 3), scm.sample(50, seed=3))
    n = 50_000
    X = scm.sample(n, seed=4)
    sd = np.sqrt(np.diag(scm.covariance()))
    assert np.all(np.abs(X.mean(axis=0)) <= 4 * sd / np.sqrt(n))
    np.testing.assert_allclose(np.cov(X.T), scm.covariance(), atol=0.05)
    with pytest.raises(DataError):
        scm.sample(0)


def test_ols_recovers_coefficients(scm):
    X = scm.sample(20_000, seed=5)
    names = list(scm.variables)
    for child, parents in scm.parents.items():
        A = np.column_stack([np.ones(len(X)), X[:, [names.index(p) for p in parents]]])
        y = X[:, names.index(child)]
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        se = np.sqrt(np.diag(resid.var(ddof=A.shape[1]) * np.linalg.inv(A.T @ A)))
        for k, p in enumerate(parents, start=1):
            assert abs(coef[k] - scm.coefficient(p, child)) <= 3 * se[k]


def test_cycle_and_bad_coefficients_rejected():
    with pytest.raises(ConfigError, match="cycle"):
        StructuralCausalModel(("a", "b"), {"a": ["b"], "b": ["a"]}, {"a": [1.0], "b": [1.0]})
    with pytest.raises(ConfigError, match="non-finite"):
        StructuralCausalModel(("a", "b"), {"b": ["a"]}, {"b": [np.nan]})


def test_json_round_trip(scm, tmp_path):
    path = tmp_path / "scm.json"
    scm.to_json(path)
    again = StructuralCausalModel.from_json(path)
    np.testing.assert_array_equal(again.weight_matrix(), scm.weight_matrix())
    assert json.loads(path.read_text())["variables"] == list(scm.variables)


def test_calibration_small_chain():
    targets = {("a", "b"): 0.4, ("b", "c"): -0.3, ("d", "c"): 0.2}
    scm = calibrate_scm(targets, ("a", "b", "c", "d"))
    implied = implied_link_strengths(scm)
    for e, t in targets.items():
        assert implied[frozenset(e)][0] == pytest.approx(t, abs=1e-5)


def test_city_datasets_distortion(scm):
    frames = scm_city_datasets(scm, n_cities=3, rows_per_city=40, seed=2)
    assert sorted(frames) == ["city_0", "city_1", "city_2"]
    assert all(len(f) == 40 and f["taz_id"].is_unique for f in frames.values())
    plain = scm_city_datasets(scm, n_cities=1, rows_per_city=40, seed=2, distort=False)
    a = frames["city_0"][list(scm.variables)].to_numpy()
    b = plain["city_0"][list(scm.variables)].to_numpy()
    assert not np.allclose(a, b)
    np.testing.assert_allclose(np.corrcoef(a.T), np.corrcoef(b.T), atol=1e-9)


# -- geometric city ------------------------------------------------------------

SMALL = dict(size_km=12, taz_per_side=6, mean_trips=8, min_trips=3)


def test_city_deterministic():
    a = generate_city(CityConfig(**SMALL, seed=4), "d")
    b = generate_city(CityConfig(**SMALL, seed=4), "d")
    pd.testing.assert_frame_equal(a.zones, b.zones)
    pd.testing.assert_frame_equal(a.od, b.od)
    np.testing.assert_array_equal(a.network.edge_length, b.network.edge_length)
    c = generate_city(CityConfig(**SMALL, seed=5), "d")
    assert not a.od.equals(c.od)


def test_city_invariants():
    city = generate_city(CityConfig(**SMALL, seed=1), "inv")
    assert len(city.zones) == 36 and city.zones["jobs"].sum() > 0
    eligible = city.network.eligible_edges()
    mid = 0.5 * (city.network.node_xy[city.network.edge_u[eligible]]
                 + city.network.node_xy[city.network.edge_v[eligible]])
    from shapely import contains_xy

    for taz, poly in city.taz_polygons.items():
        assert contains_xy(poly, mid[:, 0], mid[:, 1]).any(), taz
    assert set(city.od["origin_taz"]) == set(city.zones["taz_id"])


def test_uci_extremes():
    hi = generate_city(CityConfig(monocentricity=1.0, seed=0), "hi")
    lo = generate_city(CityConfig(monocentricity=0.0, seed=0), "lo")
    assert urban_centrality_index(hi.zones[["x", "y"]], hi.zones["jobs"]).uci >= 0.8
    assert urban_centrality_index(lo.zones[["x", "y"]], lo.zones["jobs"]).uci <= 0.1


def test_uci_increases_with_monocentricity():
    values = [urban_centrality_index(c.zones[["x", "y"]], c.zones["jobs"]).uci
              for c in (generate_city(CityConfig(monocentricity=m, seed=2), "m") for m in (0, 0.25, 0.5, 0.75, 1))]
    assert np.all(np.diff(values) > 0)


def test_secondary_cluster_ring_peak():
    base = dict(seed=3, monocentricity=0.9)
    shares = {}
    for label, cluster in (("none", None), ("cluster", (12.0, 0.3))):
        city = generate_city(CityConfig(**base, secondary_cluster=cluster), "s")
        z = city.zones.set_index("taz_id")
        trips = city.od.loc[city.od.index.repeat(city.od["trip_count"])]
        dest = z.loc[trips["destination_taz"], ["x", "y"]].to_numpy()
        s = ring_destination_shares(dest, trips["origin_taz"], {t: 1e3 for t in z.index}, (0, 0))
        shares[label] = s.set_index("ring_start_km")["share"]
    ring = shares["cluster"]
    assert ring[10.0] > ring[5.0] and ring[10.0] > ring.get(15.0, 0.0)
    assert ring[10.0] > shares["none"][10.0] + 0.1


def test_written_city_is_readable(tmp_path):
    city = generate_city(CityConfig(**SMALL, seed=2), "w")
    d = city.write(tmp_path / "w")
    net = RoadNetwork.from_csv(d / "edges.csv", d / "nodes.csv")
    assert net.edge_length.sum() == pytest.approx(city.network.edge_length.sum())
    emp = EmploymentField.from_csv(d / "employment.csv")
    assert emp.jobs.sum() == city.employment.jobs.sum()
    zones = json.loads((d / "zones.geojson").read_text())
    assert len(zones["features"]) == 36
    assert json.loads((d / "city.json").read_text())["config"]["seed"] == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 8), st.floats(0, 1))
def test_config_validation(per_side, mono):
    cfg = CityConfig(size_km=16, taz_per_side=per_side, monocentricity=mono, mean_trips=3, min_trips=1)
    assert cfg.taz_per_side ** 2 >= 4


def test_infeasible_configs():
    with pytest.raises(ConfigError):
        CityConfig(taz_per_side=1)
    with pytest.raises(ConfigError):
        CityConfig(monocentricity=1.5)
    with pytest.raises(ConfigError):
        CityConfig(secondary_cluster=(40.0, 0.2))
    with pytest.raises(ConfigError):
        CityConfig(size_km=3, taz_per_side=4)
    with pytest.raises(ConfigError, match="unknown"):
        CityConfig.from_dict({"sise_km": 3})
