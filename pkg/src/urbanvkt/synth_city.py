"""Ground-truth generators for validation.

* :class:`StructuralCausalModel` - linear-Gaussian SCM over the five urban
  form features and VKT, with coefficients calibrated so that the link
  strengths a PC run would report match chosen target partial correlations.
* :func:`generate_city` - a square grid city with a road network, a TAZ
  partition, a population surface decaying from the center, a job surface
  of tunable monocentricity and gravity-style trip demand.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from shapely.geometry import box, mapping

from .ci_tests import CiTestOutcome, parcorr_pvalue
from .dataset import FEATURES, TARGET
from .exceptions import ConfigError, DataError
from .geo_features import EmploymentField, RoadNetwork

SCM_VARIABLES = (*FEATURES, TARGET)

# parent -> child: target link strength. Feature-to-feature values are the
# reported partial correlations; the four direct links into VKT are
# assumptions inside the reported range [-0.10, 0.28].
LINK_TARGETS = {
    ("distance_to_center_km", "distance_to_employment_km"): 0.37,
    ("distance_to_center_km", "population_density_per_km2"): -0.24,
    ("distance_to_employment_km", "population_density_per_km2"): -0.14,
    ("population_density_per_km2", "street_connectivity_per_km2"): 0.50,
    ("income", "population_density_per_km2"): -0.07,
    ("income", "street_connectivity_per_km2"): -0.09,
    ("distance_to_center_km", TARGET): 0.28,
    ("distance_to_employment_km", TARGET): 0.15,
    ("population_density_per_km2", TARGET): -0.10,
    ("street_connectivity_per_km2", TARGET): -0.10,
}


# ---------------------------------------------------------------------------
# structural causal model

@dataclass
class StructuralCausalModel:
    """Linear SCM ``X_j = sum_i b_ij X_i + e_j`` with Gaussian noise.

    ``parents[v]`` and ``coefficients[v]`` are parallel tuples; variables
    without an entry are exogenous.
    """

    variables: tuple
    parents: dict
    coefficients: dict
    noise_sd: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.parents = {k: tuple(v) for k, v in self.parents.items()}
        self.coefficients = {k: tuple(float(c) for c in v) for k, v in self.coefficients.items()}
        for child, pars in self.parents.items():
            if child not in self.variables or any(p not in self.variables for p in pars):
                raise ConfigError(f"unknown variable in parents of {child!r}")
            if len(self.coefficients.get(child, ())) != len(pars):
                raise ConfigError(f"coefficients of {child!r} do not match its parents")
            if not np.all(np.isfinite(self.coefficients[child])):
                raise ConfigError(f"non-finite coefficient for {child!r}")
        self.topological_order()

    def topological_order(self):
        order, done = [], set()
        pending = list(self.variables)
        while pending:
            ready = [v for v in pending if all(p in done for p in self.parents.get(v, ()))]
            if not ready:
                raise ConfigError("parent graph contains a cycle")
            for v in ready:
                order.append(v)
                done.add(v)
                pending.remove(v)
        return order

    def edges(self):
        return [(p, c) for c in self.variables for p in self.parents.get(c, ())]

    def skeleton(self):
        return {frozenset(e) for e in self.edges()}

    def coefficient(self, parent, child):
        return self.coefficients[child][self.parents[child].index(parent)]

    def weight_matrix(self):
        """``B[i, j]`` is the coefficient of variable ``i`` in the equation of ``j``."""
        idx = {v: k for k, v in enumerate(self.variables)}
        B = np.zeros((len(self.variables),) * 2)
        for child, pars in self.parents.items():
            for p, c in zip(pars, self.coefficients[child]):
                B[idx[p], idx[child]] = c
        return B

    def noise_vector(self):
        return np.array([self.noise_sd.get(v, 1.0) for v in self.variables])

    def covariance(self):
        B = self.weight_matrix()
        A = np.linalg.inv(np.eye(len(B)) - B)
        return A.T @ np.diag(self.noise_vector() ** 2) @ A

    def sample(self, n, seed=None):
        """Ancestral sample of ``n`` rows, columns in :attr:`variables` order."""
        if n < 1:
            raise DataError("n must be at least 1")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        idx = {v: k for k, v in enumerate(self.variables)}
        noise = rng.standard_normal((n, len(self.variables))) * self.noise_vector()
        X = np.zeros_like(noise)
        for v in self.topological_order():
            j = idx[v]
            X[:, j] = noise[:, j]
            for p, c in zip(self.parents.get(v, ()), self.coefficients.get(v, ())):
                X[:, j] += c * X[:, idx[p]]
        return X

    def with_coefficients(self, values: Mapping):
        coefs = {c: list(v) for c, v in self.coefficients.items()}
        for (p, c), b in values.items():
            coefs[c][self.parents[c].index(p)] = float(b)
        return StructuralCausalModel(self.variables, self.parents, coefs, self.noise_sd, self.seed)

    def to_dict(self):
        return {
            "variables": list(self.variables),
            "edges": [{"parent": p, "child": c, "coefficient": self.coefficient(p, c)} for p, c in self.edges()],
            "noise_sd": {v: float(s) for v, s in zip(self.variables, self.noise_vector())},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping):
        parents, coefs = {}, {}
        for e in data["edges"]:
            parents.setdefault(e["child"], []).append(e["parent"])
            coefs.setdefault(e["child"], []).append(e["coefficient"])
        return cls(tuple(data["variables"]), parents, coefs, dict(data.get("noise_sd", {})),
                   int(data.get("seed", 0)))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_scm(scm: StructuralCausalModel, n, seed=None):
    return scm.sample(n, seed)


class CovarianceCiTest:
    """Partial-correlation test evaluated on a known covariance matrix.

    The p-value is what the t-test would give for that partial correlation
    with ``n`` samples; useful for population-level PC runs.
    """

    def __init__(self, cov, n):
        self.cov = np.asarray(cov, dtype=float)
        self.n = n

    def __call__(self, x, y, Z=()):
        Z = tuple(sorted(Z))
        idx = [x, y, *Z]
        P = np.linalg.inv(self.cov[np.ix_(idx, idx)])
        rho = float(-P[0, 1] / np.sqrt(P[0, 0] * P[1, 1]))
        p, t = parcorr_pvalue(rho, self.n, len(Z))
        return CiTestOutcome(t, p, rho, self.n, Z)


def implied_link_strengths(scm: StructuralCausalModel, n=1542, alpha=0.025, knowledge=None):
    """Link strength per skeleton edge of a population-level PC run.

    Returns ``{frozenset(pair): (rho, conditioning_names)}`` for every edge
    the population skeleton keeps.
    """
    from .causal_discovery import _max_p_outcome, pc_skeleton

    graph, _ = pc_skeleton(None, CovarianceCiTest(scm.covariance(), n), alpha, knowledge,
                           list(scm.variables))
    out = {}
    for i, j, _mark in graph.edges():
        best = _max_p_outcome(graph.test_log[(i, j)])
        names = tuple(scm.variables[k] for k in best.condition_set)
        out[frozenset((scm.variables[i], scm.variables[j]))] = (best.partial_correlation, names)
    return out


def calibrate_scm(targets: Mapping = LINK_TARGETS, variables=SCM_VARIABLES, n=1542, alpha=0.025,
                  knowledge=None, tol=1e-6, max_iter=500):
    """Fixed-point search for path coefficients whose implied link strengths hit ``targets``.

    Starts from the targets themselves and repeatedly rescales each
    coefficient by ``target / implied``; an edge the population skeleton
    drops, or whose implied sign is wrong, has its coefficient enlarged
    instead. Raises when the iteration does not converge.
    """
    parents, coefs = {}, {}
    for (p, c), rho in targets.items():
        parents.setdefault(c, []).append(p)
        coefs.setdefault(c, []).append(rho)
    scm = StructuralCausalModel(tuple(variables), parents, coefs)
    for _ in range(max_iter):
        implied = implied_link_strengths(scm, n, alpha, knowledge)
        update, worst = {}, 0.0
        for (p, c), rho in targets.items():
            got = implied.get(frozenset((p, c)))
            if got is None or np.sign(got[0]) != np.sign(rho):
                # edge dropped by the skeleton or cancelled by other paths: strengthen it
                worst = np.inf
                update[(p, c)] = scm.coefficient(p, c) * 1.5
                continue
            worst = max(worst, abs(got[0] - rho))
            update[(p, c)] = scm.coefficient(p, c) * rho / got[0]
        if worst < tol:
            return scm
        scm = scm.with_coefficients(update)
    raise DataError(f"calibration did not converge (max deviation {worst:.2e})")


def urban_form_scm(path=None) -> StructuralCausalModel:
    """The calibrated urban-form SCM shipped with the package."""
    if path is None:
        with resources.files("urbanvkt").joinpath("data/urban_form_scm.json").open("r") as fh:
            return StructuralCausalModel.from_dict(json.load(fh))
    return StructuralCausalModel.from_json(path)


def scm_city_datasets(scm: StructuralCausalModel, n_cities=6, rows_per_city=300, seed=0,
                      distort=True):
    """Per-city frames sampled from one SCM.

    With ``distort`` each city gets its own positive scale and offset per
    column, which per-city standardization removes again.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for c in range(n_cities):
        X = scm.sample(rows_per_city, seed=int(rng.integers(2**32)))
        if distort:
            X = X * rng.uniform(0.5, 2.0, X.shape[1]) + rng.normal(0, 3, X.shape[1])
        frame = pd.DataFrame(X, columns=list(scm.variables))
        frame.insert(0, "taz_id", [f"c{c}_{k:04d}" for k in range(rows_per_city)])
        out[f"city_{c}"] = frame
    return out


# ---------------------------------------------------------------------------
# geometric synthetic city

@dataclass(frozen=True)
class CityConfig:
    """Parameters of :func:`generate_city` (lengths in km unless noted)."""

    size_km: float = 36.0
    grid_spacing_m: float = 750.0
    taz_per_side: int = 17
    monocentricity: float = 0.8
    secondary_cluster: tuple | None = None  # (radius_km, job share)
    peak_density: float = 10000.0
    population_decay_km: float = 5.0
    density_noise: float = 0.5
    job_decay_km: float = 0.75
    job_noise: float = 0.25
    jobs_per_resident: float = 0.5
    removal_min: float = 0.1
    removal_max: float = 0.6
    income_mean: float = 30000.0
    local_share_max: float = 0.6
    local_density_quantile: float = 0.8
    local_steepness: float = 3.0
    gravity_km: float = 8.0
    mean_trips: float = 25.0
    min_trips: int = 12
    off_window_share: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.taz_per_side < 2:
            raise ConfigError("need at least 4 TAZ (taz_per_side >= 2)")
        if self.size_km <= 0 or self.grid_spacing_m <= 0:
            raise ConfigError("size and grid spacing must be positive")
        if self.size_km * 1000 / self.grid_spacing_m < 2:
            raise ConfigError("grid spacing too coarse for the city size")
        if self.size_km * 1000 / self.taz_per_side < 2 * self.grid_spacing_m:
            raise ConfigError("TAZ cells must span at least two grid spacings")
        if not 0 <= self.monocentricity <= 1:
            raise ConfigError("monocentricity must lie in [0, 1]")
        if self.secondary_cluster is not None:
            r, share = self.secondary_cluster
            if not 0 < r < self.size_km / 2 or not 0 < share < 1:
                raise ConfigError("secondary cluster needs 0 < radius < size/2 and 0 < share < 1")
        if self.min_trips < 1 or self.mean_trips <= 0:
            raise ConfigError("trip counts must be positive")

    @classmethod
    def from_dict(cls, data: Mapping):
        data = dict(data)
        if data.get("secondary_cluster") is not None:
            data["secondary_cluster"] = tuple(data["secondary_cluster"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown city config keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class SyntheticCity:
    name: str
    config: CityConfig
    network: RoadNetwork
    taz_polygons: dict
    zones: pd.DataFrame
    employment: EmploymentField
    od: pd.DataFrame
    center: tuple = (0.0, 0.0)

    def write(self, directory):
        """Write the raw inputs in the formats the ingestion code reads."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.network.to_csv(d / "edges.csv", d / "nodes.csv")
        features = []
        for row in self.zones.itertuples(index=False):
            props = {k: (v.item() if hasattr(v, "item") else v) for k, v in row._asdict().items()}
            features.append({"type": "Feature", "geometry": mapping(self.taz_polygons[row.taz_id]),
                             "properties": props})
        (d / "zones.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": features}))
        pd.DataFrame({"x": self.employment.coords[:, 0], "y": self.employment.coords[:, 1],
                      "jobs": self.employment.jobs}).to_csv(d / "employment.csv", index=False)
        self.od.to_csv(d / "od.csv", index=False)
        meta = {"name": self.name, "center": list(self.center), "config": asdict(self.config)}
        (d / "city.json").write_text(json.dumps(meta, indent=2) + "\n")
        return d


def _road_class(k):
    if k % 8 == 0:
        return "primary"
    if k % 4 == 0:
        return "secondary"
    if k % 2 == 0:
        return "tertiary"
    return "residential"


def _grid_network(cfg: CityConfig, rng):
    half = cfg.size_km * 500.0
    m = int(round(cfg.size_km * 1000 / cfg.grid_spacing_m))
    coords = np.linspace(-half, half, m + 1)
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    node_xy = np.column_stack([gx.ravel(), gy.ravel()])
    node = lambda i, j: i * (m + 1) + j  # noqa: E731
    u, v, cls = [], [], []
    for i in range(m + 1):
        for j in range(m + 1):
            if i < m:  # along x, lies on horizontal line j
                u.append(node(i, j)); v.append(node(i + 1, j)); cls.append(_road_class(j))
            if j < m:  # along y, lies on vertical line i
                u.append(node(i, j)); v.append(node(i, j + 1)); cls.append(_road_class(i))
    u, v, cls = np.array(u), np.array(v), np.array(cls, dtype=object)
    mid = 0.5 * (node_xy[u] + node_xy[v])
    r = np.hypot(mid[:, 0], mid[:, 1]) / half
    p_remove = cfg.removal_min + (cfg.removal_max - cfg.removal_min) * np.clip(r, 0, 1)
    keep = (cls != "residential") | (rng.random(len(u)) >= p_remove)
    u, v, cls = u[keep], v[keep], cls[keep]
    used = np.unique(np.concatenate([u, v]))
    remap = -np.ones(len(node_xy), dtype=np.int64)
    remap[used] = np.arange(len(used))
    length = np.hypot(*(node_xy[u] - node_xy[v]).T)
    return RoadNetwork([f"n{k}" for k in used], node_xy[used], remap[u], remap[v], length, cls), node_xy


def generate_city(config: CityConfig | None = None, name="synthetic") -> SyntheticCity:
    """Build a square synthetic city centered on the origin.

    Geometry, zones, jobs and demand are all drawn from one stream seeded by
    ``config.seed``.
    """
    cfg = config or CityConfig()
    rng = np.random.default_rng(cfg.seed)
    network, grid_xy = _grid_network(cfg, rng)
    half = cfg.size_km * 500.0

    # zones
    t = cfg.taz_per_side
    edges = np.linspace(-half, half, t + 1)
    cell_km2 = (cfg.size_km / t) ** 2
    polygons, rows = {}, []
    for a, b in itertools.product(range(t), range(t)):
        taz = f"{name}_{a:02d}{b:02d}"
        poly = box(edges[a], edges[b], edges[a + 1], edges[b + 1])
        polygons[taz] = poly
        c = poly.centroid
        rows.append((taz, c.x, c.y))
    zones = pd.DataFrame(rows, columns=["taz_id", "x", "y"])
    r_km = np.hypot(zones["x"], zones["y"]) / 1000.0
    density = cfg.peak_density * np.exp(-r_km / cfg.population_decay_km) \
        * rng.lognormal(0.0, cfg.density_noise, len(zones))
    zones["city"] = name
    zones["area_km2"] = cell_km2
    zones["population"] = np.round(density * cell_km2)
    zones["income"] = np.round(cfg.income_mean * np.exp(0.01 * r_km) * rng.lognormal(0, 0.3, len(zones)), 2)

    # jobs on the full grid of sites
    site_r = np.hypot(grid_xy[:, 0], grid_xy[:, 1]) / 1000.0
    area_km2 = cfg.size_km ** 2
    lam = cfg.job_decay_km
    surface = (1 - cfg.monocentricity) / area_km2 \
        + cfg.monocentricity * np.exp(-site_r / lam) / (2 * np.pi * lam ** 2)
    if cfg.secondary_cluster is not None:
        r2, share = cfg.secondary_cluster
        d2 = np.hypot(grid_xy[:, 0] / 1000.0 - r2, grid_xy[:, 1] / 1000.0)
        surface = (1 - share) * surface + share * np.exp(-0.5 * (d2 / 1.5) ** 2) / (2 * np.pi * 1.5 ** 2)
    weight = surface * rng.lognormal(0.0, cfg.job_noise, len(grid_xy))
    total_jobs = cfg.jobs_per_resident * zones["population"].sum()
    site_jobs = np.round(total_jobs * weight / weight.sum())
    employment = EmploymentField(grid_xy[site_jobs > 0], site_jobs[site_jobs > 0])
    # assign sites to cells (half-open on the upper side, closed at the city edge)
    ia = np.clip(np.searchsorted(edges, grid_xy[:, 0], side="right") - 1, 0, t - 1)
    ib = np.clip(np.searchsorted(edges, grid_xy[:, 1], side="right") - 1, 0, t - 1)
    zones["jobs"] = np.bincount(ia * t + ib, weights=site_jobs, minlength=t * t)
    zones["is_airport"] = False
    zones["boundary_overlap_fraction"] = 1.0
    if not zones["jobs"].sum() > 0:
        raise DataError("synthetic city has no jobs")

    od = _gravity_demand(zones, density, cfg, rng)
    return SyntheticCity(name, cfg, network, polygons, zones, employment, od, (0.0, 0.0))


def _gravity_demand(zones, density, cfg: CityConfig, rng):
    """Trips per origin zone: local trips with a density-dependent share, else gravity."""
    ids = zones["taz_id"].to_numpy()
    xy = zones[["x", "y"]].to_numpy() / 1000.0
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    attract = zones["jobs"].to_numpy() * np.exp(-dist / cfg.gravity_km)
    # local trips are common only in the densest zones
    half_density = np.quantile(density, cfg.local_density_quantile)
    local_share = cfg.local_share_max / (1.0 + (half_density / density) ** cfg.local_steepness)
    records = []
    for i in range(len(ids)):
        n_in = max(cfg.min_trips, int(rng.poisson(cfg.mean_trips)))
        n_off = int(rng.binomial(n_in, cfg.off_window_share))
        hours = np.concatenate([rng.integers(6, 10, n_in), rng.choice([5, 10, 11], n_off)])
        local = rng.random(len(hours)) < local_share[i]
        p = attract[i] / attract[i].sum()
        dest = np.where(local, i, rng.choice(len(ids), size=len(hours), p=p))
        for d, h in zip(dest, hours):
            records.append((ids[i], ids[d], int(h)))
    od = pd.DataFrame(records, columns=["origin_taz", "destination_taz", "hour_of_day"])
    od = od.groupby(["origin_taz", "destination_taz", "hour_of_day"], sort=True).size()
    return od.rename("trip_count").reset_index()
