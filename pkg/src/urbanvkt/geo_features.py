"""Urban form features, trip sampling and network travel distances.

Coordinates are projected planar meters throughout; distances are returned
in km. Geographic-to-planar projection belongs to ingestion.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
import shapely
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree
from shapely.geometry import LineString, Point, shape
from shapely.strtree import STRtree

from .exceptions import DataError

ROAD_CLASSES = ("residential", "tertiary", "secondary", "primary", "highway", "other")
SAMPLING_CLASSES = frozenset({"residential", "tertiary"})
SNAP_RADIUS_M = 500.0
MERGE_RADIUS_M = 1.0
INTERSECTION_MIN_DEGREE = 3


# ---------------------------------------------------------------------------
# point features

def distance_to_center(taz_centroid, center, crs=None, center_crs=None):
    """Planar distance (km) from a TAZ centroid to the city center.

    ``center`` may be a single point or a sequence of points, in which case
    the distance to the nearest one is returned. When both CRS labels are
    given they must agree.
    """
    if crs is not None and center_crs is not None and crs != center_crs:
        raise DataError(f"CRS mismatch: centroid in {crs!r}, center in {center_crs!r}")
    centers = np.atleast_2d(np.asarray(center, dtype=float))
    p = np.asarray(taz_centroid, dtype=float)
    return float(np.min(np.hypot(centers[:, 0] - p[0], centers[:, 1] - p[1]))) / 1000.0


@dataclass(frozen=True)
class EmploymentField:
    """Job locations: ``coords`` (n, 2) in meters and ``jobs`` (n,)."""

    coords: np.ndarray
    jobs: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        jobs = np.asarray(self.jobs, dtype=float).reshape(-1)
        if len(coords) != len(jobs):
            raise DataError("coords and jobs differ in length")
        if np.any(jobs < 0):
            raise DataError("job counts must be nonnegative")
        if not jobs.sum() > 0:
            raise DataError("employment field has zero total jobs")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "jobs", jobs)

    @classmethod
    def from_csv(cls, path):
        frame = pd.read_csv(path)
        missing = {"x", "y", "jobs"} - set(frame.columns)
        if missing:
            raise DataError(f"{path}: missing column(s) {sorted(missing)}")
        return cls(frame[["x", "y"]].to_numpy(float), frame["jobs"].to_numpy(float))

    @property
    def total(self) -> float:
        return float(self.jobs.sum())


def distance_to_employment(taz_centroid, field: EmploymentField, fraction=0.01,
                           selector="nearest", seed=None):
    """Job-weighted mean distance (km) to the first ``fraction`` of all jobs.

    With ``selector="nearest"`` sites are taken in order of distance from the
    centroid; with ``"random"`` in a seeded random order. Sites are added until
    ``fraction * total jobs`` is covered, the last one contributing only the
    mass still needed.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    p = np.asarray(taz_centroid, dtype=float)
    dist = np.hypot(field.coords[:, 0] - p[0], field.coords[:, 1] - p[1])
    if selector == "nearest":
        order = np.lexsort((np.arange(len(dist)), dist))
    elif selector == "random":
        order = np.random.default_rng(seed).permutation(len(dist))
    else:
        raise ValueError(f"unknown selector {selector!r}")
    need = fraction * field.total
    jobs = field.jobs[order]
    before = np.concatenate(([0.0], np.cumsum(jobs)[:-1]))
    taken = np.clip(need - before, 0.0, jobs)
    return float(np.dot(taken, dist[order]) / taken.sum()) / 1000.0


def population_density(population, area_km2):
    """Inhabitants per km2."""
    if not area_km2 > 0:
        raise DataError(f"area must be positive, got {area_km2}")
    return population / area_km2


def street_connectivity(intersection_count, area_km2):
    """Intersections per km2."""
    if not area_km2 > 0:
        raise DataError(f"area must be positive, got {area_km2}")
    return intersection_count / area_km2


# ---------------------------------------------------------------------------
# road network

@dataclass
class RoadNetwork:
    """Undirected street network with straight edges.

    ``node_xy`` is (n, 2); edge arrays are parallel. Node ids are kept for
    IO, internally nodes are addressed by position.
    """

    node_ids: list
    node_xy: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_length: np.ndarray
    edge_class: np.ndarray
    _graph: sparse.csr_matrix | None = field(default=None, repr=False)
    _eligible_tree: STRtree | None = field(default=None, repr=False)

    def __post_init__(self):
        self.node_xy = np.asarray(self.node_xy, dtype=float).reshape(-1, 2)
        self.edge_u = np.asarray(self.edge_u, dtype=np.int64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.int64)
        self.edge_length = np.asarray(self.edge_length, dtype=float)
        self.edge_class = np.asarray(self.edge_class, dtype=object)
        if len(set(self.node_ids)) != len(self.node_ids):
            raise DataError("node ids are not unique")
        if len(self.node_ids) != len(self.node_xy):
            raise DataError("node ids and coordinates differ in length")
        if np.any(~(self.edge_length > 0)):
            bad = int(np.flatnonzero(~(self.edge_length > 0))[0])
            raise DataError(f"edge {bad} has non-positive length {self.edge_length[bad]}")
        unknown = set(self.edge_class) - set(ROAD_CLASSES)
        if unknown:
            raise DataError(f"unknown road class(es) {sorted(unknown)}")

    # construction ----------------------------------------------------------

    @classmethod
    def from_edges(cls, nodes, edges):
        """Build from ``{id: (x, y)}`` and ``[(u, v, length_m, road_class), ...]``."""
        ids = list(nodes)
        index = {nid: i for i, nid in enumerate(ids)}
        xy = np.array([nodes[n] for n in ids], dtype=float).reshape(-1, 2)
        try:
            u = [index[e[0]] for e in edges]
            v = [index[e[1]] for e in edges]
        except KeyError as exc:
            raise DataError(f"edge references unknown node {exc.args[0]!r}") from None
        return cls(ids, xy, u, v, [float(e[2]) for e in edges], [e[3] for e in edges])

    @classmethod
    def from_csv(cls, edges_path, nodes_path):
        nodes = pd.read_csv(nodes_path, dtype={"id": str})
        edges = pd.read_csv(edges_path, dtype={"u": str, "v": str})
        for name, frame, cols in (("nodes", nodes, {"id", "x", "y"}),
                                  ("edges", edges, {"u", "v", "length_m", "road_class"})):
            missing = cols - set(frame.columns)
            if missing:
                raise DataError(f"{name} table is missing column(s) {sorted(missing)}")
        node_map = dict(zip(nodes["id"], zip(nodes["x"], nodes["y"])))
        rows = list(edges[["u", "v", "length_m", "road_class"]].itertuples(index=False, name=None))
        return cls.from_edges(node_map, rows)

    @classmethod
    def from_geojson(cls, path):
        """Build from a LineString FeatureCollection with a ``road_class`` property.

        Every vertex becomes a node; vertices closer than 1 m are merged.
        """
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        points, segments = [], []
        for feat in doc.get("features", []):
            geom = shape(feat["geometry"])
            road_class = (feat.get("properties") or {}).get("road_class", "other")
            lines = getattr(geom, "geoms", [geom])
            for line in lines:
                coords = list(line.coords)
                base = len(points)
                points.extend(c[:2] for c in coords)
                segments.extend((base + k, base + k + 1, road_class) for k in range(len(coords) - 1))
        xy = np.asarray(points, dtype=float).reshape(-1, 2)
        label = _merge_close_points(xy, MERGE_RADIUS_M)
        n = label.max() + 1 if len(label) else 0
        merged_xy = np.zeros((n, 2))
        merged_xy[label] = xy  # any representative of a cluster suffices
        edges = []
        for a, b, cls_ in segments:
            la, lb = label[a], label[b]
            if la == lb:
                continue
            edges.append((la, lb, float(np.hypot(*(merged_xy[la] - merged_xy[lb]))), cls_))
        nodes = {i: tuple(merged_xy[i]) for i in range(n)}
        return cls.from_edges(nodes, edges)

    def to_csv(self, edges_path, nodes_path):
        with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y"])
            for nid, (x, y) in zip(self.node_ids, self.node_xy):
                w.writerow([nid, repr(float(x)), repr(float(y))])
        with open(edges_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "length_m", "road_class"])
            for u, v, length, cls_ in zip(self.edge_u, self.edge_v, self.edge_length, self.edge_class):
                w.writerow([self.node_ids[u], self.node_ids[v], repr(float(length)), cls_])

    # derived structures ------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_xy)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    @property
    def graph(self) -> sparse.csr_matrix:
        """Symmetric adjacency with the shortest length kept for parallel edges."""
        if self._graph is None:
            n = self.n_nodes
            a = np.minimum(self.edge_u, self.edge_v)
            b = np.maximum(self.edge_u, self.edge_v)
            keep = a != b
            frame = pd.DataFrame({"a": a[keep], "b": b[keep], "w": self.edge_length[keep]})
            best = frame.groupby(["a", "b"], sort=True)["w"].min().reset_index()
            rows = np.concatenate([best["a"], best["b"]])
            cols = np.concatenate([best["b"], best["a"]])
            vals = np.concatenate([best["w"], best["w"]])
            self._graph = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._graph

    def edge_geometry(self, e) -> LineString:
        return LineString([self.node_xy[self.edge_u[e]], self.node_xy[self.edge_v[e]]])

    def eligible_edges(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.edge_class, list(SAMPLING_CLASSES)))

    def point_on_edge(self, e, t):
        """Coordinates at fraction ``t`` along edge ``e`` (from u to v)."""
        p = self.node_xy[self.edge_u[e]]
        q = self.node_xy[self.edge_v[e]]
        t = np.asarray(t, dtype=float)[..., None]
        return p + t * (q - p)

    def snap(self, xy, radius=SNAP_RADIUS_M):
        """Nearest location on the nearest sampling-eligible edge.

        Returns ``(edge, t)``. Raises ``DataError`` when no eligible edge lies
        within ``radius`` meters.
        """
        eligible = self.eligible_edges()
        if self._eligible_tree is None:
            self._eligible_tree = STRtree([self.edge_geometry(e) for e in eligible])
        pt = Point(float(xy[0]), float(xy[1]))
        hit = self._eligible_tree.query_nearest(pt, max_distance=radius, all_matches=True)
        if len(hit) == 0:
            raise DataError(f"point {tuple(xy)} is more than {radius} m from any eligible edge")
        k = int(np.min(hit))
        e = int(eligible[k])
        line = self.edge_geometry(e)
        return e, float(line.project(pt) / line.length)


def _merge_close_points(xy, radius):
    """Cluster labels joining points closer than ``radius`` (transitively)."""
    if len(xy) == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(xy).query_pairs(radius, output_type="ndarray")
    n = len(xy)
    adj = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(adj, directed=False)
    # relabel by first occurrence so labels follow input order
    _, first = np.unique(label, return_index=True)
    remap = np.empty_like(first)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[label]


def node_degrees(network: RoadNetwork, merge_radius=MERGE_RADIUS_M):
    """Degree of every node after merging nodes closer than ``merge_radius``.

    Returns ``(label, degree)`` where ``label`` maps nodes to merged clusters
    and ``degree[c]`` counts distinct neighbouring clusters of cluster ``c``.
    """
    label = _merge_close_points(network.node_xy, merge_radius)
    a, b = label[network.edge_u], label[network.edge_v]
    keep = a != b
    pairs = np.unique(np.sort(np.column_stack([a[keep], b[keep]]), axis=1), axis=0)
    n = label.max() + 1
    degree = np.bincount(pairs.ravel(), minlength=n) if len(pairs) else np.zeros(n, dtype=int)
    return label, degree


def count_intersections(network: RoadNetwork, polygon, min_degree=INTERSECTION_MIN_DEGREE):
    """Number of merged nodes of degree >= ``min_degree`` inside ``polygon`` (boundary included)."""
    if polygon is None or polygon.is_empty:
        return 0
    label, degree = node_degrees(network)
    n = len(degree)
    # one representative location per merged cluster
    rep = np.zeros((n, 2))
    rep[label] = network.node_xy
    inside = shapely.intersects_xy(polygon, rep[:, 0], rep[:, 1])
    return int(np.count_nonzero(inside & (degree >= min_degree)))


# ---------------------------------------------------------------------------
# trip endpoints and distances

def _eligible_pieces(network: RoadNetwork, polygon, tree=None, eligible=None):
    """Sampling support inside a polygon as arrays ``(edge, t0, t1, length_m)``."""
    if eligible is None:
        eligible = network.eligible_edges()
    if tree is None:
        tree = STRtree([network.edge_geometry(e) for e in eligible])
    pieces = []
    for k in sorted(tree.query(polygon, predicate="intersects")):
        e = int(eligible[k])
        line = network.edge_geometry(e)
        clipped = line.intersection(polygon)
        parts = getattr(clipped, "geoms", [clipped])
        for part in parts:
            if part.is_empty or part.geom_type != "LineString" or part.length <= 0:
                continue
            c = part.coords
            t0 = line.project(Point(c[0])) / line.length
            t1 = line.project(Point(c[-1])) / line.length
            lo, hi = min(t0, t1), max(t0, t1)
            pieces.append((e, lo, hi, (hi - lo) * network.edge_length[e]))
    if not pieces:
        return None
    arr = np.array(pieces, dtype=float)
    return arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2], arr[:, 3]


class EndpointSampler:
    """Length-uniform sampling of points on residential/tertiary edges per TAZ."""

    def __init__(self, network: RoadNetwork, taz_polygons):
        self.network = network
        self.taz_polygons = dict(taz_polygons)
        self._eligible = network.eligible_edges()
        self._tree = STRtree([network.edge_geometry(e) for e in self._eligible])
        self._support = {}

    def support(self, taz_id):
        if taz_id not in self._support:
            if taz_id not in self.taz_polygons:
                raise DataError(f"no polygon for TAZ {taz_id!r}")
            pieces = _eligible_pieces(self.network, self.taz_polygons[taz_id], self._tree, self._eligible)
            if pieces is None:
                raise DataError(f"TAZ {taz_id!r} contains no residential or tertiary road")
            edges, t0, t1, length = pieces
            self._support[taz_id] = (edges, t0, t1, np.cumsum(length) / length.sum())
        return self._support[taz_id]

    def sample(self, taz_id, n, rng):
        edges, t0, t1, cdf = self.support(taz_id)
        u = rng.random((n, 2))
        k = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(edges) - 1)
        return edges[k], t0[k] + u[:, 1] * (t1[k] - t0[k])


def sample_trip_endpoints(network: RoadNetwork, od: pd.DataFrame, taz_polygons, seed):
    """Sample one origin and one destination point per trip in ``od``.

    ``od`` has columns ``origin_taz, destination_taz, trip_count,
    hour_of_day``. Rows are processed in order from a single seeded stream.

    Returns
    -------
    DataFrame with one row per trip: ``origin_taz, destination_taz,
    hour_of_day, o_edge, o_t, ox, oy, d_edge, d_t, dx, dy``.
    """
    sampler = EndpointSampler(network, taz_polygons)
    rng = np.random.default_rng(seed)
    cols = {k: [] for k in ("origin_taz", "destination_taz", "hour_of_day", "o_edge", "o_t", "d_edge", "d_t")}
    for row in od.itertuples(index=False):
        n = int(row.trip_count)
        if n <= 0:
            continue
        oe, ot = sampler.sample(row.origin_taz, n, rng)
        de, dt = sampler.sample(row.destination_taz, n, rng)
        cols["origin_taz"].append([row.origin_taz] * n)
        cols["destination_taz"].append([row.destination_taz] * n)
        cols["hour_of_day"].append([row.hour_of_day] * n)
        for key, arr in (("o_edge", oe), ("o_t", ot), ("d_edge", de), ("d_t", dt)):
            cols[key].append(arr)
    if not cols["o_edge"]:
        return pd.DataFrame(columns=["origin_taz", "destination_taz", "hour_of_day", "o_edge", "o_t",
                                     "ox", "oy", "d_edge", "d_t", "dx", "dy"])
    flat = {k: np.concatenate([np.asarray(a) for a in v]) for k, v in cols.items()}
    oxy = network.point_on_edge(flat["o_edge"], flat["o_t"])
    dxy = network.point_on_edge(flat["d_edge"], flat["d_t"])
    return pd.DataFrame({
        "origin_taz": flat["origin_taz"], "destination_taz": flat["destination_taz"],
        "hour_of_day": flat["hour_of_day"],
        "o_edge": flat["o_edge"], "o_t": flat["o_t"], "ox": oxy[:, 0], "oy": oxy[:, 1],
        "d_edge": flat["d_edge"], "d_t": flat["d_t"], "dx": dxy[:, 0], "dy": dxy[:, 1],
    })


class EdgeLocation(NamedTuple):
    """A point at fraction ``t`` along network edge ``edge``."""

    edge: int
    t: float


def _as_location(network, point) -> EdgeLocation:
    if isinstance(point, EdgeLocation):
        return point
    return EdgeLocation(*network.snap(point))


def shortest_path_distance(network: RoadNetwork, origin, destination):
    """Network distance (km) between two locations.

    Locations are :class:`EdgeLocation` values or planar coordinates, which are snapped
    to the nearest eligible edge. Returns ``math.inf`` when the two locations
    are not connected.
    """
    o = _as_location(network, origin)
    d = _as_location(network, destination)
    return float(path_distances(network, [o[0]], [o[1]], [d[0]], [d[1]])[0])


def path_distances(network: RoadNetwork, o_edge, o_t, d_edge, d_t, chunk=256):
    """Vectorized network distances (km) between on-edge locations.

    Each location at fraction ``t`` of edge (u, v) reaches u after ``t*L`` and
    v after ``(1-t)*L``. Dijkstra runs once per distinct origin-side node.
    Unreachable pairs get ``inf``.
    """
    o_edge = np.asarray(o_edge, dtype=np.int64)
    d_edge = np.asarray(d_edge, dtype=np.int64)
    o_t = np.asarray(o_t, dtype=float)
    d_t = np.asarray(d_t, dtype=float)
    L_o = network.edge_length[o_edge]
    L_d = network.edge_length[d_edge]
    o_nodes = np.column_stack([network.edge_u[o_edge], network.edge_v[o_edge]])
    o_off = np.column_stack([o_t * L_o, (1 - o_t) * L_o])
    d_nodes = np.column_stack([network.edge_u[d_edge], network.edge_v[d_edge]])
    d_off = np.column_stack([d_t * L_d, (1 - d_t) * L_d])

    best = np.full(len(o_edge), np.inf)
    same = o_edge == d_edge
    best[same] = np.abs(o_t[same] - d_t[same]) * L_o[same]

    sources = np.unique(o_nodes)
    graph = network.graph
    for start in range(0, len(sources), chunk):
        src = sources[start:start + chunk]
        dist = dijkstra(graph, directed=False, indices=src)
        row_of = {int(s): i for i, s in enumerate(src)}
        for a in (0, 1):
            mask = np.isin(o_nodes[:, a], src)
            if not mask.any():
                continue
            rows = np.array([row_of[int(s)] for s in o_nodes[mask, a]])
            for b in (0, 1):
                cand = o_off[mask, a] + dist[rows, d_nodes[mask, b]] + d_off[mask, b]
                best[mask] = np.minimum(best[mask], cand)
    return best / 1000.0


def trip_distances(network: RoadNetwork, trips: pd.DataFrame):
    """Shortest-path distance (km) for every sampled trip row."""
    return path_distances(network, trips["o_edge"], trips["o_t"], trips["d_edge"], trips["d_t"])


def _hour_value(h):
    if isinstance(h, str):
        hh, _, mm = h.partition(":")
        return int(hh) + (int(mm) if mm else 0) / 60.0
    if hasattr(h, "hour"):
        return h.hour + h.minute / 60.0
    return float(h)


def mean_vkt_per_taz(trips, window=(6, 10)):
    """Mean trip distance per origin TAZ over trips starting in ``[start, end)``.

    ``trips`` is an iterable of ``(origin_taz, distance_km, hour)`` where the
    hour is decimal or ``"HH:MM"``. TAZ without in-window trips are omitted.
    """
    start, end = window
    sums, counts = {}, {}
    for taz, dist, hour in trips:
        if dist < 0:
            raise DataError(f"negative distance {dist} for TAZ {taz!r}")
        h = _hour_value(hour)
        if not start <= h < end:
            continue
        sums[taz] = sums.get(taz, 0.0) + float(dist)
        counts[taz] = counts.get(taz, 0) + 1
    return {taz: sums[taz] / counts[taz] for taz in sums}


# ---------------------------------------------------------------------------
# urban centrality index

@dataclass(frozen=True)
class CentralityResult:
    location_coefficient: float
    proximity_index: float
    uci: float
    venables: float
    venables_max: float
    metadata: dict = field(default_factory=dict)


def urban_centrality_index(centroids, jobs) -> CentralityResult:
    """Job-distribution monocentricity in [0, 1] (1 = all jobs in one zone).

    The product of the location coefficient of job shares and a proximity
    index ``1 - V / V_max`` with ``V = s'Ds / 2``. ``V_max`` is taken as the
    value with all jobs split evenly between the two farthest zones; the
    proximity index is clipped to [0, 1] where that bound is exceeded.
    """
    xy = np.asarray(centroids, dtype=float).reshape(-1, 2)
    jobs = np.asarray(jobs, dtype=float).reshape(-1)
    n = len(xy)
    if n < 2 or len(jobs) != n:
        raise DataError("need at least two zones with one job count each")
    if np.any(jobs < 0) or not jobs.sum() > 0:
        raise DataError("job counts must be nonnegative with a positive total")
    share = jobs / jobs.sum()
    lc = min(float(np.abs(share - 1.0 / n).sum() / (2.0 * (1.0 - 1.0 / n))), 1.0)  # rounding can exceed 1
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    dmax = float(dist.max())
    if dmax == 0:
        raise DataError("all zone centroids coincide")
    v = 0.5 * float(share @ dist @ share)
    v_max = dmax / 4.0
    raw_pi = 1.0 - v / v_max
    pi = min(max(raw_pi, 0.0), 1.0)
    meta = {
        "venables_max_rule": "equal split between the two farthest zones",
        "proximity_clipped": raw_pi != pi,
    }
    return CentralityResult(lc, pi, lc * pi, v, v_max, meta)
