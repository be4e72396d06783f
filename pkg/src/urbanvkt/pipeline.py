"""Pipeline stages shared by the command line and the end-to-end tests.

Each function takes plain data (frames, networks, models) and returns plain
data; file handling lives in :mod:`urbanvkt.cli`.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .causal_shapley import CausalChain, ShapleyConfig, ShapleyExplainer, explanations_to_frame
from .dataset import FEATURES, TARGET, standardize_per_city
from .exceptions import DataError
from .gbdt import GradientBoostedTrees
from .geo_features import (
    EmploymentField,
    RoadNetwork,
    count_intersections,
    distance_to_center,
    distance_to_employment,
    mean_vkt_per_taz,
    population_density,
    sample_trip_endpoints,
    street_connectivity,
    trip_distances,
    urban_centrality_index,
)

CHAIN_ORDER = (
    "distance_to_center_km",
    "distance_to_employment_km",
    "population_density_per_km2",
    "street_connectivity_per_km2",
)


def simulate_trips(network: RoadNetwork, od: pd.DataFrame, taz_polygons, seed):
    """Sample trip endpoints and attach network distances (``distance_km``)."""
    trips = sample_trip_endpoints(network, od, taz_polygons, seed)
    trips["distance_km"] = trip_distances(network, trips)
    if np.isinf(trips["distance_km"]).any():
        bad = trips.loc[np.isinf(trips["distance_km"]), "origin_taz"].iloc[0]
        raise DataError(f"trip from TAZ {bad!r} has no network path to its destination")
    return trips


def city_feature_table(zones: pd.DataFrame, taz_polygons: Mapping, network: RoadNetwork,
                       employment: EmploymentField, center, trips: pd.DataFrame | None = None,
                       window=(6, 10), employment_fraction=0.01):
    """Urban form features, trip counts and mean VKT for every zone.

    ``zones`` needs ``taz_id, x, y, area_km2, population`` and optionally
    ``income, jobs, city, is_airport, boundary_overlap_fraction``. Without
    ``trips`` the target and trip counts are left as they are in ``zones``.
    """
    out = zones.copy()
    xy = out[["x", "y"]].to_numpy(float)
    out["distance_to_center_km"] = [distance_to_center(p, center) for p in xy]
    out["distance_to_employment_km"] = [distance_to_employment(p, employment, employment_fraction) for p in xy]
    out["population_density_per_km2"] = [population_density(p, a) for p, a in
                                         zip(out["population"], out["area_km2"])]
    out["street_connectivity_per_km2"] = [
        street_connectivity(count_intersections(network, taz_polygons[t]), a)
        for t, a in zip(out["taz_id"], out["area_km2"])
    ]
    if "income" not in out.columns:
        out["income"] = np.nan
    if trips is not None:
        start, end = window
        hours = trips["hour_of_day"].astype(float)
        in_window = trips[(hours >= start) & (hours < end)]
        counts = in_window.groupby("origin_taz").size()
        vkt = mean_vkt_per_taz(zip(trips["origin_taz"], trips["distance_km"], trips["hour_of_day"]), window)
        out["trip_count"] = out["taz_id"].map(counts).fillna(0).astype(int)
        out[TARGET] = out["taz_id"].map(vkt)
    return out


def city_centrality(zones: pd.DataFrame):
    return urban_centrality_index(zones[["x", "y"]].to_numpy(float), zones["jobs"].to_numpy(float))


def standardized_city_frames(frames: Mapping[str, pd.DataFrame], features: Sequence[str] = FEATURES):
    """Per-city standardized copies of the feature columns (target untouched)."""
    out, scalers = {}, {}
    for city, frame in frames.items():
        copy = frame.copy()
        copy["city"] = city
        out[city], scalers[city] = standardize_per_city(copy, list(features))
    return out, scalers


def direct_causes(graph, target=TARGET, candidates: Sequence[str] = FEATURES):
    """Features with a directed edge into ``target``; falls back to all adjacent features."""
    parents = [v for v in candidates if (v, target) in graph.directed_edges()]
    if parents:
        return parents
    adjacent = [v for v in candidates if frozenset((v, target)) in graph.skeleton()]
    return adjacent or list(candidates)


def explain_city(model: GradientBoostedTrees, frame: pd.DataFrame, features: Sequence[str],
                 reference: pd.DataFrame, config: ShapleyConfig, value_kind="causal",
                 chain_order: Sequence = CHAIN_ORDER, scale=1.0):
    """Causal (or marginal) Shapley table for every zone of ``frame``.

    ``scale`` converts the model's target units into the reported units,
    e.g. an emission factor in g/km.
    """
    features = list(features)
    chain = CausalChain.from_names(features, [c for c in chain_order if c in features])
    explainer = ShapleyExplainer(model, value_kind, chain, config.n_samples, config.k_neighbors,
                                 config.seed, features).fit(reference[features].to_numpy(float))
    explanations = explainer.explain(frame[features].to_numpy(float))
    table = explanations_to_frame(explanations, frame["taz_id"].tolist(), scale)
    return table, explanations
