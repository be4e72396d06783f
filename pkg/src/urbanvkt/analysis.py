"""Spatial post-processing of attributions: effect curves, corridors, ring shares."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from shapely.geometry import mapping

from .exceptions import DataError

DOMINANCE_CLASSES = ("density", "distance", "neither")


@dataclass(frozen=True)
class EffectCurve:
    """Local-linear fit of attributions against a feature, on the observed range."""

    feature: str
    x: np.ndarray
    fitted: np.ndarray
    bandwidth: float
    degree: int = 1

    def to_frame(self):
        return pd.DataFrame({"feature": self.feature, "x": self.x, "fitted": self.fitted})

    def __call__(self, x_new):
        """Linear interpolation of the fit; outside the observed range gives NaN."""
        return np.interp(x_new, self.x, self.fitted, left=np.nan, right=np.nan)


def _tricube(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def loess(x, y, x_eval, bandwidth=0.3):
    """Degree-1 LOESS with tricube weights.

    Each evaluation point uses its ``ceil(bandwidth * n)`` nearest
    observations, weighted by the tricube of distance over the distance to
    the farthest of them. ``bandwidth >= 1`` means every observation with
    equal weight, i.e. one ordinary least-squares line.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_eval = np.asarray(x_eval, dtype=float)
    n = len(x)
    if bandwidth >= 1.0:
        slope, intercept = np.polyfit(x, y, 1)
        return intercept + slope * x_eval
    q = min(n, max(3, int(np.ceil(bandwidth * n))))
    dist = np.abs(x_eval[:, None] - x[None, :])
    h = np.partition(dist, q - 1, axis=1)[:, q - 1]
    h = np.where(h > 0, h, np.finfo(float).tiny)
    # points at exactly distance h would get zero weight; nudge h so all q neighbours count
    w = _tricube(dist / (h[:, None] * (1 + 1e-10)))
    sw = w.sum(axis=1)
    mx = (w * x).sum(axis=1) / sw
    my = (w * y).sum(axis=1) / sw
    dx = x[None, :] - mx[:, None]
    sxx = (w * dx * dx).sum(axis=1)
    sxy = (w * dx * (y[None, :] - my[:, None])).sum(axis=1)
    flat = sxx <= 1e-12 * np.maximum(1.0, mx ** 2)
    slope = np.where(flat, 0.0, sxy / np.where(flat, 1.0, sxx))
    return my + slope * (x_eval - mx)


def fit_effect_curve(x, phi, bandwidth=0.3, feature=""):
    """Fit attributions ``phi`` against feature values ``x``.

    The fit is evaluated at every distinct observed ``x`` (sorted).
    """
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if x.shape != phi.shape or x.ndim != 1:
        raise DataError("x and phi must be 1-D arrays of equal length")
    if len(x) < 10:
        raise DataError(f"need at least 10 points, got {len(x)}")
    if not (np.isfinite(x).all() and np.isfinite(phi).all()):
        raise DataError("x and phi must be finite")
    if np.ptp(x) == 0:
        raise DataError("all x values are identical")
    if not 0 < bandwidth:
        raise DataError("bandwidth must be positive")
    grid = np.unique(x)
    return EffectCurve(feature, grid, loess(x, phi, grid, bandwidth), float(bandwidth))


def zero_crossing(curve: EffectCurve, direction=None):
    """Feature values where the fitted effect changes sign.

    Crossings between adjacent fitted points are linearly interpolated. A
    fitted value of exactly zero counts when its neighbours have opposite
    signs. ``direction`` may be ``"up"`` (negative to positive) or ``"down"``
    to keep only one kind.
    """
    x, y = curve.x, curve.fitted
    s = np.sign(y)
    out = []
    for i in range(len(y) - 1):
        if s[i] * s[i + 1] < 0:
            xc = x[i] - y[i] * (x[i + 1] - x[i]) / (y[i + 1] - y[i])
            up = y[i + 1] > y[i]
        elif s[i] == 0 and 0 < i and s[i - 1] * s[i + 1] < 0:
            xc, up = x[i], y[i + 1] > y[i - 1]
        else:
            continue
        if direction is None or (direction == "up") == up:
            out.append(float(xc))
    return out


@dataclass
class CorridorResult:
    """Dominance map of above-average-emission zones plus fitted-curve thresholds.

    ``density_onset`` and ``distance_onset`` are the first upward zero
    crossings of the two effect curves over distance to the center;
    ``crossover`` is the smallest distance beyond which the distance effect
    is at least the density effect on the fitted curves. Undefined values are
    ``None``.
    """

    dominance: pd.DataFrame
    density_onset: float | None
    distance_onset: float | None
    crossover: float | None
    max_differential: float | None
    curves: dict = field(default_factory=dict)

    @property
    def ordered(self) -> bool:
        bounds = (self.density_onset, self.distance_onset, self.crossover)
        if any(b is None for b in bounds):
            return True
        return bounds[0] <= bounds[1] <= bounds[2]

    def summary(self) -> dict:
        counts = self.dominance["dominant"].value_counts()
        return {
            "density_onset_km": self.density_onset,
            "distance_onset_km": self.distance_onset,
            "crossover_km": self.crossover,
            "max_differential_g": self.max_differential,
            "n_above_mean": int(len(self.dominance)),
            **{f"n_{c}": int(counts.get(c, 0)) for c in DOMINANCE_CLASSES},
        }


def dominant_feature(phi_density, phi_distance):
    """``"density"`` or ``"distance"`` for the larger positive effect, else ``"neither"``.

    Equal positive effects are assigned to ``"distance"``.
    """
    phi_density = np.asarray(phi_density, dtype=float)
    phi_distance = np.asarray(phi_distance, dtype=float)
    best = np.maximum(phi_density, phi_distance)
    label = np.where(phi_density > phi_distance, "density", "distance")
    return np.where(best > 0, label, "neither")


def _crossover(x, dens, dist):
    diff = dens - dist
    if diff[-1] > 0:
        return None
    # last index where density still exceeds distance
    above = np.nonzero(diff > 0)[0]
    if len(above) == 0:
        return float(x[0])
    i = above[-1]
    return float(x[i] - diff[i] * (x[i + 1] - x[i]) / (diff[i + 1] - diff[i]))


def threshold_corridor(explanations: pd.DataFrame, emissions, distances_to_center,
                       density_col="phi_population_density_per_km2",
                       distance_col="phi_distance_to_center_km", id_col="taz_id",
                       bandwidth=0.3, trip_weights=None) -> CorridorResult:
    """Where does density rather than distance to the center drive emissions?

    Parameters
    ----------
    explanations : DataFrame
        One row per zone with the two attribution columns.
    emissions : array
        Mean trip emission per zone (g).
    distances_to_center : array
        Distance of each zone to the center (km), unstandardized.
    trip_weights : array, optional
        When given, the city mean emission is weighted by these counts;
        otherwise each zone counts once.
    """
    for col in (density_col, distance_col):
        if col not in explanations.columns:
            raise DataError(f"missing attribution column {col!r}")
    emissions = np.asarray(emissions, dtype=float)
    dist_km = np.asarray(distances_to_center, dtype=float)
    dens = explanations[density_col].to_numpy(float)
    dist = explanations[distance_col].to_numpy(float)
    if not len(emissions) == len(dist_km) == len(explanations):
        raise DataError("explanations, emissions and distances must have equal length")
    city_mean = float(np.average(emissions, weights=trip_weights))
    above = emissions > city_mean
    ids = explanations[id_col].to_numpy() if id_col in explanations.columns else np.arange(len(dens))
    dominance = pd.DataFrame({
        id_col: ids[above],
        "distance_to_center_km": dist_km[above],
        "phi_density": dens[above],
        "phi_distance": dist[above],
        "dominant": dominant_feature(dens[above], dist[above]),
    })

    c_dens = fit_effect_curve(dist_km, dens, bandwidth, "density")
    c_dist = fit_effect_curve(dist_km, dist, bandwidth, "distance")
    up_dens = zero_crossing(c_dens, "up")
    up_dist = zero_crossing(c_dist, "up")
    density_onset = up_dens[0] if up_dens else None
    distance_onset = up_dist[0] if up_dist else None
    crossover = _crossover(c_dens.x, c_dens.fitted, c_dist.fitted)

    diff = c_dens.fitted - c_dist.fitted
    lo = density_onset if density_onset is not None else c_dens.x[0]
    hi = crossover if crossover is not None else c_dens.x[-1]
    window = (c_dens.x >= lo) & (c_dens.x <= hi)
    max_diff = float(diff[window].max()) if window.any() else None
    return CorridorResult(dominance, density_onset, distance_onset, crossover, max_diff,
                          {"density": c_dens, "distance": c_dist})


def write_dominance_geojson(result: CorridorResult, polygons: Mapping, path, id_col="taz_id"):
    """GeoJSON with one feature per above-mean zone carrying its dominance class."""
    features = []
    for row in result.dominance.itertuples(index=False):
        rec = row._asdict()
        taz = rec[id_col]
        if taz not in polygons:
            raise DataError(f"no polygon for zone {taz!r}")
        props = {k: (v.item() if hasattr(v, "item") else v) for k, v in rec.items()}
        features.append({"type": "Feature", "geometry": mapping(polygons[taz]), "properties": props})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def ring_destination_shares(destinations, origin_taz, phi_distance: Mapping, center,
                            ring_width_km=5.0, effect_threshold_g=150.0):
    """Share of destinations per distance ring for trips from high-effect zones.

    Parameters
    ----------
    destinations : array (n, 2)
        Destination coordinates in meters.
    origin_taz : sequence
        Origin zone of each trip.
    phi_distance : mapping
        Zone -> distance-to-center attribution in g; zones missing from the
        mapping never qualify.
    center : (x, y) or array (k, 2)
        One or several centers; the nearest one is used.

    Returns
    -------
    DataFrame with ``ring_start_km``, ``ring_end_km``, ``count`` and
    ``share`` for every ring from 0 up to the farthest qualifying
    destination.
    """
    dest = np.atleast_2d(np.asarray(destinations, dtype=float))
    origin_taz = np.asarray(origin_taz)
    if len(dest) != len(origin_taz):
        raise DataError("destinations and origin_taz must have equal length")
    if ring_width_km <= 0:
        raise DataError("ring width must be positive")
    effect = np.array([phi_distance.get(t, -np.inf) for t in origin_taz.tolist()], dtype=float)
    keep = effect > effect_threshold_g
    if not keep.any():
        raise DataError(f"no trips originate in zones with effect above {effect_threshold_g} g")
    centers = np.atleast_2d(np.asarray(center, dtype=float))
    d = np.sqrt(((dest[keep, None, :] - centers[None, :, :]) ** 2).sum(axis=2)).min(axis=1) / 1000.0
    ring = np.floor(d / ring_width_km).astype(int)
    counts = np.bincount(ring)
    starts = np.arange(len(counts)) * ring_width_km
    return pd.DataFrame({
        "ring_start_km": starts,
        "ring_end_km": starts + ring_width_km,
        "count": counts,
        "share": counts / counts.sum(),
    })
