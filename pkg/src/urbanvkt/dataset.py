"""TAZ records: loading, cleaning, per-city standardization and pooling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, DataError

FEATURES = (
    "distance_to_center_km",
    "distance_to_employment_km",
    "population_density_per_km2",
    "street_connectivity_per_km2",
    "income",
)
TARGET = "mean_vkt_km"

REQUIRED_COLUMNS = ("taz_id", "x", "y", "area_km2", "population", "trip_count")
OPTIONAL_DEFAULTS = {
    "city": None,
    "jobs": 0.0,
    "income": math.nan,
    "mean_vkt_km": None,
    "is_airport": False,
    "boundary_overlap_fraction": 1.0,
}


@dataclass(frozen=True)
class TazRecord:
    """One traffic assignment zone after aggregation.

    ``centroid`` is in projected planar meters. ``mean_vkt_km`` may be
    ``None`` before the travel-distance target has been computed.
    """

    taz_id: str
    city: str
    centroid: tuple[float, float]
    area_km2: float
    population: float
    jobs: float = 0.0
    income: float = math.nan
    mean_vkt_km: float | None = None
    trip_count: int = 0
    is_airport: bool = False
    boundary_overlap_fraction: float = 1.0

    def __post_init__(self):
        problems = _violations(asdict(self))
        if problems:
            column, message = problems[0]
            raise DataError(f"TAZ {self.taz_id!r}, column {column!r}: {message}")

    def to_row(self) -> dict:
        row = asdict(self)
        row["x"], row["y"] = row.pop("centroid")
        return row


def _violations(v: Mapping) -> list[tuple[str, str]]:
    out = []
    if not v["area_km2"] > 0:
        out.append(("area_km2", f"must be > 0, got {v['area_km2']}"))
    for name in ("population", "jobs", "trip_count"):
        if v[name] < 0:
            out.append((name, f"must be >= 0, got {v[name]}"))
    if v["mean_vkt_km"] is not None and not v["mean_vkt_km"] >= 0:
        out.append(("mean_vkt_km", f"must be >= 0, got {v['mean_vkt_km']}"))
    if not 0.0 <= v["boundary_overlap_fraction"] <= 1.0:
        out.append(("boundary_overlap_fraction", f"must lie in [0, 1], got {v['boundary_overlap_fraction']}"))
    return out


# ---------------------------------------------------------------------------
# loading

def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return bool(value)
    text = str(value).strip().lower()
    if text in ("1", "true", "t", "yes", "y"):
        return True
    if text in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_float(value) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return float(str(value).strip())


def _parse_count(value) -> int:
    number = _parse_float(value)
    if not float(number).is_integer():
        raise ValueError(f"not an integer count: {value!r}")
    return int(number)


_PARSERS = {
    "taz_id": lambda v: str(v).strip(),
    "city": lambda v: str(v).strip(),
    "x": _parse_float,
    "y": _parse_float,
    "area_km2": _parse_float,
    "population": _parse_float,
    "jobs": _parse_float,
    "income": _parse_float,
    "mean_vkt_km": _parse_float,
    "trip_count": _parse_count,
    "is_airport": _parse_bool,
    "boundary_overlap_fraction": _parse_float,
}


def _read_rows(path: Path):
    """Yield raw property dicts from a CSV or GeoJSON file."""
    suffix = path.suffix.lower()
    if suffix in (".geojson", ".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("type") != "FeatureCollection":
            raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
        rows = []
        for feature in doc.get("features", []):
            props = dict(feature.get("properties") or {})
            geometry = feature.get("geometry")
            if geometry and ("x" not in props or "y" not in props):
                from shapely.geometry import shape

                centroid = shape(geometry).centroid
                props.setdefault("x", centroid.x)
                props.setdefault("y", centroid.y)
            rows.append(props)
        header = sorted({key for row in rows for key in row})
        return header, rows
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def load_city_dataset(source_path, schema: Mapping[str, str] | None = None, city: str | None = None):
    """Load TAZ records from a CSV (header row) or GeoJSON feature collection.

    Parameters
    ----------
    source_path : path-like
        CSV or GeoJSON file; GeoJSON feature properties mirror CSV columns and
        a missing ``x``/``y`` pair is taken from the geometry centroid.
    schema : mapping, optional
        Canonical field name -> source column name, for files that use other
        column names.
    city : str, optional
        City identifier used when the file has no ``city`` column. Defaults
        to the file stem.

    Raises
    ------
    DataError
        Missing file, missing required column, or any unparseable or
        invariant-violating row. Every offending row is listed.
    """
    path = Path(source_path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    schema = dict(schema or {})
    header, rows = _read_rows(path)
    column_of = {name: schema.get(name, name) for name in (*REQUIRED_COLUMNS, *OPTIONAL_DEFAULTS)}
    missing = [column_of[name] for name in REQUIRED_COLUMNS if column_of[name] not in header]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")

    records, errors = [], []
    for rowno, raw in enumerate(rows, start=1):
        values = {}
        row_errors = []
        for name, column in column_of.items():
            cell = raw.get(column)
            if cell is None or (isinstance(cell, str) and cell.strip() == "" and name != "is_airport"):
                if name in REQUIRED_COLUMNS:
                    row_errors.append(f"row {rowno}, column {column!r}: empty value")
                continue
            try:
                values[name] = _PARSERS[name](cell)
            except (TypeError, ValueError):
                row_errors.append(f"row {rowno}, column {column!r}: cannot parse {cell!r}")
        if row_errors:
            errors.extend(row_errors)
            continue
        kwargs = {k: v for k, v in OPTIONAL_DEFAULTS.items() if v is not None}
        kwargs.update(values)
        kwargs["city"] = values.get("city") or city or path.stem
        kwargs["centroid"] = (kwargs.pop("x"), kwargs.pop("y"))
        full = {f.name: f.default for f in fields(TazRecord)}
        full.update(kwargs)
        bad = _violations(full)
        if bad:
            errors.extend(f"row {rowno}, column {column_of[c]!r}: {m}" for c, m in bad)
            continue
        records.append(TazRecord(**kwargs))
    if errors:
        raise DataError(f"{path}: {len(errors)} invalid value(s):\n  " + "\n  ".join(errors))
    return records


def write_records_csv(records, path):
    path = Path(path)
    rows = [r.to_row() for r in records]
    columns = ["taz_id", "city", "x", "y", *[f.name for f in fields(TazRecord)][3:]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in columns})


def write_records_geojson(records, path, polygons: Mapping[str, object] | None = None):
    """Write records as a GeoJSON FeatureCollection.

    Geometry is the zone polygon when ``polygons`` provides one, else the
    centroid point.
    """
    from shapely.geometry import Point, mapping

    features = []
    for rec in records:
        geom = (polygons or {}).get(rec.taz_id) or Point(rec.centroid)
        features.append(
            {"type": "Feature", "geometry": mapping(geom), "properties": rec.to_row()}
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, indent=1)


def records_to_frame(records) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_row() for r in records])
    if frame.empty:
        frame = pd.DataFrame(columns=["taz_id", "city", "x", "y"])
    return frame


# ---------------------------------------------------------------------------
# cleaning

@dataclass(frozen=True)
class CleaningConfig:
    """Rules used by :func:`clean_taz`.

    ``morning_window`` is carried for provenance only: trips are filtered to
    it when the per-TAZ means are aggregated, before records exist.
    """

    min_trips: int = 10
    min_overlap: float = 0.5
    drop_airports: bool = True
    morning_window: tuple[int, int] = (6, 10)

    @classmethod
    def from_dict(cls, data: Mapping):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown cleaning option(s): {sorted(unknown)}")
        data = dict(data)
        if "morning_window" in data:
            data["morning_window"] = tuple(data["morning_window"])
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def clean_taz(records, rules: CleaningConfig | None = None):
    """Drop TAZ that fail the trip-count, boundary-overlap or airport rules.

    Returns
    -------
    kept : list of TazRecord
    report : dict
        ``{rule: count}``; a record failing several rules is counted under
        each of them, and ``removed`` holds the number of distinct records.
    """
    rules = rules or CleaningConfig()
    report = {"min_trips": 0, "min_overlap": 0, "airport": 0}
    kept = []
    for rec in records:
        failed = False
        if rec.trip_count < rules.min_trips:
            report["min_trips"] += 1
            failed = True
        if rec.boundary_overlap_fraction < rules.min_overlap:
            report["min_overlap"] += 1
            failed = True
        if rules.drop_airports and rec.is_airport:
            report["airport"] += 1
            failed = True
        if not failed:
            kept.append(rec)
    report["removed"] = len(records) - len(kept)
    report["kept"] = len(kept)
    return kept, report


# ---------------------------------------------------------------------------
# per-city standardization

class CityStandardScaler(TransformerMixin, BaseEstimator):
    """Standardize each column to zero mean and unit variance within each city.

    Variance uses ``ddof`` (0 = population variance, the default). The city
    label array is passed alongside ``X`` to every method.
    """

    def __init__(self, ddof=0):
        self.ddof = ddof

    def fit(self, X, y=None, cities=None):
        names = list(X.columns) if isinstance(X, pd.DataFrame) else None
        X = check_array(X, dtype=float)
        cities = self._check_cities(X, cities)
        self.feature_names_ = names or [f"x{j}" for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        self.means_, self.scales_ = {}, {}
        for city in sorted(set(cities)):
            block = X[cities == city]
            if len(block) < 2:
                raise DataError(f"city {city!r}: need at least 2 records to standardize")
            std = block.std(axis=0, ddof=self.ddof)
            for j in np.flatnonzero(~(std > 0)):
                raise DataError(f"city {city!r}: feature {self.feature_names_[j]!r} has zero variance")
            self.means_[city] = block.mean(axis=0)
            self.scales_[city] = std
        return self

    def transform(self, X, cities=None):
        return self._apply(X, cities, inverse=False)

    def inverse_transform(self, X, cities=None):
        return self._apply(X, cities, inverse=True)

    def fit_transform(self, X, y=None, cities=None):
        return self.fit(X, cities=cities).transform(X, cities)

    def _apply(self, X, cities, inverse):
        check_is_fitted(self, "means_")
        frame_index = X.index if isinstance(X, pd.DataFrame) else None
        X = check_array(X, dtype=float, copy=True)
        cities = self._check_cities(X, cities)
        for city in np.unique(cities):
            if city not in self.means_:
                raise DataError(f"city {city!r} was not seen during fit")
            rows = cities == city
            if inverse:
                X[rows] = X[rows] * self.scales_[city] + self.means_[city]
            else:
                X[rows] = (X[rows] - self.means_[city]) / self.scales_[city]
        if frame_index is not None:
            return pd.DataFrame(X, index=frame_index, columns=self.feature_names_)
        return X

    @staticmethod
    def _check_cities(X, cities):
        if cities is None:
            raise ConfigError("cities must be given")
        cities = np.asarray(cities, dtype=object)
        if cities.shape != (X.shape[0],):
            raise DataError(f"cities has shape {cities.shape}, expected ({X.shape[0]},)")
        return cities

    def metadata(self) -> dict:
        return {
            "variance_convention": "population" if self.ddof == 0 else f"ddof={self.ddof}",
            "means": {c: m.tolist() for c, m in self.means_.items()},
            "scales": {c: s.tolist() for c, s in self.scales_.items()},
            "columns": list(self.feature_names_),
        }


def standardize_per_city(frame: pd.DataFrame, columns=FEATURES, city_col="city"):
    """Return a copy of ``frame`` with ``columns`` standardized per city, and the scaler."""
    columns = list(columns)
    scaler = CityStandardScaler()
    out = frame.copy()
    out[columns] = scaler.fit_transform(frame[columns], cities=frame[city_col].to_numpy()).to_numpy()
    return out, scaler


# ---------------------------------------------------------------------------
# balanced pooling

@dataclass
class PooledSample:
    """Equal-size per-city draw, standardized within each city.

    ``frame`` holds ``city``, ``taz_id`` and the standardized columns.
    """

    frame: pd.DataFrame
    seed: int
    per_city_count: int
    columns: tuple = field(default_factory=tuple)
    scaler: CityStandardScaler | None = None

    @property
    def data(self) -> np.ndarray:
        return self.frame[list(self.columns)].to_numpy(dtype=float)


def balanced_pool(city_datasets: Mapping[str, pd.DataFrame], n_total: int, seed: int,
                  columns=(*FEATURES, TARGET), id_col="taz_id") -> PooledSample:
    """Draw ``n_total / n_cities`` rows per city without replacement.

    Each city's ids are sorted before a seeded shuffle so the draw does not
    depend on input row order. The drawn rows are then standardized per city.
    """
    cities = sorted(city_datasets)
    if not cities:
        raise DataError("no city datasets given")
    if n_total <= 0 or n_total % len(cities):
        raise ConfigError(f"n_total={n_total} is not divisible by {len(cities)} cities")
    per_city = n_total // len(cities)
    rng = np.random.default_rng(seed)
    parts = []
    for city in cities:
        data = city_datasets[city]
        if len(data) < per_city:
            raise DataError(f"city {city!r} has {len(data)} rows, {per_city} needed")
        ordered = data.sort_values(id_col, kind="mergesort").reset_index(drop=True)
        take = np.sort(rng.permutation(len(ordered))[:per_city])
        part = ordered.iloc[take][[id_col, *columns]].copy()
        part.insert(0, "city", city)
        parts.append(part)
    pooled = pd.concat(parts, ignore_index=True)
    pooled, scaler = standardize_per_city(pooled, columns)
    return PooledSample(pooled, seed, per_city, tuple(columns), scaler)
