"""Command-line pipeline: ingest, features, discover, train, explain, analyze, synth, all.

Each stage reads the artifacts of the previous one from the output root and
writes its own directory ``<out>/<stage>/`` together with a
``manifest.json``. A stage is assembled in a scratch directory and moved into
place only when it completes, so a failed run never replaces earlier output.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import shutil
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
from shapely.geometry import mapping, shape

from . import __version__
from .analysis import ring_destination_shares, threshold_corridor, write_dominance_geojson
from .causal_discovery import stability_analysis, urban_form_knowledge
from .causal_shapley import ShapleyConfig, mean_absolute_importance
from .ci_tests import TEST_KINDS, CiTestConfig
from .dataset import FEATURES, TARGET, CleaningConfig, TazRecord, clean_taz
from .emissions import default_factor_table
from .exceptions import ConfigError, DataError
from .gbdt import GradientBoostedTrees, citywise_cross_validation
from .geo_features import EmploymentField, RoadNetwork
from .pipeline import (
    CHAIN_ORDER,
    city_centrality,
    city_feature_table,
    direct_causes,
    explain_city,
    simulate_trips,
    standardized_city_frames,
)
from .synth_city import CityConfig, generate_city

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
STAGES = ("ingest", "features", "discover", "train", "explain", "analyze")
OUT_ENV = "URBANVKT_OUT"
LOCK_NAME = ".urbanvkt.lock"

DEFAULTS = {
    "seed": 0,
    "output": "urbanvkt_out",
    "region": "Germany",
    "cities": [],
    "cleaning": {"min_trips": 10, "min_overlap": 0.5, "drop_airports": True, "morning_window": [6, 10]},
    "discovery": {"test": "robust_parcorr", "alpha": 0.025, "rounds": 5, "pool": 1542,
                  "knn_k": 10, "n_permutations": 500, "k_perm": 5},
    "gbdt": {"n_trees": 300, "max_depth": 4, "learning_rate": 0.05, "min_samples_leaf": 5},
    "shapley": {"chain": list(CHAIN_ORDER), "n_samples": 200, "k_neighbors": 10, "value_kind": "causal"},
    "analysis": {"bandwidth": 0.3, "ring_width_km": 5.0, "threshold_g": 150.0, "trip_weighted": False},
    "synth": {"n_cities": 6, "city": {}, "overrides": {}},
}
CITY_KEYS = {"name", "dir", "zones", "edges", "nodes", "employment", "od", "center", "region"}
CITY_FILES = {"zones": "zones.geojson", "edges": "edges.csv", "nodes": "nodes.csv",
              "employment": "employment.csv", "od": "od.csv"}


# ---------------------------------------------------------------------------
# configuration

def _load_config_file(path: Path):
    """Parsed config and the directory that relative input paths refer to."""
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: neither valid JSON nor TOML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    base_dir = path.resolve().parent
    # a stage manifest carries the full resolved config and the original base directory
    if "stage" in data and "config" in data:
        base_dir = Path(data.get("base_dir", base_dir))
        data = data["config"]
    return data, base_dir


def _read_config_file(path: Path) -> dict:
    return _load_config_file(path)[0]


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _merge(defaults, given, prefix, applied):
    out = {}
    for key in given:
        if key not in defaults:
            raise ConfigError(f"{prefix}{key}: unknown key")
    for key, default in defaults.items():
        name = f"{prefix}{key}"
        if key not in given:
            out[key] = copy.deepcopy(default)
            applied.append(name)
            continue
        value = given[key]
        if isinstance(default, dict) and key not in ("city", "overrides"):
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: expected a table")
            out[key] = _merge(default, value, name + ".", applied)
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = _is_number(value)
            value = float(value) if ok else value
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, dict)
        if not ok:
            raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
        out[key] = value
    return out


def _check(cond, key, message):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _validate(cfg):
    d = cfg["discovery"]
    _check(d["test"] in TEST_KINDS, "discovery.test", f"must be one of {TEST_KINDS}")
    _check(0 < d["alpha"] < 1, "discovery.alpha", "must lie in (0, 1)")
    _check(d["rounds"] >= 1, "discovery.rounds", "must be >= 1")
    _check(d["pool"] >= 1, "discovery.pool", "must be >= 1")
    for key in ("knn_k", "n_permutations", "k_perm"):
        _check(d[key] >= 1, f"discovery.{key}", "must be >= 1")
    g = cfg["gbdt"]
    _check(g["n_trees"] >= 1, "gbdt.n_trees", "must be >= 1")
    _check(g["max_depth"] >= 1, "gbdt.max_depth", "must be >= 1")
    _check(0 < g["learning_rate"] <= 1, "gbdt.learning_rate", "must lie in (0, 1]")
    _check(g["min_samples_leaf"] >= 1, "gbdt.min_samples_leaf", "must be >= 1")
    s = cfg["shapley"]
    _check(s["value_kind"] in ("causal", "marginal"), "shapley.value_kind", "must be 'causal' or 'marginal'")
    _check(s["n_samples"] >= 1, "shapley.n_samples", "must be >= 1")
    _check(s["k_neighbors"] >= 1, "shapley.k_neighbors", "must be >= 1")
    _check(all(c in FEATURES for c in s["chain"]), "shapley.chain", f"entries must be among {FEATURES}")
    a = cfg["analysis"]
    _check(a["bandwidth"] > 0, "analysis.bandwidth", "must be positive")
    _check(a["ring_width_km"] > 0, "analysis.ring_width_km", "must be positive")
    c = cfg["cleaning"]
    _check(len(c["morning_window"]) == 2 and c["morning_window"][0] < c["morning_window"][1],
           "cleaning.morning_window", "must be [start, end) with start < end")
    _check(cfg["synth"]["n_cities"] >= 1, "synth.n_cities", "must be >= 1")
    if cfg["region"] not in default_factor_table().regions:
        raise ConfigError(f"region: unknown region {cfg['region']!r}")
    names = set()
    for i, city in enumerate(cfg["cities"]):
        key = f"cities[{i}]"
        _check(isinstance(city, dict), key, "expected a table")
        unknown = set(city) - CITY_KEYS
        _check(not unknown, key, f"unknown key(s) {sorted(unknown)}")
        _check(isinstance(city.get("name"), str) and city["name"], f"{key}.name", "required")
        _check(city["name"] not in names, f"{key}.name", f"duplicate city {city['name']!r}")
        names.add(city["name"])
        if "region" in city:
            _check(city["region"] in default_factor_table().regions, f"{key}.region", "unknown region")


def resolve_config(path=None, overrides=None, env=None):
    """Merge a config file with defaults and command-line overrides.

    Returns ``(config, defaults_applied, base_dir)``; ``defaults_applied``
    lists the dotted keys that were filled from defaults.
    """
    env = os.environ if env is None else env
    raw, base_dir = _load_config_file(Path(path)) if path else ({}, Path.cwd())
    applied = []
    cfg = _merge(DEFAULTS, raw, "", applied)
    if "output" in applied and env.get(OUT_ENV):
        cfg["output"] = env[OUT_ENV]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, leaf = key.rpartition(".")
        target = cfg[section] if section else cfg
        target[leaf] = value
        if key in applied:
            applied.remove(key)
    _validate(cfg)
    return cfg, sorted(applied), base_dir


def config_hash(cfg) -> str:
    return hashlib.sha256(_dumps(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# file helpers

def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(obj), encoding="utf-8")


def _write_csv(path: Path, frame: pd.DataFrame):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(root: Path, skip=("manifest.json",)):
    return {p.relative_to(root).as_posix(): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


class OutputLock:
    """Exclusive lock file in the output root; a second writer fails fast."""

    def __init__(self, root: Path):
        self.path = Path(root) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output: {self.path.parent} is locked by another run "
                              f"(remove {self.path} if no run is active)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


class StageContext:
    """Scratch directory, input bookkeeping and timings for one stage run."""

    def __init__(self, name, out_root: Path, cfg, applied, overrides, base_dir: Path):
        self.name = name
        self.base_dir = base_dir
        self.root = out_root
        self.final = out_root / name
        self.work = out_root / f".{name}.partial"
        if self.work.exists():
            shutil.rmtree(self.work)
        self.work.mkdir(parents=True)
        self.cfg, self.applied, self.overrides = cfg, applied, overrides
        self.inputs, self.timings, self.seeds, self.notes = {}, {}, {}, []
        self._t0 = time.perf_counter()

    def read_input(self, path: Path):
        path = Path(path)
        key = path.relative_to(self.root).as_posix() if path.is_relative_to(self.root) else str(path)
        self.inputs[key] = sha256_file(path)
        return path

    def timed(self, label):
        ctx = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                ctx.timings[label] = round(time.perf_counter() - self.t, 4)

        return _Timer()

    def commit(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 4)
        manifest = {
            "stage": self.name,
            "version": __version__,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "base_dir": str(self.base_dir),
            "defaults_applied": self.applied,
            "overrides": self.overrides,
            "seeds": self.seeds,
            "timings_s": self.timings,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": _hash_tree(self.work),
            "notes": self.notes,
        }
        tmp = self.work / "manifest.json.tmp"
        tmp.write_text(_dumps(manifest), encoding="utf-8")
        os.replace(tmp, self.work / "manifest.json")
        old = self.root / f".{self.name}.old"
        if old.exists():
            shutil.rmtree(old)
        if self.final.exists():
            os.replace(self.final, old)
        os.replace(self.work, self.final)
        if old.exists():
            shutil.rmtree(old)
        return manifest

    def discard(self):
        shutil.rmtree(self.work, ignore_errors=True)


def _require(ctx: StageContext, stage, rel) -> Path:
    path = ctx.root / stage / rel
    if not path.exists():
        raise DataError(f"{path} not found; run the '{stage}' stage first")
    return ctx.read_input(path)


# ---------------------------------------------------------------------------
# stages

def _city_sources(city, i, base_dir: Path):
    key = f"cities[{i}]"
    folder = (base_dir / city["dir"]) if "dir" in city else None
    if folder is not None and not folder.is_dir():
        raise DataError(f"{key}.dir: directory {folder} does not exist")
    paths = {}
    for name, default in CITY_FILES.items():
        if name in city:
            paths[name] = base_dir / city[name]
        elif folder is not None:
            paths[name] = folder / default
        else:
            raise ConfigError(f"{key}.{name}: required when no 'dir' is given")
        if not paths[name].exists():
            raise DataError(f"{key}.{name}: file {paths[name]} does not exist")
    center = city.get("center")
    if center is None and folder is not None and (folder / "city.json").exists():
        paths["meta"] = folder / "city.json"
        center = json.loads(paths["meta"].read_text())["center"]
    if center is None or len(center) != 2 or not all(_is_number(c) for c in center):
        raise ConfigError(f"{key}.center: expected [x, y] in meters")
    return paths, [float(center[0]), float(center[1])]


def _read_zones(path: Path, city):
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
    rows, polygons = [], {}
    for k, feat in enumerate(doc["features"]):
        props = dict(feat.get("properties") or {})
        if "taz_id" not in props or "population" not in props:
            raise DataError(f"{path}: feature {k} lacks 'taz_id' or 'population'")
        geom = shape(feat["geometry"])
        taz = str(props["taz_id"])
        if taz in polygons:
            raise DataError(f"{path}: duplicate taz_id {taz!r}")
        polygons[taz] = geom
        rows.append({
            "taz_id": taz, "city": city,
            "x": float(props.get("x", geom.centroid.x)), "y": float(props.get("y", geom.centroid.y)),
            "area_km2": float(props.get("area_km2", geom.area / 1e6)),
            "population": float(props["population"]),
            "jobs": float(props.get("jobs", 0.0)),
            "income": float(props["income"]) if props.get("income") is not None else np.nan,
            "is_airport": bool(props.get("is_airport", False)),
            "boundary_overlap_fraction": float(props.get("boundary_overlap_fraction", 1.0)),
        })
    zones = pd.DataFrame(rows).sort_values("taz_id", kind="mergesort").reset_index(drop=True)
    for rec in zones.to_dict("records"):  # domain checks on every zone
        TazRecord(taz_id=rec["taz_id"], city=city, centroid=(rec["x"], rec["y"]), area_km2=rec["area_km2"],
                  population=rec["population"], jobs=rec["jobs"],
                  boundary_overlap_fraction=rec["boundary_overlap_fraction"])
    return zones, polygons


def _write_polygons(path: Path, polygons):
    feats = [{"type": "Feature", "geometry": mapping(polygons[t]), "properties": {"taz_id": t}}
             for t in sorted(polygons)]
    _write_json(path, {"type": "FeatureCollection", "features": feats})


def _load_polygons(path: Path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    return {f["properties"]["taz_id"]: shape(f["geometry"]) for f in doc["features"]}


def stage_ingest(ctx: StageContext, base_dir: Path):
    cfg = ctx.cfg
    _city_names(ctx)
    summary = {}
    for i, city in enumerate(cfg["cities"]):
        name = city["name"]
        with ctx.timed(f"ingest.{name}"):
            paths, center = _city_sources(city, i, base_dir)
            for p in paths.values():
                ctx.read_input(p)
            zones, polygons = _read_zones(paths["zones"], name)
            network = RoadNetwork.from_csv(paths["edges"], paths["nodes"])
            employment = EmploymentField.from_csv(paths["employment"])
            od = pd.read_csv(paths["od"], dtype={"origin_taz": str, "destination_taz": str})
            missing = {"origin_taz", "destination_taz", "hour_of_day"} - set(od.columns)
            if missing:
                raise DataError(f"{paths['od']}: missing column(s) {sorted(missing)}")
            if "trip_count" not in od.columns:
                od["trip_count"] = 1
            unknown = sorted(set(od["origin_taz"]).union(od["destination_taz"]) - set(polygons))
            if unknown:
                raise DataError(f"{paths['od']}: unknown zone id(s) {unknown[:5]}")
            od = od.sort_values(["origin_taz", "destination_taz", "hour_of_day"], kind="mergesort")
            d = ctx.work / name
            _write_csv(d / "zones.csv", zones)
            _write_polygons(d / "zones.geojson", polygons)
            network.to_csv(d / "edges.csv", d / "nodes.csv")
            _write_csv(d / "employment.csv", pd.DataFrame({
                "x": employment.coords[:, 0], "y": employment.coords[:, 1], "jobs": employment.jobs}))
            _write_csv(d / "od.csv", od.reset_index(drop=True))
            region = city.get("region", cfg["region"])
            _write_json(d / "city.json", {"name": name, "center": center, "region": region})
            summary[name] = {"zones": len(zones), "network_nodes": network.n_nodes,
                             "network_edges": network.n_edges, "od_trips": int(od["trip_count"].sum())}
    _write_json(ctx.work / "summary.json", summary)


def _city_names(ctx: StageContext):
    if not ctx.cfg["cities"]:
        raise ConfigError("cities: at least one city is required")
    return [c["name"] for c in ctx.cfg["cities"]]


def stage_features(ctx: StageContext):
    cfg = ctx.cfg
    rules = CleaningConfig.from_dict(cfg["cleaning"])
    window = tuple(cfg["cleaning"]["morning_window"])
    cleaned, report = [], {}
    for i, name in enumerate(_city_names(ctx)):
        with ctx.timed(f"features.{name}"):
            zones = pd.read_csv(_require(ctx, "ingest", f"{name}/zones.csv"), dtype={"taz_id": str})
            polygons = _load_polygons(_require(ctx, "ingest", f"{name}/zones.geojson"))
            network = RoadNetwork.from_csv(_require(ctx, "ingest", f"{name}/edges.csv"),
                                           _require(ctx, "ingest", f"{name}/nodes.csv"))
            employment = EmploymentField.from_csv(_require(ctx, "ingest", f"{name}/employment.csv"))
            od = pd.read_csv(_require(ctx, "ingest", f"{name}/od.csv"),
                             dtype={"origin_taz": str, "destination_taz": str})
            meta = json.loads(_require(ctx, "ingest", f"{name}/city.json").read_text())
            seed = cfg["seed"] + i
            ctx.seeds[f"trips.{name}"] = seed
            trips = simulate_trips(network, od, polygons, seed)
            table = city_feature_table(zones, polygons, network, employment, meta["center"], trips, window)
            records = [TazRecord(taz_id=r["taz_id"], city=name, centroid=(r["x"], r["y"]),
                                 area_km2=r["area_km2"], population=r["population"], jobs=r["jobs"],
                                 income=r["income"],
                                 mean_vkt_km=None if pd.isna(r[TARGET]) else r[TARGET],
                                 trip_count=int(r["trip_count"]), is_airport=bool(r["is_airport"]),
                                 boundary_overlap_fraction=r["boundary_overlap_fraction"])
                       for r in table.to_dict("records")]
            kept, rep = clean_taz(records, rules)
            keep_ids = {r.taz_id for r in kept}
            rep["uci"] = round(city_centrality(zones).uci, 12)
            report[name] = rep
            _write_csv(ctx.work / name / "taz.csv", table)
            trip_cols = ["origin_taz", "destination_taz", "hour_of_day", "ox", "oy", "dx", "dy", "distance_km"]
            _write_csv(ctx.work / name / "trips.csv", trips[trip_cols])
            cleaned.append(table[table["taz_id"].isin(keep_ids) & table[TARGET].notna()])
    data = pd.concat(cleaned, ignore_index=True)
    _write_csv(ctx.work / "dataset.csv", data)
    _write_json(ctx.work / "cleaning.json", report)


def _load_dataset(ctx: StageContext):
    data = pd.read_csv(_require(ctx, "features", "dataset.csv"), dtype={"taz_id": str, "city": str})
    return {c: f.reset_index(drop=True) for c, f in data.groupby("city", sort=True)}


def graph_schema() -> dict:
    return json.loads(resources.files("urbanvkt").joinpath("data/graph.schema.json").read_text())


def stage_discover(ctx: StageContext):
    import jsonschema

    d = ctx.cfg["discovery"]
    frames = _load_dataset(ctx)
    variables = [*FEATURES, TARGET]
    usable = {}
    for city, frame in frames.items():
        ok = frame[variables].notna().all(axis=1)
        if not ok.all():
            ctx.notes.append(f"{city}: {int((~ok).sum())} row(s) with missing values left out of discovery")
        usable[city] = frame[ok]
    citest = CiTestConfig(d["test"], d["alpha"], d["knn_k"], d["n_permutations"], d["k_perm"], ctx.cfg["seed"])
    seeds = [ctx.cfg["seed"] + r for r in range(d["rounds"])]
    ctx.seeds["discovery_rounds"] = seeds
    with ctx.timed("discovery"):
        try:
            report = stability_analysis(usable, variables, d["rounds"], d["pool"], citest,
                                        urban_form_knowledge(), seeds)
        except ConfigError as exc:
            raise ConfigError(f"discovery.pool: {exc}") from None
    graph = report.consensus.to_dict()
    jsonschema.validate(graph, graph_schema())
    _write_json(ctx.work / "graph.json", graph)
    (ctx.work / "graph.dot").write_text(report.consensus.to_dot() + "\n", encoding="utf-8")
    _write_json(ctx.work / "stability.json", report.to_dict())
    _write_json(ctx.work / "ci_test.json", citest.metadata())


def _selected_features(ctx: StageContext):
    from .causal_discovery import MixedGraph

    graph = MixedGraph.from_dict(json.loads(_require(ctx, "discover", "graph.json").read_text()))
    return direct_causes(graph, TARGET, FEATURES)


def stage_train(ctx: StageContext):
    features = _selected_features(ctx)
    frames = _load_dataset(ctx)
    std, _ = standardized_city_frames(frames, features)
    with ctx.timed("cross_validation"):
        table, models = citywise_cross_validation(std, features, TARGET, ctx.cfg["gbdt"], return_models=True)
    _write_csv(ctx.work / "cv_metrics.csv", table)
    for city, model in models.items():
        (ctx.work / "models").mkdir(exist_ok=True)
        model.save(ctx.work / "models" / f"{city}.json")
    _write_json(ctx.work / "features.json", {"features": features, "target": TARGET})


def stage_explain(ctx: StageContext):
    s = ctx.cfg["shapley"]
    features = json.loads(_require(ctx, "train", "features.json").read_text())["features"]
    frames = _load_dataset(ctx)
    std, _ = standardized_city_frames(frames, features)
    factors = default_factor_table()
    config = ShapleyConfig(s["n_samples"], s["k_neighbors"], ctx.cfg["seed"])
    ctx.seeds["shapley"] = config.seed
    importance = []
    for city in sorted(std):
        model = GradientBoostedTrees.load(_require(ctx, "train", f"models/{city}.json"))
        meta = json.loads(_require(ctx, "ingest", f"{city}/city.json").read_text())
        factor = factors.factor(meta["region"])
        with ctx.timed(f"explain.{city}"):
            table, expl = explain_city(model, std[city], features, std[city], config, s["value_kind"],
                                       s["chain"], factor)
        table.insert(1, "city", city)
        _write_csv(ctx.work / f"{city}.csv", table)
        imp = mean_absolute_importance(expl)
        importance.append({"city": city, "factor_g_per_km": factor,
                           **{f: imp[f] * factor for f in features}})
    _write_csv(ctx.work / "importance_g.csv", pd.DataFrame(importance))


def stage_analyze(ctx: StageContext):
    a = ctx.cfg["analysis"]
    frames = _load_dataset(ctx)
    summary = {}
    for city in sorted(frames):
        frame = frames[city]
        table = pd.read_csv(_require(ctx, "explain", f"{city}.csv"), dtype={"taz_id": str})
        meta = json.loads(_require(ctx, "ingest", f"{city}/city.json").read_text())
        factor = default_factor_table().factor(meta["region"])
        table = frame[["taz_id"]].merge(table, on="taz_id", how="left", validate="one_to_one")
        out = ctx.work / city
        out.mkdir()
        needed = ("phi_population_density_per_km2", "phi_distance_to_center_km")
        if not all(c in table.columns for c in needed):
            summary[city] = {"skipped": "density or distance to center is not a direct cause"}
            continue
        weights = frame["trip_count"].to_numpy(float) if a["trip_weighted"] else None
        result = threshold_corridor(table, frame[TARGET].to_numpy(float) * factor,
                                    frame["distance_to_center_km"].to_numpy(float),
                                    bandwidth=a["bandwidth"], trip_weights=weights)
        curves = pd.concat([c.to_frame() for c in result.curves.values()], ignore_index=True)
        _write_csv(out / "effect_curves.csv", curves)
        _write_csv(out / "dominance.csv", result.dominance)
        polygons = _load_polygons(_require(ctx, "ingest", f"{city}/zones.geojson"))
        write_dominance_geojson(result, polygons, out / "dominance.geojson")
        entry = {"corridor": result.summary(), "ordered": result.ordered}
        trips = pd.read_csv(_require(ctx, "features", f"{city}/trips.csv"), dtype={"origin_taz": str})
        phi = dict(zip(table["taz_id"], table["phi_distance_to_center_km"]))
        try:
            rings = ring_destination_shares(trips[["dx", "dy"]].to_numpy(float), trips["origin_taz"], phi,
                                            meta["center"], a["ring_width_km"], a["threshold_g"])
            _write_csv(out / "ring_shares.csv", rings)
        except DataError as exc:
            entry["rings"] = str(exc)
        summary[city] = entry
    _write_json(ctx.work / "summary.json", summary)


def stage_synth(ctx: StageContext, raw_sections):
    syn = ctx.cfg["synth"]
    cities = []
    for i in range(syn["n_cities"]):
        name = f"city{i}"
        params = {**syn["city"], **syn["overrides"].get(name, {}), "seed": ctx.cfg["seed"] + i}
        try:
            city_cfg = CityConfig.from_dict(params)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"synth.city ({name}): {exc}") from None
        ctx.seeds[f"synth.{name}"] = city_cfg.seed
        with ctx.timed(f"synth.{name}"):
            generate_city(city_cfg, name).write(ctx.work / name)
        cities.append({"name": name, "dir": name})
    pipeline = {k: v for k, v in raw_sections.items() if k not in ("synth", "cities", "output")}
    pipeline["cities"] = cities
    _write_json(ctx.work / "pipeline.json", pipeline)


# ---------------------------------------------------------------------------
# entry point

def _parser():
    p = argparse.ArgumentParser(prog="urbanvkt", description="Urban form and car travel analysis pipeline.")
    p.add_argument("stage", choices=[*STAGES, "synth", "all"])
    p.add_argument("--config", help="TOML or JSON config file (a stage manifest also works)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output root (default: config 'output', then ${OUT_ENV})")
    p.add_argument("--test", choices=TEST_KINDS, help="conditional independence test")
    p.add_argument("--alpha", type=float)
    p.add_argument("--pool", type=int, help="pooled rows per discovery round")
    p.add_argument("--rounds", type=int, help="number of discovery rounds")
    return p


def _run_stage(name, out_root, cfg, applied, overrides, base_dir, raw):
    ctx = StageContext(name, out_root, cfg, applied, overrides, base_dir)
    try:
        if name == "ingest":
            stage_ingest(ctx, base_dir)
        elif name == "synth":
            stage_synth(ctx, raw)
        else:
            globals()[f"stage_{name}"](ctx)
        return ctx.commit()
    except BaseException:
        ctx.discard()
        raise


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {"seed": args.seed, "output": args.out, "discovery.test": args.test,
                 "discovery.alpha": args.alpha, "discovery.pool": args.pool, "discovery.rounds": args.rounds}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        cfg, applied, base_dir = resolve_config(args.config, overrides)
        raw = _read_config_file(Path(args.config)) if args.config else {}
        out_root = Path(cfg["output"])
        if not out_root.is_absolute():
            out_root = (Path.cwd() / out_root).resolve()
        stages = STAGES if args.stage == "all" else (args.stage,)
        with OutputLock(out_root):
            manifests = {s: _run_stage(s, out_root, cfg, applied, overrides, base_dir, raw) for s in stages}
            if args.stage == "all":
                combined = {
                    "stage": "all", "version": __version__, "config": cfg, "config_hash": config_hash(cfg),
                    "base_dir": str(base_dir), "defaults_applied": applied, "overrides": overrides,
                    "timings_s": {s: m["timings_s"]["total"] for s, m in manifests.items()},
                    "artifacts": {f"{s}/{k}": v for s, m in manifests.items() for k, v in m["artifacts"].items()},
                }
                tmp = out_root / "manifest.json.tmp"
                tmp.write_text(_dumps(combined), encoding="utf-8")
                os.replace(tmp, out_root / "manifest.json")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"{args.stage}: done, artifacts in {out_root}")
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
