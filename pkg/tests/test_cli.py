import json
import shutil
import subprocess
import sys

import jsonschema
import pytest

from urbanvkt import cli
from urbanvkt.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, LOCK_NAME, STAGES, graph_schema, resolve_config, run

SMOKE = """\
seed = 3
[synth]
n_cities = 3
[synth.city]
size_km = 18.0
taz_per_side = 8
mean_trips = 15
[discovery]
pool = 150
rounds = 2
[gbdt]
n_trees = 40
[shapley]
n_samples = 30
"""

MANIFEST_KEYS = {"stage", "version", "config", "config_hash", "base_dir", "defaults_applied", "overrides", "seeds",
                 "timings_s", "inputs", "artifacts", "notes"}


def _pipeline(root):
    """Generate synthetic cities, then run every stage on them."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "synth.toml").write_text(SMOKE)
    out = root / "out"
    assert run(["synth", "--config", str(root / "synth.toml"), "--out", str(out)]) == EXIT_OK
    assert run(["all", "--config", str(out / "synth" / "pipeline.json"), "--out", str(out)]) == EXIT_OK
    return out


def _artifacts(out):
    return {s: json.loads((out / s / "manifest.json").read_text())["artifacts"] for s in (*STAGES, "synth")}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("smoke"))


def test_all_stages_write_manifests(smoke):
    for stage in (*STAGES, "synth"):
        manifest = json.loads((smoke / stage / "manifest.json").read_text())
        assert MANIFEST_KEYS <= set(manifest)
        assert manifest["stage"] == stage
        for rel, digest in manifest["artifacts"].items():
            assert cli.sha256_file(smoke / stage / rel) == digest
    combined = json.loads((smoke / "manifest.json").read_text())
    assert set(combined["timings_s"]) == set(STAGES)
    assert not (smoke / LOCK_NAME).exists()
    assert not list(smoke.glob(".*.partial"))


def test_graph_output_matches_schema(smoke):
    graph = json.loads((smoke / "discover" / "graph.json").read_text())
    jsonschema.validate(graph, graph_schema())
    assert (smoke / "discover" / "graph.dot").read_text().startswith("digraph")
    for edge in graph["edges"]:
        assert edge["from"] != "mean_vkt_km"
        assert edge["to"] not in ("distance_to_center_km", "income") or edge["mark"] != "directed"


def test_stage_outputs(smoke):
    cv = (smoke / "train" / "cv_metrics.csv").read_text().splitlines()
    assert cv[0] == "city,r2_train,r2_test,mae_km,rmse_km,mean_vkt_km,sd_vkt_km"
    assert len(cv) == 4
    explain = (smoke / "explain" / "city0.csv").read_text().splitlines()[0]
    assert "phi_distance_to_center_km" in explain and "taz_id" in explain
    summary = json.loads((smoke / "analyze" / "summary.json").read_text())
    assert set(summary) == {"city0", "city1", "city2"}
    for name in ("effect_curves.csv", "dominance.csv", "dominance.geojson"):
        assert (smoke / "analyze" / "city0" / name).exists()


def test_rerun_is_byte_identical(smoke, tmp_path):
    again = _pipeline(tmp_path)
    assert _artifacts(again) == _artifacts(smoke)
    for stage in STAGES:
        for path in (smoke / stage).rglob("*"):
            if path.is_file() and path.name != "manifest.json":
                rel = path.relative_to(smoke)
                assert path.read_bytes() == (again / rel).read_bytes(), rel


def test_single_stage_rerun_in_place(smoke, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(smoke, out)
    before = _artifacts(out)["discover"]
    manifest = out / "discover" / "manifest.json"
    assert run(["discover", "--config", str(manifest), "--out", str(out)]) == EXIT_OK
    assert _artifacts(out)["discover"] == before


def test_manifest_is_a_config(smoke):
    manifest = smoke / "train" / "manifest.json"
    cfg, applied, _ = resolve_config(manifest)
    assert cfg == json.loads(manifest.read_text())["config"]
    assert applied == []


def test_missing_alpha_uses_default(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[discovery]\nrounds = 3\n")
    cfg, applied, _ = resolve_config(path)
    assert cfg["discovery"]["alpha"] == 0.025
    assert "discovery.alpha" in applied and "discovery.rounds" not in applied


def test_json_and_toml_agree(tmp_path):
    (tmp_path / "a.toml").write_text("seed = 4\n[gbdt]\nn_trees = 7\n")
    (tmp_path / "a.json").write_text(json.dumps({"seed": 4, "gbdt": {"n_trees": 7}}))
    assert resolve_config(tmp_path / "a.toml")[:2] == resolve_config(tmp_path / "a.json")[:2]


def test_overrides_and_env(tmp_path):
    cfg, applied, _ = resolve_config(None, {"discovery.alpha": 0.05, "seed": 9}, env={"URBANVKT_OUT": "/x"})
    assert cfg["discovery"]["alpha"] == 0.05 and cfg["seed"] == 9 and cfg["output"] == "/x"
    assert "discovery.alpha" not in applied


@pytest.mark.parametrize("text, key", [
    ("[discovery]\nalpah = 0.1\n", "discovery.alpah"),
    ("[discovery]\nalpha = 1.5\n", "discovery.alpha"),
    ("[gbdt]\nn_trees = \"many\"\n", "gbdt.n_trees"),
    ("region = \"Mars\"\n", "region"),
    ("[[cities]]\ndir = \"x\"\n", "cities[0].name"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, key):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    assert run(["discover", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert key in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert run(["ingest", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG


def test_no_cities_exit_2(tmp_path):
    assert run(["features", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_input_exit_3(tmp_path, capsys):
    (tmp_path / "c.toml").write_text('[[cities]]\nname = "a"\ndir = "a"\n')
    assert run(["features", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "run the 'ingest' stage first" in capsys.readouterr().err


def test_missing_city_file_exit_3(tmp_path):
    (tmp_path / "c.toml").write_text('[[cities]]\nname = "a"\ndir = "nowhere"\n')
    assert run(["ingest", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert not (tmp_path / "o" / "ingest").exists()


def test_lock_blocks_second_writer(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / LOCK_NAME).write_text("1\n")
    assert run(["synth", "--out", str(out)]) == EXIT_CONFIG
    assert "locked" in capsys.readouterr().err


def test_failed_stage_keeps_previous_output(smoke, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(smoke, out)
    manifest = (out / "discover" / "manifest.json").read_bytes()
    dataset = out / "features" / "dataset.csv"
    dataset.write_text(dataset.read_text().splitlines()[0] + "\n")
    assert run(["discover", "--config", str(out / "synth" / "pipeline.json"), "--out", str(out)]) == EXIT_DATA
    assert (out / "discover" / "manifest.json").read_bytes() == manifest
    assert not (out / ".discover.partial").exists()
    assert not (out / LOCK_NAME).exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "urbanvkt.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
