import json
import os
from pathlib import Path

import pytest
import yaml

from riverda.cli import main
from riverda.config import parse_config
from riverda.experiments import build_scenario, run_experiments, start_at_truth

DAY = 86400.0


def tiny(**over):
    """A one-day, two-zone twin experiment that runs in seconds."""
    cfg = {
        "seed": 11,
        "name": "tiny",
        "experiments": ["OL", "IDA", "SWDA", "FDA"],
        "event_end_s": DAY,
        "revisit_sweep_h": [12],
        "extent_threshold_m": 0.0,
        "geometry": {"length_m": 10_000.0, "cell_count": 50, "bank_height_m": 3.0,
                     "floodplain_width_m": 500.0, "zone_edges_m": [0.0, 5000.0, 10_000.0],
                     "dt_s": 10.0},
        "forcing": {"base_discharge_m3s": 200.0, "peak_discharge_m3s": 700.0,
                    "peak_time_s": 0.5 * DAY, "shape": 3.0, "spinup_s": 3 * 3600.0},
        "stations": [{"id": "UP", "x_m": 2000.0},
                     {"id": "DN", "x_m": 8000.0, "role": "validation"}],
        "pass_plan": {"kind": "fixed_interval", "interval_s": 6 * 3600.0, "offset_s": 3 * 3600.0,
                      "passes": [{"pass_id": 1, "x_lo_m": 0.0, "x_hi_m": 10_000.0,
                                  "overpass_times_s": [3 * 3600.0]}]},
        "enkf": {"members": 4, "window_s": 6 * 3600.0, "save_every_s": 1800.0},
        "truth": {"riverbed_ks": [45.0, 35.0], "extent_snapshot_times_s": [0.5 * DAY]},
        "synthesis": {"pixel_density": 10},
    }
    cfg.update(over)
    return cfg


def write_cfg(tmp_path, name="c.yaml", **over):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(tiny(**over)))
    return p


def csv_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*.csv"))}


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    out = tmp / "run1"
    assert main(["osse", "--config", str(cfg), "--out", str(out)]) == 0
    return tmp, cfg, out


def test_osse_writes_every_listed_file(base_run):
    _, _, out = base_run
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {f["path"] for f in manifest["files"]}
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()}
    assert listed == on_disk
    for lab in ("OL", "IDA", "SWDA", "FDA", "SWDA_12h"):
        for name in ("controls.csv", "stations.csv", "profiles.csv", "diagnostics.jsonl"):
            assert f"{lab}/{name}" in listed
    for name in ("config.yaml", "truth.csv", "obs_gauges.csv", "obs_nodes.csv",
                 "scores.csv", "scores.txt", "summary.json"):
        assert name in listed
    summary = json.loads((out / "summary.json").read_text())
    assert all(e["status"] == "ok" for e in summary["experiments"])


def test_reruns_and_workers_are_byte_identical(base_run):
    tmp, cfg, out = base_run
    again = tmp / "run2"
    assert main(["osse", "--config", str(cfg), "--out", str(again), "--workers", "3"]) == 0
    assert csv_bytes(out) == csv_bytes(again)


def test_experiments_are_isolated(base_run, tmp_path):
    _, _, out = base_run
    cfg = write_cfg(tmp_path, experiments=["OL", "IDA", "SWDA"])
    fewer = tmp_path / "fewer"
    assert main(["osse", "--config", str(cfg), "--out", str(fewer)]) == 0
    a, b = csv_bytes(out), csv_bytes(fewer)
    for name, data in b.items():
        if name.startswith(("IDA/", "SWDA/")):
            assert a[name] == data, name
    assert not (fewer / "FDA").exists()


def test_seed_override_changes_outputs(base_run, tmp_path):
    _, cfg, out = base_run
    other = tmp_path / "other"
    assert main(["osse", "--config", str(cfg), "--out", str(other), "--seed-override", "12"]) == 0
    assert csv_bytes(out)["obs_gauges.csv"] != csv_bytes(other)["obs_gauges.csv"]


def test_score_rebuilds_the_table(base_run, tmp_path):
    _, cfg, out = base_run
    original = (out / "scores.csv").read_bytes()
    copy = tmp_path / "copy"
    copy.mkdir()
    for p in out.rglob("*"):
        if p.is_file():
            target = copy / p.relative_to(out)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(p.read_bytes())
    (copy / "scores.csv").unlink()
    assert main(["score", "--config", str(cfg), "--out", str(copy)]) == 0
    assert (copy / "scores.csv").read_bytes() == original


def test_synth_then_assimilate(tmp_path):
    cfg = write_cfg(tmp_path, experiments=["OL", "FDA"], revisit_sweep_h=[])
    obs_dir = tmp_path / "obs"
    assert main(["synth", "--config", str(cfg), "--out", str(obs_dir)]) == 0
    assert (obs_dir / "obs_gauges.csv").is_file() and (obs_dir / "obs_nodes.csv").is_file()
    real = write_cfg(tmp_path, "real.yaml", mode="real", experiments=["OL", "FDA"],
                     revisit_sweep_h=[],
                     observations={"gauges_csv": str(obs_dir / "obs_gauges.csv"),
                                   "nodes_csv": str(obs_dir / "obs_nodes.csv")})
    out = tmp_path / "real"
    assert main(["assimilate", "--config", str(real), "--out", str(out)]) == 0
    assert (out / "FDA" / "stations.csv").is_file()
    assert not (out / "truth.csv").exists()


def test_open_loop_only(tmp_path):
    cfg = write_cfg(tmp_path, experiments=["OL"], revisit_sweep_h=[])
    out = tmp_path / "ol"
    assert main(["osse", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "OL" / "controls.csv").read_text().splitlines()
    assert len(set(line.split(",", 3)[3] for line in lines[1:])) == 1
    assert (out / "scores.txt").read_text().count("OL") >= 1


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0,
                    reason="root ignores directory permissions")
def test_unwritable_output_dir(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        assert main(["osse", "--config", str(cfg), "--out", str(locked / "x")]) == 2
    finally:
        locked.chmod(0o700)
    assert "error" in capsys.readouterr().err


def test_output_path_is_a_file(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["osse", "--config", str(cfg), "--out", str(blocker / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({**tiny(), "enkf": {"members": -1}}))
    assert main(["osse", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "config.enkf.members" in capsys.readouterr().err


def test_start_at_truth_moves_the_prior(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, experiments=["OL"], revisit_sweep_h=[]))
    scn = start_at_truth(build_scenario(cfg))
    truth = scn.truth.true_control.as_array()
    assert list(scn.prior.default) == list(truth)
    out = run_experiments(cfg, scenario=scn)
    assert (out.result("OL").reanalysis.controls == truth).all()
