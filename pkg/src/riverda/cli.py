"""Command-line entry point for river flood reanalysis experiments.

Subcommands
-----------
osse        twin experiment: truth, synthetic observations, all experiments
assimilate  experiments against observation files named in the config
score       recompute score tables from a previous output directory
synth       truth run and synthetic observation files only
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigurationError, parse_config
from .experiments import (ExperimentResult, RunOutput, build_scenario, emit_outputs,
                          experiment_jobs, load_observations, prepare_output_dir, run_experiments,
                          score, synthesize, write_truth_csv, _reference_series)
from .obs_system import read_nodes_csv, write_gauges_csv, write_nodes_csv

log = logging.getLogger("riverda")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    common.add_argument("--seed-override", type=int, default=None,
                        help="replace the config seed")
    common.add_argument("--workers", type=int, default=1,
                        help="threads for the ensemble forecast (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="riverda", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("osse", parents=[common], help="run the twin experiment")
    sub.add_parser("assimilate", parents=[common], help="assimilate observation files")
    sub.add_parser("score", parents=[common], help="score an existing output directory")
    sub.add_parser("synth", parents=[common], help="synthesize observations only")
    return p


def _load(args):
    cfg = parse_config(args.config)
    if args.seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed_override))
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    out = Path(args.out if args.out is not None else cfg.output_dir)
    return cfg, out


def _report(run: RunOutput):
    print(run.scores.to_text(), end="")
    for r in run.results:
        if r.status != "ok":
            print(f"FAILED {r.label}: {r.error}", file=sys.stderr)


def cmd_run(args, mode) -> int:
    cfg, out = _load(args)
    if cfg.mode != mode:
        cfg = dataclasses.replace(cfg, mode=mode)
        cfg.validate()
    prepare_output_dir(out)
    run = run_experiments(cfg, workers=args.workers)
    emit_outputs(run, out)
    _report(run)
    return 0 if run.ok else 1


def cmd_synth(args) -> int:
    cfg, out = _load(args)
    root = prepare_output_dir(out)
    scn = build_scenario(cfg)
    syn = synthesize(scn)
    write_truth_csv(root / "truth.csv", syn.truth)
    write_gauges_csv(root / "obs_gauges.csv", syn.gauges)
    for lab, nodes in syn.nodes.items():
        name = "obs_nodes.csv" if lab == "nominal" else f"obs_nodes_{lab}.csv"
        write_nodes_csv(root / name, nodes)
    print(f"wrote {len(syn.gauges)} gauge and "
          f"{sum(len(n) for n in syn.nodes.values())} node observations to {root}")
    return 0


def _read_stations_csv(path):
    series = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            series.setdefault(r["station_id"], ([], []))
            series[r["station_id"]][0].append(float(r["time_s"]))
            series[r["station_id"]][1].append(float(r["model_wse_m"]))
    return {k: (np.array(t), np.array(v)) for k, (t, v) in series.items()}


def _read_extent_csv(path, cells):
    masks = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            t = float(r["time_s"])
            m = masks.setdefault(t, np.zeros((cells, 2), dtype=bool))
            m[int(r["cell"])] = (r["channel"] == "1", r["floodplain"] == "1")
    return masks


def _read_profiles_csv(path):
    prof = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["pass_id"]), float(r["time_s"]))
            prof.setdefault(key, ([], [], []))
            prof[key][0].append(float(r["node_x_m"]))
            prof[key][1].append(float(r["model_wse_m"]))
            prof[key][2].append(float(r["obs_wse_m"]))
    out = {}
    for (pid, t), (x, m, o) in sorted(prof.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        out.setdefault(pid, []).append((t, np.array(x), np.array(m), np.array(o)))
    return out


def cmd_score(args) -> int:
    """Rebuild the score table from the per-experiment CSVs in ``--out``."""
    cfg, out = _load(args)
    root = Path(out)
    if not root.is_dir():
        raise ConfigurationError(f"no output directory {root} to score")
    scn = build_scenario(cfg)
    syn = None
    if cfg.mode == "osse":
        syn = synthesize(scn)
        gauges, node_ref = syn.gauges, syn.nodes["nominal"]
    else:
        gauges, node_ref = load_observations(cfg)
    reference = _reference_series(scn, syn, gauges)
    results = []
    for label, exp, _ in experiment_jobs(cfg):
        d = root / label
        if not (d / "stations.csv").is_file():
            log.warning("no outputs for %s in %s", label, root)
            continue
        res = ExperimentResult(label, exp)
        res.station = _read_stations_csv(d / "stations.csv")
        if (d / "extent.csv").is_file():
            res.masks = _read_extent_csv(d / "extent.csv", scn.geometry.cell_count)
        if (d / "profiles.csv").is_file():
            res.profiles = _read_profiles_csv(d / "profiles.csv")
        results.append(res)
    run = RunOutput(cfg, scn, results, syn, reference, node_ref)
    table = score(run)
    table.to_csv(root / "scores.csv")
    (root / "scores.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "osse":
            return cmd_run(args, "osse")
        if args.command == "assimilate":
            return cmd_run(args, "real")
        if args.command == "score":
            return cmd_score(args)
        return cmd_synth(args)
    except (ConfigurationError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
