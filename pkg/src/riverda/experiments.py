"""Experiment orchestration: scenario assembly, OSSE synthesis, runs and outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, dump_config
from .control import ComponentPrior, ControlVector, PriorSpec
from .enkf import CycleSettings, ReanalysisResult, cycle_loop
from .metrics import ScoreTable, build_score_table
from .obs_system import (GaugeObservation, GaugeStation, ObservationSet, SwathPass,
                         build_pass_plan, h_gauge, h_swot, read_gauges_csv, read_nodes_csv,
                         write_gauges_csv, write_nodes_csv)
from .osse import TruthSpec, generate_truth, synth_gauge_obs, synth_node_obs
from .river_model import (BoundaryForcing, HydroState, RiverGeometry, Trajectory,
                          build_geometry, flood_extent_mask, initial_state, normal_rating_curve,
                          read_hydrograph_csv, read_rating_csv)
from .svg import Panel, Series, write_svg

log = logging.getLogger(__name__)

NODE_SEED_TAG = 202
GAUGE_SEED_TAG = 101


# ---------------------------------------------------------------------------
# scenario


def synthetic_hydrograph(base, peak, peak_time, shape, duration, step):
    """Gamma-shaped flood wave: base + (peak - base) * (t/tp * exp(1 - t/tp))^shape."""
    t = np.arange(0.0, duration + step, step)
    s = (t / peak_time * np.exp(1.0 - t / peak_time)) ** shape
    return t, base + (peak - base) * s


@dataclass
class Scenario:
    config: ExperimentConfig
    geometry: RiverGeometry
    forcing: BoundaryForcing
    stations: list
    passes: list
    prior: PriorSpec
    initial: HydroState
    truth: TruthSpec | None = None


def build_prior(cfg: ExperimentConfig) -> PriorSpec:
    p = cfg.prior

    def comp(c):
        return ComponentPrior(c.default, c.sd, c.lower, c.upper)

    comps = [comp(p.floodplain_ks)] if p.floodplain_controlled else []
    comps += [comp(p.riverbed_ks) for _ in range(cfg.zone_count)]
    comps.append(comp(p.mu))
    return PriorSpec(tuple(comps), p.floodplain_controlled)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    g = cfg.geometry
    prior = build_prior(cfg)
    geo = build_geometry(g.length_m, g.cell_count, g.upstream_bed_m, g.slope, g.main_width_m,
                         g.bank_height_m, g.floodplain_width_m, g.bank_amplitude_m,
                         g.bank_wavelength_m, g.zone_edges_m,
                         [cfg.prior.riverbed_ks.default] * cfg.zone_count,
                         cfg.prior.floodplain_ks.default, g.dt_s)
    f = cfg.forcing
    if f.hydrograph_csv:
        qt, qv = read_hydrograph_csv(f.hydrograph_csv)
    else:
        qt, qv = synthetic_hydrograph(f.base_discharge_m3s, f.peak_discharge_m3s, f.peak_time_s,
                                      f.shape, cfg.event_end_s, f.hydrograph_step_s)
    if f.rating_csv:
        rq, rw = read_rating_csv(f.rating_csv)
    else:
        rq, rw = normal_rating_curve(geo, f.rating_max_discharge_m3s, ks=f.rating_ks)
    forcing = BoundaryForcing(tuple(float(v) for v in qt), tuple(float(v) for v in qv),
                              tuple(rq), tuple(rw))
    stations = [GaugeStation(s.id, s.x_m, geo.zone_of(s.x_m), s.role, s.sampling_interval_s,
                             s.datum_m) for s in cfg.stations]
    passes = [SwathPass(p.pass_id, p.x_lo_m, p.x_hi_m, p.overpass_times_s)
              for p in cfg.pass_plan.passes]
    initial = initial_state(geo, forcing, prior.default_control(), cfg.event_start_s,
                            f.spinup_s)
    truth = None
    if cfg.mode == "osse":
        t = cfg.truth
        ks = ([t.floodplain_ks] if prior.floodplain else []) + list(t.riverbed_ks)
        ctrl = ControlVector(tuple(ks), t.mu, prior.floodplain)
        series = (tuple(t.mu_times_s), tuple(t.mu_values)) if t.mu_times_s else None
        truth = TruthSpec(ctrl, "hydrograph", t.flood_peak_time_s,
                          tuple(t.extent_snapshot_times_s), series)
        if not prior.floodplain:
            # floodplain friction is not a control: the truth uses the fixed value
            geo = geo.with_ks(geo.ks_values(), t.floodplain_ks)
            initial = initial_state(geo, forcing, prior.default_control(), cfg.event_start_s,
                                    f.spinup_s)
    return Scenario(cfg, geo, forcing, stations, passes, prior, initial, truth)


def start_at_truth(scn: Scenario) -> Scenario:
    """Copy of an OSSE scenario whose prior defaults and initial state use the truth.

    Used to check that the observation pipeline alone does not pull a filter
    started on the right answer away from it.
    """
    if scn.truth is None:
        raise ValueError("start_at_truth needs an OSSE scenario")
    prior = scn.prior.with_defaults(scn.truth.true_control.as_array())
    c = scn.config
    initial = initial_state(scn.geometry, scn.forcing, prior.default_control(),
                            c.event_start_s, c.forcing.spinup_s)
    return replace(scn, prior=prior, initial=initial)


def pass_plan(scn: Scenario, interval_s: float | None = None):
    cfg = scn.config
    window = (cfg.event_start_s, cfg.event_end_s)
    if interval_s is not None:
        return build_pass_plan("fixed_interval", window, scn.passes, interval_s)
    pp = cfg.pass_plan
    return build_pass_plan(pp.kind, window, scn.passes, pp.interval_s, pp.offset_s)


def truth_initial(scn: Scenario) -> HydroState:
    return initial_state(scn.geometry, scn.forcing, scn.truth.true_control,
                         scn.config.event_start_s, scn.config.forcing.spinup_s)


def _sub_seed(seed: int, *tags) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


@dataclass
class Synthesis:
    truth: Trajectory
    masks: dict
    gauges: list
    nodes: dict  # plan label -> node observations
    plans: dict  # plan label -> [(pass_id, time)]


def synthesize(scn: Scenario) -> Synthesis:
    """Truth run and every observation realization the configured runs need."""
    cfg = scn.config
    extra = [t for _, t in pass_plan(scn)]
    for h in cfg.revisit_sweep_h:
        extra += [t for _, t in pass_plan(scn, h * 3600.0)]
    traj, masks = generate_truth(scn.truth, scn.geometry, scn.forcing, truth_initial(scn),
                                 cfg.event_end_s, cfg.enkf.save_every_s,
                                 cfg.extent_threshold_m, extra)
    syn = cfg.synthesis
    gauges = synth_gauge_obs(traj, scn.geometry, scn.stations,
                             _sub_seed(cfg.seed, GAUGE_SEED_TAG), syn.gauge_sigma_m,
                             cfg.enkf.tau, cfg.enkf.gauge_sigma_floor_m,
                             (cfg.event_start_s, cfg.event_end_s))
    plans = {"nominal": pass_plan(scn)}
    for h, lab in zip(cfg.revisit_sweep_h, cfg.sweep_labels()):
        plans[lab] = pass_plan(scn, h * 3600.0)
    nodes = {}
    for k, (lab, plan) in enumerate(plans.items()):
        nodes[lab] = synth_node_obs(traj, scn.geometry, plan, scn.passes,
                                    _sub_seed(cfg.seed, NODE_SEED_TAG, k), syn.pixel_density,
                                    syn.pixel_sigma_m, syn.dark_fraction,
                                    cfg.pass_plan.full_coverage)
    return Synthesis(traj, masks, gauges, nodes, plans)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    label: str
    experiment: str
    status: str = "ok"
    error: str = ""
    reanalysis: ReanalysisResult | None = None
    station: dict = field(default_factory=dict)  # id -> (times, model)
    masks: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)  # pass_id -> [(time, x, model, obs)]


@dataclass
class RunOutput:
    config: ExperimentConfig
    scenario: Scenario
    results: list
    synthesis: Synthesis | None
    reference: dict  # station id -> (times, reference wse)
    node_reference: list  # node observations used for profile scores
    scores: ScoreTable | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.results)

    def result(self, label: str) -> ExperimentResult:
        for r in self.results:
            if r.label == label:
                return r
        raise KeyError(label)


def experiment_jobs(cfg: ExperimentConfig) -> list:
    """(label, experiment, node plan label) for every run, in output order."""
    jobs = [(e, e, "nominal") for e in cfg.experiments]
    jobs += [(lab, "SWDA", lab) for lab in cfg.sweep_labels()]
    return jobs


def _reference_series(scn: Scenario, syn: Synthesis | None, gauges) -> dict:
    cfg = scn.config
    ref = {}
    for st in scn.stations:
        if syn is not None:
            times = np.arange(cfg.event_start_s + st.sampling_interval,
                              cfg.event_end_s + 1e-6, st.sampling_interval)
            ref[st.id] = (times, h_gauge(syn.truth, scn.geometry, st, times))
        else:
            obs = sorted((o for o in gauges if o.station_id == st.id), key=lambda o: o.time)
            if obs:
                ref[st.id] = (np.array([o.time for o in obs]), np.array([o.wse for o in obs]))
    return ref


def _evaluate(res: ExperimentResult, scn: Scenario, reference: dict, node_ref: list,
              snapshot_times):
    ra = res.reanalysis
    traj = Trajectory(ra.times, ra.depth, ra.discharge)
    for st in scn.stations:
        if st.id in reference:
            times = reference[st.id][0]
            res.station[st.id] = (times, h_gauge(traj, scn.geometry, st, times))
    for t in snapshot_times:
        res.masks[float(t)] = flood_extent_mask(traj.depth[traj.index_of(t)], scn.geometry,
                                                scn.config.extent_threshold_m)
    by_pass = {}
    for ob in node_ref:
        by_pass.setdefault((ob.pass_id, ob.time), []).append(ob)
    passes = {p.pass_id: p for p in scn.passes}
    for (pid, t), obs in sorted(by_pass.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        xs = np.array([o.node_x for o in obs])
        swath = SwathPass(pid, float(xs.min()) - 1.0, float(xs.max()) + 1.0) \
            if pid not in passes else passes[pid]
        if scn.config.pass_plan.full_coverage:
            swath = SwathPass(pid, 0.0, scn.geometry.length)
        nx, nw = h_swot(traj, scn.geometry, swath, t)
        lookup = dict(zip(np.round(nx, 6), nw))
        model = np.array([lookup.get(round(float(x), 6), np.nan) for x in xs])
        res.profiles.setdefault(pid, []).append((t, xs, model, np.array([o.wse for o in obs])))


def load_observations(cfg: ExperimentConfig):
    gauges = read_gauges_csv(cfg.observations.gauges_csv) if cfg.observations.gauges_csv else []
    nodes = read_nodes_csv(cfg.observations.nodes_csv) if cfg.observations.nodes_csv else []
    return gauges, nodes


def run_experiments(cfg: ExperimentConfig, workers: int = 1, only=None,
                    scenario: Scenario | None = None) -> RunOutput:
    """Run every configured experiment and the revisit sweep.

    In OSSE mode the truth and all synthetic observations are generated first
    so that every experiment sees the same realization.  A failing experiment
    is recorded and the others still run.  ``scenario`` replaces the one built
    from ``cfg``.
    """
    scn = build_scenario(cfg) if scenario is None else scenario
    if cfg.mode == "osse":
        syn = synthesize(scn)
        gauges, nodes_by_plan = syn.gauges, syn.nodes
    else:
        syn = None
        gauges, real_nodes = load_observations(cfg)
        nodes_by_plan = {"nominal": real_nodes}
        nodes_by_plan.update({lab: real_nodes for lab in cfg.sweep_labels()})
    reference = _reference_series(scn, syn, gauges)
    node_ref = nodes_by_plan["nominal"]
    window = (cfg.event_start_s, cfg.event_end_s)
    snapshots = [float(t) for t in cfg.truth.extent_snapshot_times_s] if syn else []
    extra = sorted(set(snapshots) | {o.time for o in node_ref})
    e = cfg.enkf
    settings = CycleSettings(e.members, e.window_s, cfg.seed, e.inflation, e.save_every_s,
                             e.tau, e.gauge_sigma_floor_m, e.node_sigma_floor_m,
                             e.center_perturbations, workers, e.reperturbation)
    results = []
    for label, exp, plan_label in experiment_jobs(cfg):
        if only is not None and label not in only:
            continue
        res = ExperimentResult(label, exp)
        try:
            obs = ObservationSet(gauges, nodes_by_plan[plan_label], window)
            res.reanalysis = cycle_loop(exp, scn.geometry, scn.forcing, scn.stations,
                                        scn.prior, scn.initial, cfg.event_end_s, obs, settings,
                                        extra, label)
            _evaluate(res, scn, reference, node_ref, snapshots)
        except Exception as err:  # isolate: record and continue with the next experiment
            log.error("experiment %s failed: %s", label, err)
            res.status, res.error = "failed", f"{type(err).__name__}: {err}"
        results.append(res)
    out = RunOutput(cfg, scn, results, syn, reference, node_ref)
    out.provenance = {"config_hash": config_hash(cfg), "seed": cfg.seed,
                      "code_version": __version__, "mode": cfg.mode}
    out.scores = score(out)
    return out


def score(out: RunOutput) -> ScoreTable:
    ref_station = {k: v[1] for k, v in out.reference.items()}
    per = {}
    for r in out.results:
        if r.status != "ok":
            continue
        per[r.label] = {
            "station": {k: v[1] for k, v in r.station.items()},
            "masks": r.masks,
            "profiles": {pid: {t: (x, m) for t, x, m, _ in lst}
                         for pid, lst in r.profiles.items()},
        }
    snaps = out.synthesis.masks if out.synthesis is not None else {}
    prof_ref = {}
    for ob in out.node_reference:
        prof_ref.setdefault(ob.pass_id, {}).setdefault(ob.time, []).append(ob)
    prof_ref = {pid: {t: (np.array([o.node_x for o in obs]), np.array([o.wse for o in obs]))
                      for t, obs in d.items()} for pid, d in sorted(prof_ref.items())}
    return build_score_table(per, [r.label for r in out.results], ref_station,
                             out.scenario.stations, snaps, prof_ref)


# ---------------------------------------------------------------------------
# outputs


def prepare_output_dir(path) -> Path:
    """Create ``path`` and check it is writable before any computation."""
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory {p} is not writable: {err}") from err
    return p


def _num(v, digits=6) -> str:
    return f"{v:.{digits}f}"


def write_controls_csv(path, ra: ReanalysisResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "t_start", "t_end"] + list(ra.labels))
        for k, ((t0, t1), c) in enumerate(zip(ra.cycle_windows, ra.controls)):
            w.writerow([k, _num(t0, 1), _num(t1, 1)] + [_num(v, 6) for v in c])


def write_truth_csv(path, traj: Trajectory):
    with open(path, "w", newline="") as fh:
        fh.write("time,cell,depth,discharge\n")
        for t, d, q in zip(traj.times, traj.depth, traj.discharge):
            ts = _num(t, 1)
            fh.write("".join(f"{ts},{i},{a:.6f},{b:.4f}\n" for i, (a, b) in enumerate(zip(d, q))))


def emit_outputs(out: RunOutput, out_dir) -> list:
    """Write every artifact and a manifest listing them; returns the file list."""
    root = prepare_output_dir(out_dir)
    cfg = out.config
    files = []

    def track(p):
        files.append(Path(p))
        return p

    (root / "config.yaml").write_text(dump_config(cfg))
    track(root / "config.yaml")
    if out.synthesis is not None:
        syn = out.synthesis
        write_truth_csv(track(root / "truth.csv"), syn.truth)
        write_gauges_csv(track(root / "obs_gauges.csv"), syn.gauges)
        for lab, nodes in syn.nodes.items():
            name = "obs_nodes.csv" if lab == "nominal" else f"obs_nodes_{lab}.csv"
            write_nodes_csv(track(root / name), nodes)
    truth_ctrl = None
    if out.scenario.truth is not None:
        truth_ctrl = out.scenario.truth
    for res in out.results:
        if res.status != "ok":
            continue
        d = root / res.label
        d.mkdir(exist_ok=True)
        ra = res.reanalysis
        write_controls_csv(track(d / "controls.csv"), ra)
        with open(track(d / "diagnostics.jsonl"), "w") as fh:
            for rec in ra.diagnostics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(track(d / "stations.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "time_s", "model_wse_m", "reference_wse_m"])
            for sid, (times, model) in res.station.items():
                ref = out.reference[sid][1]
                for t, m, r in zip(times, model, ref):
                    w.writerow([sid, _num(t, 1), _num(m), _num(r)])
        with open(track(d / "profiles.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pass_id", "time_s", "node_x_m", "model_wse_m", "obs_wse_m"])
            for pid, lst in res.profiles.items():
                for t, xs, model, obs in lst:
                    for x, m, o in zip(xs, model, obs):
                        w.writerow([pid, _num(t, 1), _num(x, 1), _num(m), _num(o)])
        if res.masks:
            with open(track(d / "extent.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["time_s", "cell", "channel", "floodplain"])
                for t, mask in res.masks.items():
                    for i, (c, f) in enumerate(mask.astype(int)):
                        w.writerow([_num(t, 1), i, c, f])
        _plots(res, out, d, truth_ctrl, track)
    out.scores.to_csv(track(root / "scores.csv"))
    (root / "scores.txt").write_text(out.scores.to_text())
    track(root / "scores.txt")
    summary = {
        "name": cfg.name,
        "provenance": out.provenance,
        "experiments": [
            {"label": r.label, "experiment": r.experiment, "status": r.status,
             "error": r.error,
             "final_control": dict(zip(r.reanalysis.labels,
                                       [round(float(v), 6) for v in r.reanalysis.controls[-1]]))
             if r.reanalysis is not None else None,
             "mean_station_rmse_m": round(out.scores.row(r.label).mean_station_rmse, 6)
             if r.status == "ok" else None}
            for r in out.results
        ],
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    track(root / "summary.json")
    manifest = {"files": [{"path": str(p.relative_to(root)), "sha256": _sha256(p)}
                          for p in files]}
    manifest["files"].append({"path": "manifest.json", "sha256": None})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return files + [root / "manifest.json"]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _plots(res: ExperimentResult, out: RunOutput, d: Path, truth: TruthSpec | None, track):
    day = 86400.0
    panels = []
    for st in out.scenario.stations:
        if st.id not in res.station:
            continue
        times, model = res.station[st.id]
        rt, rw = out.reference[st.id]
        tag = " (validation)" if st.role == "validation" else ""
        ref_label = "truth" if out.synthesis is not None else "observed"
        panels.append(Panel(f"{st.id}{tag}", [
            Series(ref_label, rt / day, rw, "points", "#444444"),
            Series(res.label, times / day, model, "line"),
        ], "time [d]", "WSE [m]"))
    write_svg(track(d / "stations.svg"), panels, title=f"{res.label}: water level at stations")
    ra = res.reanalysis
    tmid = ra.cycle_windows.mean(axis=1) / day
    panels = []
    truth_vals = None
    if truth is not None:
        truth_vals = list(truth.true_control.ks_values)
    for j, lab in enumerate(ra.labels):
        series = [Series(res.label, tmid, ra.controls[:, j], "line")]
        if truth_vals is not None and lab != "mu":
            series.append(Series("truth", tmid, np.full(tmid.size, truth_vals[j]), "dashed",
                                 "#444444"))
        elif truth is not None and lab == "mu":
            if truth.mu_series is not None:
                mt, mv = truth.mu_series
                series.append(Series("truth", np.asarray(mt) / day, np.asarray(mv), "dashed",
                                     "#444444"))
            else:
                series.append(Series("truth", tmid, np.full(tmid.size, truth.true_control.mu),
                                     "dashed", "#444444"))
        panels.append(Panel(lab, series, "time [d]", ""))
    write_svg(track(d / "controls.svg"), panels, title=f"{res.label}: analysed controls",
              columns=3, width=300, height=200)
    panels = []
    for pid, lst in res.profiles.items():
        for t, xs, model, obs in lst:
            panels.append(Panel(f"pass {pid} at {t / day:.2f} d", [
                Series("nodes", xs / 1000.0, obs, "points", "#444444"),
                Series(res.label, xs / 1000.0, model, "line"),
            ], "x [km]", "WSE [m]"))
    if panels:
        write_svg(track(d / "profiles.svg"), panels, title=f"{res.label}: WSE profiles",
                  columns=3, width=300, height=200)
