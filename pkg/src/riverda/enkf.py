"""Stochastic ensemble Kalman filter for the control vector.

Only the controls are analysed.  Members carry their own hydraulic states
and controls through the whole event.  Each cycle they are propagated over
the window, their controls are updated from the stacked observations and then
partially re-perturbed so the spread cannot collapse.  Because every member
has run with its own control since the start, downstream observations that
remember earlier inflow stay consistent with that member's inflow factor.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .control import PriorSpec, clamp, control_labels, member_generators, refresh, reperturb
from .obs_system import ObservationSet, StackedObservations, stack_observations
from .river_model import BoundaryForcing, Engine, HydroState, RiverGeometry, SolverError, \
    friction_arrays

log = logging.getLogger(__name__)

EXPERIMENTS = ("OL", "IDA", "SWDA", "FDA")


class CycleError(RuntimeError):
    def __init__(self, message, member=None, time=None):
        super().__init__(message)
        self.member = member
        self.time = time


@dataclass
class AnalysisDiagnostics:
    innovation_rms: float
    spread_before: np.ndarray
    spread_after: np.ndarray
    kalman_gain_norm: float
    obs_count: int

    def to_dict(self) -> dict:
        return {
            "innovation_rms": float(self.innovation_rms),
            "spread_before": [float(v) for v in self.spread_before],
            "spread_after": [float(v) for v in self.spread_after],
            "kalman_gain_norm": float(self.kalman_gain_norm),
            "obs_count": int(self.obs_count),
        }


@dataclass
class Ensemble:
    """Controls (M, d) and per-member hydraulic states at ``time``."""

    controls: np.ndarray
    depth: np.ndarray
    face_discharge: np.ndarray
    time: float
    generators: list
    cycle_index: int = 0
    floodplain: bool = True

    def __post_init__(self):
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.controls.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if len(self.generators) != self.size:
            raise ValueError("one generator per member is required")

    @property
    def size(self) -> int:
        return self.controls.shape[0]

    @classmethod
    def from_state(cls, controls, state: HydroState, generators, floodplain=True):
        m = np.atleast_2d(controls).shape[0]
        return cls(controls, np.repeat(state.depth[None, :], m, axis=0),
                   np.repeat(state.face_discharge[None, :], m, axis=0), state.time,
                   generators, 0, floodplain)

    def member_state(self, i: int) -> HydroState:
        return HydroState(self.time, self.depth[i], self.face_discharge[i])


@dataclass
class CycleSettings:
    members: int = 50
    window: float = 6 * 3600.0
    seed: int = 1234
    inflation: float = 1.0
    save_every: float = 900.0
    tau: float = 0.15
    gauge_sigma_floor: float = 0.02
    node_sigma_floor: float = 0.10
    center_perturbations: bool = True
    workers: int = 1
    reperturbation: float = 0.3


@dataclass
class ReanalysisResult:
    experiment: str
    labels: list
    cycle_windows: np.ndarray
    controls: np.ndarray
    diagnostics: list
    updated: np.ndarray
    times: np.ndarray
    depth: np.ndarray
    discharge: np.ndarray
    provenance: dict = field(default_factory=dict)

    def control_at(self, t: float) -> np.ndarray:
        """Analysed control acting at time ``t``."""
        k = int(np.searchsorted(self.cycle_windows[:, 1], t, side="left"))
        return self.controls[min(k, len(self.controls) - 1)]


# ---------------------------------------------------------------------------
# analysis core


def _spread(x):
    return x.std(axis=0, ddof=1)


def enkf_update(X, HX, y, sigma, eps=None, jitter=1e-10):
    """Perturbed-observation EnKF update of the rows of ``X``.

    ``eps`` (M, p) are the observation perturbations; ``None`` means zero.
    Returns (X_a, K).
    """
    X = np.asarray(X, dtype=float)
    HX = np.asarray(HX, dtype=float)
    y = np.asarray(y, dtype=float)
    m = X.shape[0]
    A = X - X.mean(axis=0)
    B = HX - HX.mean(axis=0)
    pxy = A.T @ B / (m - 1)
    pyy = B.T @ B / (m - 1)
    C = pyy + np.diag(np.asarray(sigma, dtype=float) ** 2)
    try:
        cho = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        C = C + jitter * max(np.trace(C), 1e-300) * np.eye(len(y))
        cho = np.linalg.cholesky(C)
    # K = Pxy C^-1 via the Cholesky factor
    tmp = np.linalg.solve(cho, pxy.T)
    K = np.linalg.solve(cho.T, tmp).T
    D = y[None, :] - HX
    if eps is not None:
        D = D + eps
    return X + D @ K.T, K


def draw_obs_perturbations(generators, sigma, center=True):
    eps = np.array([g.standard_normal(len(sigma)) for g in generators]) * sigma[None, :]
    if center:
        eps = eps - eps.mean(axis=0)
    return eps


def analysis(ensemble: Ensemble, trajectories, obs: StackedObservations, prior: PriorSpec,
             eps=None, center=True):
    """Update the ensemble controls from the stacked observations.

    ``trajectories`` is (times, wse) with wse shaped (T, M, N).  When ``eps``
    is None perturbations are drawn from the member streams.
    """
    X = ensemble.controls
    before = _spread(X)
    if len(obs) == 0:
        log.warning("no observations in cycle %d: identity update", ensemble.cycle_index)
        return ensemble, AnalysisDiagnostics(0.0, before, before.copy(), 0.0, 0)
    times, wse = trajectories
    HX = obs.equivalents(times, wse)
    if eps is None:
        eps = draw_obs_perturbations(ensemble.generators, obs.sigma, center)
    Xa, K = enkf_update(X, HX, obs.y, obs.sigma, eps)
    Xa = clamp(Xa, prior)
    innov = obs.y - HX.mean(axis=0)
    diag = AnalysisDiagnostics(float(np.sqrt(np.mean(innov ** 2))), before, _spread(Xa),
                               float(np.linalg.norm(K)), len(obs))
    return replace(ensemble, controls=Xa), diag


# ---------------------------------------------------------------------------
# forecast


def _chunks(n, workers):
    workers = max(1, min(int(workers), n))
    return [c for c in np.array_split(np.arange(n), workers) if c.size]


def forecast(ensemble: Ensemble, geometry: RiverGeometry, forcing: BoundaryForcing, window,
             save_times=(), workers: int = 1, engine: Engine | None = None):
    """Propagate every member over ``window`` with its own control.

    Returns (ensemble', (times, depth)) with depth shaped (T, M, N), including
    the initial snapshot.
    """
    t0, t1 = float(window[0]), float(window[1])
    if t0 != ensemble.time:
        raise CycleError(f"window starts at {t0} but ensemble is at {ensemble.time}")
    m = ensemble.size
    if t1 == t0:
        return ensemble, (np.array([t0]), ensemble.depth[None, ...].copy())
    eng = engine or Engine(geometry, forcing)
    ks, fks, mu = friction_arrays(geometry, ensemble.controls, ensemble.floodplain)
    ks = np.broadcast_to(ks, ensemble.depth.shape)
    saves = sorted({float(s) for s in save_times if t0 < s <= t1} | {t1})

    def work(idx):
        try:
            return eng.advance(ensemble.depth[idx], ensemble.face_discharge[idx], t0, t1,
                               ks[idx], fks[idx], mu[idx], save_times=saves)
        except SolverError as err:
            member = int(idx[err.member]) if err.member is not None else int(idx[0])
            raise CycleError(f"member {member} failed at t={err.time}: {err}", member,
                             err.time) from err

    chunks = _chunks(m, workers)
    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    h = np.concatenate([r[0] for r in results], axis=0)
    q = np.concatenate([r[1] for r in results], axis=0)
    times = np.array([t0] + [s[0] for s in results[0][3]])
    depth = np.empty((len(times), m, ensemble.depth.shape[1]))
    depth[0] = ensemble.depth
    for (idx, r) in zip(chunks, results):
        for k, snap in enumerate(r[3]):
            depth[k + 1, idx] = snap[1]
    new = replace(ensemble, depth=h, face_discharge=q, time=t1)
    return new, (times, depth)


# ---------------------------------------------------------------------------
# cycling


def make_windows(t_start, t_end, window):
    if window <= 0:
        raise ValueError("window must be > 0")
    edges = [float(t_start)]
    while edges[-1] < t_end - 1e-9:
        edges.append(min(edges[-1] + window, float(t_end)))
    wins = np.array(list(zip(edges[:-1], edges[1:])))
    if np.any(wins[1:, 0] < wins[:-1, 1]):
        raise ValueError("assimilation windows overlap")
    return wins


def select_for_experiment(obs: ObservationSet, experiment: str, t0, t1, stations):
    assim = {s.id for s in stations if s.role == "assimilation"}
    if experiment == "IDA":
        return obs.select(t0, t1, gauges=True, nodes=False, stations=assim)
    if experiment == "SWDA":
        return obs.select(t0, t1, gauges=False, nodes=True)
    if experiment == "FDA":
        return obs.select(t0, t1, gauges=True, nodes=True, stations=assim)
    return ObservationSet((), (), (t0, t1))


def cycle_loop(experiment: str, geometry: RiverGeometry, forcing: BoundaryForcing,
               stations: Sequence, prior: PriorSpec, initial: HydroState, t_end: float,
               observations: ObservationSet | None, settings: CycleSettings,
               extra_save_times=(), label: str | None = None) -> ReanalysisResult:
    """Run one OL/IDA/SWDA/FDA experiment over ``[initial.time, t_end]``.

    OL never analyses and runs the prior control only.  Otherwise the members
    keep their own states and controls from cycle to cycle; each window they
    are propagated, analysed when observations fall in the window, and then
    partially re-perturbed.  The reanalysis is one continuous run that uses the
    analysed mean control of each window.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    label = label or experiment
    observations = observations or ObservationSet()
    windows = make_windows(initial.time, t_end, settings.window)
    eng = Engine(geometry, forcing)
    floodplain = prior.floodplain
    mean = prior.default.copy()
    h_c = initial.depth[None, :].copy()
    q_c = initial.face_discharge[None, :].copy()
    extra = np.asarray(sorted(extra_save_times), dtype=float)

    ens = None
    if experiment != "OL":
        gens = member_generators(settings.seed, settings.members, label)
        X = reperturb(prior, prior.default, gens, orthogonal=settings.center_perturbations)
        ens = Ensemble.from_state(X, initial, gens, floodplain)
        mean = X.mean(axis=0)

    controls, diags, updated = [], [], []
    times, depth, discharge = [initial.time], [initial.depth.copy()], [initial.discharge.copy()]
    for k, (t0, t1) in enumerate(windows):
        grid = np.arange(t0, t1 + 1e-9, settings.save_every)[1:]
        saves = np.union1d(grid, extra[(extra > t0) & (extra <= t1)])
        did_update = False
        if ens is not None:
            ens.cycle_index = k
            sel = select_for_experiment(observations, experiment, t0, t1, stations)
            stacked = stack_observations(sel, geometry, stations, settings.tau,
                                         settings.gauge_sigma_floor, settings.node_sigma_floor)
            ens, (tt, dd) = forecast(ens, geometry, forcing, (t0, t1),
                                     np.unique(stacked.times), settings.workers, eng)
            if len(stacked):
                if settings.inflation != 1.0:
                    X = ens.controls
                    ens.controls = clamp(X.mean(axis=0)
                                         + settings.inflation * (X - X.mean(axis=0)), prior)
                wse = dd + np.asarray(geometry.bed_elevation)
                ens, diag = analysis(ens, (tt, wse), stacked, prior,
                                     center=settings.center_perturbations)
                diags.append({"cycle": k, **diag.to_dict()})
                did_update = True
            mean = clamp(ens.controls.mean(axis=0), prior)
            ens.controls = refresh(prior, ens.controls, ens.generators,
                                   settings.reperturbation, settings.center_perturbations)
        ks, fks, mu = friction_arrays(geometry, mean[None, :], floodplain)
        try:
            h_c, q_c, _, snaps = eng.advance(h_c, q_c, t0, t1, ks, fks, mu, save_times=saves)
        except SolverError as err:
            raise CycleError(f"{label}: reanalysis run failed at t={err.time}: {err}",
                             None, err.time) from err
        for t, h, q, _ in snaps:
            times.append(t)
            depth.append(h[0])
            discharge.append(0.5 * (q[0, :-1] + q[0, 1:]))
        controls.append(mean.copy())
        updated.append(did_update)

    return ReanalysisResult(
        experiment=label,
        labels=control_labels(geometry.zone_count, floodplain),
        cycle_windows=windows,
        controls=np.array(controls),
        diagnostics=diags,
        updated=np.array(updated),
        times=np.array(times),
        depth=np.array(depth),
        discharge=np.array(discharge),
    )
