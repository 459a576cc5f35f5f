"""Observations, pass plans and the observation operators.

Trajectories are handled as arrays: ``times`` with shape (T,) and ``wse``
with shape (T, N) for one simulation or (T, M, N) for an ensemble.  The
operators are linear in the WSE field, so they are assembled once as time
weights plus spatial weights and applied to any number of members.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .river_model import DomainError, HydroState, RiverGeometry, Trajectory, interp_weights

NODE_SPACING = 200.0
DAY = 86400.0
TRIPLED_INTERVAL = 2.5 * DAY
NOMINAL_CYCLE = 21 * DAY

QUALITIES = ("good", "degraded", "dark")


class ExtrapolationError(ValueError):
    pass


@dataclass(frozen=True)
class GaugeStation:
    """In-situ gauge.  ``datum`` is the gauge zero used to express stage."""

    id: str
    x: float
    zone_id: int
    role: str = "assimilation"
    sampling_interval: float = 900.0
    datum: float | None = None

    def __post_init__(self):
        if self.role not in ("assimilation", "validation"):
            raise ValueError(f"station {self.id}: unknown role {self.role!r}")
        if not self.sampling_interval > 0:
            raise ValueError(f"station {self.id}: sampling_interval must be > 0")
        if self.x < 0:
            raise ValueError(f"station {self.id}: x must be >= 0")

    def gauge_zero(self, geometry: RiverGeometry) -> float:
        if self.datum is not None:
            return float(self.datum)
        return float(np.interp(self.x, geometry.x, geometry.bed_elevation))


@dataclass(frozen=True)
class SwathPass:
    """Altimeter pass: covered along-channel interval and its cycle overpass offsets."""

    pass_id: int
    x_lo: float
    x_hi: float
    overpass_times: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "overpass_times", tuple(float(t) for t in self.overpass_times))
        if not self.x_lo < self.x_hi:
            raise ValueError(f"pass {self.pass_id}: x_lo must be < x_hi")
        if np.any(np.diff(self.overpass_times) <= 0):
            raise ValueError(f"pass {self.pass_id}: overpass times must be strictly increasing")


@dataclass(frozen=True)
class NodeObservation:
    node_x: float
    wse: float
    sigma: float
    time: float
    pass_id: int
    quality: str = "good"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("node sigma must be > 0")
        if self.quality not in QUALITIES:
            raise ValueError(f"unknown node quality {self.quality!r}")


@dataclass(frozen=True)
class GaugeObservation:
    station_id: str
    time: float
    wse: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("gauge sigma must be > 0")


@dataclass(frozen=True)
class ObservationSet:
    gauges: tuple = ()
    nodes: tuple = ()
    window: tuple = (0.0, np.inf)

    def __post_init__(self):
        object.__setattr__(self, "gauges", tuple(self.gauges))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        lo, hi = self.window
        for ob in (*self.gauges, *self.nodes):
            if not lo <= ob.time <= hi:
                raise ValueError(f"observation at t={ob.time} outside window {self.window}")

    def __len__(self):
        return len(self.gauges) + len(self.nodes)

    def select(self, t_start, t_end, gauges=True, nodes=True, stations=None):
        """Observations with ``t_start < time <= t_end``; dark nodes are dropped."""
        g = [o for o in self.gauges if t_start < o.time <= t_end
             and (stations is None or o.station_id in stations)] if gauges else []
        n = [o for o in self.nodes if t_start < o.time <= t_end and o.quality != "dark"] \
            if nodes else []
        return ObservationSet(g, n, (t_start, t_end))


# ---------------------------------------------------------------------------
# operators


def as_trajectory(trajectory, geometry: RiverGeometry):
    """Return (times, wse) arrays from a Trajectory, a sequence of HydroState or a
    (times, wse) pair."""
    if isinstance(trajectory, Trajectory):
        return trajectory.as_obs_input(geometry)
    if isinstance(trajectory, tuple) and len(trajectory) == 2 and not isinstance(
            trajectory[0], HydroState):
        times, wse = trajectory
        return np.asarray(times, dtype=float), np.asarray(wse, dtype=float)
    states = list(trajectory)
    if not states:
        raise ValueError("empty trajectory")
    times = np.array([s.time for s in states])
    wse = np.stack([s.wse(geometry) for s in states])
    return times, wse


def time_weights(times: np.ndarray, t: float):
    """Bracketing snapshot indices and weights for linear interpolation in time."""
    if not times[0] <= t <= times[-1]:
        raise ExtrapolationError(f"t={t} outside trajectory span [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t, side="right") - 1)
    if i >= len(times) - 1:
        return len(times) - 1, len(times) - 1, 1.0, 0.0
    w1 = (t - times[i]) / (times[i + 1] - times[i])
    return i, i + 1, 1.0 - w1, w1


def gauge_row(geometry: RiverGeometry, x: float) -> np.ndarray:
    i0, i1, w0, w1 = interp_weights(geometry, x)
    row = np.zeros(geometry.cell_count)
    row[i0] += w0
    row[i1] += w1
    return row


def node_grid(geometry: RiverGeometry, spacing: float = NODE_SPACING) -> np.ndarray:
    """Node centres anchored at x=0."""
    n = int(np.floor(geometry.length / spacing + 1e-9))
    return (np.arange(n) + 0.5) * spacing


def node_rows(geometry: RiverGeometry, centres: np.ndarray, spacing: float = NODE_SPACING):
    """Length-weighted averaging rows of cell values over each node segment."""
    dx = geometry.dx
    edges = np.arange(geometry.cell_count + 1) * dx
    rows = np.zeros((len(centres), geometry.cell_count))
    for k, xc in enumerate(centres):
        lo, hi = xc - spacing / 2, xc + spacing / 2
        overlap = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
        rows[k] = overlap / overlap.sum()
    return rows


def covered_nodes(geometry: RiverGeometry, swath: SwathPass, spacing: float = NODE_SPACING):
    centres = node_grid(geometry, spacing)
    return centres[(centres >= swath.x_lo) & (centres <= swath.x_hi)]


def _apply(times, wse, t, rows):
    i0, i1, w0, w1 = time_weights(times, t)
    field_t = w0 * wse[i0] + w1 * wse[i1] if w1 else wse[i0]
    return field_t @ rows.T


def h_gauge(trajectory, geometry: RiverGeometry, station: GaugeStation, times) -> np.ndarray:
    """Model WSE at the station, bilinear in space and time."""
    tt, wse = as_trajectory(trajectory, geometry)
    row = gauge_row(geometry, station.x)
    return np.array([_apply(tt, wse, t, row[None, :])[..., 0] for t in times])


def h_swot(trajectory, geometry: RiverGeometry, swath: SwathPass, t: float,
           spacing: float = NODE_SPACING):
    """Model node WSEs for the nodes whose centres lie inside the pass coverage.

    Returns (node_x, wse); ``wse`` has a trailing node axis.
    """
    tt, wse = as_trajectory(trajectory, geometry)
    xs = covered_nodes(geometry, swath, spacing)
    if xs.size == 0:
        return xs, np.zeros(wse.shape[1:-1] + (0,))
    return xs, _apply(tt, wse, t, node_rows(geometry, xs, spacing))


@dataclass
class StackedObservations:
    """Observation vector, error sd and the operator pieces for one window."""

    y: np.ndarray
    sigma: np.ndarray
    times: np.ndarray
    rows: np.ndarray
    kinds: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    def equivalents(self, times: np.ndarray, wse: np.ndarray) -> np.ndarray:
        """Model equivalents with shape wse.shape[1:-1] + (p,)."""
        out = np.empty(wse.shape[1:-1] + (len(self.y),))
        for t in np.unique(self.times):
            idx = np.flatnonzero(self.times == t)
            out[..., idx] = _apply(times, wse, t, self.rows[idx])
        return out


def stack_observations(obs: ObservationSet, geometry: RiverGeometry, stations: Sequence,
                       tau: float = 0.15, gauge_floor: float = 0.02, node_floor: float = 0.10,
                       spacing: float = NODE_SPACING) -> StackedObservations:
    """Stack gauges then nodes into one vector with the assimilation error model.

    Gauge sd is ``tau`` times the stage above the gauge zero, floored; node sd
    is the reported sigma floored at the node requirement.
    """
    by_id = {s.id: s for s in stations}
    y, sig, tms, rows, kinds, labels = [], [], [], [], [], []
    for ob in obs.gauges:
        st = by_id[ob.station_id]
        y.append(ob.wse)
        sig.append(max(tau * abs(ob.wse - st.gauge_zero(geometry)), gauge_floor))
        tms.append(ob.time)
        rows.append(gauge_row(geometry, st.x))
        kinds.append("gauge")
        labels.append(ob.station_id)
    if obs.nodes:
        xs = np.array([o.node_x for o in obs.nodes])
        nrows = node_rows(geometry, xs, spacing)
        for ob, r in zip(obs.nodes, nrows):
            if ob.quality == "dark":
                continue
            y.append(ob.wse)
            sig.append(max(ob.sigma, node_floor))
            tms.append(ob.time)
            rows.append(r)
            kinds.append("node")
            labels.append(f"{ob.pass_id}@{ob.node_x:g}")
    n = geometry.cell_count
    return StackedObservations(
        np.array(y, dtype=float), np.array(sig, dtype=float), np.array(tms, dtype=float),
        np.array(rows).reshape(len(y), n), kinds, labels,
    )


# ---------------------------------------------------------------------------
# pass plans


def build_pass_plan(kind: str, window, passes: Sequence[SwathPass], interval: float | None = None,
                    offset: float | None = None):
    """Overpass schedule as sorted (pass_id, time) pairs in ``(t_start, t_end]``.

    ``nominal21d`` repeats every pass's cycle offsets every 21 days;
    ``tripled`` emits one overpass every 2.5 days; ``fixed_interval`` emits one
    every ``interval`` seconds.  The last two cycle pass ids round-robin and
    are anchored at ``t_start + offset`` (default: one interval).
    """
    t_start, t_end = float(window[0]), float(window[1])
    if not t_end > t_start:
        raise ValueError("event window must be nonempty")
    if not passes:
        raise ValueError("at least one pass is required")
    plan = []
    if kind == "nominal21d":
        for p in passes:
            for off in p.overpass_times:
                k = 0
                while True:
                    t = t_start + off + k * NOMINAL_CYCLE
                    if t > t_end:
                        break
                    if t > t_start:
                        plan.append((p.pass_id, t))
                    k += 1
        plan.sort(key=lambda pt: (pt[1], pt[0]))
        return plan
    if kind == "tripled":
        step = TRIPLED_INTERVAL if interval is None else float(interval)
        first = min((t for p in passes for t in p.overpass_times), default=DAY)
        offset = first if offset is None else offset
    elif kind == "fixed_interval":
        if interval is None or interval <= 0:
            raise ValueError("fixed_interval needs a positive interval")
        step = float(interval)
        offset = step if offset is None else offset
    else:
        raise ValueError(f"unknown pass plan kind {kind!r}")
    if step <= 0:
        raise ValueError("interval must be > 0")
    k = 0
    while True:
        t = t_start + offset + k * step
        if t > t_end + 1e-6:
            break
        if t > t_start:
            plan.append((passes[k % len(passes)].pass_id, t))
        k += 1
    return plan


# ---------------------------------------------------------------------------
# CSV


def write_gauges_csv(path, gauges):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "time_s", "wse_m", "sigma_m"])
        for o in gauges:
            w.writerow([o.station_id, repr(float(o.time)), repr(float(o.wse)),
                        repr(float(o.sigma))])


def read_gauges_csv(path):
    with open(path, newline="") as fh:
        return [GaugeObservation(r["station_id"], float(r["time_s"]), float(r["wse_m"]),
                                 float(r["sigma_m"])) for r in csv.DictReader(fh)]


def write_nodes_csv(path, nodes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass_id", "node_x_m", "time_s", "wse_m", "sigma_m", "quality"])
        for o in nodes:
            w.writerow([o.pass_id, repr(float(o.node_x)), repr(float(o.time)),
                        repr(float(o.wse)), repr(float(o.sigma)), o.quality])


def read_nodes_csv(path):
    with open(path, newline="") as fh:
        return [NodeObservation(float(r["node_x_m"]), float(r["wse_m"]), float(r["sigma_m"]),
                                float(r["time_s"]), int(r["pass_id"]), r["quality"])
                for r in csv.DictReader(fh)]


def default_stations(geometry: RiverGeometry, names=None, fractions=None, roles=None,
                     intervals=None) -> list:
    """Seven gauges laid out like the VigiCrue / micro-station network."""
    names = names or ["TON", "LMA", "MD0", "MD1", "COU", "LR1", "LR0"]
    fractions = fractions or [0.02, 0.25, 0.45, 0.50, 0.70, 0.93, 0.97]
    roles = roles or ["assimilation", "assimilation", "assimilation", "validation",
                      "assimilation", "validation", "assimilation"]
    intervals = intervals or [900.0, 3600.0, 900.0, 3600.0, 3600.0, 3600.0, 900.0]
    out = []
    for n, f, r, dt in zip(names, fractions, roles, intervals):
        x = f * geometry.length
        out.append(GaugeStation(n, x, geometry.zone_of(x), r, dt))
    return out


def check_station(geometry: RiverGeometry, station: GaugeStation):
    if not 0 <= station.x <= geometry.length:
        raise DomainError(f"station {station.id} at x={station.x} outside reach")
