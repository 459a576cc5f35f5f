"""1D shallow-water river model with zoned Strickler friction.

The solver is an explicit staggered finite-volume scheme: wetted area lives at
cell centres, discharge lives at cell faces.  Mass is updated first with the
old face discharges, then momentum is advanced with the new water surface
(forward-backward in time), with semi-implicit friction.  Face depths are
upwinded from the water surface above the higher of the two adjacent beds,
which keeps the lake at rest and steady uniform flow as exact fixed points.

All heavy lifting is done on arrays with a leading member axis so that a
whole ensemble advances in one call; a single simulation is a batch of one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from numba import njit

G = 9.81
H_DRY = 1e-3
COURANT_MAX = 0.9


class SolverError(RuntimeError):
    """Raised when a time step cannot be taken."""

    def __init__(self, message, time=None, cell=None, member=None):
        super().__init__(message)
        self.time = time
        self.cell = cell
        self.member = member


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CrossSection:
    """Composite rectangular section: main channel plus a flat floodplain.

    The floodplain is split evenly on both banks and only conveys water once
    the depth exceeds ``bank_height``.
    """

    main_width: float
    bank_height: float
    floodplain_width: float = 0.0
    shape: str = "rectangular-composite"

    def __post_init__(self):
        if not self.main_width > 0:
            raise ValueError("main_width must be > 0")
        if not self.bank_height > 0:
            raise ValueError("bank_height must be > 0")
        if not self.floodplain_width >= 0:
            raise ValueError("floodplain_width must be >= 0")
        if self.shape != "rectangular-composite":
            raise ValueError(f"unsupported section shape {self.shape!r}")

    def area(self, h):
        return section_area(h, self.main_width, self.bank_height, self.floodplain_width)

    def conveyance(self, h, ks, floodplain_ks=None):
        fks = ks if floodplain_ks is None else floodplain_ks
        return section_conveyance(
            h, self.main_width, self.bank_height, self.floodplain_width, ks, fks
        )


@dataclass(frozen=True)
class FrictionZone:
    zone_id: int
    x_start: float
    x_end: float
    ks: float

    def __post_init__(self):
        if not self.x_start < self.x_end:
            raise ValueError(f"zone {self.zone_id}: x_start must be < x_end")
        if not self.ks > 0:
            raise ValueError(f"zone {self.zone_id}: ks must be > 0")


@dataclass(frozen=True)
class RiverGeometry:
    """Discretised reach.

    ``sections`` holds one :class:`CrossSection` per cell.  Riverbed zones are
    numbered from 1; the floodplain coefficient ``floodplain_ks`` is the
    reach-wide zone 0.
    """

    length: float
    cell_count: int
    bed_elevation: tuple
    sections: tuple
    zones: tuple
    floodplain_ks: float = 10.0
    dt: float = 20.0

    floodplain_ks_index = 0

    def __post_init__(self):
        if self.cell_count < 3:
            raise ValueError("cell_count must be >= 3")
        object.__setattr__(self, "bed_elevation", tuple(float(z) for z in self.bed_elevation))
        object.__setattr__(self, "sections", tuple(self.sections))
        object.__setattr__(self, "zones", tuple(sorted(self.zones, key=lambda z: z.x_start)))
        if len(self.bed_elevation) != self.cell_count:
            raise ValueError("bed_elevation must have one value per cell")
        if len(self.sections) != self.cell_count:
            raise ValueError("sections must have one entry per cell")
        if not np.all(np.isfinite(self.bed_elevation)):
            raise ValueError("bed_elevation must be finite")
        if not self.floodplain_ks > 0:
            raise ValueError("floodplain_ks must be > 0")
        ids = [z.zone_id for z in self.zones]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"zone ids must be 1..{len(ids)}, got {ids}")
        # every cell centre must fall in exactly one zone
        counts = np.zeros(self.cell_count, dtype=int)
        for z in self.zones:
            counts += (self.x >= z.x_start) & (self.x < z.x_end)
        if np.any(counts != 1):
            bad = int(np.flatnonzero(counts != 1)[0])
            raise ValueError(f"cell {bad} at x={self.x[bad]:.1f} m is not in exactly one zone")

    @property
    def dx(self) -> float:
        return self.length / self.cell_count

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.cell_count) + 0.5) * self.dx

    @property
    def zone_count(self) -> int:
        return len(self.zones)

    def zone_index(self) -> np.ndarray:
        """Riverbed zone id (1-based) of every cell."""
        idx = np.zeros(self.cell_count, dtype=int)
        x = self.x
        for z in self.zones:
            idx[(x >= z.x_start) & (x < z.x_end)] = z.zone_id
        return idx

    def zone_of(self, x: float) -> int:
        for z in self.zones:
            if z.x_start <= x < z.x_end:
                return z.zone_id
        if x == self.length:
            return self.zones[-1].zone_id
        raise DomainError(f"x={x} is outside the reach")

    def ks_values(self) -> tuple:
        return tuple(z.ks for z in self.zones)

    def with_ks(self, riverbed_ks: Sequence[float], floodplain_ks: float | None = None):
        if len(riverbed_ks) != self.zone_count:
            raise ValueError("riverbed ks count does not match zone count")
        zones = tuple(replace(z, ks=float(k)) for z, k in zip(self.zones, riverbed_ks))
        fks = self.floodplain_ks if floodplain_ks is None else float(floodplain_ks)
        return replace(self, zones=zones, floodplain_ks=fks)

    def section_arrays(self):
        wm = np.array([s.main_width for s in self.sections], dtype=float)
        hb = np.array([s.bank_height for s in self.sections], dtype=float)
        wf = np.array([s.floodplain_width for s in self.sections], dtype=float)
        return wm, hb, wf


@dataclass(frozen=True)
class BoundaryForcing:
    """Upstream hydrograph and downstream rating curve.

    The rating curve gives the water surface elevation just beyond the
    downstream face (at the ghost cell centre) as a function of discharge.
    """

    inflow_times: tuple
    inflow_values: tuple
    rating_discharge: tuple
    rating_wse: tuple

    def __post_init__(self):
        for name in ("inflow_times", "inflow_values", "rating_discharge", "rating_wse"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.inflow_times) != len(self.inflow_values) or not self.inflow_times:
            raise ValueError("hydrograph times and values must be nonempty and equal length")
        if np.any(np.diff(self.inflow_times) <= 0):
            raise ValueError("hydrograph times must be strictly increasing")
        if min(self.inflow_values) < 0:
            raise ValueError("hydrograph values must be >= 0")
        if len(self.rating_discharge) != len(self.rating_wse) or len(self.rating_wse) < 2:
            raise ValueError("rating curve needs at least two points")
        if np.any(np.diff(self.rating_discharge) <= 0) or np.any(np.diff(self.rating_wse) <= 0):
            raise ValueError("rating curve must be strictly increasing in both columns")

    def inflow(self, t):
        return np.interp(t, self.inflow_times, self.inflow_values)

    def rating(self, q):
        """Downstream WSE for discharge ``q``; linear extrapolation above the table."""
        qs = np.asarray(self.rating_discharge)
        zs = np.asarray(self.rating_wse)
        q = np.asarray(q, dtype=float)
        out = np.interp(q, qs, zs)
        slope = (zs[-1] - zs[-2]) / (qs[-1] - qs[-2])
        return np.where(q > qs[-1], zs[-1] + slope * (q - qs[-1]), out)

    def scaled(self, mu: float) -> "BoundaryForcing":
        return replace(self, inflow_values=tuple(mu * v for v in self.inflow_values))


@dataclass(frozen=True, eq=False)
class HydroState:
    """Model state at one instant.

    ``face_discharge`` has ``cell_count + 1`` entries (face 0 is the upstream
    boundary).  The cumulative fields carry the volume bookkeeping since the
    start of the run: boundary volumes and any volume added by clamping
    negative areas.
    """

    time: float
    depth: np.ndarray
    face_discharge: np.ndarray
    cum_inflow: float = 0.0
    cum_outflow: float = 0.0
    clamped_volume: float = 0.0

    def __post_init__(self):
        depth = np.array(self.depth, dtype=float)
        q = np.array(self.face_discharge, dtype=float)
        if q.shape != (depth.size + 1,):
            raise ValueError("face_discharge must have cell_count + 1 entries")
        if np.any(depth < 0):
            raise ValueError("depth must be >= 0")
        if not np.all(np.isfinite(q)):
            raise ValueError("discharge must be finite")
        depth.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "face_discharge", q)

    @property
    def discharge(self) -> np.ndarray:
        """Cell-centred discharge (mean of the two bounding faces)."""
        return 0.5 * (self.face_discharge[:-1] + self.face_discharge[1:])

    def wse(self, geometry: RiverGeometry) -> np.ndarray:
        return np.asarray(geometry.bed_elevation) + self.depth

    def volume(self, geometry: RiverGeometry) -> float:
        wm, hb, wf = geometry.section_arrays()
        return float(np.sum(section_area(self.depth, wm, hb, wf)) * geometry.dx)

    def __eq__(self, other):
        if not isinstance(other, HydroState):
            return NotImplemented
        return (
            self.time == other.time
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.face_discharge, other.face_discharge)
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Saved snapshots of one simulation as arrays: times (T,), depth (T, N)."""

    times: np.ndarray
    depth: np.ndarray
    discharge: np.ndarray

    def wse(self, geometry: RiverGeometry) -> np.ndarray:
        return self.depth + np.asarray(geometry.bed_elevation)

    def as_obs_input(self, geometry: RiverGeometry):
        return self.times, self.wse(geometry)

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or self.times[i] != t:
            raise KeyError(f"no snapshot at t={t}")
        return i

    @classmethod
    def from_states(cls, states):
        return cls(np.array([s.time for s in states]), np.stack([s.depth for s in states]),
                   np.stack([s.discharge for s in states]))

# ---------------------------------------------------------------------------
# section hydraulics (vectorised)


def section_area(h, wm, hb, wf):
    h = np.asarray(h, dtype=float)
    return wm * h + wf * np.maximum(h - hb, 0.0)


def section_depth(a, wm, hb, wf):
    """Invert :func:`section_area`."""
    a = np.asarray(a, dtype=float)
    a_bank = wm * hb
    return np.where(a <= a_bank, a / wm, hb + (a - a_bank) / (wm + wf))


def section_conveyance(h, wm, hb, wf, ks, fks):
    """Composite conveyance: main channel plus floodplain, summed.

    The main channel is bounded by its bed and banks (vertical division at the
    bank line); without a floodplain the walls extend above the bank.
    """
    h = np.asarray(h, dtype=float)
    over = np.maximum(h - hb, 0.0)
    wall = np.where(wf > 0, np.minimum(h, hb), h)
    a_main = wm * h
    r_main = a_main / (wm + 2.0 * wall)
    a_fp = wf * over
    p_fp = wf + 2.0 * over
    r_fp = np.divide(a_fp, p_fp, out=np.zeros(np.broadcast(a_fp, p_fp).shape), where=a_fp > 0)
    return ks * a_main * np.cbrt(r_main * r_main) + fks * a_fp * np.cbrt(r_fp * r_fp)


def steady_uniform_depth(q, section: CrossSection, ks, slope, floodplain_ks=None, tol=1e-6,
                         max_iter=200):
    """Normal depth for discharge ``q`` by bisection on the Manning-Strickler law."""
    if q < 0:
        raise ValueError("q must be >= 0")
    if ks <= 0 or slope <= 0:
        raise ValueError("ks and slope must be > 0")
    if q == 0:
        return 0.0
    fks = ks if floodplain_ks is None else floodplain_ks
    sq = np.sqrt(slope)

    def excess(h):
        return float(section.conveyance(h, ks, fks)) * sq - q

    lo, hi = 0.0, max(section.bank_height, 1.0)
    n = 0
    while excess(hi) < 0:
        hi *= 2.0
        n += 1
        if n > 60:
            raise SolverError(f"normal depth bracket not found for q={q}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            return 0.5 * (lo + hi)
    raise SolverError(f"normal depth bisection did not converge for q={q}")


# ---------------------------------------------------------------------------
# batched engine


def friction_arrays(geometry: RiverGeometry, controls: np.ndarray | None, floodplain: bool):
    """Per-cell riverbed ks (M, N), floodplain ks (M,) and mu (M,).

    ``controls`` rows are ``[ks_0?, ks_1..ks_n, mu]``; ``None`` means geometry
    values and mu = 1.
    """
    zidx = geometry.zone_index() - 1
    if controls is None:
        ks = np.asarray(geometry.ks_values())[zidx][None, :]
        return ks, np.array([geometry.floodplain_ks]), np.array([1.0])
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    nz = geometry.zone_count
    expected = nz + 2 if floodplain else nz + 1
    if controls.shape[1] != expected:
        raise ValueError(
            f"control dimension {controls.shape[1] - 1} does not match "
            f"{nz} zones{' + floodplain' if floodplain else ''}"
        )
    mu = controls[:, -1]
    if floodplain:
        fks = controls[:, 0]
        bed = controls[:, 1:-1]
    else:
        fks = np.full(controls.shape[0], geometry.floodplain_ks)
        bed = controls[:, :-1]
    return bed[:, zidx], fks, mu


class Engine:
    """Precomputed geometry arrays and the batched time integrator."""

    def __init__(self, geometry: RiverGeometry, forcing: BoundaryForcing):
        self.geometry = geometry
        self.forcing = forcing
        self.dx = geometry.dx
        self.zb = np.asarray(geometry.bed_elevation, dtype=float)
        self.wm, self.hb, self.wf = geometry.section_arrays()
        zb = self.zb
        # ghost cell beyond the outlet: bed extrapolated, last section repeated
        self.zb_ghost = 2.0 * zb[-1] - zb[-2]
        self.zb_ext = np.append(zb, self.zb_ghost)
        self.zb_face = np.maximum(self.zb_ext[:-1], self.zb_ext[1:])
        self.wm_ext = np.append(self.wm, self.wm[-1])
        self.hb_ext = np.append(self.hb, self.hb[-1])
        self.wf_ext = np.append(self.wf, self.wf[-1])
        self.q_times = np.asarray(forcing.inflow_times)
        self.q_values = np.asarray(forcing.inflow_values)
        self.rating_q = np.asarray(forcing.rating_discharge)
        self.rating_z = np.asarray(forcing.rating_wse)

    def area(self, h):
        return section_area(h, self.wm, self.hb, self.wf)

    def step(self, h, q, t, dt, ks, fks, mu, budget):
        """Advance batch arrays by ``dt``; returns new (h, q).

        ``budget`` is a (M, 3) array accumulating inflow, outflow and clamped
        volumes, updated in place.
        """
        q_in = mu * np.interp(t + dt, self.q_times, self.q_values)
        h_new = np.empty_like(h)
        q_new = np.empty_like(q)
        courant, m, c = _step_kernel(
            h, q, float(dt), self.dx, self.zb, self.wm, self.hb, self.wf, self.zb_ghost,
            ks, fks, q_in, self.rating_q, self.rating_z, budget, h_new, q_new,
        )
        if courant > COURANT_MAX:
            raise SolverError(
                f"CFL violated at cell {c} (x={(c + 0.5) * self.dx:.1f} m, member {m}, "
                f"t={t:.1f} s): courant={courant:.3f} > {COURANT_MAX}",
                time=t, cell=int(c), member=int(m),
            )
        return h_new, q_new

    def advance(self, h, q, t0, t_end, ks, fks, mu, save_times=(), dt=None, budget=None):
        """Integrate a batch from ``t0`` to ``t_end``.

        Steps are shortened to land exactly on every save time and on
        ``t_end``.  Returns (h, q, budget, snapshots) where snapshots is a list
        of (time, h, q, budget) for each requested save time.
        """
        dt = float(self.geometry.dt if dt is None else dt)
        h = np.array(h, dtype=float)
        q = np.array(q, dtype=float)
        m = h.shape[0]
        ks = np.ascontiguousarray(np.broadcast_to(ks, h.shape), dtype=float)
        fks = np.ascontiguousarray(np.broadcast_to(np.asarray(fks, dtype=float), (m,)))
        mu = np.ascontiguousarray(np.broadcast_to(np.asarray(mu, dtype=float), (m,)))
        budget = np.zeros((m, 3)) if budget is None else budget
        targets = np.array(sorted({float(s) for s in save_times if t0 <= s <= t_end}
                                  | {float(t_end)}))
        snap_h = np.empty((targets.size,) + h.shape)
        snap_q = np.empty((targets.size,) + q.shape)
        snap_b = np.empty((targets.size, m, 3))
        status, t_fail, courant, mem, cell = _advance_kernel(
            h, q, float(t0), targets, dt, self.dx, self.zb, self.wm, self.hb, self.wf,
            self.zb_ghost, ks, fks, mu, self.q_times, self.q_values, self.rating_q,
            self.rating_z, budget, snap_h, snap_q, snap_b,
        )
        if status == 1:
            raise SolverError(
                f"CFL violated at cell {cell} (x={(cell + 0.5) * self.dx:.1f} m, member {mem}, "
                f"t={t_fail:.1f} s): courant={courant:.3f} > {COURANT_MAX}",
                time=t_fail, cell=int(cell), member=int(mem),
            )
        if status == 2:
            raise SolverError(f"non-finite state at t={t_fail:.1f} s", time=t_fail,
                              member=int(mem))
        snaps = [(float(t), snap_h[k], snap_q[k], snap_b[k]) for k, t in enumerate(targets)]
        return snap_h[-1].copy(), snap_q[-1].copy(), budget, snaps


def _state_from_batch(t, h, q, budget, i=0):
    return HydroState(
        time=t, depth=h[i], face_discharge=q[i],
        cum_inflow=float(budget[i, 0]), cum_outflow=float(budget[i, 1]),
        clamped_volume=float(budget[i, 2]),
    )


def _control_rows(geometry, control):
    if control is None:
        return None, False
    ks = tuple(control.ks_values)
    floodplain = len(ks) == geometry.zone_count + 1
    if not floodplain and len(ks) != geometry.zone_count:
        raise ValueError(
            f"control has {len(ks)} ks values; geometry has {geometry.zone_count} zones"
        )
    return np.array([*ks, control.mu])[None, :], floodplain


def step(state: HydroState, geometry: RiverGeometry, forcing: BoundaryForcing, control=None,
         dt: float | None = None) -> HydroState:
    """Advance one time step (``dt`` defaults to ``geometry.dt``)."""
    dt = geometry.dt if dt is None else float(dt)
    eng = Engine(geometry, forcing)
    rows, fp = _control_rows(geometry, control)
    ks, fks, mu = friction_arrays(geometry, rows, fp)
    budget = np.array([[state.cum_inflow, state.cum_outflow, state.clamped_volume]])
    try:
        h, q = eng.step(state.depth[None, :], state.face_discharge[None, :], state.time, dt,
                        ks, fks, mu, budget)
    except SolverError as err:
        err.member = None
        raise
    return _state_from_batch(state.time + dt, h, q, budget)


def run(initial: HydroState, geometry: RiverGeometry, forcing: BoundaryForcing, control=None,
        t_end: float | None = None, save_every: float | None = None, dt: float | None = None):
    """Integrate to ``t_end`` saving every ``save_every`` seconds.

    The initial state is always the first element and the last element is the
    state at exactly ``t_end``.
    """
    if t_end is None or t_end < initial.time:
        raise ValueError("t_end must be >= initial.time")
    if t_end == initial.time:
        return [initial]
    save_every = (t_end - initial.time) if save_every is None else float(save_every)
    if save_every <= 0:
        raise ValueError("save_every must be > 0")
    n = int(np.floor((t_end - initial.time) / save_every + 1e-9))
    times = [initial.time + k * save_every for k in range(1, n + 1)]
    eng = Engine(geometry, forcing)
    rows, fp = _control_rows(geometry, control)
    ks, fks, mu = friction_arrays(geometry, rows, fp)
    budget = np.array([[initial.cum_inflow, initial.cum_outflow, initial.clamped_volume]])
    try:
        _, _, budget, snaps = eng.advance(
            initial.depth[None, :], initial.face_discharge[None, :], initial.time, t_end,
            ks, fks, mu, save_times=times, dt=dt, budget=budget,
        )
    except SolverError as err:
        raise SolverError(f"simulation failed at t={err.time}: {err}", time=err.time,
                          cell=err.cell) from err
    return [initial] + [_state_from_batch(t, h, q, b) for t, h, q, b in snaps]


def wse_at(state: HydroState, geometry: RiverGeometry, x: float) -> float:
    """Water surface elevation at ``x``, linear between cell centres.

    Between the reach ends and the outermost centres the end cell value holds.
    """
    if not 0.0 <= x <= geometry.length:
        raise DomainError(f"x={x} outside reach [0, {geometry.length}]")
    return float(np.interp(x, geometry.x, state.wse(geometry)))


def interp_weights(geometry: RiverGeometry, x: float):
    """Indices and weights reproducing :func:`wse_at` as ``w0*v[i0] + w1*v[i1]``."""
    if not 0.0 <= x <= geometry.length:
        raise DomainError(f"x={x} outside reach [0, {geometry.length}]")
    xc = geometry.x
    if x <= xc[0]:
        return 0, 0, 1.0, 0.0
    if x >= xc[-1]:
        n = geometry.cell_count - 1
        return n, n, 1.0, 0.0
    i = int(np.searchsorted(xc, x, side="right") - 1)
    w1 = (x - xc[i]) / (xc[i + 1] - xc[i])
    return i, i + 1, 1.0 - w1, w1


def flood_extent_mask(state_or_depth, geometry: RiverGeometry, threshold: float = 0.0):
    """Boolean mask of shape (cells, 2): column 0 channel wet, column 1 floodplain flooded.

    Accepts a :class:`HydroState` or a bare depth array with cells on the last
    axis (extra leading axes are kept).
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    depth = state_or_depth.depth if isinstance(state_or_depth, HydroState) else np.asarray(
        state_or_depth, dtype=float)
    _, hb, wf = geometry.section_arrays()
    channel = depth > H_DRY
    plain = (depth > hb + threshold) & (wf > 0)
    return np.stack([channel, plain], axis=-1)


# ---------------------------------------------------------------------------
# compiled step kernel; members are independent so any split of the member
# axis gives bit-identical results


@njit(cache=True, nogil=True, error_model="numpy")
def _area1(h, wm, hb, wf):
    if h > hb:
        return wm * h + wf * (h - hb)
    return wm * h


@njit(cache=True, nogil=True, error_model="numpy")
def _depth1(a, wm, hb, wf):
    a_bank = wm * hb
    if a <= a_bank:
        return a / wm
    return hb + (a - a_bank) / (wm + wf)


@njit(cache=True, nogil=True, error_model="numpy")
def _conveyance1(h, wm, hb, wf, ks, fks):
    if wf > 0.0 and h > hb:
        wall = hb
    else:
        wall = h
    a_main = wm * h
    r = a_main / (wm + 2.0 * wall)
    k = ks * a_main * np.cbrt(r * r)
    if wf > 0.0 and h > hb:
        over = h - hb
        a_fp = wf * over
        r_fp = a_fp / (wf + 2.0 * over)
        k += fks * a_fp * np.cbrt(r_fp * r_fp)
    return k


@njit(cache=True, nogil=True, error_model="numpy")
def _rating1(q, rq, rz):
    n = rq.size
    if q <= rq[0]:
        return rz[0]
    if q >= rq[n - 1]:
        return rz[n - 1] + (rz[n - 1] - rz[n - 2]) / (rq[n - 1] - rq[n - 2]) * (q - rq[n - 1])
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rq[mid] <= q:
            lo = mid
        else:
            hi = mid
    w = (q - rq[lo]) / (rq[hi] - rq[lo])
    return rz[lo] + w * (rz[hi] - rz[lo])


@njit(cache=True, nogil=True, error_model="numpy")
def _step_kernel(h, q, dt, dx, zb, wm, hb, wf, zb_g, ks, fks, q_in, rq, rz, budget,
                 h_new, q_new):
    n_mem, n = h.shape
    cmax = 0.0
    cm = 0
    cc = 0
    a_new = np.empty(n + 1)
    eta = np.empty(n + 1)
    flux = np.empty(n + 1)
    for m in range(n_mem):
        for i in range(n):
            hi = h[m, i]
            if hi > H_DRY:
                u = abs(0.5 * (q[m, i] + q[m, i + 1])) / _area1(hi, wm[i], hb[i], wf[i])
                c = (u + np.sqrt(G * hi)) * dt / dx
                if c > cmax:
                    cmax = c
                    cm = m
                    cc = i
        budget[m, 0] += dt * q[m, 0]
        budget[m, 1] += dt * q[m, n]
        clamp = 0.0
        for i in range(n):
            a = _area1(h[m, i], wm[i], hb[i], wf[i]) - dt / dx * (q[m, i + 1] - q[m, i])
            if a < 0.0:
                clamp -= a * dx
                a = 0.0
            a_new[i] = a
            hn = _depth1(a, wm[i], hb[i], wf[i])
            h_new[m, i] = hn
            eta[i] = zb[i] + hn
            qc = 0.5 * (q[m, i] + q[m, i + 1])
            qu = q[m, i] if qc >= 0.0 else q[m, i + 1]
            flux[i] = qu * qu / a if hn > H_DRY else 0.0
        budget[m, 2] += clamp
        eg = _rating1(0.5 * (q[m, n - 1] + q[m, n]), rq, rz)
        if eg < zb_g:
            eg = zb_g
        eta[n] = eg
        a_new[n] = _area1(eg - zb_g, wm[n - 1], hb[n - 1], wf[n - 1])
        flux[n] = flux[n - 1]
        q_new[m, 0] = q_in[m]
        for j in range(1, n + 1):
            left = j - 1
            qf = q[m, j]
            eu = eta[left] if qf >= 0.0 else eta[j]
            zf = zb[left]
            zr = zb[j] if j < n else zb_g
            if zr > zf:
                zf = zr
            hf = eu - zf
            if hf <= H_DRY:
                q_new[m, j] = 0.0
                continue
            k = _conveyance1(hf, wm[left], hb[left], wf[left], ks[m, left], fks[m])
            if k <= 0.0:
                q_new[m, j] = 0.0
                continue
            abar = 0.5 * (a_new[left] + a_new[j])
            rhs = qf - dt * (flux[j] - flux[left]) / dx \
                - dt * G * abar * (eta[j] - eta[left]) / dx
            q_new[m, j] = rhs / (1.0 + dt * G * abar * abs(qf) / (k * k))
    return cmax, cm, cc


@njit(cache=True, nogil=True, error_model="numpy")
def _advance_kernel(h, q, t0, targets, dt, dx, zb, wm, hb, wf, zb_g, ks, fks, mu, q_times,
                    q_values, rq, rz, budget, snap_h, snap_q, snap_b):
    """Time loop over all save targets; returns (status, time, courant, member, cell)."""
    n_mem = h.shape[0]
    h_new = np.empty_like(h)
    q_new = np.empty_like(q)
    q_in = np.empty(n_mem)
    t = t0
    for k in range(targets.size):
        target = targets[k]
        while t < target:
            step = min(dt, target - t)
            # avoid a sliver step from float accumulation
            if target - (t + step) < 1e-9 * dt:
                step = target - t
            qi = np.interp(t + step, q_times, q_values)
            for m in range(n_mem):
                q_in[m] = mu[m] * qi
            courant, cm, cc = _step_kernel(h, q, step, dx, zb, wm, hb, wf, zb_g, ks, fks,
                                           q_in, rq, rz, budget, h_new, q_new)
            if courant > COURANT_MAX:
                return 1, t, courant, cm, cc
            h[:, :] = h_new
            q[:, :] = q_new
            if step == target - t:
                t = target
            else:
                t = t + step
        for m in range(n_mem):
            for i in range(h.shape[1]):
                if not np.isfinite(h[m, i]):
                    return 2, t, 0.0, m, i
            for i in range(q.shape[1]):
                if not np.isfinite(q[m, i]):
                    return 2, t, 0.0, m, i
        snap_h[k] = h
        snap_q[k] = q
        snap_b[k] = budget
    return 0, t, 0.0, 0, 0


# ---------------------------------------------------------------------------
# construction helpers


def build_geometry(length=50_000.0, cell_count=250, upstream_bed=20.0, slope=4e-4,
                   main_width=100.0, bank_height=4.0, floodplain_width=800.0,
                   bank_amplitude=0.0, bank_wavelength=10_000.0, zone_edges=None,
                   zone_ks=None, floodplain_ks=10.0, dt=20.0) -> RiverGeometry:
    """Prismatic reach with a constant bed slope and optional bank-height undulation."""
    dx = length / cell_count
    x = (np.arange(cell_count) + 0.5) * dx
    bed = upstream_bed - slope * x
    banks = bank_height + bank_amplitude * np.sin(2.0 * np.pi * x / bank_wavelength)
    sections = [CrossSection(main_width, float(b), floodplain_width) for b in banks]
    if zone_edges is None:
        zone_edges = [0.0, length]
    edges = [float(e) for e in zone_edges]
    if zone_ks is None:
        zone_ks = [40.0] * (len(edges) - 1)
    zones = [FrictionZone(i + 1, edges[i], edges[i + 1], float(zone_ks[i]))
             for i in range(len(edges) - 1)]
    return RiverGeometry(length=length, cell_count=cell_count, bed_elevation=tuple(bed),
                         sections=tuple(sections), zones=tuple(zones),
                         floodplain_ks=floodplain_ks, dt=dt)


def normal_rating_curve(geometry: RiverGeometry, q_max: float, n: int = 400, ks=None):
    """Rating curve from normal depth at the outlet section (ghost-cell bed)."""
    zb = np.asarray(geometry.bed_elevation)
    slope = max((zb[-2] - zb[-1]) / geometry.dx, 1e-6)
    zb_ghost = 2.0 * zb[-1] - zb[-2]
    ks = geometry.zones[-1].ks if ks is None else ks
    sec = geometry.sections[-1]
    qs = np.linspace(0.0, q_max, n)
    ws = [zb_ghost + steady_uniform_depth(q, sec, ks, slope, geometry.floodplain_ks) for q in qs]
    return tuple(qs), tuple(ws)


def initial_state(geometry: RiverGeometry, forcing: BoundaryForcing, control=None, t0=0.0,
                  spinup: float = 0.0) -> HydroState:
    """Normal-depth profile for the inflow at ``t0``, optionally relaxed by a spin-up.

    The spin-up runs with the inflow held constant and returns a state stamped
    at ``t0`` with zeroed bookkeeping.
    """
    rows, fp = _control_rows(geometry, control)
    ks, fks, mu = friction_arrays(geometry, rows, fp)
    q0 = float(mu[0] * forcing.inflow(t0))
    zb = np.asarray(geometry.bed_elevation)
    slopes = -np.gradient(zb, geometry.dx)
    depth = np.array([
        steady_uniform_depth(q0, sec, float(k), max(float(s), 1e-6), float(fks[0]))
        for sec, k, s in zip(geometry.sections, ks[0], slopes)
    ])
    state = HydroState(time=t0, depth=depth, face_discharge=np.full(geometry.cell_count + 1, q0))
    if spinup > 0:
        steady = replace(forcing, inflow_times=(0.0,), inflow_values=(float(forcing.inflow(t0)),))
        eng = Engine(geometry, steady)
        h, q, _, _ = eng.advance(state.depth[None, :], state.face_discharge[None, :], 0.0,
                                 spinup, ks, fks, mu)
        state = HydroState(time=t0, depth=h[0], face_discharge=q[0])
    return state


def read_hydrograph_csv(path) -> tuple:
    times, values = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time_s"]))
            values.append(float(row["discharge_m3s"]))
    return tuple(times), tuple(values)


def read_rating_csv(path) -> tuple:
    qs, ws = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            qs.append(float(row["discharge_m3s"]))
            ws.append(float(row["wse_m"]))
    return tuple(qs), tuple(ws)


def write_hydrograph_csv(path, times, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "discharge_m3s"])
        for t, v in zip(times, values):
            w.writerow([repr(float(t)), repr(float(v))])


def write_rating_csv(path, qs, ws):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["discharge_m3s", "wse_m"])
        for q, z in zip(qs, ws):
            w.writerow([repr(float(q)), repr(float(z))])
