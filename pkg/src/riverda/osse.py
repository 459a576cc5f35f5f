"""Twin-experiment harness: truth run and synthetic gauge / swath observations.

Swath observations follow the node-product pathway without radar physics:
pixels are scattered over the wet section of every covered 200 m node,
labelled by class, optionally darkened, and aggregated back to nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .control import ControlVector
from .obs_system import (NODE_SPACING, GaugeObservation, GaugeStation, NodeObservation,
                         SwathPass, covered_nodes, gauge_row, time_weights)
from .river_model import (H_DRY, BoundaryForcing, Engine, HydroState, RiverGeometry, Trajectory,
                          flood_extent_mask, friction_arrays)

PIXEL_CLASSES = ("open_water", "water_near_land", "dark_water", "land")
OPEN, NEAR_LAND, DARK, LAND = range(4)
NODE_SIGMA_FLOOR = 0.01
MIN_GOOD_PIXELS = 3


@dataclass(frozen=True)
class TruthSpec:
    """Reference run definition.

    ``mu_series`` optionally makes the inflow correction time-varying: a pair
    (times, values) applied pointwise to the hydrograph instead of
    ``true_control.mu``.
    """

    true_control: ControlVector
    event_hydrograph: str = "event"
    flood_peak_time: float | None = None
    extent_snapshot_times: tuple = ()
    mu_series: tuple | None = None


@dataclass(frozen=True)
class SyntheticPixel:
    x: float
    cross_offset: float
    wse: float | None
    cls: str
    weight: float


@dataclass(frozen=True, eq=False)
class PixelCloud:
    """Columnar pixel cloud; iterating yields :class:`SyntheticPixel` records."""

    x: np.ndarray
    cross_offset: np.ndarray
    wse: np.ndarray
    cls: np.ndarray
    weight: np.ndarray
    sigma: float = 0.0
    time: float = 0.0
    pass_id: int = 0

    def __len__(self):
        return len(self.x)

    def __iter__(self):
        for i in range(len(self.x)):
            c = int(self.cls[i])
            yield SyntheticPixel(float(self.x[i]), float(self.cross_offset[i]),
                                 None if c == LAND else float(self.wse[i]), PIXEL_CLASSES[c],
                                 float(self.weight[i]))

    @property
    def water(self) -> np.ndarray:
        return self.cls != LAND

    def count(self, cls: str) -> int:
        return int(np.sum(self.cls == PIXEL_CLASSES.index(cls)))

    def take(self, idx) -> "PixelCloud":
        return replace(self, x=self.x[idx], cross_offset=self.cross_offset[idx],
                       wse=self.wse[idx], cls=self.cls[idx], weight=self.weight[idx])


def truth_forcing(spec: TruthSpec, forcing: BoundaryForcing) -> tuple:
    """Forcing and mu actually driving the truth run."""
    if spec.mu_series is None:
        return forcing, spec.true_control.mu
    mt, mv = (np.asarray(v, dtype=float) for v in spec.mu_series)
    times = np.union1d(np.asarray(forcing.inflow_times), mt)
    values = np.interp(times, forcing.inflow_times, forcing.inflow_values) * np.interp(times, mt, mv)
    return replace(forcing, inflow_times=tuple(times), inflow_values=tuple(values)), 1.0


def generate_truth(spec: TruthSpec, geometry: RiverGeometry, forcing: BoundaryForcing,
                   initial: HydroState, t_end: float, save_every: float = 900.0,
                   threshold: float = 0.0, extra_save_times=()):
    """Deterministic truth trajectory plus extent masks at the snapshot times."""
    lo, hi = initial.time, t_end
    for t in spec.extent_snapshot_times:
        if not lo <= t <= hi:
            raise ValueError(f"extent snapshot t={t} outside event window [{lo}, {hi}]")
    frc, mu = truth_forcing(spec, forcing)
    ctrl = spec.true_control
    rows = np.array([[*ctrl.ks_values, mu]])
    ks, fks, mus = friction_arrays(geometry, rows, ctrl.floodplain)
    grid = np.arange(lo, hi + 1e-9, save_every)[1:]
    saves = np.union1d(grid, [t for t in (*spec.extent_snapshot_times, *extra_save_times)
                              if lo < t <= hi])
    eng = Engine(geometry, frc)
    _, _, _, snaps = eng.advance(initial.depth[None, :], initial.face_discharge[None, :], lo, hi,
                                 ks, fks, mus, save_times=saves)
    times = np.array([lo] + [s[0] for s in snaps])
    depth = np.stack([initial.depth] + [s[1][0] for s in snaps])
    discharge = np.stack([initial.discharge] + [0.5 * (s[2][0, :-1] + s[2][0, 1:])
                                                for s in snaps])
    traj = Trajectory(times, depth, discharge)
    masks = {float(t): flood_extent_mask(depth[traj.index_of(t)], geometry, threshold)
             for t in spec.extent_snapshot_times}
    return traj, masks


def _field_at(traj: Trajectory, geometry: RiverGeometry, t: float):
    i0, i1, w0, w1 = time_weights(traj.times, t)
    depth = traj.depth[i0] if not w1 else w0 * traj.depth[i0] + w1 * traj.depth[i1]
    return depth, depth + np.asarray(geometry.bed_elevation)


def synth_gauge_obs(truth: Trajectory, geometry: RiverGeometry, stations: Sequence[GaugeStation],
                    noise_seed, sigma_synth: float = 0.02, tau: float = 0.15,
                    sigma_floor: float = 0.02, window=None) -> list:
    """Truth WSE at every station sampling time plus gaussian noise.

    Sampling starts one interval after the window start.  The reported sigma
    is ``tau`` times the observed stage above the gauge zero, floored.
    """
    t0, t1 = (truth.times[0], truth.times[-1]) if window is None else window
    rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed), 7]))
    wse = truth.wse(geometry)
    out = []
    for st in stations:
        times = np.arange(t0 + st.sampling_interval, t1 + 1e-6, st.sampling_interval)
        row = gauge_row(geometry, st.x)
        zero = st.gauge_zero(geometry)
        vals = []
        for t in times:
            i0, i1, w0, w1 = time_weights(truth.times, t)
            field = wse[i0] if not w1 else w0 * wse[i0] + w1 * wse[i1]
            vals.append(float(field @ row))
        noise = rng.standard_normal(len(times)) * sigma_synth
        for t, v, e in zip(times, vals, noise):
            obs = v + e if sigma_synth > 0 else v
            out.append(GaugeObservation(st.id, float(t), obs,
                                        max(tau * abs(obs - zero), sigma_floor)))
    return out


def synth_pixel_cloud(depth, geometry: RiverGeometry, swath: SwathPass, pixel_density: int = 100,
                      seed=0, sigma_pix: float = 1.0, time: float = 0.0,
                      spacing: float = NODE_SPACING) -> PixelCloud:
    """Scatter ``pixel_density`` water pixels over each wet covered node segment.

    Pixels sit on a regular along-track grid inside the node; the across-track
    offset is uniform over the wet width (main channel, plus floodplain when
    flooded).  Pixels within one along-track spacing of the wet edge are
    labelled ``water_near_land``.
    """
    if pixel_density < 1:
        raise ValueError("pixel_density must be >= 1")
    depth = depth.depth if isinstance(depth, HydroState) else np.asarray(depth, dtype=float)
    wse_cells = depth + np.asarray(geometry.bed_elevation)
    wm, hb, wf = geometry.section_arrays()
    dx = geometry.dx
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(swath.pass_id)]))
    xs, offs, ws, cls = [], [], [], []
    step = spacing / pixel_density
    for xc in covered_nodes(geometry, swath, spacing):
        px = xc - spacing / 2 + (np.arange(pixel_density) + 0.5) * step
        cell = np.minimum((px / dx).astype(int), geometry.cell_count - 1)
        wet = depth[cell] > H_DRY
        if not np.any(wet):
            continue
        px, cell = px[wet], cell[wet]
        width = wm[cell] + np.where(depth[cell] > hb[cell], wf[cell], 0.0)
        off = (rng.random(px.size) - 0.5) * width
        noise = rng.standard_normal(px.size) * sigma_pix
        vals = wse_cells[cell] + noise if sigma_pix > 0 else wse_cells[cell].copy()
        near = np.abs(off) > width / 2 - step
        xs.append(px)
        offs.append(off)
        ws.append(vals)
        cls.append(np.where(near, NEAR_LAND, OPEN))
    if not xs:
        empty = np.zeros(0)
        return PixelCloud(empty, empty, empty, np.zeros(0, dtype=int), empty, sigma_pix, time,
                          swath.pass_id)
    x = np.concatenate(xs)
    return PixelCloud(x, np.concatenate(offs), np.concatenate(ws), np.concatenate(cls),
                      np.ones_like(x), sigma_pix, time, swath.pass_id)


def apply_dark_water(cloud: PixelCloud, fraction: float, seed=0) -> PixelCloud:
    """Relabel ``fraction`` of the water pixels as dark, as one along-track block.

    The block starts at a random pixel and wraps around the reach end.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    water = np.flatnonzero((cloud.cls == OPEN) | (cloud.cls == NEAR_LAND))
    n_dark = int(round(fraction * water.size))
    if n_dark == 0:
        return cloud
    order = water[np.argsort(cloud.x[water], kind="stable")]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    start = int(rng.integers(water.size))
    chosen = order[(start + np.arange(n_dark)) % water.size]
    cls = cloud.cls.copy()
    cls[chosen] = DARK
    return replace(cloud, cls=cls)


def aggregate_nodes(cloud: PixelCloud, node_centres=None, spacing: float = NODE_SPACING,
                    geometry: RiverGeometry | None = None) -> list:
    """Weighted node means of usable (open water and near-land) pixels."""
    if len(cloud) == 0:
        raise ValueError("empty pixel cloud")
    usable = (cloud.cls == OPEN) | (cloud.cls == NEAR_LAND)
    node_idx = np.floor(cloud.x / spacing).astype(int)
    out = []
    for k in np.unique(node_idx):
        sel = usable & (node_idx == k)
        n = int(sel.sum())
        if n == 0:
            continue
        w = cloud.weight[sel]
        v = cloud.wse[sel]
        # shifted mean: exact when all pixel values coincide
        v0 = v[0]
        mean = v0 + float(np.sum(w * (v - v0)) / np.sum(w))
        n_eff = float(np.sum(w) ** 2 / np.sum(w * w))
        sigma = max(cloud.sigma / np.sqrt(n_eff), NODE_SIGMA_FLOOR)
        quality = "good" if n >= MIN_GOOD_PIXELS else "degraded"
        out.append(NodeObservation((k + 0.5) * spacing, mean, sigma, cloud.time, cloud.pass_id,
                                   quality))
    return out


def synth_node_obs(truth: Trajectory, geometry: RiverGeometry, plan, passes, seed,
                   pixel_density: int = 100, sigma_pix: float = 1.0,
                   dark_fraction: float = 0.0, full_coverage: bool = True) -> list:
    """Node observations for every overpass in ``plan``.

    With ``full_coverage`` every pass is treated as covering the whole reach.
    """
    by_id = {p.pass_id: p for p in passes}
    out = []
    for k, (pid, t) in enumerate(plan):
        swath = by_id[pid]
        if full_coverage:
            swath = SwathPass(pid, 0.0, geometry.length)
        depth, _ = _field_at(truth, geometry, t)
        s = int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])
        cloud = synth_pixel_cloud(depth, geometry, swath, pixel_density, s, sigma_pix, t)
        if dark_fraction > 0:
            cloud = apply_dark_water(cloud, dark_fraction, s)
        if len(cloud):
            out.extend(aggregate_nodes(cloud))
    return out
