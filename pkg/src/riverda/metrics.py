"""RMSE, critical success index and per-experiment score tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


def rmse(model, obs) -> float:
    """Root mean square difference of two equally long series."""
    model = np.asarray(model, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if model.size != obs.size:
        raise ValueError(f"length mismatch: {model.size} model vs {obs.size} observed values")
    if model.size == 0:
        raise ValueError("rmse of an empty series is undefined")
    d = model - obs
    return float(np.sqrt(np.sum(d * d) / d.size))


def contingency(model_mask, reference_mask) -> tuple:
    """(TP, FP, FN) counts of two boolean masks of equal shape."""
    m = np.asarray(model_mask, dtype=bool)
    r = np.asarray(reference_mask, dtype=bool)
    if m.shape != r.shape:
        raise ValueError(f"mask shapes differ: {m.shape} vs {r.shape}")
    return int(np.sum(m & r)), int(np.sum(m & ~r)), int(np.sum(~m & r))


def csi_from_counts(tp: int, fp: int, fn: int) -> float:
    total = tp + fp + fn
    if total == 0:
        raise ValueError("CSI undefined: both masks are empty")
    return 100.0 * tp / total


def csi(model_mask, reference_mask) -> float:
    """Critical success index TP / (TP + FP + FN) in percent."""
    return csi_from_counts(*contingency(model_mask, reference_mask))


def _matched(model_x, model_wse, obs_x, obs_wse, tol):
    mx = np.asarray(model_x, dtype=float)
    mw = np.asarray(model_wse, dtype=float)
    ox = np.asarray(obs_x, dtype=float)
    ow = np.asarray(obs_wse, dtype=float)
    keep = np.isfinite(mx) & np.isfinite(mw)
    mx, mw = mx[keep], mw[keep]
    if mx.size == 0 or ox.size == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(mx, kind="stable")
    mx, mw = mx[order], mw[order]
    idx = np.clip(np.searchsorted(mx, ox), 0, mx.size - 1)
    lower = np.clip(idx - 1, 0, mx.size - 1)
    pick = np.where(np.abs(mx[lower] - ox) < np.abs(mx[idx] - ox), lower, idx)
    ok = (np.abs(mx[pick] - ox) <= tol) & np.isfinite(ow)
    return mw[pick[ok]], ow[ok]


def profile_rmse(model_x, model_wse, obs_x, obs_wse, tol: float = 1e-6) -> float:
    """RMSE over observed abscissae that have a model value at the same abscissa.

    Observations without a matching finite model value (outside the pass
    coverage, say) are ignored.
    """
    m, o = _matched(model_x, model_wse, obs_x, obs_wse, tol)
    if m.size == 0:
        raise ValueError("no matched profile points")
    return rmse(m, o)


def pooled_profile_rmse(model: Mapping, reference: Mapping, tol: float = 1e-6) -> float:
    """Profile RMSE pooled over the overpasses common to both mappings.

    Both map overpass time to (x, wse).  Every matched node counts once, so
    overpasses with more valid nodes weigh more.
    """
    ms, os_ = [], []
    for t in sorted(set(model) & set(reference)):
        m, o = _matched(*model[t], *reference[t], tol)
        ms.append(m)
        os_.append(o)
    if not ms or sum(m.size for m in ms) == 0:
        raise ValueError("no matched profile points")
    return rmse(np.concatenate(ms), np.concatenate(os_))


# ---------------------------------------------------------------------------
# score tables


@dataclass
class ScoreRow:
    experiment: str
    station_rmse: dict = field(default_factory=dict)
    csi: dict = field(default_factory=dict)
    profile_rmse: dict = field(default_factory=dict)

    @property
    def mean_station_rmse(self) -> float:
        vals = [v for v in self.station_rmse.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ScoreTable:
    """One row per experiment; columns are stations, snapshots and passes."""

    rows: list
    stations: list
    validation: set
    snapshots: list
    passes: list

    def row(self, experiment: str) -> ScoreRow:
        for r in self.rows:
            if r.experiment == experiment:
                return r
        raise KeyError(experiment)

    def experiments(self) -> list:
        return [r.experiment for r in self.rows]

    def columns(self) -> list:
        cols = [f"rmse_{s}" + ("_val" if s in self.validation else "") for s in self.stations]
        cols.append("rmse_mean")
        cols += [f"csi_t{t:g}" for t in self.snapshots]
        cols += [f"profile_rmse_{p}" for p in self.passes]
        return cols

    def values(self, row: ScoreRow) -> list:
        vals = [row.station_rmse.get(s, float("nan")) for s in self.stations]
        vals.append(row.mean_station_rmse)
        vals += [row.csi.get(t, float("nan")) for t in self.snapshots]
        vals += [row.profile_rmse.get(p, float("nan")) for p in self.passes]
        return vals

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment"] + self.columns())
            for r in self.rows:
                w.writerow([r.experiment] + [_fmt(v) for v in self.values(r)])

    def to_text(self) -> str:
        """Aligned plain-text table; validation stations are bracketed."""
        heads = ["experiment"]
        heads += [f"[{s}]" if s in self.validation else s for s in self.stations]
        heads.append("mean")
        heads += [f"CSI@{t / 86400.0:g}d" for t in self.snapshots]
        heads += [f"prof{p}" for p in self.passes]
        body = [[r.experiment] + [_fmt(v, 3) for v in self.values(r)] for r in self.rows]
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
                  for i, h in enumerate(heads)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(heads, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for b in body:
            lines.append("  ".join(c.rjust(w) for c, w in zip(b, widths)))
        if self.validation:
            lines.append("[..] validation-only station")
        return "\n".join(lines) + "\n"


def _fmt(v, digits=6) -> str:
    if v is None or not np.isfinite(v):
        return "nan"
    return f"{v:.{digits}f}"


def build_score_table(results: Mapping, order: Sequence[str], station_obs: Mapping,
                      stations: Sequence, snapshots: Mapping | None = None,
                      profiles: Mapping | None = None) -> ScoreTable:
    """Assemble scores for the experiments in ``order``.

    ``results`` maps experiment id to a dict with ``station`` (id -> model
    series at the observation times), optional ``masks`` (time -> mask) and
    optional ``profiles`` (pass key -> {time: (x, wse)}).  ``station_obs``
    maps station id to the reference series; ``snapshots`` maps time to the
    reference mask and ``profiles`` maps pass key to {time: observed (x, wse)}.
    Profile scores pool every overpass of a pass.
    Missing experiments are skipped with a warning.
    """
    snapshots = snapshots or {}
    profiles = profiles or {}
    ids = [s.id for s in stations]
    validation = {s.id for s in stations if s.role == "validation"}
    rows = []
    for exp in order:
        if exp not in results:
            log.warning("experiment %s has no result; row omitted", exp)
            continue
        res = results[exp]
        row = ScoreRow(exp)
        for sid in ids:
            if sid in res.get("station", {}) and sid in station_obs:
                row.station_rmse[sid] = rmse(res["station"][sid], station_obs[sid])
        for t, ref in snapshots.items():
            mask = res.get("masks", {}).get(t)
            if mask is not None:
                row.csi[t] = csi(mask, ref)
        for key, ref in profiles.items():
            prof = res.get("profiles", {}).get(key)
            if prof:
                try:
                    row.profile_rmse[key] = pooled_profile_rmse(prof, ref)
                except ValueError:
                    log.warning("%s: no matched nodes for pass %s", exp, key)
        rows.append(row)
    return ScoreTable(rows, ids, validation, list(snapshots), list(profiles))
