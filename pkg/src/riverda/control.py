"""Control vector, priors and their mapping onto model inputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

from .river_model import BoundaryForcing, RiverGeometry

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ControlVector:
    """Zoned Strickler coefficients plus the inflow multiplier.

    ``ks_values[0]`` is the floodplain coefficient when the floodplain is
    controlled; the remaining entries are riverbed zones 1..N in order.
    """

    ks_values: tuple
    mu: float = 1.0
    floodplain: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ks_values", tuple(float(k) for k in self.ks_values))
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def riverbed_ks(self) -> tuple:
        return self.ks_values[1:] if self.floodplain else self.ks_values

    @property
    def floodplain_ks(self):
        return self.ks_values[0] if self.floodplain else None

    def as_array(self) -> np.ndarray:
        return np.array([*self.ks_values, self.mu])

    @classmethod
    def from_array(cls, values, floodplain=True) -> "ControlVector":
        values = np.asarray(values, dtype=float)
        return cls(tuple(values[:-1]), float(values[-1]), floodplain)

    def labels(self) -> list:
        return control_labels(len(self.riverbed_ks), self.floodplain)


def control_labels(zone_count: int, floodplain: bool) -> list:
    start = 0 if floodplain else 1
    return [f"ks_{i}" for i in range(start, zone_count + 1)] + ["mu"]


@dataclass(frozen=True)
class ComponentPrior:
    default: float
    sd: float
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ConfigurationError(f"bounds out of order: [{self.lower}, {self.upper}]")
        if self.sd < 0:
            raise ConfigurationError("sd must be >= 0")


@dataclass(frozen=True)
class PriorSpec:
    """Truncated-gaussian prior per control component (ks..., mu)."""

    components: tuple
    floodplain: bool = True
    distribution: str = "truncated-gaussian"
    labels: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.distribution != "truncated-gaussian":
            raise ConfigurationError(f"unsupported prior distribution {self.distribution!r}")
        if len(self.components) < 2:
            raise ConfigurationError("prior needs at least one ks and mu")
        if not self.labels:
            n = len(self.components) - 1 - (1 if self.floodplain else 0)
            object.__setattr__(self, "labels", tuple(control_labels(n, self.floodplain)))

    @property
    def dimension(self) -> int:
        return len(self.components)

    @property
    def default(self) -> np.ndarray:
        return np.array([c.default for c in self.components])

    @property
    def sd(self) -> np.ndarray:
        return np.array([c.sd for c in self.components])

    @property
    def lower(self) -> np.ndarray:
        return np.array([c.lower for c in self.components])

    @property
    def upper(self) -> np.ndarray:
        return np.array([c.upper for c in self.components])

    def default_control(self) -> ControlVector:
        return ControlVector.from_array(self.default, self.floodplain)

    def with_defaults(self, values) -> "PriorSpec":
        comps = tuple(replace(c, default=float(v)) for c, v in zip(self.components, values))
        return replace(self, components=comps)


def default_prior(zone_count: int = 6, floodplain: bool = True, riverbed=(40.0, 5.0),
                  floodplain_prior=(10.0, 3.0), mu=(1.0, 0.1)) -> PriorSpec:
    comps = []
    if floodplain:
        comps.append(ComponentPrior(floodplain_prior[0], floodplain_prior[1], 2.0, 40.0))
    comps += [ComponentPrior(riverbed[0], riverbed[1], 10.0, 80.0) for _ in range(zone_count)]
    comps.append(ComponentPrior(mu[0], mu[1], 0.5, 1.5))
    return PriorSpec(tuple(comps), floodplain)


def member_generators(seed, n: int, label: str = "") -> list:
    """One independent generator per member, reproducible from ``seed``."""
    entropy = [int(seed)] + [ord(c) for c in label]
    return [np.random.default_rng(s) for s in np.random.SeedSequence(entropy).spawn(n)]


def truncated_draw(rng, mean, sd, lower, upper):
    out = np.empty(len(mean))
    for k, (m, s, lo, hi) in enumerate(zip(mean, sd, lower, upper)):
        if lo == hi or s == 0:
            out[k] = min(max(m, lo), hi)
            continue
        a, b = (lo - m) / s, (hi - m) / s
        if a >= b:
            out[k] = min(max(m, lo), hi)
            continue
        out[k] = truncnorm.rvs(a, b, loc=m, scale=s, random_state=rng)
    return out


def sample_prior(spec: PriorSpec, n: int, seed, center=None, generators=None) -> list:
    """Draw ``n`` control vectors from the truncated-gaussian prior.

    ``center`` overrides the prior mean (used for re-perturbation around an
    analysed control); ``generators`` supplies per-member streams.
    """
    if n < 2:
        raise ValueError("ensemble size must be >= 2")
    lower, upper, sd = spec.lower, spec.upper, spec.sd
    for c, lab in zip(spec.components, spec.labels):
        if c.lower == c.upper:
            log.warning("degenerate bounds for %s: every member gets %g", lab, c.lower)
    mean = spec.default if center is None else np.asarray(center, dtype=float)
    rngs = member_generators(seed, n, "prior") if generators is None else generators
    rows = [truncated_draw(rng, mean, sd, lower, upper) for rng in rngs]
    return [ControlVector.from_array(r, spec.floodplain) for r in rows]


def reperturb(spec: PriorSpec, center, generators, orthogonal: bool = True) -> np.ndarray:
    """Fresh perturbations around ``center``, recentred so the ensemble mean is ``center``.

    With ``orthogonal`` the anomalies are whitened so that their sample
    covariance is exactly diag(sd^2), which removes spurious sampled
    correlations between control components.  Rows are clamped last; with
    bounds far from the centre the mean is preserved up to round-off.
    """
    center = np.asarray(center, dtype=float)
    draws = np.array([truncated_draw(g, center, spec.sd, spec.lower, spec.upper)
                      for g in generators])
    anomalies = draws - draws.mean(axis=0)
    if orthogonal:
        anomalies = whiten(anomalies, spec.sd)
    return np.clip(center + anomalies, spec.lower, spec.upper)


def refresh(spec: PriorSpec, controls, generators, alpha: float, center: bool = True):
    """Partial re-perturbation of an existing ensemble.

    Anomalies are shrunk by sqrt(1 - alpha^2) and fresh noise of prior spread
    ``alpha * sd`` is added, so the mean is kept and the spread relaxes towards
    the prior spread at rate ``alpha``.  ``alpha = 0`` returns the input and
    ``alpha = 1`` a fresh draw around the current mean.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    X = np.atleast_2d(np.asarray(controls, dtype=float))
    if alpha == 0.0:
        return X.copy()
    m = X.mean(axis=0)
    eta = np.array([g.standard_normal(X.shape[1]) for g in generators])
    if center:
        eta = eta - eta.mean(axis=0)
    out = m + np.sqrt(1.0 - alpha ** 2) * (X - m) + alpha * spec.sd * eta
    return np.clip(out, spec.lower, spec.upper)


def whiten(anomalies, sd) -> np.ndarray:
    """Rescale centred anomalies (M, d) to sample covariance diag(sd^2).

    Components with zero sd are left untouched; the transform is skipped
    when the ensemble is too small to span the active components.
    """
    a = np.array(anomalies, dtype=float)
    sd = np.asarray(sd, dtype=float)
    active = np.flatnonzero(sd > 0)
    m = a.shape[0]
    if active.size == 0 or m - 1 <= active.size:
        return a
    sub = a[:, active]
    cov = sub.T @ sub / (m - 1)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 1e-12 * vals.max():
        return a
    inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
    a[:, active] = sub @ inv_sqrt * sd[active]
    return a


def apply_control(control: ControlVector, geometry: RiverGeometry, forcing: BoundaryForcing):
    """Return (geometry', forcing') with the control's ks and mu applied."""
    expected = geometry.zone_count + (1 if control.floodplain else 0)
    if len(control.ks_values) != expected:
        raise ConfigurationError(
            f"control has {len(control.ks_values)} ks values, expected {expected} "
            f"for {geometry.zone_count} zones"
        )
    geo = geometry.with_ks(control.riverbed_ks, control.floodplain_ks)
    return geo, forcing.scaled(control.mu)


def clamp(control, spec: PriorSpec):
    """Project into the prior bounds; accepts a ControlVector or an array of rows."""
    if isinstance(control, ControlVector):
        vals = np.clip(control.as_array(), spec.lower, spec.upper)
        return ControlVector.from_array(vals, control.floodplain)
    return np.clip(np.asarray(control, dtype=float), spec.lower, spec.upper)


def truncated_mean(mean, sd, lower, upper) -> float:
    a, b = (lower - mean) / sd, (upper - mean) / sd
    return float(truncnorm.mean(a, b, loc=mean, scale=sd))
