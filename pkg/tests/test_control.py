import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from riverda.control import (
    ComponentPrior, ConfigurationError, ControlVector, PriorSpec, apply_control, clamp,
    control_labels, default_prior, member_generators, refresh, reperturb, sample_prior,
    truncated_mean, whiten,
)
from riverda.river_model import BoundaryForcing, initial_state, run


def test_control_vector_round_trip():
    c = ControlVector((10.0, 40.0, 35.0), 1.1)
    assert c.riverbed_ks == (40.0, 35.0) and c.floodplain_ks == 10.0
    assert ControlVector.from_array(c.as_array()) == c
    assert c.labels() == ["ks_0", "ks_1", "ks_2", "mu"]
    assert control_labels(2, False) == ["ks_1", "ks_2", "mu"]


def test_prior_rejects_bad_components():
    with pytest.raises(ConfigurationError):
        ComponentPrior(1.0, 0.1, 2.0, 1.0)
    with pytest.raises(ConfigurationError):
        ComponentPrior(1.0, -0.1, 0.0, 2.0)
    with pytest.raises(ConfigurationError):
        PriorSpec((ComponentPrior(1.0, 0.1, 0.5, 1.5),))


def test_default_bounds():
    p = default_prior(6)
    assert p.dimension == 8
    assert (p.lower[0], p.upper[0]) == (2.0, 40.0)
    assert np.all(p.lower[1:7] == 10.0) and np.all(p.upper[1:7] == 80.0)
    assert (p.lower[-1], p.upper[-1]) == (0.5, 1.5)


# ---------------------------------------------------------------------------
# sampling


def test_zero_sd_gives_the_default():
    p = default_prior(3, riverbed=(40.0, 0.0), floodplain_prior=(10.0, 0.0), mu=(1.0, 0.0))
    for c in sample_prior(p, 5, seed=1):
        assert np.array_equal(c.as_array(), p.default)


def test_sampling_is_seeded():
    p = default_prior(3)
    a = [c.as_array() for c in sample_prior(p, 20, seed=7)]
    b = [c.as_array() for c in sample_prior(p, 20, seed=7)]
    c = [c.as_array() for c in sample_prior(p, 20, seed=8)]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_truncated_mean_of_mu_prior():
    # oracle: truncated-normal first moment
    a, b = (0.5 - 1.0) / 0.1, (1.5 - 1.0) / 0.1
    assert truncated_mean(1.0, 0.1, 0.5, 1.5) == pytest.approx(truncnorm.mean(a, b, 1.0, 0.1))
    lop = PriorSpec((ComponentPrior(40.0, 5.0, 10.0, 80.0), ComponentPrior(0.6, 0.2, 0.5, 1.5)),
                    floodplain=False)
    mu = np.array([c.mu for c in sample_prior(lop, 10_000, seed=3)])
    exact = truncated_mean(0.6, 0.2, 0.5, 1.5)
    a, b = (0.5 - 0.6) / 0.2, (1.5 - 0.6) / 0.2
    se = truncnorm.std(a, b, 0.6, 0.2) / np.sqrt(mu.size)
    assert abs(mu.mean() - exact) <= 3 * se


def test_sample_mean_within_three_standard_errors():
    p = default_prior(1, floodplain=False)
    mu = np.array([c.mu for c in sample_prior(p, 10_000, seed=11)])
    se = 0.1 / np.sqrt(mu.size)
    assert abs(mu.mean() - truncated_mean(1.0, 0.1, 0.5, 1.5)) <= 3 * se


@given(seed=st.integers(0, 2**31), lo=st.floats(0.0, 0.9), width=st.floats(0.01, 1.0),
       sd=st.floats(0.01, 2.0))
@settings(max_examples=40, deadline=None)
def test_draws_respect_bounds(seed, lo, width, sd):
    hi = lo + width
    p = PriorSpec((ComponentPrior(40.0, 20.0, 30.0, 45.0), ComponentPrior(lo, sd, lo, hi)),
                  floodplain=False)
    for c in sample_prior(p, 30, seed):
        x = c.as_array()
        assert np.all(x >= p.lower) and np.all(x <= p.upper)


def test_member_streams_are_independent_of_count():
    a = member_generators(5, 3, "IDA")
    b = member_generators(5, 6, "IDA")
    assert a[1].standard_normal() == b[1].standard_normal()
    c = member_generators(5, 3, "FDA")
    assert member_generators(5, 3, "IDA")[0].standard_normal() != c[0].standard_normal()


# ---------------------------------------------------------------------------
# re-perturbation


def test_reperturb_is_centred_and_whitened():
    p = default_prior(6)
    X = reperturb(p, p.default, member_generators(1, 50))
    assert np.allclose(X.mean(axis=0), p.default, atol=1e-9)
    cov = np.cov(X, rowvar=False)
    assert np.allclose(cov, np.diag(p.sd ** 2), atol=1e-9)


def test_whiten_skips_rank_deficient_ensembles():
    a = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(whiten(a - a.mean(0), np.ones(4)), a - a.mean(0))


def test_refresh_limits():
    p = default_prior(3)
    X = reperturb(p, p.default, member_generators(2, 20))
    assert np.array_equal(refresh(p, X, member_generators(3, 20), 0.0), X)
    Y = refresh(p, X, member_generators(3, 20), 0.5)
    assert np.allclose(Y.mean(axis=0), X.mean(axis=0), atol=1e-9)
    with pytest.raises(ValueError):
        refresh(p, X, member_generators(3, 20), 1.5)


def test_refresh_spread_relaxes_to_prior():
    p = default_prior(2, floodplain=False)
    gens = member_generators(4, 400)
    X = np.tile(p.default, (400, 1)) + 1e-6 * np.random.default_rng(0).standard_normal((400, 3))
    for _ in range(40):
        X = refresh(p, X, gens, 0.3)
    assert np.allclose(X.std(axis=0, ddof=1), p.sd, rtol=0.15)


# ---------------------------------------------------------------------------
# apply_control and clamp


def test_identity_control_leaves_inputs(small_geometry, small_forcing):
    c = ControlVector((10.0, 40.0, 40.0, 40.0), 1.0)
    g, f = apply_control(c, small_geometry, small_forcing)
    assert g.ks_values() == small_geometry.ks_values()
    assert f.inflow_values == small_forcing.inflow_values


def test_identity_control_reproduces_open_loop(small_geometry, small_forcing):
    c = ControlVector((10.0, 40.0, 40.0, 40.0), 1.0)
    g, f = apply_control(c, small_geometry, small_forcing)
    a = run(initial_state(small_geometry, small_forcing), small_geometry, small_forcing,
            t_end=7200.0)[-1]
    b = run(initial_state(g, f), g, f, t_end=7200.0)[-1]
    assert a == b


def test_mu_scales_every_ordinate(small_geometry, small_forcing):
    _, f = apply_control(ControlVector((10.0, 40.0, 40.0, 40.0), 0.8), small_geometry,
                         small_forcing)
    assert np.allclose(f.inflow_values,
                       0.8 * np.asarray(small_forcing.inflow_values), rtol=0, atol=0)


def test_zone_locality_of_friction(small_geometry):
    """Lowering ks_2 changes conveyance in zone 2 only; subcritical flow carries the
    WSE change upstream but leaves the downstream zone untouched."""
    g = small_geometry
    f = BoundaryForcing((0.0,), (500.0,), (0.0, 5000.0), (9.0, 15.0))
    g1, _ = apply_control(ControlVector((10.0, 40.0, 28.0, 40.0), 1.0), g, f)
    zone = g.zone_index()
    cell_ks = lambda geo: np.array(geo.ks_values())[zone - 1]
    k0 = np.array([s.conveyance(2.0, k, 10.0) for s, k in zip(g.sections, cell_ks(g))])
    k1 = np.array([s.conveyance(2.0, k, 10.0) for s, k in zip(g1.sections, cell_ks(g1))])
    assert np.array_equal(k0 != k1, zone == 2)
    w0 = run(initial_state(g, f), g, f, t_end=48 * 3600.0)[-1].wse(g)
    w1 = run(initial_state(g1, f), g1, f, t_end=48 * 3600.0)[-1].wse(g)
    assert np.all(w1[zone == 2] > w0[zone == 2] + 1e-2)
    assert np.max(np.abs(w1[zone == 3] - w0[zone == 3])) < 1e-6


def test_apply_control_checks_dimension(small_geometry, small_forcing):
    with pytest.raises(ConfigurationError):
        apply_control(ControlVector((10.0, 40.0), 1.0), small_geometry, small_forcing)


def test_clamp_examples():
    p = default_prior(2, floodplain=False)
    inside = ControlVector((40.0, 30.0), 1.2, floodplain=False)
    assert clamp(inside, p) == inside
    out = clamp(ControlVector((120.0, 30.0), 1.2, floodplain=False), p)
    assert out.ks_values == (80.0, 30.0)


@given(st.lists(st.floats(-200.0, 200.0), min_size=3, max_size=3))
def test_clamp_is_idempotent_and_keeps_inside_values(vals):
    p = default_prior(2, floodplain=False)
    x = np.array(vals)
    y = clamp(x, p)
    assert np.array_equal(clamp(y, p), y)
    inside = (x >= p.lower) & (x <= p.upper)
    assert np.array_equal(y[inside], x[inside])
