import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cble_lab.env_model import (
    DegenerateSpecWarning,
    EnvironmentSpec,
    ExponentialMixture,
    JumpComponent,
    MomentDomainError,
    PointMass,
    TiltedUniform,
    check_exponential_moment,
    classify_regime,
    esscher_tilt,
    laplace_exponent,
    laplace_exponent_derivatives,
    spec_from_config,
)


def point_mass_spec():
    return EnvironmentSpec(0.0, 0.0, (JumpComponent(1.0, PointMass(math.log(2.0))),))


def mixed_spec():
    return EnvironmentSpec(
        -0.3,
        0.5,
        (
            JumpComponent(0.7, ExponentialMixture.double_exponential(0.4, 5.0, 3.0)),
            JumpComponent(0.5, PointMass(-1.4)),
            JumpComponent(0.2, TiltedUniform(-0.5, 2.0)),
        ),
    )


def test_brownian_phi_value():
    assert laplace_exponent(EnvironmentSpec.brownian(-2.0, 1.0), 1.0) == pytest.approx(-1.5, abs=1e-15)


@pytest.mark.parametrize("spec", [EnvironmentSpec.brownian(-2.0, 1.0), point_mass_spec(), mixed_spec()])
def test_phi_zero_is_exactly_zero(spec):
    assert laplace_exponent(spec, 0.0) == 0.0


def test_point_mass_phi_matches_direct_evaluation():
    assert laplace_exponent(point_mass_spec(), 1.0) == pytest.approx(oracles.POINT_MASS_LN2, rel=1e-12)


def test_derivatives_brownian():
    assert laplace_exponent_derivatives(EnvironmentSpec.brownian(-1.0, 1.0), 1.0) == pytest.approx((0.0, 1.0), abs=1e-14)
    assert laplace_exponent_derivatives(EnvironmentSpec.brownian(-2.0, 1.0), 0.0) == pytest.approx((-2.0, 1.0), abs=1e-14)


def test_point_mass_derivative_closed_form_and_finite_differences():
    spec = point_mass_spec()
    z = math.log(2.0)
    d1, d2 = laplace_exponent_derivatives(spec, 0.0)
    # the jump is compensated (|z| < 1), so Phi'(0) = E[Z] - E[Z] = 0 and Phi''(0) = z^2
    assert d1 == pytest.approx(0.0, abs=1e-14)
    assert d2 == pytest.approx(z * z, rel=1e-12)
    h = 1e-4
    fd1 = (laplace_exponent(spec, h) - laplace_exponent(spec, -h)) / (2 * h)
    assert d1 == pytest.approx(fd1, abs=1e-8)


@pytest.mark.parametrize("theta", [-0.8, 0.0, 0.6, 1.5])
def test_derivatives_match_finite_differences(theta):
    spec = mixed_spec()
    d1, d2 = laplace_exponent_derivatives(spec, theta)
    h = 1e-4
    f = lambda u: laplace_exponent(spec, u)  # noqa: E731
    fd1 = (f(theta + h) - f(theta - h)) / (2 * h)
    fd2 = (f(theta + h) - 2 * f(theta) + f(theta - h)) / h**2
    assert d1 == pytest.approx(fd1, rel=1e-6)
    assert d2 == pytest.approx(fd2, rel=1e-5)


def test_degenerate_spec_warns():
    with pytest.warns(DegenerateSpecWarning):
        _, d2 = laplace_exponent_derivatives(EnvironmentSpec.brownian(-1.0, 0.0), 0.5)
    assert d2 == 0.0


@pytest.mark.parametrize(
    "drift,tag",
    [(-2.0, "strongly_subcritical"), (-1.0, "intermediate_subcritical"), (-0.25, "weakly_subcritical"), (0.0, "critical"), (0.5, "supercritical")],
)
def test_regimes(drift, tag):
    assert classify_regime(EnvironmentSpec.brownian(drift, 1.0), 1e-9).tag == tag


def test_tilt_examples():
    t = esscher_tilt(EnvironmentSpec.brownian(-1.0, 1.0), 1.0)
    assert (t.drift, t.gaussian_var, t.jumps) == (0.0, 1.0, ())
    t = esscher_tilt(EnvironmentSpec.brownian(-2.0, 1.0), 1.0)
    assert (t.drift, t.gaussian_var) == (-1.0, 1.0)
    t = esscher_tilt(point_mass_spec(), 1.0)
    assert t.jumps[0].rate == pytest.approx(2.0, rel=1e-14)
    assert t.jumps[0].law == PointMass(math.log(2.0))


@pytest.mark.parametrize("theta", [0.5, 1.0, -0.7])
def test_tilt_contract(theta):
    spec = mixed_spec()
    tilted = esscher_tilt(spec, theta)
    base = laplace_exponent(spec, theta)
    for u in np.linspace(-0.5, 0.9, 8):
        assert laplace_exponent(tilted, u) == pytest.approx(laplace_exponent(spec, theta + u) - base, abs=1e-10)


def test_double_tilt():
    spec = mixed_spec()
    a = esscher_tilt(esscher_tilt(spec, 0.4), 0.5)
    b = esscher_tilt(spec, 0.9)
    for u in (-0.3, 0.0, 0.7):
        assert laplace_exponent(a, u) == pytest.approx(laplace_exponent(b, u), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    drift=st.floats(-3, 3),
    var=st.floats(0.0, 2.0),
    rate=st.floats(0.1, 3.0),
    up=st.floats(2.5, 8.0),
    down=st.floats(2.5, 8.0),
    thetas=st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3, unique=True),
)
def test_convexity_property(drift, var, rate, up, down, thetas):
    spec = EnvironmentSpec(drift, var, (JumpComponent(rate, ExponentialMixture.double_exponential(0.5, up, down)),))
    t1, t2, t3 = sorted(thetas)
    if t3 - t1 < 1e-6:
        return
    f = lambda u: laplace_exponent(spec, u)  # noqa: E731
    chord = ((t3 - t2) * f(t1) + (t2 - t1) * f(t3)) / (t3 - t1)
    assert f(t2) <= chord + 1e-9 * (1 + abs(chord))


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(-1.5, 1.5), u=st.floats(-0.5, 0.5))
def test_tilt_identity_property(theta, u):
    spec = mixed_spec()
    assert laplace_exponent(esscher_tilt(spec, theta), u) == pytest.approx(laplace_exponent(spec, theta + u) - laplace_exponent(spec, theta), abs=1e-10)


def test_moment_domain():
    exp1 = EnvironmentSpec(0.0, 0.0, (JumpComponent(1.0, ExponentialMixture.exponential(1.0)),))
    exp3 = EnvironmentSpec(0.0, 0.0, (JumpComponent(1.0, ExponentialMixture.exponential(3.0)),))
    assert check_exponential_moment(EnvironmentSpec.brownian(-1.0, 1.0), 50.0)
    assert not check_exponential_moment(exp1, 2.0)
    assert check_exponential_moment(exp3, 2.0)
    with pytest.raises(MomentDomainError):
        laplace_exponent(exp1, 2.0)


def test_tilted_uniform_sampling_matches_moments():
    law = TiltedUniform(-0.5, 2.0, tilt=1.3)
    x = law.sample(np.random.default_rng(0), 200_000)
    assert x.min() >= -0.5 and x.max() <= 2.0
    assert x.mean() == pytest.approx(law.moment(1, 0.0), abs=4 * x.std() / math.sqrt(x.size))


def test_config_round_trip_and_unknown_keys():
    spec = mixed_spec()
    assert spec_from_config(spec.to_config()) == spec
    assert spec_from_config(spec.to_config()).spec_id == spec.spec_id
    with pytest.raises(KeyError):
        spec_from_config({"drift": 0.0, "volatility": 1.0})


def test_classify_tolerance_must_be_positive():
    with pytest.raises(ValueError):
        classify_regime(EnvironmentSpec.brownian(-1.0, 1.0), 0.0)


def test_laplace_exponent_is_finite_near_domain_edge():
    spec = EnvironmentSpec(0.0, 0.0, (JumpComponent(1.0, ExponentialMixture.exponential(3.0)),))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert math.isfinite(laplace_exponent(spec, 2.999))
