import math
import warnings

import numpy as np
import pytest

import oracles
from cble_lab.branching_core import BranchingMechanism
from cble_lab.env_model import EnvironmentSpec, esscher_tilt, laplace_exponent
from cble_lab.estimators import (
    Estimate,
    LambdaQuadrature,
    PreconditionError,
    agree,
    estimate_B1_general,
    estimate_B1_stable,
    estimate_from_samples,
    estimate_ladder_renewal,
    intermediate_constant_probe,
    qprocess_laplace_check,
    rate_regression,
    reflected_sup_prob,
    stream_functionals,
    survival_curve_is,
    survival_curve_quenched,
    survival_is_esscher,
    survival_mc_direct,
    survival_mc_quenched,
)

FELLER = BranchingMechanism.stable_mechanism(1.0, 1.0)
STABLE_HALF = BranchingMechanism.stable_mechanism(1.0, 0.5)
NO_ENV = EnvironmentSpec.brownian(0.0, 0.0)


def test_estimate_invariants_and_record():
    e = estimate_from_samples([1.0, 2.0, 3.0], 7, "demo", "note")
    assert e.value == 2.0 and e.std_err == pytest.approx(1.0 / math.sqrt(3))
    rec = e.to_record({"t": 1})
    assert rec == {"method": "demo", "params": {"t": 1}, "value": 2.0, "std_err": e.std_err, "n": 3, "seed": 7, "bias_notes": "note"}
    with pytest.raises(ValueError):
        Estimate(1.0, 0.1, 1, 0, "x")


def test_rate_regression_pure_exponential():
    t = [5.0, 10.0, 15.0, 20.0]
    fit = rate_regression(t, [math.exp(-1.5 * s) for s in t])
    assert fit.rate == pytest.approx(-1.5, abs=1e-10)
    assert fit.poly_exponent == pytest.approx(0.0, abs=1e-10)
    assert fit.residual_norm == pytest.approx(0.0, abs=1e-10)


def test_rate_regression_polynomial_factor():
    t = [4.0, 8.0, 16.0, 32.0, 64.0]
    fit = rate_regression(t, [s**-0.5 * math.exp(-0.5 * s) for s in t])
    assert fit.rate == pytest.approx(-0.5, abs=1e-10)
    assert fit.poly_exponent == pytest.approx(-0.5, abs=1e-10)


def test_rate_regression_rejects_and_validates():
    t = [1.0, 2.0, 3.0, 4.0, 5.0]
    fit = rate_regression(t, [math.exp(-s) for s in t[:4]] + [0.0])
    assert fit.rejected[0]["time"] == 5.0
    with pytest.raises(ValueError):
        rate_regression(t[:4], [1.0, 0.5, 0.0, 0.1])
    noisy = [Estimate(math.exp(-s), 0.5 * math.exp(-s), 100, 0, "x") for s in t]
    with pytest.raises(ValueError):
        rate_regression(t, noisy)


def test_direct_degenerate_mechanism_is_certain_survival():
    e = survival_mc_direct(BranchingMechanism(), EnvironmentSpec.brownian(-2.0, 1.0), 1.0, 1.0, 200, 0.01, seed=1)
    assert (e.value, e.std_err) == (1.0, 0.0)


def test_direct_matches_classical_csbp():
    e = survival_mc_direct(FELLER, NO_ENV, 1.0, 1.0, 10_000, 0.005, seed=2)
    assert abs(e.value - oracles.CSBP_FELLER_T1) <= 4 * e.std_err


def test_quenched_deterministic_environment_is_exact():
    e = survival_mc_quenched(STABLE_HALF, NO_ENV, 1.0, 1.0, 100, 0.01, seed=3)
    assert e.std_err == pytest.approx(0.0, abs=1e-15)
    assert e.value == pytest.approx(oracles.CSBP_STABLE_HALF_T1, rel=1e-12)


def test_is_on_deterministic_environment_equals_quenched():
    spec = EnvironmentSpec.brownian(-0.5, 0.0)
    q = survival_mc_quenched(FELLER, spec, 1.0, 2.0, 50, 0.01, seed=4)
    s = survival_is_esscher(FELLER, spec, 1.0, 2.0, 50, 0.01, seed=4)
    assert s.value == pytest.approx(q.value, rel=1e-12)


def test_three_routes_agree_and_quenched_reduces_variance(strong_env):
    t = 1.0
    direct = survival_mc_direct(FELLER, strong_env, 1.0, t, 20_000, 0.002, seed=5)
    quenched = survival_mc_quenched(FELLER, strong_env, 1.0, t, 20_000, 0.002, seed=6)
    tilted = survival_is_esscher(FELLER, strong_env, 1.0, t, 20_000, 0.002, seed=7)
    assert agree(direct, quenched)
    assert agree(quenched, tilted)
    assert agree(direct, tilted)
    assert quenched.std_err < direct.std_err


def test_tilting_is_unbiased(strong_env):
    n = 50_000
    t = 2.0
    base = stream_functionals(strong_env, [t], n, 0.01, master_seed=8)
    tilted = stream_functionals(esscher_tilt(strong_env, 1.0), [t], n, 0.01, master_seed=9)
    f_base = (base.sup[:, 0] < 0.5).astype(float)
    w = np.exp(-tilted.xi[:, 0] + t * laplace_exponent(strong_env, 1.0))
    f_tilt = (tilted.sup[:, 0] < 0.5) * w
    se = math.hypot(f_base.std(ddof=1), f_tilt.std(ddof=1)) / math.sqrt(n)
    assert abs(f_base.mean() - f_tilt.mean()) <= 4 * se


def test_survival_curve_monotone_under_common_seeds(strong_env):
    curve = survival_curve_quenched(STABLE_HALF, strong_env, 1.0, [0.5, 1.0, 2.0, 4.0], 2000, 0.01, seed=10)
    values = [e.value for e in curve]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_z_linearity_of_the_limit(strong_env):
    one = survival_curve_is(STABLE_HALF, strong_env, 1.0, [10.0], 5000, 0.01, seed=11)[0]
    two = survival_curve_is(STABLE_HALF, strong_env, 2.0, [10.0], 5000, 0.01, seed=11)[0]
    assert two.value / one.value == pytest.approx(2.0, rel=0.1)


def test_seed_determinism(strong_env):
    a = survival_is_esscher(STABLE_HALF, strong_env, 1.0, 3.0, 500, 0.01, seed=12)
    b = survival_is_esscher(STABLE_HALF, strong_env, 1.0, 3.0, 500, 0.01, seed=12)
    assert (a.value, a.std_err) == (b.value, b.std_err)
    c = survival_mc_direct(STABLE_HALF, strong_env, 1.0, 1.0, 300, 0.01, seed=12)
    d = survival_mc_direct(STABLE_HALF, strong_env, 1.0, 1.0, 300, 0.01, seed=12)
    assert c.value == d.value


def test_is_requires_first_exponential_moment():
    from cble_lab.env_model import ExponentialMixture, JumpComponent

    heavy = EnvironmentSpec(-1.0, 1.0, (JumpComponent(1.0, ExponentialMixture.exponential(0.8)),))
    with pytest.raises(PreconditionError):
        survival_is_esscher(FELLER, heavy, 1.0, 1.0, 100, 0.01, seed=0)


def test_quenched_requires_grey():
    with pytest.raises(PreconditionError):
        survival_mc_quenched(BranchingMechanism(atoms=((1.0, 1.0),)), EnvironmentSpec.brownian(-2.0, 1.0), 1.0, 1.0, 100, 0.01, seed=0)


def test_b1_stable_deterministic_environment():
    e = estimate_B1_stable(1.0, 1.0, EnvironmentSpec.brownian(-2.0, 0.0), 20.0, 100, seed=0)
    assert e.value == pytest.approx(2.0, rel=1e-6)


def test_b1_stable_matches_gamma_oracle(inter_env):
    # tilted fixture: Brownian drift -1, variance 1 (from the untilted drift -2)
    spec = EnvironmentSpec.brownian(-2.0, 1.0)
    e = estimate_B1_stable(1.0, 0.5, spec, 40.0, 4000, seed=13)
    assert abs(e.value - oracles.B1_FIXTURE) <= 4 * e.std_err
    assert "relative change" in e.bias_notes


def test_b1_stable_requires_strong_regime(inter_env):
    with pytest.raises(PreconditionError):
        estimate_B1_stable(1.0, 0.5, inter_env, 20.0, 100, seed=0)


def test_b1_general_lambda_to_zero_and_small_run():
    spec = EnvironmentSpec.brownian(-2.0, 1.0)
    mech = BranchingMechanism(gamma_sq=1.0)
    e = estimate_B1_general(mech, spec, 20.0, LambdaQuadrature(), 64, seed=14, n_crosscheck=4)
    assert e.diagnostics["max_rel_diff_vs_limit"] < 1e-3
    assert e.value > 0
    # Feller mechanism with the same tilted environment: B1 = 2 E[(int_0^inf e^xi)^-1] = 2
    assert abs(e.value - oracles.b1_dufresne(-1.0, 1.0, 1.0, 1.0)) <= 4 * e.std_err


def test_reflected_supremum_vanishes_near_zero():
    e = reflected_sup_prob(EnvironmentSpec.brownian(0.0, 1.0), -0.01, 1.0, 5000, 1e-4, seed=15)
    assert e.value < 0.03


def test_reflected_supremum_needs_oscillation():
    with pytest.raises(PreconditionError):
        reflected_sup_prob(EnvironmentSpec.brownian(-0.5, 1.0), -1.0, 1.0, 100, 0.01, seed=0)


def test_ladder_renewal_counting_properties():
    res = estimate_ladder_renewal(EnvironmentSpec.brownian(0.0, 1.0), [0.25, 0.5, 1.0, 2.0], 4000, 0.01, seed=16, refine=False)
    assert np.all(np.diff(res.U) >= 0)
    assert res.U[0] >= 1.0
    assert res.is_subadditive()
    assert np.all(res.U <= res.linear_bound_constant() * res.x + 1.0 + 1e-12)


def test_qprocess_lambda_zero_normalization(strong_env):
    lhs, rhs = qprocess_laplace_check(FELLER, strong_env, 1.0, 1.0, 0.0, 20_000, seed=17, dt=2e-3)
    assert rhs.value == 1.0
    assert abs(lhs.value - 1.0) <= 4 * lhs.std_err


def test_qprocess_deterministic_environment_matches_riccati():
    a, t, lam = -0.7, 1.0, 1.0
    spec = EnvironmentSpec.brownian(a, 0.0)
    exact = oracles.qprocess_feller_deterministic(1.0, a, 1.0, t, lam)
    lhs, rhs = qprocess_laplace_check(FELLER, spec, 1.0, t, lam, 20_000, seed=18, dt=2e-3)
    assert rhs.value == pytest.approx(exact, abs=1e-3)
    assert abs(lhs.value - exact) <= 4 * lhs.std_err


def test_qprocess_general_mechanism_routes_agree(strong_env):
    mech = BranchingMechanism(gamma_sq=0.5, atoms=((0.5, 1.0),))
    lhs, rhs = qprocess_laplace_check(mech, strong_env, 1.0, 1.0, 1.0, 20_000, seed=19, dt=2e-3, dt_max=1e-2)
    assert agree(lhs, rhs)


def test_probe_flags_strongly_subcritical_misuse(strong_env):
    with pytest.warns(RuntimeWarning):
        res = intermediate_constant_probe(STABLE_HALF, strong_env, 1.0, None, [4.0, 8.0, 16.0, 32.0], 4000, seed=20)
    assert res.trend_flagged
    assert res.slope > 0.3


def test_probe_result_shape(inter_env):
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        res = intermediate_constant_probe(STABLE_HALF, inter_env, 1.0, None, [2.0, 4.0, 8.0], 500, seed=21)
    assert len(res.normalized) == 3 and res.trend_points == 2
    assert res.plateau.n == 500
