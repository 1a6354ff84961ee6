"""Monte Carlo estimators of survival probabilities and asymptotic constants.

Three survival routes are provided:

* ``direct``: frequency of ``{Z_t > 0}`` over forward simulations;
* ``quenched``: average over environment paths of the quenched survival
  probability ``1 - exp(-z h_{0,t}(inf))``;
* ``esscher``: the same functional weighted by ``exp(t Phi(1) - xi_t)`` under
  the environment tilted by ``theta = 1``.

Environment functionals are accumulated in a single time-major pass, so a
grid of horizons shares the same paths (common random numbers) and shorter
horizons reproduce exactly the prefix of longer ones.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .branching_core import (
    BranchingMechanism,
    DegenerateMechanismError,
    batch_solve,
    batch_v_infinity,
    check_grey,
    check_xlogx,
    stable_h_inf_from_functional,
)
from .env_model import (
    EnvironmentSpec,
    MomentDomainError,
    classify_regime,
    esscher_tilt,
    laplace_exponent,
    laplace_exponent_derivatives,
)
from .forward_sde import STABLE_EPS, simulate_cble_batch
from .path_sim import (
    block_sizes,
    child_generator,
    draw_increments,
    iter_blocks,
    materialize_block,
    uniform_steps,
)

_NO_JUMP = np.zeros((1, 1))


class PreconditionError(ValueError):
    """A hypothesis or regime requirement of an estimator fails.

    ``hypothesis`` names the failed condition (``"H1"`` to ``"H4"`` or
    ``"regime"``).
    """

    def __init__(self, message: str, hypothesis: str):
        super().__init__(message)
        self.hypothesis = hypothesis


class TruncationError(RuntimeError):
    """Horizon truncation diagnostic exceeds its tolerance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientPathsError(RuntimeError):
    """Too few paths survive a rejection step."""


class IntegrabilityWarning(UserWarning):
    """The lambda-integrand does not decay fast enough within the quadrature range."""


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo point estimate with its standard error.

    ``std_err`` is the sample standard deviation of the per-replica values
    divided by ``sqrt(n)``.
    """

    value: float
    std_err: float
    n: int
    master_seed: int | None
    method_tag: str
    bias_notes: str = ""
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("an estimate needs at least 2 replicas")
        if not self.std_err >= 0:
            raise ValueError("std_err must be nonnegative")

    @property
    def rel_err(self) -> float:
        return self.std_err / abs(self.value) if self.value else math.inf

    def to_record(self, params: dict | None = None) -> dict:
        return {
            "method": self.method_tag,
            "params": params or {},
            "value": self.value,
            "std_err": self.std_err,
            "n": self.n,
            "seed": self.master_seed,
            "bias_notes": self.bias_notes,
        }


def estimate_from_samples(samples, master_seed, method_tag: str, bias_notes: str = "", diagnostics=None) -> Estimate:
    """Sample mean and standard error of per-replica values."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 samples")
    se = float(np.std(x, ddof=1) / math.sqrt(n))
    return Estimate(float(np.mean(x)), se, n, master_seed, method_tag, bias_notes, diagnostics or {})


def joint_std_err(a: Estimate, b: Estimate) -> float:
    """Conservative standard error of ``a - b`` for independently seeded routes."""
    return math.hypot(a.std_err, b.std_err)


def agree(a: Estimate, b: Estimate, k: float = 4.0) -> bool:
    """True iff ``|a - b| <= k`` joint standard errors."""
    return abs(a.value - b.value) <= k * joint_std_err(a, b)


def derived_seed(master_seed: int, tag: int) -> int:
    """Independent master seed for a second route of the same experiment."""
    return int(np.random.SeedSequence([int(master_seed), int(tag)]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Streaming environment functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamRecord:
    """Per-replica environment functionals at the record times.

    Arrays have shape ``(n, len(times))``: ``xi`` the value, ``I`` the integral
    of ``exp(c xi)`` from 0, ``sup``/``inf`` the running extrema over grid
    values and left limits (including the starting point).
    """

    times: np.ndarray
    xi: np.ndarray
    I: np.ndarray
    sup: np.ndarray
    inf: np.ndarray
    dt: float


def _record_indices(times, dt_max: float) -> tuple[np.ndarray, int, float]:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(times <= 0) or np.any(np.diff(times) < 0):
        raise ValueError("record times must be positive and nondecreasing")
    T = float(times[-1])
    m, h = uniform_steps(T, dt_max)
    idx = np.rint(times / h).astype(np.int64)
    if np.any(np.abs(idx * h - times) > 1e-9 * max(1.0, T)):
        raise ValueError("record times must lie on the uniform grid of the largest time")
    return idx, m, h


def stream_functionals(spec: EnvironmentSpec, times, n: int, dt_max: float, master_seed: int, c: float = 0.0, x0: float = 0.0) -> StreamRecord:
    """Simulate ``n`` environment paths and record functionals at ``times``."""
    idx, m, h = _record_indices(times, dt_max)
    nt = idx.size
    parts = {"xi": [], "I": [], "sup": [], "inf": []}
    for stream in iter_blocks(spec, h, n, master_seed):
        b = stream.size
        xi = np.full(b, float(x0))
        I = np.zeros(b)
        sup = xi.copy()
        inf = xi.copy()
        out = {k: np.empty((nt, b)) for k in parts}
        done = 0
        for cont, jump in stream.slabs(m):
            L = cont.shape[0]
            local = idx - 1 - done
            sel = (local >= 0) & (local < L)
            K.slab_functionals(
                xi, I, sup, inf, cont, _NO_JUMP if jump is None else jump, jump is not None,
                float(c), h, local[sel], np.nonzero(sel)[0], out["xi"], out["I"], out["sup"], out["inf"],
            )
            done += L
        for k in parts:
            parts[k].append(out[k].T)
    cat = {k: np.vstack(v) for k, v in parts.items()}
    return StreamRecord(np.asarray(times, dtype=float), cat["xi"], cat["I"], cat["sup"], cat["inf"], h)


def _require_grey(mech: BranchingMechanism) -> None:
    if mech.is_degenerate:
        raise PreconditionError("psi0 vanishes identically: Grey's condition (H3) fails", "H3")
    ok, diag = check_grey(mech)
    if not ok:
        raise PreconditionError(f"Grey's condition (H3) fails (tail exponent {diag['tail_exponent']:.4g})", "H3")


def _require_theta_one(spec: EnvironmentSpec) -> float:
    try:
        return laplace_exponent(spec, 1.0)
    except MomentDomainError as exc:
        raise PreconditionError(f"theta = 1 is outside the exponential-moment interval (H2): {exc}", "H2") from exc


def _h_infinity(mech: BranchingMechanism, spec: EnvironmentSpec, times, n: int, dt_max: float, seed: int, method: str = "auto"):
    """``(xi_t, h_{0,t}(inf))`` arrays of shape ``(n, len(times))``."""
    if method not in ("auto", "ode"):
        raise ValueError("method must be 'auto' or 'ode'")
    if mech.is_stable and method == "auto":
        C, beta = mech.stable
        rec = stream_functionals(spec, times, n, dt_max, seed, c=-beta)
        return rec.xi, stable_h_inf_from_functional(C, beta, rec.I)
    idx, m, h = _record_indices(times, dt_max)
    grid = np.linspace(0.0, m * h, m + 1)
    xs, hs = [], []
    for stream in iter_blocks(spec, h, n, seed):
        vals, lefts = materialize_block(stream, m)
        hv = np.empty((stream.size, idx.size))
        for j, k in enumerate(idx):
            hv[:, j] = batch_v_infinity(
                mech, grid[: k + 1], np.ascontiguousarray(vals[:, : k + 1]), np.ascontiguousarray(lefts[:, : k + 1])
            )
        xs.append(vals[:, idx])
        hs.append(hv)
    return np.vstack(xs), np.vstack(hs)


# ---------------------------------------------------------------------------
# Survival probability: three routes
# ---------------------------------------------------------------------------


def survival_mc_direct(
    mech: BranchingMechanism,
    spec: EnvironmentSpec,
    z0: float,
    t: float,
    n: int,
    dt: float,
    seed: int,
    eps_abs: float | None = None,
    stable_eps: float = STABLE_EPS,
) -> Estimate:
    """Frequency of ``{Z_t > 0}`` over ``n`` forward simulations."""
    if n < 100:
        raise ValueError("the direct route needs n >= 100")
    if mech.is_degenerate:
        return Estimate(1.0, 0.0, n, seed, "direct", "no demographic noise: the mass z0 exp(xi_t) stays positive")
    res = simulate_cble_batch(mech, spec, z0, t, n, dt, seed, eps_abs=eps_abs, stable_eps=stable_eps)
    alive = (res.mass > 0).astype(float)
    notes = f"dt={dt}; negative-mass truncations={res.truncations}"
    if mech.is_stable and mech.stable[1] < 1:
        notes += f"; stable jumps below {stable_eps} replaced by a Gaussian term"
    return estimate_from_samples(alive, seed, "direct", notes, {"truncations": res.truncations})


def survival_curve_quenched(
    mech: BranchingMechanism, spec: EnvironmentSpec, z0: float, times, n: int, dt_max: float, seed: int, method: str = "auto"
) -> list[Estimate]:
    """Quenched route at every time of ``times`` on common environment paths."""
    if not z0 > 0:
        raise ValueError("z0 must be positive")
    _require_grey(mech)
    _, h = _h_infinity(mech, spec, times, n, dt_max, seed, method)
    p = -np.expm1(-z0 * h)
    return [estimate_from_samples(p[:, j], seed, "quenched", f"dt={dt_max}") for j in range(p.shape[1])]


def survival_mc_quenched(
    mech: BranchingMechanism, spec: EnvironmentSpec, z0: float, t: float, n: int, dt_max: float, seed: int, method: str = "auto"
) -> Estimate:
    """Average of ``1 - exp(-z0 h_{0,t}(inf))`` over ``n`` environment paths."""
    return survival_curve_quenched(mech, spec, z0, [t], n, dt_max, seed, method)[0]


def survival_curve_is(
    mech: BranchingMechanism, spec: EnvironmentSpec, z0: float, times, n: int, dt_max: float, seed: int, method: str = "auto"
) -> list[Estimate]:
    """Esscher importance-sampling route at every time of ``times`` (common paths)."""
    if not z0 > 0:
        raise ValueError("z0 must be positive")
    phi1 = _require_theta_one(spec)
    _require_grey(mech)
    tilted = esscher_tilt(spec, 1.0)
    xi, h = _h_infinity(mech, tilted, times, n, dt_max, seed, method)
    t = np.asarray(times, dtype=float)
    y = np.exp(t * phi1 - xi) * -np.expm1(-z0 * h)
    return [estimate_from_samples(y[:, j], seed, "esscher", f"dt={dt_max}") for j in range(y.shape[1])]


def survival_is_esscher(
    mech: BranchingMechanism, spec: EnvironmentSpec, z0: float, t: float, n: int, dt_max: float, seed: int, method: str = "auto"
) -> Estimate:
    """Unbiased estimate of ``P_z(Z_t > 0)`` under the environment tilted by ``theta = 1``."""
    return survival_curve_is(mech, spec, z0, [t], n, dt_max, seed, method)[0]


# ---------------------------------------------------------------------------
# The constant of the strongly subcritical regime
# ---------------------------------------------------------------------------


def _require_strong(spec: EnvironmentSpec) -> EnvironmentSpec:
    _require_theta_one(spec)
    tilted = esscher_tilt(spec, 1.0)
    d1, _ = laplace_exponent_derivatives(tilted, 0.0) if not tilted.is_degenerate else (tilted.drift, 0.0)
    if not d1 < 0:
        raise PreconditionError("the tilted environment must drift to -infinity (Phi'(1) < 0)", "regime")
    return tilted


def estimate_B1_stable(
    C: float,
    beta: float,
    spec: EnvironmentSpec,
    T_trunc: float,
    n: int,
    seed: int,
    dt_max: float = 0.01,
    tol: float = 0.01,
) -> Estimate:
    """``(beta C)^(-1/beta) E[(int_0^T exp(beta xi_u) du)^(-1/beta)]`` under the tilted law.

    ``spec`` is the untilted environment. The same paths are continued to
    ``2 T_trunc``; a relative change above ``tol`` raises :class:`TruncationError`.
    """
    if not (C > 0 and 0 < beta <= 1):
        raise ValueError("need C > 0 and beta in (0, 1]")
    tilted = _require_strong(spec)
    rec = stream_functionals(tilted, [T_trunc, 2.0 * T_trunc], n, dt_max, seed, c=beta)
    x = (beta * C * rec.I) ** (-1.0 / beta)
    e1 = estimate_from_samples(x[:, 0], seed, "B1_stable")
    e2 = estimate_from_samples(x[:, 1], seed, "B1_stable")
    diff = x[:, 1] - x[:, 0]
    diff_se = float(np.std(diff, ddof=1) / math.sqrt(n)) if np.any(diff) else 0.0
    rel = abs(e2.value - e1.value) / abs(e2.value)
    notes = (
        f"doubling T_trunc {T_trunc} -> {2 * T_trunc}: relative change {rel:.3e}, "
        f"absolute change {e2.value - e1.value:.3e} ({abs(e2.value - e1.value) / e1.std_err if e1.std_err else 0.0:.3f} se); dt={rec.dt}"
    )
    diag = {"doubled_value": e2.value, "relative_change": rel, "paired_diff_se": diff_se, "dt": rec.dt}
    if rel > tol:
        raise TruncationError(f"truncation diagnostic {rel:.3e} exceeds {tol}", diag)
    return Estimate(e1.value, e1.std_err, n, seed, "B1_stable", notes, diag)


@dataclass(frozen=True)
class LambdaQuadrature:
    """Trapezoid rule in ``u = log(lambda)`` on ``[u_min, u_max]`` with step ``du``.

    The mass below ``exp(u_min)`` uses the trapezoid with the integrand's
    value 1 at ``lambda = 0``; above ``exp(u_max)`` a power law fitted to the
    last two nodes is integrated analytically.
    """

    u_min: float = -8.0
    u_max: float = 16.0
    du: float = 1.0

    def nodes(self) -> np.ndarray:
        k = int(round((self.u_max - self.u_min) / self.du))
        if k < 4 or k % 2:
            raise ValueError("the node count must be even and at least 4")
        return self.u_min + self.du * np.arange(k + 1)


def _lambda_integral(g: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row integral of ``g`` over ``lambda`` plus the tail part and tail exponent."""
    lam = np.exp(u)
    f = g * lam
    du = u[1] - u[0]
    body = du * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))
    head = 0.5 * lam[0] * (1.0 + g[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        p = -np.log(g[:, -1] / g[:, -2]) / du
        tail = np.where(p > 1.0, lam[-1] * g[:, -1] / (p - 1.0), np.inf)
    tail = np.where(g[:, -1] == 0.0, 0.0, tail)
    return head + body + tail, tail, p


def estimate_B1_general(
    mech: BranchingMechanism,
    spec: EnvironmentSpec,
    T_trunc: float,
    lambda_quad: LambdaQuadrature | None,
    n: int,
    seed: int,
    dt_max: float = 0.05,
    n_crosscheck: int = 16,
) -> Estimate:
    """``int_0^inf E[exp(-int_{-T}^0 psi0'(h_{s,0}(lambda)) ds)] dlambda`` under the tilted law.

    Paths ``Xi`` on ``[-T_trunc, 0]`` are negative-time extensions of tilted
    paths; every path is solved at all lambda nodes (common random numbers).
    Diagnostics in ``bias_notes``: the value on ``[-T/2, 0]``, the coarse-step
    quadrature, the finite-horizon proxy on ``[-1, 0]`` and the comparison of
    the per-path quadrature with the direct limit ``v(-T, inf)``.
    """
    if mech.is_degenerate:
        raise PreconditionError("psi0 vanishes identically: Grey's condition (H3) fails", "H3")
    if not check_xlogx(mech):
        raise PreconditionError("the x log x moment condition (H1) fails", "H1")
    _require_grey(mech)
    tilted = _require_strong(spec)
    quad = lambda_quad or LambdaQuadrature()
    u = quad.nodes()
    lam = np.exp(u)
    m, h = uniform_steps(T_trunc, dt_max)
    if m % 2:
        m += 1
        h = T_trunc / m
    one = max(0, m - int(round(1.0 / h)))
    grid = np.linspace(0.0, T_trunc, m + 1)
    check = np.array([0, m // 2, one], dtype=np.int64)
    X, X_half, X_one, X_coarse, tails, exps = [], [], [], [], [], []
    cross = []
    for stream in iter_blocks(tilted, h, n, seed):
        vals, lefts = materialize_block(stream, m)
        Xi = np.ascontiguousarray(-lefts[:, ::-1])
        Xl = np.ascontiguousarray(-vals[:, ::-1])
        Xl[:, 0] = Xi[:, 0]
        v_end = np.tile(lam, (stream.size, 1))
        _, A = batch_solve(mech, grid, Xi, Xl, v_end, check)
        g = np.exp(-A)
        full, tail, p = _lambda_integral(g[:, :, 0], u)
        X.append(full)
        tails.append(tail / full)
        exps.append(p)
        X_half.append(_lambda_integral(g[:, :, 1], u)[0])
        X_one.append(_lambda_integral(g[:, :, 2], u)[0])
        X_coarse.append(_lambda_integral(g[:, ::2, 0], u[::2])[0])
        if len(cross) < n_crosscheck:
            k = min(stream.size, n_crosscheck - len(cross))
            lim = batch_v_infinity(mech, grid, Xi[:k], Xl[:k])
            cross.extend(np.abs(full[:k] / lim - 1.0))
    X = np.concatenate(X)
    exps = np.concatenate(exps)
    if not np.all(np.isfinite(X)):
        bad = int(np.count_nonzero(~np.isfinite(X)))
        partial = np.where(np.isfinite(X), X, np.nan)
        warnings.warn(
            f"lambda-integrand does not decay faster than 1/lambda on {bad} paths "
            f"(partial mean over the others {np.nanmean(partial):.6g})",
            IntegrabilityWarning,
            stacklevel=2,
        )
    est = estimate_from_samples(X, seed, "B1_general")
    half = float(np.mean(np.concatenate(X_half)))
    coarse = float(np.mean(np.concatenate(X_coarse)))
    proxy = float(np.mean(np.concatenate(X_one)))
    tail_share = float(np.mean(np.concatenate(tails)))
    cross_max = float(max(cross)) if cross else float("nan")
    diag = {
        "value_half_horizon": half,
        "relative_change_half_horizon": abs(est.value - half) / abs(est.value),
        "value_coarse_quadrature": coarse,
        "relative_change_coarse_quadrature": abs(est.value - coarse) / abs(est.value),
        "finite_horizon_proxy_T1": proxy,
        "mean_tail_share": tail_share,
        "min_tail_exponent": float(np.min(exps)),
        "max_rel_diff_vs_limit": cross_max,
        "dt": h,
    }
    notes = (
        f"T/2 vs T relative change {diag['relative_change_half_horizon']:.3e}; "
        f"step 2*du vs du relative change {diag['relative_change_coarse_quadrature']:.3e}; "
        f"quadrature vs v(-T, inf) max relative difference {cross_max:.3e} on {len(cross)} paths; "
        f"tail share {tail_share:.3e}; finite-horizon proxy on [-1, 0]: {proxy:.6g}; dt={h}"
    )
    return Estimate(est.value, est.std_err, n, seed, "B1_general", notes, diag)


# ---------------------------------------------------------------------------
# Rate fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit ``log p(t) = intercept + rate t + poly_exponent log t``."""

    rate: float
    poly_exponent: float
    intercept: float
    residual_norm: float
    times_used: list
    rejected: list = field(default_factory=list)


def rate_regression(times, estimates, max_rel_err: float = 0.2) -> RateFit:
    """Fit the exponential rate and polynomial correction of a survival curve.

    ``estimates`` holds :class:`Estimate` objects or plain numbers.
    Nonpositive values are rejected and recorded; a positive value with
    relative standard error at or above ``max_rel_err`` violates the
    precondition.
    """
    times = np.asarray(times, dtype=float)
    if len(times) != len(estimates):
        raise ValueError("times and estimates differ in length")
    used_t, used_y, rejected = [], [], []
    for t, e in zip(times, estimates):
        value = e.value if isinstance(e, Estimate) else float(e)
        if not value > 0:
            rejected.append({"time": float(t), "value": value, "reason": "nonpositive estimate"})
            continue
        if isinstance(e, Estimate) and e.std_err / value >= max_rel_err:
            raise ValueError(f"estimate at t={t} has relative standard error {e.std_err / value:.3g} >= {max_rel_err}")
        used_t.append(float(t))
        used_y.append(math.log(value))
    if len(set(used_t)) < 4:
        raise ValueError("need at least 4 distinct usable time points")
    t = np.array(used_t)
    X = np.column_stack([np.ones_like(t), t, np.log(t)])
    coef, *_ = np.linalg.lstsq(X, np.array(used_y), rcond=None)
    resid = np.array(used_y) - X @ coef
    return RateFit(float(coef[1]), float(coef[2]), float(coef[0]), float(np.linalg.norm(resid)), used_t, rejected)


# ---------------------------------------------------------------------------
# Fluctuation quantities of the tilted environment
# ---------------------------------------------------------------------------


def _require_oscillating(spec: EnvironmentSpec, tolerance: float) -> None:
    d0 = laplace_exponent_derivatives(spec, 0.0)[0] if not spec.is_degenerate else spec.drift
    if abs(d0) > tolerance:
        raise PreconditionError(f"environment must oscillate (Phi'(0) = {d0:.3g})", "regime")


def reflected_sup_curve(spec_tilted: EnvironmentSpec, x: float, times, n: int, dt_max: float, seed: int, tolerance: float = 1e-9) -> list[Estimate]:
    """Frequency of ``{max over grid values on [0, t] < 0}`` for paths from ``x``, per time."""
    if not x < 0:
        raise ValueError("x must be negative")
    _require_oscillating(spec_tilted, tolerance)
    rec = stream_functionals(spec_tilted, times, n, dt_max, seed, c=0.0, x0=x)
    below = (rec.sup < 0).astype(float)
    notes = f"grid supremum with dt={rec.dt} (biased upward by the unobserved excursions)"
    return [estimate_from_samples(below[:, j], seed, "reflected_sup", notes) for j in range(below.shape[1])]


def reflected_sup_prob(spec_tilted: EnvironmentSpec, x: float, t: float, n: int, dt_max: float, seed: int) -> Estimate:
    """``P_x(sup_{[0,t]} xi < 0)`` for an oscillating environment, from grid values."""
    return reflected_sup_curve(spec_tilted, x, [t], n, dt_max, seed)[0]


@dataclass(frozen=True)
class LadderRenewal:
    """Skeleton estimates of the ascending ladder-height renewal function.

    ``U[k]`` estimates the expected number of strict ascending ladder points of
    the skeleton with height at most ``x[k]``, counting the origin.
    ``product`` is ``EH1 * U``, which does not depend on how ladder heights
    are normalized; ``refinement_change`` is its largest relative change when
    the skeleton step is doubled.
    """

    x: np.ndarray
    U: np.ndarray
    U_se: np.ndarray
    eh1: Estimate
    censored_fraction: float
    n_sequences: int
    skel_dt: float
    product: np.ndarray
    refinement_change: float | None

    def linear_bound_constant(self) -> float:
        """Smallest ``C`` with ``U(x) <= C x + 1`` on the grid."""
        return float(np.max((self.U - 1.0) / self.x))

    def is_subadditive(self, atol: float = 0.0) -> bool:
        """Grid check of ``U(x + y) <= U(x) + U(y)`` where ``x + y`` is a grid point."""
        xs = {round(float(v), 12): float(u) for v, u in zip(self.x, self.U)}
        for a, ua in xs.items():
            for b, ub in xs.items():
                s = round(a + b, 12)
                if s in xs and xs[s] > ua + ub + atol:
                    return False
        return True

    def r_squared(self, lo: float, hi: float) -> float:
        """Coefficient of determination of a linear fit of ``U`` on ``[lo, hi]``."""
        mask = (self.x >= lo) & (self.x <= hi)
        x, y = self.x[mask], self.U[mask]
        coef = np.polyfit(x, y, 1)
        resid = y - np.polyval(coef, x)
        return float(1.0 - np.sum(resid**2) / np.sum((y - y.mean()) ** 2))


def first_ladder_heights(spec: EnvironmentSpec, n: int, skel_dt: float, seed: int, max_steps: int = 100_000) -> tuple[np.ndarray, int]:
    """First strict ascending ladder heights of ``n`` skeleton walks from 0.

    Walks still nonpositive after ``max_steps`` are censored and dropped;
    returns ``(heights, censored_count)``.
    """
    heights = []
    censored = 0
    chunk = 256
    for b, size in enumerate(block_sizes(n)):
        g = child_generator(seed, b, 0)
        jr = [child_generator(seed, b, 1 + i) for i in range(len(spec.jumps))]
        pos = np.zeros(size)
        active = np.arange(size)
        steps = 0
        while active.size and steps < max_steps:
            L = min(chunk, max_steps - steps)
            cont, jump = draw_increments(spec, skel_dt, g, jr, (L, active.size))
            incr = cont if jump is None else cont + jump
            path = pos[active] + np.cumsum(incr, axis=0)
            hit = path > 0
            done = hit.any(axis=0)
            first = np.argmax(hit, axis=0)
            cols = np.nonzero(done)[0]
            heights.append(path[first[cols], cols])
            pos[active] = path[-1]
            active = active[~done]
            steps += L
        censored += active.size
    return np.concatenate(heights) if heights else np.zeros(0), censored


def _renewal_counts(heights: np.ndarray, x_grid: np.ndarray) -> np.ndarray:
    """Split ``heights`` into consecutive renewal sequences and count sums below each ``x``.

    A sequence ends as soon as its partial sum exceeds ``max(x_grid)``; an
    unfinished last sequence is discarded. Returns an array of shape
    ``(n_sequences, len(x_grid))``.
    """
    x_max = float(np.max(x_grid))
    counts = []
    row = np.zeros(len(x_grid))
    s = 0.0
    for hgt in heights:
        s += hgt
        if s > x_max:
            counts.append(row)
            row = np.zeros(len(x_grid))
            s = 0.0
        else:
            row += s <= x_grid
    return np.array(counts)


def _ladder_at(spec, x_grid, n, skel_dt, seed, max_steps):
    heights, censored = first_ladder_heights(spec, n, skel_dt, seed, max_steps)
    counts = _renewal_counts(heights, x_grid)
    if len(counts) < 2:
        raise InsufficientPathsError("fewer than 2 complete renewal sequences; increase n")
    U = 1.0 + counts.mean(axis=0)
    U_se = counts.std(axis=0, ddof=1) / math.sqrt(len(counts))
    eh1 = estimate_from_samples(heights, seed, "ladder_height", f"skeleton step {skel_dt}")
    return U, U_se, eh1, censored / n, len(counts)


def estimate_ladder_renewal(
    spec_tilted: EnvironmentSpec,
    x_grid,
    n: int,
    skel_dt: float,
    seed: int,
    max_steps: int = 100_000,
    refine: bool = True,
    tolerance: float = 1e-9,
) -> LadderRenewal:
    """Renewal function of the skeleton's ascending ladder heights.

    First ladder heights of independent skeleton walks are chained into
    renewal sequences; by the strong Markov property the partial sums are the
    successive ladder heights of a single walk. With ``refine`` the estimate
    is repeated with step ``2 skel_dt`` to report the refinement diagnostic.
    """
    _require_oscillating(spec_tilted, tolerance)
    x = np.asarray(x_grid, dtype=float)
    if np.any(x <= 0) or np.any(np.diff(x) <= 0):
        raise ValueError("x_grid must be positive and increasing")
    U, U_se, eh1, cens, nseq = _ladder_at(spec_tilted, x, n, skel_dt, seed, max_steps)
    product = eh1.value * U
    change = None
    if refine:
        U2, _, eh2, _, _ = _ladder_at(spec_tilted, x, n, 2.0 * skel_dt, derived_seed(seed, 2), max_steps)
        change = float(np.max(np.abs(eh2.value * U2 / product - 1.0)))
    return LadderRenewal(x, U, U_se, eh1, cens, nseq, skel_dt, product, change)


# ---------------------------------------------------------------------------
# Intermediate regime probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    """Normalized survival curve ``t^(1/2) exp(-Phi(1) t) p(t)`` with plateau diagnostics.

    ``b2_proxy`` maps each ``x`` to the finite-horizon proxy of the limit
    constant (renewal factor times the conditioned expectation) and
    ``constant_proxy`` to the implied limit of the normalized curve.
    """

    times: np.ndarray
    normalized: list
    slope: float
    trend_points: int
    trend_flagged: bool
    plateau: Estimate
    regime: str
    b2_proxy: dict = field(default_factory=dict)
    constant_proxy: dict = field(default_factory=dict)

    def plateau_positive(self, z: float = 1.959963984540054) -> bool:
        return self.plateau.value - z * self.plateau.std_err > 0


def _log_slope(times, values) -> float:
    coef = np.polyfit(np.log(times), np.log(values), 1)
    return float(coef[0])


def _conditioned_functional(mech, tilted, x, T, n, dt_max, seed, min_accept, min_rate):
    """Conditioned mean of ``int_0^inf g(lambda) dlambda`` for ``Xi`` from ``-x`` with positive grid infimum."""
    if mech.is_stable:
        C, beta = mech.stable
        rec = stream_functionals(tilted, [T], n, dt_max, seed, c=beta, x0=x)
        ok = rec.sup[:, 0] < 0
        vals = math.exp(x) * (beta * C * rec.I[ok, 0]) ** (-1.0 / beta)
    else:
        m, h = uniform_steps(T, dt_max)
        grid = np.linspace(0.0, T, m + 1)
        vals_l, oks = [], []
        for stream in iter_blocks(tilted, h, n, seed):
            v, lf = materialize_block(stream, m, x)
            keep = np.maximum(v.max(axis=1), lf.max(axis=1)) < 0
            oks.append(keep)
            if keep.any():
                Xi = np.ascontiguousarray(-lf[keep, ::-1])
                Xl = np.ascontiguousarray(-v[keep, ::-1])
                Xl[:, 0] = Xi[:, 0]
                vals_l.append(math.exp(x) * batch_v_infinity(mech, grid, Xi, Xl))
        ok = np.concatenate(oks)
        vals = np.concatenate(vals_l) if vals_l else np.zeros(0)
    rate = float(ok.mean())
    if vals.size < min_accept or rate < min_rate:
        raise InsufficientPathsError(f"conditioning kept {vals.size} of {n} paths (rate {rate:.3g})")
    return estimate_from_samples(vals, seed, "conditioned_functional", f"rejection conditioning on [0, {T}], acceptance {rate:.4f}"), rate


def intermediate_constant_probe(
    mech: BranchingMechanism,
    spec: EnvironmentSpec,
    z0: float,
    x,
    t_grid,
    n: int,
    seed: int,
    dt_max: float = 0.01,
    trend_points: int | None = None,
    trend_tol: float = 0.1,
    cond_horizon: float = 50.0,
    cond_n: int | None = None,
    min_accept: int = 100,
    min_accept_rate: float = 1e-3,
    ladder_n: int = 20_000,
    skel_dt: float = 0.01,
    method: str = "auto",
) -> ProbeResult:
    """Normalized survival curve of the intermediate regime with plateau diagnostics.

    The curve uses the Esscher route on common paths. The trend is the
    least-squares slope of the log curve against ``log t`` over the last
    ``trend_points`` times (default: the last half) and is flagged when its
    magnitude exceeds ``trend_tol``. The plateau averages those points per
    replica. For each ``x < 0`` (``x=None`` skips this step) the limit constant
    is probed by rejection conditioning of tilted paths on a finite horizon,
    combined with the skeleton renewal function.
    """
    times = np.asarray(t_grid, dtype=float)
    if times.size < 2:
        raise ValueError("t_grid needs at least 2 points")
    phi1 = _require_theta_one(spec)
    _require_grey(mech)
    regime = classify_regime(spec).tag
    if regime != "intermediate_subcritical":
        warnings.warn(f"intermediate probe run on a {regime} environment", RuntimeWarning, stacklevel=2)
    tilted = esscher_tilt(spec, 1.0)
    xi, h = _h_infinity(mech, tilted, times, n, dt_max, seed, method)
    y = np.sqrt(times) * np.exp(-xi) * -np.expm1(-z0 * h)
    normalized = [estimate_from_samples(y[:, j], seed, "normalized_survival", f"dt={dt_max}") for j in range(times.size)]
    k = trend_points or math.ceil(times.size / 2)
    if not 2 <= k <= times.size:
        raise ValueError("trend_points must be between 2 and len(t_grid)")
    vals = np.array([e.value for e in normalized])
    if np.any(vals[-k:] <= 0):
        slope = math.nan
    else:
        slope = _log_slope(times[-k:], vals[-k:])
    plateau = estimate_from_samples(y[:, -k:].mean(axis=1), seed, "plateau", f"mean of the last {k} normalized values")
    flagged = not (abs(slope) < trend_tol)
    b2, const = {}, {}
    if x is not None:
        xs = [float(v) for v in np.atleast_1d(x)]
        if any(v >= 0 for v in xs):
            raise ValueError("x must be negative")
        _, phi2 = laplace_exponent_derivatives(spec, 1.0)
        ladder = estimate_ladder_renewal(tilted, sorted(-v for v in xs), ladder_n, skel_dt, derived_seed(seed, 7), refine=False)
        Umap = dict(zip(ladder.x.tolist(), ladder.U.tolist()))
        Use = dict(zip(ladder.x.tolist(), ladder.U_se.tolist()))
        for v in xs:
            cond, _ = _conditioned_functional(
                mech, tilted, v, cond_horizon, cond_n or n, dt_max, derived_seed(seed, 11), min_accept, min_accept_rate
            )
            U = Umap[-v]
            val = U * cond.value
            se = math.hypot(U * cond.std_err, cond.value * Use[-v])
            b2[v] = Estimate(val, se, cond.n, seed, "b2_proxy", cond.bias_notes + f"; skeleton step {skel_dt}")
            factor = z0 * ladder.eh1.value * math.sqrt(2.0 / (math.pi * phi2))
            const[v] = Estimate(
                factor * val,
                factor * math.hypot(se, val * ladder.eh1.rel_err),
                cond.n,
                seed,
                "limit_constant_proxy",
                "finite-horizon conditioning, moderate |x|; not asserted to converge",
            )
    return ProbeResult(times, normalized, slope, k, flagged, plateau, regime, b2, const)


# ---------------------------------------------------------------------------
# Q-process identity
# ---------------------------------------------------------------------------


def qprocess_laplace_check(
    mech: BranchingMechanism,
    spec: EnvironmentSpec,
    z0: float,
    t: float,
    lam: float,
    n: int,
    seed: int,
    dt: float = 1e-3,
    dt_max: float = 1e-3,
    stable_eps: float = STABLE_EPS,
) -> tuple[Estimate, Estimate]:
    """Two routes to the Laplace transform of the size-biased population.

    ``lhs`` averages ``(Z_t / z) exp(-Phi(1) t - lam Z_t)`` over forward
    simulations; ``rhs`` averages
    ``exp(-z h_{0,t}(lam) - int_0^t psi0'(h_{s,t}(lam)) ds)`` over tilted
    environment paths, with an independent master seed.
    """
    if not (z0 > 0 and lam >= 0):
        raise ValueError("need z0 > 0 and lam >= 0")
    phi1 = _require_theta_one(spec)
    regime = classify_regime(spec).tag
    if regime not in ("strongly_subcritical", "intermediate_subcritical"):
        raise PreconditionError(f"Q-process check needs a strongly or intermediate subcritical environment, got {regime}", "regime")
    if mech.is_degenerate:
        raise DegenerateMechanismError("psi0 vanishes identically")
    res = simulate_cble_batch(mech, spec, z0, t, n, dt, seed, stable_eps=stable_eps)
    ylhs = (res.mass / z0) * math.exp(-phi1 * t) * np.exp(-lam * res.mass)
    lhs = estimate_from_samples(ylhs, seed, "qprocess_lhs", f"forward simulation dt={dt}; truncations={res.truncations}")
    seed2 = derived_seed(seed, 1)
    tilted = esscher_tilt(spec, 1.0)
    if lam == 0.0:
        yrhs = np.ones(n)
    elif mech.is_stable:
        C, beta = mech.stable
        rec = stream_functionals(tilted, [t], n, dt_max, seed2, c=-beta)
        lt = lam * np.exp(rec.xi[:, 0])
        base = beta * C * rec.I[:, 0]
        h0 = (lt ** (-beta) + base) ** (-1.0 / beta)
        yrhs = np.exp(-z0 * h0) * (1.0 + lt**beta * base) ** (-1.0 / beta - 1.0)
    else:
        m, h = uniform_steps(t, dt_max)
        grid = np.linspace(0.0, t, m + 1)
        parts = []
        for stream in iter_blocks(tilted, h, n, seed2):
            v, lf = materialize_block(stream, m)
            v_end = (lam * np.exp(v[:, -1]))[:, None]
            out_v, out_A = batch_solve(mech, grid, v, lf, v_end, [0])
            parts.append(np.exp(-z0 * out_v[:, 0, 0] - out_A[:, 0, 0]))
        yrhs = np.concatenate(parts)
    rhs = estimate_from_samples(yrhs, seed2, "qprocess_rhs", f"tilted environment dt={dt_max}")
    return lhs, rhs


__all__ = [
    "Estimate",
    "InsufficientPathsError",
    "IntegrabilityWarning",
    "LadderRenewal",
    "LambdaQuadrature",
    "PreconditionError",
    "ProbeResult",
    "RateFit",
    "TruncationError",
    "agree",
    "estimate_B1_general",
    "estimate_B1_stable",
    "estimate_ladder_renewal",
    "intermediate_constant_probe",
    "joint_std_err",
    "qprocess_laplace_check",
    "rate_regression",
    "reflected_sup_curve",
    "reflected_sup_prob",
    "stream_functionals",
    "survival_curve_is",
    "survival_curve_quenched",
    "survival_is_esscher",
    "survival_mc_direct",
    "survival_mc_quenched",
]
