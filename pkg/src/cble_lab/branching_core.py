"""Branching mechanisms, hypothesis checks and the quenched cumulant solver.

Conventions
-----------
``v`` denotes the cumulant ``v_t(s, lam, xi)``, solving

    dv/ds = exp(xi_s) * psi0(v * exp(-xi_s)),   v(t) = lam,

backward in ``s``. The semigroup is ``h_{s,t}(lam) = exp(-xi_s) v_t(s, lam exp(xi_t))``
and the quenched survival probability is ``1 - exp(-z h_{0,t}(inf))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import _kernels as K
from .path_sim import EnvironmentPath, exponential_functional

SOLVER_RTOL = 1e-9
RES_TOL = 1e-7
LIMIT_TOL = 1e-8
MAX_DOUBLINGS = 40
LAMBDA_START = 1.0
MAX_REJECTIONS = 60


class DegenerateMechanismError(ValueError):
    """The mechanism has ``psi0 == 0`` (no Gaussian part, no jumps)."""


class SolverFailure(RuntimeError):
    """The cumulant solver could not meet its tolerance; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractViolation(RuntimeError):
    """A solution left the positive half-line."""


class LimitFailure(RuntimeError):
    """The lambda -> infinity extrapolation did not converge or lost monotonicity."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerTail:
    """Parametric Lévy tail ``coef * u**(-index) * log(u)**(-log_power)`` on ``(lower, inf)``.

    Finite activity requires ``lower > 0`` (and ``lower > 1`` when
    ``log_power != 0``).
    """

    coef: float
    index: float
    lower: float
    log_power: float = 0.0

    def __post_init__(self):
        if not (self.coef > 0 and self.lower > 0):
            raise ValueError("tail coefficient and lower cutoff must be positive")
        if self.log_power != 0 and self.lower <= 1:
            raise ValueError("log-modulated tails need lower > 1")
        if not self.has_finite_mean():
            raise ValueError("tail violates the integrability condition on z ^ z^2")

    def density(self, u):
        u = np.asarray(u, dtype=float)
        out = self.coef * u ** (-self.index)
        if self.log_power:
            out = out * np.log(u) ** (-self.log_power)
        return out

    def has_finite_mean(self) -> bool:
        # int^inf u * u^-index (log u)^-p du converges iff index > 2, or index == 2 and p > 1
        return self.index > 2 or (self.index == 2 and self.log_power > 1)

    def has_xlogx(self) -> bool:
        # int^inf u log u u^-index (log u)^-p du converges iff index > 2, or index == 2 and p > 2
        return self.index > 2 or (self.index == 2 and self.log_power > 2)

    def integrate(self, fn) -> float:
        val, _ = integrate.quad(lambda u: fn(u) * float(self.density(u)), self.lower, np.inf, limit=400, epsabs=1e-13, epsrel=1e-11)
        return val


@dataclass(frozen=True)
class BranchingMechanism:
    """Branching mechanism ``psi(lam) = psi'(0+) lam + psi0(lam)``.

    Parameters
    ----------
    psi_prime_0 : float
        Linear coefficient ``psi'(0+)``.
    gamma_sq : float
        Gaussian coefficient; contributes ``gamma_sq * lam**2`` to ``psi0``.
    atoms : tuple of (x, mass)
        Atoms of the Lévy measure ``mu`` on ``(0, inf)``.
    stable : (C, beta) or None
        When set, ``psi0(lam) = C * lam**(1 + beta)`` and the other
        demographic fields must be empty.
    tails : tuple of PowerTail
        Optional parametric tails (scalar evaluation only).
    """

    psi_prime_0: float = 0.0
    gamma_sq: float = 0.0
    atoms: tuple[tuple[float, float], ...] = field(default_factory=tuple)
    stable: tuple[float, float] | None = None
    tails: tuple[PowerTail, ...] = field(default_factory=tuple)

    def __post_init__(self):
        atoms = tuple((float(x), float(m)) for x, m in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "tails", tuple(self.tails))
        if not (self.gamma_sq >= 0 and math.isfinite(self.gamma_sq)):
            raise ValueError("gamma_sq must be finite and nonnegative")
        if not math.isfinite(self.psi_prime_0):
            raise ValueError("psi_prime_0 must be finite")
        for x, m in atoms:
            if not (x > 0 and m > 0 and math.isfinite(x) and math.isfinite(m)):
                raise ValueError("atoms need positive finite position and mass")
        if self.stable is not None:
            C, beta = self.stable
            if not (C > 0 and 0 < beta <= 1):
                raise ValueError("stable tag needs C > 0 and beta in (0, 1]")
            if self.gamma_sq or atoms or self.tails:
                raise ValueError("a stable-tagged mechanism carries no other demographic terms")
            object.__setattr__(self, "stable", (float(C), float(beta)))

    @classmethod
    def stable_mechanism(cls, C: float, beta: float, psi_prime_0: float = 0.0) -> "BranchingMechanism":
        return cls(psi_prime_0=psi_prime_0, stable=(C, beta))

    @property
    def is_degenerate(self) -> bool:
        return self.stable is None and self.gamma_sq == 0 and not self.atoms and not self.tails

    @property
    def is_stable(self) -> bool:
        return self.stable is not None

    def kernel_params(self):
        """Arguments ``(gsq, ax, am, sc, sb)`` for the compiled kernels."""
        if self.tails:
            raise NotImplementedError("parametric tails are evaluated by quadrature only; the ODE kernel needs atoms")
        ax = np.array([x for x, _ in self.atoms], dtype=float)
        am = np.array([m for _, m in self.atoms], dtype=float)
        if self.stable is not None:
            return 0.0, ax, am, self.stable[0], self.stable[1]
        return float(self.gamma_sq), ax, am, 0.0, 0.0

    def to_config(self) -> dict:
        out = {"psi_prime_0": self.psi_prime_0, "gamma_sq": self.gamma_sq, "atoms": [{"x": x, "mass": m} for x, m in self.atoms]}
        if self.stable is not None:
            out["stable"] = {"C": self.stable[0], "beta": self.stable[1]}
        return out


def mechanism_from_config(section: dict) -> BranchingMechanism:
    allowed = {"psi_prime_0", "gamma_sq", "atoms", "stable"}
    unknown = set(section) - allowed
    if unknown:
        raise KeyError(f"unknown mechanism keys: {sorted(unknown)}")
    atoms = []
    for a in section.get("atoms", []) or []:
        extra = set(a) - {"x", "mass"}
        if extra:
            raise KeyError(f"unknown atom keys: {sorted(extra)}")
        atoms.append((float(a["x"]), float(a["mass"])))
    stable = section.get("stable")
    if stable is not None:
        extra = set(stable) - {"C", "beta"}
        if extra:
            raise KeyError(f"unknown stable keys: {sorted(extra)}")
        stable = (float(stable["C"]), float(stable["beta"]))
    return BranchingMechanism(float(section.get("psi_prime_0", 0.0)), float(section.get("gamma_sq", 0.0)), tuple(atoms), stable)


def _e_minus_one_plus(y: float) -> float:
    """``exp(-y) - 1 + y`` without cancellation for small ``y``."""
    if y < 1e-3:
        return y * y * (0.5 - y * (1.0 / 6.0 - y * (1.0 / 24.0 - y / 120.0)))
    return math.exp(-y) - 1.0 + y


def psi0(mech: BranchingMechanism, lam: float) -> float:
    """``psi0(lam) = gamma^2 lam^2 + int (e^{-lam x} - 1 + lam x) mu(dx)``."""
    lam = float(lam)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    if mech.stable is not None:
        C, beta = mech.stable
        return C * lam ** (1.0 + beta)
    val = mech.gamma_sq * lam * lam
    for x, m in mech.atoms:
        val += m * _e_minus_one_plus(lam * x)
    for tail in mech.tails:
        val += tail.integrate(lambda u: _e_minus_one_plus(lam * u))
    return val


def psi0_prime(mech: BranchingMechanism, lam: float) -> float:
    """``psi0'(lam) = 2 gamma^2 lam + int (1 - e^{-lam x}) x mu(dx)``."""
    lam = float(lam)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    if mech.stable is not None:
        C, beta = mech.stable
        return C * (1.0 + beta) * lam**beta
    val = 2.0 * mech.gamma_sq * lam
    for x, m in mech.atoms:
        val += m * x * (-math.expm1(-lam * x))
    for tail in mech.tails:
        val += tail.integrate(lambda u: u * (-math.expm1(-lam * u)))
    return val


def psi(mech: BranchingMechanism, lam: float) -> float:
    return mech.psi_prime_0 * lam + psi0(mech, lam)


# ---------------------------------------------------------------------------
# Hypothesis checks
# ---------------------------------------------------------------------------


def check_grey(mech: BranchingMechanism, lambda_max: float = 1e12) -> tuple[bool, dict]:
    """Decide convergence of ``int_1^inf dlam / psi0(lam)``.

    The integral is computed on ``[1, lambda_max]`` by adaptive quadrature in
    ``log lam`` and the growth exponent of ``psi0`` is fitted on the last
    decade. The integral converges iff that exponent exceeds 1.
    """
    if mech.is_degenerate:
        raise DegenerateMechanismError("psi0 vanishes identically")
    partial, _ = integrate.quad(lambda y: math.exp(y) / psi0(mech, math.exp(y)), 0.0, math.log(lambda_max), limit=400)
    hi = lambda_max
    lo = lambda_max / 10.0
    exponent = math.log(psi0(mech, hi) / psi0(mech, lo)) / math.log(10.0)
    ok = exponent > 1.0 + 1e-3
    return ok, {"partial_integral": partial, "tail_exponent": exponent, "lambda_max": lambda_max}


def check_xlogx(mech: BranchingMechanism) -> bool:
    """True iff ``int_1^inf u log(u) mu(du) < inf``."""
    return all(t.has_xlogx() for t in mech.tails)


def check_lower_bound(mech: BranchingMechanism, C: float, beta: float, lambda_grid) -> bool:
    """Grid certificate of ``psi0(lam) >= C lam**(1 + beta)``."""
    if not (C > 0 and 0 < beta <= 1):
        raise ValueError("need C > 0 and beta in (0, 1]")
    for lam in np.asarray(lambda_grid, dtype=float):
        if psi0(mech, lam) < C * lam ** (1.0 + beta) * (1.0 - 1e-12):
            return False
    return True


# ---------------------------------------------------------------------------
# Cumulant solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CumulantSolution:
    """Backward solution on the grid of ``path`` restricted to ``[s, t]``.

    ``values`` are the cumulant ``v`` at ``grid`` (absolute times);
    ``dv_dlambda`` solves the linearized equation and ``psi_integral`` is
    ``int_u^t psi0'(exp(-xi) v) dr``. ``h`` holds the semigroup values
    ``exp(-xi_u) v(u)``.
    """

    grid: np.ndarray
    values: np.ndarray
    lambda_terminal: float
    dv_dlambda: np.ndarray
    psi_integral: np.ndarray
    h: np.ndarray
    solver_stats: dict

    @property
    def v0(self) -> float:
        return float(self.values[0])


RESIDUAL_PANELS = 8


def _panel_refine(path: EnvironmentPath, panels: int = RESIDUAL_PANELS):
    """Insert ``2 * panels - 1`` interior points per cell (same piecewise-linear path).

    Composite Simpson's rule over the refined points then estimates the
    integral form with ``panels`` Simpson panels per grid cell.
    """
    t = path.grid_times
    k = 2 * panels
    frac = np.arange(k) / k
    n = len(t) - 1
    times = np.empty(n * k + 1)
    vals = np.empty(n * k + 1)
    left = np.empty(n * k + 1)
    a, b = path.values[:-1], path.left_values[1:]
    times[:-1] = (t[:-1, None] + frac[None, :] * np.diff(t)[:, None]).ravel()
    inner = (a[:, None] + frac[None, :] * (b - a)[:, None]).ravel()
    vals[:-1] = inner
    left[:-1] = inner
    # grid points keep their own left limits (jumps live there)
    left[0:-1:k] = path.left_values[:-1]
    times[-1], vals[-1], left[-1] = t[-1], path.values[-1], path.left_values[-1]
    return times, vals, left, k


def _raise_status(status: int, diag: dict):
    if status == K.STEP_UNDERFLOW:
        raise SolverFailure("step size underflow in the cumulant solver", diag)
    if status == K.NEGATIVE_STATE:
        raise ContractViolation(f"cumulant left the positive half-line: {diag}")
    if status == K.LIMIT_NOT_CONVERGED:
        raise LimitFailure("lambda -> infinity limit did not converge", diag)
    if status == K.NON_MONOTONE:
        raise LimitFailure("iterates lost monotonicity in lambda", diag)
    if status != K.OK:
        raise SolverFailure(f"solver status {status}", diag)


def solve_cumulant(
    mech: BranchingMechanism,
    path: EnvironmentPath,
    s: float,
    t: float,
    lam: float,
    rtol: float = SOLVER_RTOL,
    res_tol: float = RES_TOL,
) -> CumulantSolution:
    """Solve the backward cumulant equation on ``[s, t]`` with ``v(t) = lam``.

    Raises
    ------
    SolverFailure
        On step-size underflow or when the integral-form residual exceeds ``res_tol``.
    ContractViolation
        If a negative state is produced.
    """
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError("terminal lambda must be positive and finite")
    if mech.is_degenerate:
        raise DegenerateMechanismError("psi0 vanishes identically")
    sub = path.restrict(s, t)
    times, vals, left, k = _panel_refine(sub)
    gsq, ax, am, sc, sb = mech.kernel_params()
    m = len(times)
    out_v, out_w, out_A = np.empty(m), np.empty(m), np.empty(m)
    stats = np.zeros(3, dtype=np.int64)
    _, _, _, status = K.integrate_path(times, vals, left, float(lam), gsq, ax, am, sc, sb, rtol, MAX_REJECTIONS, True, out_v, out_w, out_A, stats)
    diag = {"steps": int(stats[0]), "rejected_steps": int(stats[1]), "implicit_substeps": int(stats[2]), "seed": path.seed}
    _raise_status(status, diag)
    if np.any(out_v <= 0):
        raise ContractViolation("non-positive cumulant value")
    # integral-form residual in h-units by composite Simpson's rule on each cell;
    # the integrand uses right values at a panel's left end and left limits at its right end
    f_val = np.exp(vals) * np.array([psi0(mech, v * math.exp(-x)) for v, x in zip(out_v, vals)])
    f_left = np.exp(left) * np.array([psi0(mech, v * math.exp(-x)) for v, x in zip(out_v, left)])
    h = times[2::2] - times[0:-2:2]
    panel = h / 6.0 * (f_val[0:-2:2] + 4.0 * f_val[1::2] + f_left[2::2])
    cell = panel.reshape(-1, k // 2).sum(axis=1)
    tail_int = np.concatenate((np.cumsum(cell[::-1])[::-1], [0.0]))
    v_grid = out_v[0::k]
    xi_grid = vals[0::k]
    resid = np.exp(-xi_grid) * (v_grid - lam + tail_int)
    scale = np.maximum(1.0, np.exp(-xi_grid) * v_grid)
    max_res = float(np.max(np.abs(resid) / scale))
    diag["max_residual"] = max_res
    if max_res > res_tol:
        raise SolverFailure(f"integral-form residual {max_res:.3e} exceeds {res_tol:.1e}", diag)
    grid = sub.grid_times + sub.time_offset
    return CumulantSolution(
        grid=grid,
        values=v_grid,
        lambda_terminal=float(lam),
        dv_dlambda=out_w[0::k],
        psi_integral=out_A[0::k],
        h=np.exp(-xi_grid) * v_grid,
        solver_stats=diag,
    )


def h_semigroup(mech: BranchingMechanism, path: EnvironmentPath, s: float, t: float, lam: float, **kw) -> float:
    """``h_{s,t}(lam) = exp(-xi_s) v_t(s, lam exp(xi_t))``."""
    if mech.is_stable:
        C, beta = mech.stable
        v = stable_cumulant_closed_form(C, beta, path, s, t, lam * math.exp(path.value_at(t)))
    else:
        v = solve_cumulant(mech, path, s, t, lam * math.exp(path.value_at(t)), **kw).v0
    return math.exp(-path.value_at(s)) * v


def stable_cumulant_closed_form(C: float, beta: float, path: EnvironmentPath, s: float, t: float, lam: float) -> float:
    """``v_t(s, lam) = (lam**-beta + beta C I_{s,t})**(-1/beta)``; ``lam = inf`` allowed."""
    if not (C > 0 and 0 < beta <= 1):
        raise ValueError("need C > 0 and beta in (0, 1]")
    I = exponential_functional(path, -beta, s, t)
    base = beta * C * I
    if math.isinf(lam):
        return base ** (-1.0 / beta) if base > 0 else math.inf
    return (lam ** (-beta) + base) ** (-1.0 / beta)


def v_infinity(
    mech: BranchingMechanism,
    path: EnvironmentPath,
    s: float,
    t: float,
    rtol: float = SOLVER_RTOL,
    limit_tol: float = LIMIT_TOL,
    max_doublings: int = MAX_DOUBLINGS,
    lam_start: float = LAMBDA_START,
    factor: float = 2.0,
) -> tuple[float, dict]:
    """``lim_{lam -> inf} v_t(s, lam)`` by geometric growth of the terminal value."""
    if mech.is_degenerate:
        raise DegenerateMechanismError("psi0 vanishes identically")
    sub = path.restrict(s, t)
    gsq, ax, am, sc, sb = mech.kernel_params()
    stats = np.zeros(3, dtype=np.int64)
    trace = np.zeros(max_doublings + 1)
    val, raw, it, status = K.v_infinity(
        sub.grid_times, sub.values, sub.left_values, gsq, ax, am, sc, sb, rtol, MAX_REJECTIONS,
        float(lam_start), float(factor), int(max_doublings), float(limit_tol), stats, trace,
    )
    diag = {
        "iterations": int(it),
        "raw_last": float(raw),
        "iterates": trace[: it + 1].tolist(),
        "steps": int(stats[0]),
        "rejected_steps": int(stats[1]),
        "seed": path.seed,
    }
    _raise_status(status, diag)
    return float(val), diag


def cumulant_h_infinity(mech: BranchingMechanism, path: EnvironmentPath, t: float, method: str = "auto", **kw) -> float:
    """``h_{0,t}(inf)``; closed form for stable-tagged mechanisms unless ``method='ode'``."""
    if method not in ("auto", "ode", "closed_form"):
        raise ValueError("method must be 'auto', 'ode' or 'closed_form'")
    if mech.is_degenerate:
        raise DegenerateMechanismError("psi0 vanishes identically; Grey's condition fails")
    x0 = path.value_at(0.0)
    if mech.is_stable and method != "ode":
        C, beta = mech.stable
        return math.exp(-x0) * stable_cumulant_closed_form(C, beta, path, 0.0, t, math.inf)
    if method == "closed_form":
        raise ValueError("closed form requires a stable-tagged mechanism")
    val, _ = v_infinity(mech, path, 0.0, t, **kw)
    return math.exp(-x0) * val


def quenched_survival(mech: BranchingMechanism, path: EnvironmentPath, z: float, t: float, **kw) -> float:
    """``1 - exp(-z h_{0,t}(inf))``."""
    if not z > 0:
        raise ValueError("z must be positive")
    return float(-math.expm1(-z * cumulant_h_infinity(mech, path, t, **kw)))


# ---------------------------------------------------------------------------
# Batch helpers used by the estimators
# ---------------------------------------------------------------------------


def stable_h_inf_from_functional(C: float, beta: float, I: np.ndarray, x0=0.0) -> np.ndarray:
    """``exp(-x0) (beta C I)**(-1/beta)`` elementwise."""
    return np.exp(-np.asarray(x0)) * (beta * C * np.asarray(I)) ** (-1.0 / beta)


def batch_v_infinity(mech: BranchingMechanism, times, values, left, **kw) -> np.ndarray:
    """``v(times[0])`` in the limit of infinite terminal value, for every row."""
    gsq, ax, am, sc, sb = mech.kernel_params()
    n = values.shape[0]
    out = np.empty(n)
    stats = np.zeros(3, dtype=np.int64)
    trace = np.zeros(kw.get("max_doublings", MAX_DOUBLINGS) + 1)
    for i in range(n):
        val, raw, it, status = K.v_infinity(
            times, values[i], left[i], gsq, ax, am, sc, sb, kw.get("rtol", SOLVER_RTOL), MAX_REJECTIONS,
            float(kw.get("lam_start", LAMBDA_START)), float(kw.get("factor", 2.0)),
            int(kw.get("max_doublings", MAX_DOUBLINGS)), float(kw.get("limit_tol", LIMIT_TOL)), stats, trace,
        )
        _raise_status(status, {"row": i, "iterations": int(it)})
        out[i] = val
    return out


def batch_solve(mech: BranchingMechanism, times, values, left, v_end, check_idx, rtol: float = SOLVER_RTOL):
    """Solve every row for each terminal value; returns ``(v, A)`` at ``check_idx``."""
    gsq, ax, am, sc, sb = mech.kernel_params()
    n, Kn = v_end.shape
    check_idx = np.asarray(check_idx, dtype=np.int64)
    out_v = np.empty((n, Kn, len(check_idx)))
    out_A = np.empty((n, Kn, len(check_idx)))
    status = np.zeros(n, dtype=np.int64)
    K.solve_batch(times, values, left, np.ascontiguousarray(v_end, dtype=float), gsq, ax, am, sc, sb, rtol, MAX_REJECTIONS, check_idx, out_v, out_A, status)
    bad = np.nonzero(status)[0]
    if len(bad):
        _raise_status(int(status[bad[0]]), {"row": int(bad[0])})
    return out_v, out_A


__all__ = [
    "BranchingMechanism",
    "CumulantSolution",
    "PowerTail",
    "check_grey",
    "check_lower_bound",
    "check_xlogx",
    "cumulant_h_infinity",
    "psi0",
    "psi0_prime",
    "quenched_survival",
    "solve_cumulant",
    "stable_cumulant_closed_form",
]
