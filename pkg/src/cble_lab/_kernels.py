"""Compiled kernels for the backward cumulant equation.

The equation ``dv/du = exp(xi_u) * psi0(v * exp(-xi_u))`` is integrated
backward in time, cell by cell, on a grid where ``xi`` is linear inside each
cell (``vals[k]`` at the left end, ``left[k+1]`` at the right end). Steps
never cross grid points, so jump epochs are always breakpoints.

Alongside ``v`` the kernel carries

* ``w``: solution of the linearized equation, ``w = dv/dlambda``;
* ``A``: the accumulated integral of ``psi0'(v * exp(-xi))`` from ``u`` to the
  terminal time.

The mechanism is passed as ``(gsq, ax, am, sc, sb)``: Gaussian coefficient,
atom positions, atom masses, stable coefficient and stable index (``sc = 0``
disables the stable term).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

OK = 0
STEP_UNDERFLOW = 2
NEGATIVE_STATE = 3
LIMIT_NOT_CONVERGED = 4
NON_MONOTONE = 5

# Dormand–Prince 5(4) tableau
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = 9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)
_C2, _C3, _C4, _C5 = 0.2, 0.3, 0.8, 8.0 / 9.0


@njit(cache=True)
def psi0_nb(x, gsq, ax, am, sc, sb):
    r = gsq * x * x
    for i in range(ax.shape[0]):
        y = x * ax[i]
        if y < 1e-3:
            r += am[i] * y * y * (0.5 - y * (1.0 / 6.0 - y * (1.0 / 24.0 - y / 120.0)))
        else:
            r += am[i] * (math.exp(-y) - 1.0 + y)
    if sc > 0.0:
        r += sc * x ** (1.0 + sb)
    return r


@njit(cache=True)
def psi0p_nb(x, gsq, ax, am, sc, sb):
    r = 2.0 * gsq * x
    for i in range(ax.shape[0]):
        r += am[i] * ax[i] * (-math.expm1(-x * ax[i]))
    if sc > 0.0 and x > 0.0:
        r += sc * (1.0 + sb) * x**sb
    return r


@njit(cache=True)
def _rhs(xi, v, w, gsq, ax, am, sc, sb):
    e = math.exp(xi)
    hv = v / e
    p = psi0p_nb(hv, gsq, ax, am, sc, sb)
    return e * psi0_nb(hv, gsq, ax, am, sc, sb), p * w, -p


@njit(cache=True)
def _implicit_cell(xa, slope, ta, u, v, w, A, gsq, ax, am, sc, sb, rtol, stats):
    """Backward-Euler with Richardson extrapolation over ``[ta, u]`` (rescue path)."""
    span = u - ta
    n_sub = 4
    prev_v, prev_w, prev_A = -1.0, -1.0, -1.0
    while n_sub <= (1 << 22):
        hs = span / n_sub
        vv, ww, AA = v, w, A
        uu = u
        for _ in range(n_sub):
            uu -= hs
            xi = xa + slope * (uu - ta)
            e = math.exp(xi)
            # Newton on g(x) = x - vv + hs * e * psi0(x / e), increasing in x, root in (0, vv]
            lo, hi = 0.0, vv
            x = vv
            for _it in range(200):
                g = x - vv + hs * e * psi0_nb(x / e, gsq, ax, am, sc, sb)
                if g > 0.0:
                    hi = x
                else:
                    lo = x
                dg = 1.0 + hs * psi0p_nb(x / e, gsq, ax, am, sc, sb)
                xn = x - g / dg
                if not (lo < xn < hi):
                    xn = 0.5 * (lo + hi)
                if abs(xn - x) <= 1e-15 * max(abs(x), 1e-300):
                    x = xn
                    break
                x = xn
            p = psi0p_nb(x / e, gsq, ax, am, sc, sb)
            vv = x
            ww = ww / (1.0 + hs * p)
            AA = AA + hs * p
            stats[2] += 1
        ev, ew, eA = 2.0 * vv - prev_v, 2.0 * ww - prev_w, 2.0 * AA - prev_A
        if prev_v > 0.0 and abs(vv - prev_v) <= rtol * abs(vv) and abs(AA - prev_A) <= rtol * max(1.0, abs(AA)):
            return ev, ew, eA, OK
        prev_v, prev_w, prev_A = vv, ww, AA
        n_sub *= 2
    return prev_v, prev_w, prev_A, STEP_UNDERFLOW


@njit(cache=True)
def integrate_path(times, vals, left, v_end, gsq, ax, am, sc, sb, rtol, max_rej, record, out_v, out_w, out_A, stats):
    """Integrate from ``times[-1]`` back to ``times[0]``.

    Returns ``(v, w, A, status)`` at ``times[0]``. When ``record`` is true the
    state is written at every grid index into ``out_v``, ``out_w``, ``out_A``.
    ``stats`` accumulates ``[accepted, rejected, implicit substeps]``.
    """
    m = times.shape[0] - 1
    v = v_end
    w = 1.0
    A = 0.0
    if record:
        out_v[m] = v
        out_w[m] = w
        out_A[m] = A
    atol_v = 1e-300
    atol_w = rtol * 1e-6
    atol_A = rtol
    h_nat = 0.0
    for k in range(m - 1, -1, -1):
        ta = times[k]
        tb = times[k + 1]
        xa = vals[k]
        slope = (left[k + 1] - vals[k]) / (tb - ta)
        u = tb
        rej_cell = 0
        k1v, k1w, k1A = _rhs(xa + slope * (u - ta), v, w, gsq, ax, am, sc, sb)
        while u > ta:
            remaining = u - ta
            if h_nat <= 0.0 or h_nat >= remaining * (1.0 - 1e-10):
                hs = remaining
                clipped = h_nat > remaining
            else:
                hs = h_nat
                clipped = False
            h = -hs
            x2 = xa + slope * (u + _C2 * h - ta)
            x3 = xa + slope * (u + _C3 * h - ta)
            x4 = xa + slope * (u + _C4 * h - ta)
            x5 = xa + slope * (u + _C5 * h - ta)
            x6 = xa + slope * (u + h - ta)
            k2v, k2w, k2A = _rhs(x2, v + h * _A21 * k1v, w + h * _A21 * k1w, gsq, ax, am, sc, sb)
            k3v, k3w, k3A = _rhs(
                x3, v + h * (_A31 * k1v + _A32 * k2v), w + h * (_A31 * k1w + _A32 * k2w), gsq, ax, am, sc, sb
            )
            k4v, k4w, k4A = _rhs(
                x4,
                v + h * (_A41 * k1v + _A42 * k2v + _A43 * k3v),
                w + h * (_A41 * k1w + _A42 * k2w + _A43 * k3w),
                gsq, ax, am, sc, sb,
            )
            k5v, k5w, k5A = _rhs(
                x5,
                v + h * (_A51 * k1v + _A52 * k2v + _A53 * k3v + _A54 * k4v),
                w + h * (_A51 * k1w + _A52 * k2w + _A53 * k3w + _A54 * k4w),
                gsq, ax, am, sc, sb,
            )
            k6v, k6w, k6A = _rhs(
                x6,
                v + h * (_A61 * k1v + _A62 * k2v + _A63 * k3v + _A64 * k4v + _A65 * k5v),
                w + h * (_A61 * k1w + _A62 * k2w + _A63 * k3w + _A64 * k4w + _A65 * k5w),
                gsq, ax, am, sc, sb,
            )
            vn = v + h * (_B1 * k1v + _B3 * k3v + _B4 * k4v + _B5 * k5v + _B6 * k6v)
            wn = w + h * (_B1 * k1w + _B3 * k3w + _B4 * k4w + _B5 * k5w + _B6 * k6w)
            An = A + h * (_B1 * k1A + _B3 * k3A + _B4 * k4A + _B5 * k5A + _B6 * k6A)
            k7v, k7w, k7A = 0.0, 0.0, 0.0
            if vn > 0.0 and math.isfinite(vn):
                k7v, k7w, k7A = _rhs(x6, vn, wn, gsq, ax, am, sc, sb)
                ev = h * (_E1 * k1v + _E3 * k3v + _E4 * k4v + _E5 * k5v + _E6 * k6v + _E7 * k7v)
                ew = h * (_E1 * k1w + _E3 * k3w + _E4 * k4w + _E5 * k5w + _E6 * k6w + _E7 * k7w)
                eA = h * (_E1 * k1A + _E3 * k3A + _E4 * k4A + _E5 * k5A + _E6 * k6A + _E7 * k7A)
                err = max(
                    abs(ev) / (atol_v + rtol * max(abs(v), abs(vn))),
                    abs(ew) / (atol_w + rtol * max(abs(w), abs(wn))),
                    abs(eA) / (atol_A + rtol * max(abs(A), abs(An))),
                )
            else:
                err = 1e10
            if err <= 1.0:
                u = u - hs
                if u - ta <= 1e-12 * (tb - ta):
                    u = ta
                v, w, A = vn, wn, An
                k1v, k1w, k1A = k7v, k7w, k7A
                stats[0] += 1
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** (-0.2)))
                if not clipped:
                    h_nat = hs * fac
                elif h_nat < hs * fac:
                    h_nat = hs * fac
            else:
                stats[1] += 1
                rej_cell += 1
                fac = 0.25 if err >= 1e10 else max(0.1, 0.9 * err ** (-0.25))
                h_nat = hs * fac
                if h_nat < 1e-14 * max(1.0, abs(u)):
                    return v, w, A, STEP_UNDERFLOW
                if rej_cell > max_rej:
                    v, w, A, st = _implicit_cell(xa, slope, ta, u, v, w, A, gsq, ax, am, sc, sb, rtol, stats)
                    if st != OK:
                        return v, w, A, st
                    u = ta
        if not (v > 0.0):
            return v, w, A, NEGATIVE_STATE
        if record:
            out_v[k] = v
            out_w[k] = w
            out_A[k] = A
    return v, w, A, OK


@njit(cache=True)
def solve_batch(times, vals2d, left2d, v_end, gsq, ax, am, sc, sb, rtol, max_rej, check_idx, out_v, out_A, status):
    """Solve for each path ``i`` and terminal value ``v_end[i, j]``.

    ``out_v[i, j, c]`` and ``out_A[i, j, c]`` receive the state at grid index
    ``check_idx[c]``.
    """
    n = vals2d.shape[0]
    K = v_end.shape[1]
    m = times.shape[0]
    rv = np.empty(m)
    rw = np.empty(m)
    rA = np.empty(m)
    stats = np.zeros(3, dtype=np.int64)
    for i in range(n):
        status[i] = OK
        for j in range(K):
            v, w, A, st = integrate_path(
                times, vals2d[i], left2d[i], v_end[i, j], gsq, ax, am, sc, sb, rtol, max_rej, True, rv, rw, rA, stats
            )
            if st != OK:
                status[i] = st
                break
            for c in range(check_idx.shape[0]):
                out_v[i, j, c] = rv[check_idx[c]]
                out_A[i, j, c] = rA[check_idx[c]]
    return stats


@njit(cache=True)
def v_infinity(times, vals, left, gsq, ax, am, sc, sb, rtol, max_rej, lam0, factor, max_doublings, limit_tol, stats, trace):
    """Limit of ``v(times[0])`` as the terminal value grows geometrically.

    Each iterate solves the equation at ``lam0 * factor**k``. Iterates must be
    nondecreasing (monotone-limit certificate). Convergence is declared when
    successive Aitken-accelerated values (or successive raw values) differ by
    less than ``limit_tol`` relative. Returns ``(value, raw_last, iterations, status)``.
    """
    dummy = np.empty(1)
    lam = lam0
    prev2 = -1.0
    prev1 = -1.0
    acc_prev = -1.0
    n_it = 0
    for it in range(max_doublings + 1):
        v, w, A, st = integrate_path(times, vals, left, lam, gsq, ax, am, sc, sb, rtol, max_rej, False, dummy, dummy, dummy, stats)
        if st != OK:
            return v, v, it, st
        if it < trace.shape[0]:
            trace[it] = v
        n_it = it
        if prev1 > 0.0 and v < prev1 * (1.0 - 1e-9):
            return v, v, it, NON_MONOTONE
        if prev1 > 0.0 and abs(v - prev1) <= limit_tol * v:
            return v, v, it, OK
        if prev2 > 0.0:
            d1 = prev1 - prev2
            d2 = v - prev1
            if d1 > 0.0 and 0.0 < d2 < d1:
                r = d2 / d1
                acc = v + d2 * r / (1.0 - r)
                if acc_prev > 0.0 and abs(acc - acc_prev) <= limit_tol * acc:
                    return acc, v, it, OK
                acc_prev = acc
        prev2 = prev1
        prev1 = v
        lam *= factor
    return prev1, prev1, n_it, LIMIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# Streaming path functionals
# ---------------------------------------------------------------------------


@njit(cache=True)
def slab_functionals(xi, I, sup, inf, cont, jump, has_jump, c, h, rec_local, rec_slot, out_xi, out_I, out_sup, out_inf):
    """Advance running functionals of a block over one slab of increments.

    ``xi``, ``I``, ``sup`` and ``inf`` (one entry per replica) hold the current
    value, the integral of ``exp(c xi)`` with linear interpolation inside each
    step, and the running extrema over grid values and left limits. After
    local step ``rec_local[r]`` the state is copied into row ``rec_slot[r]`` of
    the output arrays.
    """
    L, b = cont.shape
    r = 0
    nrec = rec_local.shape[0]
    for k in range(L):
        for j in range(b):
            a = xi[j]
            e = a + cont[k, j]
            d = c * (e - a)
            ea = math.exp(c * a)
            if abs(d) < 1e-8:
                I[j] += h * ea * (1.0 + 0.5 * d)
            else:
                I[j] += h * ea * math.expm1(d) / d
            if e > sup[j]:
                sup[j] = e
            if e < inf[j]:
                inf[j] = e
            if has_jump:
                e += jump[k, j]
                if e > sup[j]:
                    sup[j] = e
                if e < inf[j]:
                    inf[j] = e
            xi[j] = e
        while r < nrec and rec_local[r] == k:
            s = rec_slot[r]
            for j in range(b):
                out_xi[s, j] = xi[j]
                out_I[s, j] = I[j]
                out_sup[s, j] = sup[j]
                out_inf[s, j] = inf[j]
            r += 1
