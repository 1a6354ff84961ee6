"""Forward simulation of the population mass by operator splitting.

Each step of length ``dt`` applies

1. the environment factor exactly, ``Z <- Z * exp(delta xi)``;
2. an Euler demographic step with Gaussian part ``sqrt(2 g Z dt) N``,
   branching jumps drawn at rate ``Z * |mu|`` and the compensator
   ``-Z dt int z mu(dz)``;
3. absorption: masses that fall below ``eps_abs`` are set to 0 for good.

The environment increment already carries the linear term ``psi'(0+)`` (the
environment is parametrized through ``xi``, the logarithm of the quenched
mean), so the demographic step has no extra drift.

Stable mechanisms with ``beta < 1`` have infinite-activity Lévy measures
``c z^(-2-beta) dz``. Jumps below ``stable_eps`` are replaced by a Gaussian term
of matching variance and the rest are simulated exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn

from .branching_core import BranchingMechanism
from .env_model import EnvironmentSpec
from .path_sim import EnvironmentPath, block_sizes, child_generator, BlockStream, uniform_steps

DEMOGRAPHY_STREAM = 1000
IMMIGRATION_STREAM = 1001
STABLE_EPS = 1e-3
EPS_ABS_FACTOR = 1e-12


def stable_levy_coefficient(C: float, beta: float) -> float:
    """``c`` such that ``int (e^{-lz} - 1 + lz) c z^(-2-beta) dz = C l^(1+beta)``."""
    return C * beta * (1.0 + beta) / gamma_fn(1.0 - beta)


@dataclass(frozen=True)
class Demography:
    """Per-unit-mass rates of the Euler demographic step."""

    gauss: float
    jump_rate: float
    compensator: float
    atom_x: np.ndarray
    atom_p: np.ndarray
    pareto_lower: float = 0.0
    pareto_index: float = 0.0

    @classmethod
    def from_mechanism(cls, mech: BranchingMechanism, stable_eps: float = STABLE_EPS) -> "Demography":
        if mech.tails:
            raise NotImplementedError("forward simulation supports atoms, Gaussian and stable mechanisms")
        if mech.is_stable:
            C, beta = mech.stable
            if beta == 1.0:
                return cls(C, 0.0, 0.0, np.zeros(0), np.zeros(0))
            c = stable_levy_coefficient(C, beta)
            eps = stable_eps
            return cls(
                gauss=0.5 * c * eps ** (1.0 - beta) / (1.0 - beta),
                jump_rate=c * eps ** (-1.0 - beta) / (1.0 + beta),
                compensator=c * eps ** (-beta) / beta,
                atom_x=np.zeros(0),
                atom_p=np.zeros(0),
                pareto_lower=eps,
                pareto_index=1.0 + beta,
            )
        x = np.array([a for a, _ in mech.atoms], dtype=float)
        m = np.array([b for _, b in mech.atoms], dtype=float)
        total = float(m.sum())
        return cls(
            gauss=float(mech.gamma_sq),
            jump_rate=total,
            compensator=float(np.dot(x, m)),
            atom_x=x,
            atom_p=m / total if total > 0 else m,
        )

    def sample_sizes(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.pareto_index > 0:
            return self.pareto_lower * rng.random(k) ** (-1.0 / self.pareto_index)
        if len(self.atom_x) == 1:
            return np.full(k, self.atom_x[0])
        return self.atom_x[rng.choice(len(self.atom_x), size=k, p=self.atom_p)]

    def step(self, z: np.ndarray, dt: float, rng: np.random.Generator) -> np.ndarray:
        """Euler demographic update of the (positive) masses ``z``."""
        out = z.copy()
        if self.compensator:
            out -= self.compensator * dt * z
        if self.gauss:
            out += np.sqrt(2.0 * self.gauss * dt * z) * rng.standard_normal(z.shape)
        if self.jump_rate:
            counts = rng.poisson(self.jump_rate * dt * z)
            total = int(counts.sum())
            if total:
                sizes = self.sample_sizes(rng, total)
                owner = np.repeat(np.arange(z.size), counts)
                out += np.bincount(owner, weights=sizes, minlength=z.size)
        return out


@dataclass(frozen=True)
class ImmigrationSpec:
    """Immigration mechanism ``eta(l) = b l + int (1 - e^{-l x}) nu(dx)``.

    ``nu`` is a list of ``(x, rate)`` atoms; a truncated power law
    ``pareto = (coef, index, lower)`` meaning ``coef x^(-1-index) dx`` on
    ``(lower, inf)`` is also accepted.
    """

    b: float = 0.0
    nu: tuple[tuple[float, float], ...] = field(default_factory=tuple)
    pareto: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("b must be nonnegative")
        for x, r in self.nu:
            if not (x > 0 and r > 0):
                raise ValueError("immigration atoms need positive size and rate")
        if self.pareto is not None:
            coef, index, lower = self.pareto
            if not (coef > 0 and 0 < index < 1 and lower > 0):
                raise ValueError("immigration power law needs coef > 0, index in (0, 1), lower > 0")

    @classmethod
    def from_mechanism(cls, mech: BranchingMechanism, stable_eps: float = STABLE_EPS) -> "ImmigrationSpec":
        """Immigration with ``eta = psi0'``: ``b = 2 gamma^2`` and ``nu(dx) = x mu(dx)``."""
        if mech.is_stable:
            C, beta = mech.stable
            if beta == 1.0:
                return cls(b=2.0 * C)
            c = stable_levy_coefficient(C, beta)
            small = c * stable_eps ** (1.0 - beta) / (1.0 - beta)
            return cls(b=small, pareto=(c, beta, stable_eps))
        return cls(b=2.0 * mech.gamma_sq, nu=tuple((x, x * m) for x, m in mech.atoms))

    def total_rate(self) -> float:
        rate = sum(r for _, r in self.nu)
        if self.pareto is not None:
            coef, index, lower = self.pareto
            rate += coef * lower ** (-index) / index
        return rate

    def inflow(self, rng: np.random.Generator, dt: float, size: int) -> np.ndarray:
        out = np.full(size, self.b * dt)
        for x, r in self.nu:
            out += x * rng.poisson(r * dt, size=size)
        if self.pareto is not None:
            coef, index, lower = self.pareto
            counts = rng.poisson(coef * lower ** (-index) / index * dt, size=size)
            total = int(counts.sum())
            if total:
                sizes = lower * rng.random(total) ** (-1.0 / index)
                out += np.bincount(np.repeat(np.arange(size), counts), weights=sizes, minlength=size)
        return out


@dataclass(frozen=True)
class PopulationTrajectory:
    grid_times: np.ndarray
    mass: np.ndarray
    absorbed_at: float | None
    env_path_id: str | None
    seed: int | None
    truncations: int = 0

    @property
    def horizon(self) -> float:
        return float(self.grid_times[-1])

    def to_csv(self, file) -> None:
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "mass"])
            for t, z in zip(self.grid_times, self.mass):
                w.writerow([repr(float(t)), repr(float(z))])


def _substeps(path: EnvironmentPath, dt: float):
    """Yield ``(time, delta_xi, step_length)`` with environment jumps as zero-length steps."""
    t = path.grid_times
    for k in range(len(t) - 1):
        span = t[k + 1] - t[k]
        m = max(1, int(math.ceil(span / dt - 1e-12)))
        h = span / m
        dxi = (path.left_values[k + 1] - path.values[k]) / m
        for j in range(m):
            yield t[k] + (j + 1) * h, dxi, h
        jump = path.values[k + 1] - path.left_values[k + 1]
        if jump != 0.0:
            yield t[k + 1], jump, 0.0


def _simulate(mech, imm, env_path, z0, dt, seed, eps_abs, stable_eps, absorbing):
    if z0 < 0 or dt <= 0:
        raise ValueError("need z0 >= 0 and dt > 0")
    demo = Demography.from_mechanism(mech, stable_eps)
    rng = np.random.default_rng(seed)
    eps_abs = EPS_ABS_FACTOR * max(z0, 1.0) if eps_abs is None else eps_abs
    times = [0.0]
    mass = [float(z0)]
    z = np.array([float(z0)])
    absorbed_at = None
    truncations = 0
    for time, dxi, h in _substeps(env_path, dt):
        if absorbed_at is None or not absorbing:
            z = z * math.exp(dxi)
            if h > 0:
                if z[0] > 0:
                    z = demo.step(z, h, rng)
                if imm is not None:
                    z = z + imm.inflow(rng, h, 1)
            if z[0] < eps_abs:
                if z[0] < 0:
                    truncations += 1
                z[0] = 0.0
                if absorbing and absorbed_at is None:
                    absorbed_at = time
        if h > 0 or time == times[-1]:
            if time == times[-1]:
                mass[-1] = float(z[0])
            else:
                times.append(time)
                mass.append(float(z[0]))
    return PopulationTrajectory(np.array(times), np.array(mass), absorbed_at, env_path.spec_id, seed, truncations)


def simulate_cble(
    mech: BranchingMechanism,
    env_path: EnvironmentPath,
    z0: float,
    dt: float,
    seed: int,
    eps_abs: float | None = None,
    stable_eps: float = STABLE_EPS,
) -> PopulationTrajectory:
    """Simulate one trajectory of the population on a frozen environment path."""
    return _simulate(mech, None, env_path, z0, dt, seed, eps_abs, stable_eps, absorbing=True)


def simulate_cble_immigration(
    mech: BranchingMechanism,
    imm: ImmigrationSpec,
    env_path: EnvironmentPath,
    x0: float,
    dt: float,
    seed: int,
    stable_eps: float = STABLE_EPS,
) -> PopulationTrajectory:
    """Simulate the process with immigration (0 is not absorbing)."""
    return _simulate(mech, imm, env_path, x0, dt, seed, 0.0, stable_eps, absorbing=False)


def extinct_by(traj: PopulationTrajectory, t: float, eps_abs: float) -> bool:
    """True iff the mass is below ``eps_abs`` at some grid time ``<= t``."""
    if t > traj.horizon + 1e-12:
        raise ValueError("t beyond the trajectory horizon")
    mask = traj.grid_times <= t + 1e-12
    return bool(np.any(traj.mass[mask] < eps_abs))


def simulate_cble_quenched_batch(
    mech: BranchingMechanism,
    env_path: EnvironmentPath,
    z0: float,
    times,
    n: int,
    dt: float,
    seed: int,
    eps_abs: float | None = None,
    stable_eps: float = STABLE_EPS,
) -> np.ndarray:
    """Masses of ``n`` demographic replicas on one frozen environment path.

    Uses the same splitting scheme as :func:`simulate_cble`, vectorized over
    replicas. Returns an array of shape ``(n, len(times))``; each requested
    time must be a grid time of the sub-stepping (any grid time of the path
    or a multiple of the sub-step within a cell).
    """
    times = np.asarray(times, dtype=float)
    if z0 < 0 or dt <= 0 or n < 1:
        raise ValueError("need z0 >= 0, dt > 0 and n >= 1")
    if np.any(times > env_path.horizon + 1e-12) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be increasing and within the path horizon")
    demo = Demography.from_mechanism(mech, stable_eps)
    rng = np.random.default_rng(seed)
    eps_abs = EPS_ABS_FACTOR * max(z0, 1.0) if eps_abs is None else eps_abs
    z = np.full(n, float(z0))
    out = np.empty((n, len(times)))
    k = 0
    while k < len(times) and times[k] <= 1e-12:
        out[:, k] = z
        k += 1
    steps = list(_substeps(env_path, dt))
    for j, (time, dxi, h) in enumerate(steps):
        if k == len(times):
            break
        z *= math.exp(dxi)
        if h > 0:
            alive = np.nonzero(z > 0)[0]
            if alive.size:
                z[alive] = demo.step(z[alive], h, rng)
        z[z < eps_abs] = 0.0
        # masses are right-continuous: a jump at a requested time is applied first
        jump_next = j + 1 < len(steps) and steps[j + 1][2] == 0.0
        while k < len(times) and time >= times[k] - 1e-9 and not jump_next:
            out[:, k] = z
            k += 1
    if k < len(times):
        raise ValueError("requested times are not reached by the sub-step grid")
    return out


# ---------------------------------------------------------------------------
# Batches: environment and demography simulated jointly
# ---------------------------------------------------------------------------


@dataclass
class ForwardBatchResult:
    """Final masses and environment values of a replica batch."""

    mass: np.ndarray
    xi: np.ndarray
    truncations: int


def simulate_cble_batch(
    mech: BranchingMechanism,
    spec: EnvironmentSpec,
    z0: float,
    t: float,
    n: int,
    dt: float,
    seed: int,
    eps_abs: float | None = None,
    stable_eps: float = STABLE_EPS,
    imm: ImmigrationSpec | None = None,
) -> ForwardBatchResult:
    """Simulate ``n`` independent (environment, population) pairs up to ``t``.

    Replica blocks follow the seed-splitting rule of :mod:`cble_lab.path_sim`;
    the demographic noise of block ``b`` uses stream ``DEMOGRAPHY_STREAM``.
    """
    steps, h = uniform_steps(t, dt)
    demo = Demography.from_mechanism(mech, stable_eps)
    eps_abs = EPS_ABS_FACTOR * z0 if eps_abs is None else eps_abs
    masses, xis = [], []
    truncations = 0
    for b, size in enumerate(block_sizes(n)):
        stream = BlockStream(spec, h, size, seed, b)
        rng = child_generator(seed, b, DEMOGRAPHY_STREAM)
        irng = child_generator(seed, b, IMMIGRATION_STREAM)
        z = np.full(size, float(z0))
        xi = np.zeros(size)
        for cont, jump in stream.slabs(steps):
            incr = cont if jump is None else cont + jump
            for row in incr:
                xi += row
                alive = np.nonzero(z > 0)[0] if imm is None else np.arange(size)
                if alive.size == 0:
                    continue
                za = z[alive] * np.exp(row[alive])
                pos = za > 0
                if pos.any():
                    za[pos] = demo.step(za[pos], h, rng)
                if imm is not None:
                    za = za + imm.inflow(irng, h, za.size)
                low = za < eps_abs
                truncations += int(np.count_nonzero(za < 0))
                za[low] = 0.0
                z[alive] = za
        masses.append(z)
        xis.append(xi)
    return ForwardBatchResult(np.concatenate(masses), np.concatenate(xis), truncations)
