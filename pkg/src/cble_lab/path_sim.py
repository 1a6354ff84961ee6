"""Environment path sampling and pathwise functionals.

Single paths (:func:`sample_env_path`) place every jump epoch exactly on the
grid. Large Monte Carlo batches use :class:`BlockStream`, which walks a uniform
grid in time-major slabs so that memory stays bounded and a shorter horizon is
always a prefix of a longer one for the same seed.

Seed splitting rule
-------------------
A batch of ``n`` replicas is cut into fixed-size blocks of ``BLOCK_SIZE``
replicas. Block ``b`` of a run with master seed ``m`` draws from
``numpy.random.SeedSequence(m, spawn_key=(b, stream))``, where ``stream`` 0 is
the Gaussian stream and ``stream`` ``1 + i`` serves jump component ``i``.
The block size is a constant, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .env_model import EnvironmentSpec

BLOCK_SIZE = 1024
SLAB_STEPS = 256


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def child_generator(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Generator for replica block ``index`` and sub-stream ``stream``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def block_sizes(n: int, block: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(int(n), block)
    return [block] * full + ([rest] if rest else [])


# ---------------------------------------------------------------------------
# Single path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentPath:
    """One trajectory of the environment on a grid.

    ``values`` holds the càdlàg value at each grid time (post-jump at jump
    epochs); ``left_values`` holds left limits. Between consecutive grid times
    the path is interpolated linearly from ``values[k]`` to ``left_values[k+1]``.
    """

    grid_times: np.ndarray
    values: np.ndarray
    left_values: np.ndarray
    jump_flags: np.ndarray
    seed: int | None = None
    spec_id: str | None = None
    time_offset: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.grid_times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("grid_times must be strictly increasing and start at 0")
        for name in ("grid_times", "values", "left_values"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        flags = np.asarray(self.jump_flags, dtype=bool)
        flags.setflags(write=False)
        object.__setattr__(self, "jump_flags", flags)
        if not (len(self.values) == len(self.left_values) == len(flags) == len(t)):
            raise ValueError("path arrays must share the grid length")

    @property
    def horizon(self) -> float:
        return float(self.grid_times[-1])

    @property
    def jump_times(self) -> np.ndarray:
        return self.grid_times[self.jump_flags]

    @property
    def running_sup(self) -> np.ndarray:
        return np.maximum.accumulate(np.maximum(self.values, self.left_values))

    @property
    def running_inf(self) -> np.ndarray:
        return np.minimum.accumulate(np.minimum(self.values, self.left_values))

    def value_at(self, u: float) -> float:
        """Interpolated càdlàg value at time ``u``."""
        t = self.grid_times
        if u >= t[-1]:
            return float(self.values[-1])
        k = int(np.searchsorted(t, u, side="right")) - 1
        if u == t[k]:
            return float(self.values[k])
        frac = (u - t[k]) / (t[k + 1] - t[k])
        return float(self.values[k] + frac * (self.left_values[k + 1] - self.values[k]))

    def left_value_at(self, u: float) -> float:
        t = self.grid_times
        k = int(np.searchsorted(t, u, side="left"))
        if k < len(t) and t[k] == u:
            return float(self.left_values[k])
        return self.value_at(u)

    def restrict(self, s: float, t: float) -> "EnvironmentPath":
        """Sub-path on ``[s, t]`` re-based to start at time 0 (values unchanged)."""
        if not (0.0 <= s < t <= self.horizon):
            raise ValueError(f"need 0 <= s < t <= {self.horizon}, got s={s}, t={t}")
        g = self.grid_times
        inner = (g > s) & (g < t)
        times = np.concatenate(([s], g[inner], [t]))
        v_s = self.value_at(s)
        vals = np.concatenate(([v_s], self.values[inner], [self.value_at(t)]))
        left = np.concatenate(([v_s], self.left_values[inner], [self.left_value_at(t)]))
        return EnvironmentPath(times - s, vals, left, vals != left, self.seed, self.spec_id, self.time_offset + s)


def _refined_grid(breaks: np.ndarray, dt_max: float) -> np.ndarray:
    pieces = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        m = max(1, int(math.ceil((b - a) / dt_max - 1e-12)))
        pieces.append(np.linspace(a, b, m + 1)[1:])
    return np.concatenate(pieces)


def sample_env_path(spec: EnvironmentSpec, T: float, dt_max: float, x0: float = 0.0, seed: int = 0) -> EnvironmentPath:
    """Sample ``xi`` on ``[0, T]`` exactly at its grid times.

    Jump epochs come from the total-rate Poisson process and are inserted
    into the grid; the grid is then refined so that no gap exceeds ``dt_max``.
    """
    if not (T > 0 and dt_max > 0):
        raise ValueError("T and dt_max must be positive")
    rng = np.random.default_rng(seed)
    rate = spec.total_jump_rate
    n_jumps = int(rng.poisson(rate * T)) if rate > 0 else 0
    jump_t = np.sort(rng.uniform(0.0, T, size=n_jumps))
    jump_t = jump_t[(jump_t > 0) & (jump_t < T)]
    sizes = np.zeros(len(jump_t))
    if len(jump_t):
        probs = np.array([j.rate for j in spec.jumps]) / rate
        comp = rng.choice(len(spec.jumps), size=len(jump_t), p=probs)
        for i, j in enumerate(spec.jumps):
            mask = comp == i
            if mask.any():
                sizes[mask] = j.law.sample(rng, int(mask.sum()))
    breaks = np.unique(np.concatenate(([0.0], jump_t, [T])))
    times = _refined_grid(breaks, dt_max)
    dts = np.diff(times)
    incr = spec.path_drift * dts + spec.sigma * np.sqrt(dts) * rng.standard_normal(len(dts))
    flags = np.zeros(len(times), dtype=bool)
    jump_idx = np.searchsorted(times, jump_t)
    flags[jump_idx] = True
    jump_add = np.zeros(len(times))
    np.add.at(jump_add, jump_idx, sizes)
    values = x0 + np.concatenate(([0.0], np.cumsum(incr + jump_add[1:])))
    left = values.copy()
    left[1:] = values[:-1] + incr
    return EnvironmentPath(times, values, left, flags, seed, spec.spec_id)


def deterministic_path(fn, T: float, dt: float) -> EnvironmentPath:
    """Continuous path ``u -> fn(u)`` sampled on a uniform grid (for tests and fixtures)."""
    m = max(1, int(math.ceil(T / dt - 1e-12)))
    times = np.linspace(0.0, T, m + 1)
    vals = np.array([fn(u) for u in times], dtype=float)
    return EnvironmentPath(times, vals, vals.copy(), np.zeros(len(times), dtype=bool))


def running_extrema(path: EnvironmentPath) -> tuple[float, float]:
    """Supremum and infimum over grid values (left limits included)."""
    both = np.concatenate((path.values, path.left_values))
    return float(both.max()), float(both.min())


# ---------------------------------------------------------------------------
# Exponential functionals
# ---------------------------------------------------------------------------


def _exprel(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + 0.5 * x, np.expm1(safe) / safe)


def segment_exp_integrals(dt, start, end, c: float) -> np.ndarray:
    """Closed-form integrals of ``exp(c * xi)`` over linear segments ``start -> end``."""
    start = np.asarray(start, dtype=float)
    return dt * np.exp(c * start) * _exprel(c * (np.asarray(end, dtype=float) - start))


def exponential_functional(path: EnvironmentPath, c: float, s: float, t: float) -> float:
    """Integral of ``exp(c * xi_u)`` over ``[s, t]`` with linear interpolation.

    With ``c = -beta`` this is the functional ``I_{s,t}(beta xi)``.
    """
    if not (0.0 <= s <= t <= path.horizon):
        raise ValueError(f"need 0 <= s <= t <= {path.horizon}")
    if t == s:
        return 0.0
    sub = path.restrict(s, t)
    seg = segment_exp_integrals(np.diff(sub.grid_times), sub.values[:-1], sub.left_values[1:], c)
    return float(np.sum(seg))


def cumulative_exponential_functional(path: EnvironmentPath, c: float) -> np.ndarray:
    """``int_{t_k}^{T} exp(c xi_u) du`` at every grid time ``t_k`` (suffix sums)."""
    seg = segment_exp_integrals(np.diff(path.grid_times), path.values[:-1], path.left_values[1:], c)
    out = np.zeros(len(path.grid_times))
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


# ---------------------------------------------------------------------------
# Time reversal
# ---------------------------------------------------------------------------


def dual_path(path: EnvironmentPath) -> EnvironmentPath:
    """Time-reversed, recentred path ``s -> xi_{(t-s)-} - xi_t`` on the reflected grid.

    Uses the convention ``xi_{0-} = xi_0``.
    """
    T = path.horizon
    end = path.values[-1]
    times = T - path.grid_times[::-1]
    times[0] = 0.0
    values = path.left_values[::-1] - end
    left = path.values[::-1] - end
    left[0] = values[0]
    flags = path.jump_flags[::-1].copy()
    flags[0] = False
    return EnvironmentPath(times, values, left, flags, path.seed, path.spec_id)


def negative_time_path(path: EnvironmentPath) -> EnvironmentPath:
    """Negative-time extension ``Xi_s = -xi'_{(-s)-}`` on ``[-T, 0]`` from an independent copy.

    The returned path is stored on ``[0, T]`` with ``time_offset = -T``;
    grid time ``u`` stands for ``s = u - T`` and ``Xi_0 = 0``.
    """
    T = path.horizon
    times = T - path.grid_times[::-1]
    times[0] = 0.0
    values = -path.left_values[::-1]
    left = -path.values[::-1]
    left[0] = values[0]
    flags = path.jump_flags[::-1].copy()
    flags[0] = False
    return EnvironmentPath(times, values, left, flags, path.seed, path.spec_id, time_offset=-T)


def path_to_csv(path: EnvironmentPath, file) -> None:
    """Write ``time,value,jump_flag`` rows (times include ``time_offset``)."""
    own = isinstance(file, (str, bytes)) or hasattr(file, "__fspath__")
    fh = open(file, "w", newline="") if own else file
    try:
        w = csv.writer(fh)
        w.writerow(["time", "value", "jump_flag"])
        for u, v, f in zip(path.grid_times + path.time_offset, path.values, path.jump_flags):
            w.writerow([repr(float(u)), repr(float(v)), int(f)])
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# Batches on a uniform grid
# ---------------------------------------------------------------------------


def uniform_steps(T: float, dt_max: float) -> tuple[int, float]:
    m = max(1, int(math.ceil(T / dt_max - 1e-12)))
    return m, T / m


@dataclass
class BlockStream:
    """Time-major generator of increments for one block of replicas.

    Each call to :meth:`slabs` yields ``(cont, jump)`` arrays of shape
    ``(L, b)``: ``cont`` is the continuous increment over a step and ``jump``
    the sum of the jumps falling in that step, attached to the step's right
    endpoint. Values at grid times are exact in distribution; jump epochs are
    moved to the end of their step.
    """

    spec: EnvironmentSpec
    dt: float
    size: int
    master_seed: int
    block_index: int
    _gauss: np.random.Generator = field(init=False, repr=False)
    _jump_rngs: list = field(init=False, repr=False)

    def __post_init__(self):
        self._gauss = child_generator(self.master_seed, self.block_index, 0)
        self._jump_rngs = [child_generator(self.master_seed, self.block_index, 1 + i) for i in range(len(self.spec.jumps))]

    def slabs(self, n_steps: int, slab: int = SLAB_STEPS) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        done = 0
        while done < n_steps:
            L = min(slab, n_steps - done)
            done += L
            cont, jump = draw_increments(self.spec, self.dt, self._gauss, self._jump_rngs, (slab, self.size))
            if L < slab:
                # always draw full slabs so that a shorter horizon is an exact prefix
                cont = cont[:L]
                jump = None if jump is None or not jump[:L].any() else jump[:L]
            yield cont, jump


def draw_increments(spec: EnvironmentSpec, dt: float, gauss_rng, jump_rngs, shape) -> tuple[np.ndarray, np.ndarray | None]:
    """Continuous increments and per-step jump sums of shape ``shape``.

    ``jump_rngs[i]`` serves jump component ``i``; the jump array is ``None``
    when no jump occurred.
    """
    drift = spec.path_drift * dt
    scale = spec.sigma * math.sqrt(dt)
    if scale > 0:
        cont = drift + scale * gauss_rng.standard_normal(shape)
    else:
        cont = np.full(shape, drift)
    jump = None
    for comp, rng in zip(spec.jumps, jump_rngs):
        counts = rng.poisson(comp.rate * dt, size=shape)
        total = int(counts.sum())
        if total == 0:
            continue
        sizes = comp.law.sample(rng, total)
        owner = np.repeat(np.arange(counts.size), counts.ravel())
        add = np.bincount(owner, weights=sizes, minlength=counts.size).reshape(shape)
        jump = add if jump is None else jump + add
    return cont, jump


@dataclass(frozen=True)
class PathBatch:
    """Materialized batch of paths on a shared uniform grid (rows are replicas)."""

    grid_times: np.ndarray
    values: np.ndarray
    left_values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def path(self, i: int) -> EnvironmentPath:
        flags = self.values[i] != self.left_values[i]
        return EnvironmentPath(self.grid_times, self.values[i], self.left_values[i], flags)


def iter_blocks(spec: EnvironmentSpec, dt: float, n: int, master_seed: int) -> Iterator[BlockStream]:
    for b, size in enumerate(block_sizes(n)):
        yield BlockStream(spec, dt, size, master_seed, b)


def materialize_block(stream: BlockStream, n_steps: int, x0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Full ``(values, left_values)`` arrays of shape ``(b, n_steps + 1)`` for one block."""
    values = np.empty((n_steps + 1, stream.size))
    left = np.empty((n_steps + 1, stream.size))
    values[0] = left[0] = x0
    k = 0
    for cont, jump in stream.slabs(n_steps):
        L = cont.shape[0]
        lv = values[k] + np.cumsum(cont, axis=0)
        if jump is not None:
            cj = np.cumsum(jump, axis=0)
            left[k + 1 : k + 1 + L] = lv + np.vstack((np.zeros((1, stream.size)), cj[:-1]))
            values[k + 1 : k + 1 + L] = lv + cj
        else:
            left[k + 1 : k + 1 + L] = lv
            values[k + 1 : k + 1 + L] = lv
        k += L
    return values.T.copy(), left.T.copy()


def sample_env_batch(spec: EnvironmentSpec, T: float, dt_max: float, n: int, master_seed: int, x0: float = 0.0) -> PathBatch:
    """Materialize ``n`` paths on a uniform grid (memory ``n * T / dt`` floats)."""
    m, dt = uniform_steps(T, dt_max)
    vals, lefts = [], []
    for stream in iter_blocks(spec, dt, n, master_seed):
        v, l = materialize_block(stream, m, x0)
        vals.append(v)
        lefts.append(l)
    times = np.linspace(0.0, T, m + 1)
    return PathBatch(times, np.vstack(vals), np.vstack(lefts))
