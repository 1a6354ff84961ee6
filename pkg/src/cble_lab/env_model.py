"""Lévy environment model: jump laws, Laplace exponent, regimes and Esscher tilting.

The environment ``xi`` is a Lévy process written in Lévy–Itô form,

    xi_t = drift * t + sigma * B_t + (compensated jumps of size < 1) + (jumps of size >= 1),

so that its Laplace exponent is

    Phi(theta) = drift*theta + sigma^2 theta^2 / 2
                 + sum_i rate_i * E[exp(theta Z_i) - 1 - theta Z_i 1{|Z_i| < 1}].

Only finite-activity jump measures are supported. Each jump law belongs to a
family that is closed under exponential reweighting, so the Esscher tilt of a
spec is again a spec.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOLERANCE = 1e-9

REGIME_TAGS = (
    "supercritical",
    "critical",
    "strongly_subcritical",
    "intermediate_subcritical",
    "weakly_subcritical",
)


class MomentDomainError(ValueError):
    """Raised when a Laplace-exponent argument lies outside the moment interval."""


class UnsupportedTiltError(ValueError):
    """Raised when a jump law cannot be reweighted inside its own family."""


class DegenerateSpecWarning(UserWarning):
    """Emitted when the spec has no randomness (zero Gaussian part and no jumps)."""


# ---------------------------------------------------------------------------
# Quadrature helper for partial exponential moments
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def _pow_exp_integral(k: int, c: float, lo: float, hi: float) -> float:
    """Return the integral of ``z**k * exp(c*z)`` over ``[lo, hi]``.

    Composite Gauss–Legendre rule with panels narrow enough that the
    exponential varies by a bounded factor per panel; the result is accurate to
    machine precision for the smooth integrands used here.
    """
    if hi <= lo:
        return 0.0
    width = hi - lo
    panels = int(math.ceil(abs(c) * width / 4.0)) + 1
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    z = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = z**k * np.exp(c * z)
    return float(np.sum(half[:, None] * _GL_WEIGHTS[None, :] * vals))


# ---------------------------------------------------------------------------
# Jump laws
# ---------------------------------------------------------------------------


class JumpLaw:
    """Interface for a jump-size distribution on the real line without 0.

    Subclasses provide exponential moments ``E[Z^k e^{theta Z}]`` (full and
    restricted to ``|Z| < 1``) for ``k`` in ``{0, 1, 2}``, an Esscher
    reweighting inside the same family, and a sampler.
    """

    name = "abstract"

    def theta_range(self) -> tuple[float, float]:
        """Open interval of theta where ``E[e^{theta Z}]`` is finite."""
        return (-math.inf, math.inf)

    def moment(self, k: int, theta: float) -> float:
        raise NotImplementedError

    def small_moment(self, k: int, theta: float) -> float:
        """``E[Z^k e^{theta Z} 1{|Z| < 1}]``."""
        raise NotImplementedError

    def tilted(self, theta: float) -> "JumpLaw":
        raise UnsupportedTiltError(f"law {self.name!r} is not closed under tilting")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError

    def mgf(self, theta: float) -> float:
        return self.moment(0, theta)


@dataclass(frozen=True)
class PointMass(JumpLaw):
    """Degenerate jump law concentrated at ``z`` (``z != 0``)."""

    z: float
    name = "point_mass"

    def __post_init__(self):
        if self.z == 0 or not math.isfinite(self.z):
            raise ValueError("point-mass jump size must be finite and nonzero")

    def moment(self, k, theta):
        return self.z**k * math.exp(theta * self.z)

    def small_moment(self, k, theta):
        return self.moment(k, theta) if abs(self.z) < 1 else 0.0

    def tilted(self, theta):
        return self

    def sample(self, rng, size):
        return np.full(size, self.z, dtype=float)

    def to_config(self):
        return {"law": "point_mass", "params": {"z": self.z}}


@dataclass(frozen=True)
class ExponentialMixture(JumpLaw):
    """Finite mixture of one-sided exponential laws.

    Component ``i`` has weight ``weights[i]``, rate ``rates[i]`` and sign
    ``signs[i]`` (``+1`` for jumps up with density ``r e^{-r z}`` on
    ``(0, inf)``, ``-1`` for the mirrored law on ``(-inf, 0)``).
    """

    weights: tuple[float, ...]
    rates: tuple[float, ...]
    signs: tuple[int, ...]
    name = "exponential_mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not (len(self.weights) == len(self.rates) == len(self.signs)) or len(w) == 0:
            raise ValueError("weights, rates and signs must be nonempty and of equal length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to one")
        if any(r <= 0 for r in self.rates):
            raise ValueError("exponential rates must be positive")
        if any(s not in (1, -1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")

    @classmethod
    def exponential(cls, rate: float, sign: int = 1) -> "ExponentialMixture":
        return cls((1.0,), (float(rate),), (int(sign),))

    @classmethod
    def double_exponential(cls, p_up: float, rate_up: float, rate_down: float) -> "ExponentialMixture":
        return cls((p_up, 1.0 - p_up), (rate_up, rate_down), (1, -1))

    def theta_range(self):
        up = [r for r, s in zip(self.rates, self.signs) if s > 0]
        down = [r for r, s in zip(self.rates, self.signs) if s < 0]
        return (-min(down) if down else -math.inf, min(up) if up else math.inf)

    def _check(self, theta):
        lo, hi = self.theta_range()
        if not lo < theta < hi:
            raise MomentDomainError(f"theta={theta} outside ({lo}, {hi}) for {self.name}")

    def moment(self, k, theta):
        self._check(theta)
        total = 0.0
        for w, r, s in zip(self.weights, self.rates, self.signs):
            c = r - s * theta
            total += w * s**k * r * math.factorial(k) / c ** (k + 1)
        return total

    def small_moment(self, k, theta):
        self._check(theta)
        total = 0.0
        for w, r, s in zip(self.weights, self.rates, self.signs):
            total += w * s**k * r * _pow_exp_integral(k, -(r - s * theta), 0.0, 1.0)
        return total

    def tilted(self, theta):
        self._check(theta)
        factors = [w * r / (r - s * theta) for w, r, s in zip(self.weights, self.rates, self.signs)]
        total = sum(factors)
        return ExponentialMixture(
            tuple(f / total for f in factors),
            tuple(r - s * theta for r, s in zip(self.rates, self.signs)),
            self.signs,
        )

    def sample(self, rng, size):
        size = (size,) if np.isscalar(size) else tuple(size)
        comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        rates = np.asarray(self.rates)[comp]
        signs = np.asarray(self.signs)[comp]
        return signs * rng.exponential(1.0, size=size) / rates

    def to_config(self):
        return {
            "law": "exponential_mixture",
            "params": {"weights": list(self.weights), "rates": list(self.rates), "signs": list(self.signs)},
        }


@dataclass(frozen=True)
class TiltedUniform(JumpLaw):
    """Law on ``[low, high]`` with density proportional to ``exp(tilt * z)``.

    ``tilt = 0`` is the uniform law. The family is closed under Esscher
    reweighting (the tilt parameter shifts by theta).
    """

    low: float
    high: float
    tilt: float = 0.0
    name = "uniform"

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high) and self.low < self.high):
            raise ValueError("uniform support must be a finite interval with low < high")

    def _norm(self):
        return _pow_exp_integral(0, self.tilt, self.low, self.high)

    def moment(self, k, theta):
        return _pow_exp_integral(k, self.tilt + theta, self.low, self.high) / self._norm()

    def small_moment(self, k, theta):
        lo, hi = max(self.low, -1.0), min(self.high, 1.0)
        return _pow_exp_integral(k, self.tilt + theta, lo, hi) / self._norm()

    def tilted(self, theta):
        return TiltedUniform(self.low, self.high, self.tilt + theta)

    def sample(self, rng, size):
        u = rng.random(size)
        width = self.high - self.low
        if abs(self.tilt) * width < 1e-12:
            return self.low + width * u
        return self.low + np.log1p(u * np.expm1(self.tilt * width)) / self.tilt

    def to_config(self):
        return {"law": "uniform", "params": {"low": self.low, "high": self.high, "tilt": self.tilt}}


def jump_law_from_config(law: str, params: dict) -> JumpLaw:
    """Build a jump law from its config name and parameter dict."""
    params = dict(params or {})
    if law == "point_mass":
        return PointMass(float(params.pop("z")), **params)
    if law == "exponential":
        return ExponentialMixture.exponential(float(params.pop("rate")), int(params.pop("sign", 1)), **params)
    if law == "double_exponential":
        return ExponentialMixture.double_exponential(**params)
    if law == "exponential_mixture":
        return ExponentialMixture(
            tuple(float(w) for w in params["weights"]),
            tuple(float(r) for r in params["rates"]),
            tuple(int(s) for s in params["signs"]),
        )
    if law == "uniform":
        return TiltedUniform(float(params["low"]), float(params["high"]), float(params.get("tilt", 0.0)))
    raise ValueError(f"unknown jump law {law!r}")


# ---------------------------------------------------------------------------
# Environment spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpComponent:
    rate: float
    law: JumpLaw

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError("jump rates must be positive and finite")


@dataclass(frozen=True)
class EnvironmentSpec:
    """Lévy triplet of the environment ``xi`` (finite-activity jumps).

    Parameters
    ----------
    drift : float
        Lévy–Itô drift per unit time (small jumps are compensated).
    gaussian_var : float
        Gaussian variance per unit time.
    jumps : tuple of JumpComponent
        Independent compound-Poisson components.
    """

    drift: float
    gaussian_var: float = 0.0
    jumps: tuple[JumpComponent, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not math.isfinite(self.drift):
            raise ValueError("drift must be finite")
        if not (self.gaussian_var >= 0 and math.isfinite(self.gaussian_var)):
            raise ValueError("gaussian_var must be finite and nonnegative")
        object.__setattr__(self, "jumps", tuple(self.jumps))

    @classmethod
    def brownian(cls, drift: float, gaussian_var: float = 1.0) -> "EnvironmentSpec":
        return cls(float(drift), float(gaussian_var), ())

    @property
    def sigma(self) -> float:
        return math.sqrt(self.gaussian_var)

    @property
    def total_jump_rate(self) -> float:
        return float(sum(j.rate for j in self.jumps))

    @property
    def path_drift(self) -> float:
        """Drift between jump epochs once small jumps are compensated."""
        return self.drift - sum(j.rate * j.law.small_moment(1, 0.0) for j in self.jumps)

    @property
    def is_degenerate(self) -> bool:
        return self.gaussian_var == 0 and not self.jumps

    def theta_range(self) -> tuple[float, float]:
        lo, hi = -math.inf, math.inf
        for j in self.jumps:
            a, b = j.law.theta_range()
            lo, hi = max(lo, a), min(hi, b)
        return lo, hi

    def to_config(self) -> dict:
        jumps = []
        for j in self.jumps:
            entry = {"rate": j.rate}
            entry.update(j.law.to_config())
            jumps.append(entry)
        return {"drift": self.drift, "gaussian_var": self.gaussian_var, "jumps": jumps}

    @property
    def spec_id(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _require_theta(spec: EnvironmentSpec, theta: float) -> None:
    lo, hi = spec.theta_range()
    if not lo < theta < hi:
        raise MomentDomainError(f"theta={theta} outside the exponential-moment interval ({lo}, {hi})")


def laplace_exponent(spec: EnvironmentSpec, theta: float) -> float:
    """Laplace exponent ``Phi(theta) = log E[exp(theta * xi_1)]``.

    Raises
    ------
    MomentDomainError
        If ``theta`` is outside the exponential-moment interval.
    """
    theta = float(theta)
    if theta == 0.0:
        return 0.0
    _require_theta(spec, theta)
    value = spec.drift * theta + 0.5 * spec.gaussian_var * theta**2
    for j in spec.jumps:
        value += j.rate * (j.law.mgf(theta) - 1.0 - theta * j.law.small_moment(1, 0.0))
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite Laplace exponent at theta={theta}: {value}")
    return value


def laplace_exponent_derivatives(spec: EnvironmentSpec, theta: float) -> tuple[float, float]:
    """Return ``(Phi'(theta), Phi''(theta))``.

    A spec without Gaussian part and without jumps has ``Phi'' = 0``; this is
    flagged with a :class:`DegenerateSpecWarning`.
    """
    theta = float(theta)
    _require_theta(spec, theta)
    d1 = spec.drift + spec.gaussian_var * theta
    d2 = spec.gaussian_var
    for j in spec.jumps:
        d1 += j.rate * (j.law.moment(1, theta) - j.law.small_moment(1, 0.0))
        d2 += j.rate * j.law.moment(2, theta)
    if spec.is_degenerate:
        warnings.warn("degenerate environment: Phi'' vanishes identically", DegenerateSpecWarning, stacklevel=2)
    return d1, d2


@dataclass(frozen=True)
class Regime:
    tag: str
    phi_prime_0: float
    phi_prime_1: float
    tolerance: float

    @property
    def is_subcritical(self) -> bool:
        return self.tag.endswith("subcritical")


def classify_regime(spec: EnvironmentSpec, tolerance: float = DEFAULT_TOLERANCE) -> Regime:
    """Classify the environment by the signs of ``Phi'(0)`` and ``Phi'(1)``."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpecWarning)
        d0, _ = laplace_exponent_derivatives(spec, 0.0)
        d1, _ = laplace_exponent_derivatives(spec, 1.0)
    if abs(d0) <= tolerance:
        tag = "critical"
    elif d0 > tolerance:
        tag = "supercritical"
    elif d1 < -tolerance:
        tag = "strongly_subcritical"
    elif abs(d1) <= tolerance:
        tag = "intermediate_subcritical"
    else:
        tag = "weakly_subcritical"
    return Regime(tag, d0, d1, tolerance)


def esscher_tilt(spec: EnvironmentSpec, theta: float) -> EnvironmentSpec:
    """Exponentially tilted environment law (density ``e^{theta xi_t - t Phi(theta)}``)."""
    theta = float(theta)
    if theta == 0.0:
        return spec
    _require_theta(spec, theta)
    drift = spec.drift + spec.gaussian_var * theta
    jumps = []
    for j in spec.jumps:
        drift += j.rate * (j.law.small_moment(1, theta) - j.law.small_moment(1, 0.0))
        jumps.append(JumpComponent(j.rate * j.law.mgf(theta), j.law.tilted(theta)))
    return EnvironmentSpec(drift, spec.gaussian_var, tuple(jumps))


def check_exponential_moment(spec: EnvironmentSpec, theta_max: float) -> bool:
    """True iff every jump law has finite ``E[e^{theta Z}]`` for all theta in ``[0, theta_max]``."""
    if not theta_max > 0:
        raise ValueError("theta_max must be positive")
    lo, hi = spec.theta_range()
    return theta_max < hi and lo < 0


def s_drift(spec: EnvironmentSpec, psi_prime_0: float) -> float:
    """Drift of the environment ``S`` driving the population SDE.

    ``S`` has the same Gaussian part as ``xi`` and jumps ``e^z - 1``; its drift
    is recovered from the drift of ``xi`` and the linear branching term.
    """
    value = spec.drift + psi_prime_0 + 0.5 * spec.gaussian_var
    for j in spec.jumps:
        # E[(e^Z - 1 - Z) 1{|Z|<1}] through the restricted moments
        law = j.law
        value += j.rate * (law.small_moment(0, 1.0) - law.small_moment(0, 0.0) - law.small_moment(1, 0.0))
    return value


def spec_from_config(section: dict) -> EnvironmentSpec:
    """Build an :class:`EnvironmentSpec` from its config section."""
    allowed = {"drift", "gaussian_var", "jumps"}
    unknown = set(section) - allowed
    if unknown:
        raise KeyError(f"unknown environment keys: {sorted(unknown)}")
    jumps = []
    for entry in section.get("jumps", []) or []:
        extra = set(entry) - {"rate", "law", "params"}
        if extra:
            raise KeyError(f"unknown jump keys: {sorted(extra)}")
        jumps.append(JumpComponent(float(entry["rate"]), jump_law_from_config(entry["law"], entry.get("params", {}))))
    return EnvironmentSpec(float(section["drift"]), float(section.get("gaussian_var", 0.0)), tuple(jumps))

