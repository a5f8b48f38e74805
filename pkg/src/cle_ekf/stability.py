"""Mean-square stability certificate for the CLE-driven EKF.

The contraction factor of the mean-square error recursion is a cubic in the
sampling period, ``gamma(delta) = 1 + a3 d^3 + a2 d^2 + a1 d + a0`` with
``a0 = L_f^2 - 1``. All higher coefficients are nonnegative, so for
``L_f < 1`` there is exactly one positive root ``delta_max`` and
``gamma(delta) < 1`` precisely for ``delta < delta_max``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .crn import CRN, propensities, propensity_jacobian, spectral_norm
from .errors import ConfigError, NotContractiveError

INFLATION = 1.05


@dataclass(frozen=True)
class StabilityParams:
    L_f: float
    L_a: float
    v_bound: float
    C_A: float
    r_lb: float
    r_ub: float
    c_bound: float
    m: int
    p: int
    m1: float | None = None
    m2: float | None = None
    m3: float | None = None
    m4: float | None = None

    def __post_init__(self):
        for name in ("L_f", "v_bound", "r_lb", "r_ub", "c_bound"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"must be a positive finite number, got {value!r}", field=name)
        for name in ("L_a", "C_A", "m1", "m2", "m3", "m4"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"must be a nonnegative finite number, got {value!r}", field=name)
        if self.r_ub < self.r_lb:
            raise ConfigError(f"r_ub={self.r_ub} is below r_lb={self.r_lb}", field="r_ub")
        for name in ("m", "p"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, name)!r}", field=name)

    @classmethod
    def from_dict(cls, doc: dict) -> "StabilityParams":
        if not isinstance(doc, dict):
            raise ConfigError("stability parameters must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown parameter {unknown[0]!r}", field=unknown[0])
        required = [f.name for f in fields(cls) if f.name not in ("m3", "m4")]
        for name in required:
            if doc.get(name) is None:
                raise ConfigError(f"missing required parameter {name!r}", field=name)
        kwargs = {}
        for name, value in doc.items():
            if value is None:
                continue
            try:
                kwargs[name] = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"not a number: {value!r}", field=name) from None
            if name in ("m", "p"):
                if not kwargs[name].is_integer():
                    raise ConfigError(f"must be a positive integer, got {value!r}", field=name)
                kwargs[name] = int(kwargs[name])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DerivedConstants:
    rho: float
    r_s: float
    beta0: float
    beta1: float
    beta: float
    c2: float


@dataclass
class StabilityReport:
    coefficients: list[float]
    delta_max: float
    sign_pattern: list[int]
    params: StabilityParams
    estimated_fields: list[str] = field(default_factory=list)

    def gamma_at(self, delta: float) -> float:
        return 1.0 + float(np.polyval(self.coefficients, delta))

    def to_dict(self) -> dict:
        return {
            "coefficients": list(self.coefficients),
            "delta_max": self.delta_max,
            "gamma_at": {"0": self.gamma_at(0.0), "delta_max": self.gamma_at(self.delta_max)},
            "sign_pattern": list(self.sign_pattern),
            "inputs": self.params.to_dict(),
            "estimated_fields": list(self.estimated_fields),
        }


def derive_constants(params: StabilityParams) -> DerivedConstants:
    if params.L_f >= 1:
        raise NotContractiveError(f"drift not contractive; bound theory inapplicable (L_f = {params.L_f})")
    v2 = params.v_bound ** 2
    rho = params.c_bound / params.r_lb
    beta0 = v2 * params.L_a
    beta1 = v2 * params.C_A / (1.0 - params.L_f ** 2)
    return DerivedConstants(
        rho=rho,
        r_s=params.r_ub / params.r_lb,
        beta0=beta0,
        beta1=beta1,
        beta=beta0 * rho * params.c_bound,
        c2=beta1 * rho * params.c_bound,
    )


def polynomial_coefficients(params: StabilityParams) -> list[float]:
    """``[a3, a2, a1, a0]`` of the cubic whose negativity certifies ``gamma < 1``."""
    for name in ("m1", "m2"):
        if getattr(params, name) is None:
            raise ConfigError(f"moment bound {name!r} is required", field=name)
    d = derive_constants(params)
    m, p, Lf2 = params.m, params.p, params.L_f ** 2
    m1, m2 = params.m1, params.m2
    b, b0, c2 = d.beta, d.beta0, d.c2
    a3 = m * params.v_bound ** 2 * params.C_A * b ** 2 + b0 * b * (2 * m * c2 + m * m1 * b)
    a2 = (c2 ** 2 * Lf2 + (2 * m + p * d.r_s) * b0 * b
          + b ** 2 * Lf2 * (m1 ** 2 + 6 * m2) + 2 * b * Lf2 * m1 * c2)
    a1 = 2 * c2 * Lf2 + 2 * b * Lf2 * m1
    a0 = Lf2 - 1.0
    return [a3, a2, a1, a0]


def sign_pattern(coefficients: Sequence[float]) -> list[int]:
    return [int(np.sign(c)) for c in coefficients]


def sign_changes(coefficients: Sequence[float]) -> int:
    signs = [s for s in sign_pattern(coefficients) if s != 0]
    return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def _poly(coefficients, x: float) -> float:
    a3, a2, a1, a0 = coefficients
    return ((a3 * x + a2) * x + a1) * x + a0


def positive_root(coefficients: Sequence[float]) -> float:
    """Unique positive root of a cubic with sign pattern ``(+|0, +|0, +|0, -)``.

    Bisection on ``[0, hi]`` with ``hi`` doubled until the cubic is positive.
    Iterates until the bracket cannot shrink in floating point.
    """
    coefficients = [float(c) for c in coefficients]
    if len(coefficients) != 4:
        raise ConfigError("expected four cubic coefficients")
    if sign_changes(coefficients) != 1 or coefficients[-1] >= 0:
        raise NotContractiveError(f"coefficients {coefficients} do not have exactly one positive root")
    hi = 1.0
    while _poly(coefficients, hi) <= 0:
        hi *= 2.0
        if not math.isfinite(hi):
            raise NotContractiveError("cubic never becomes positive")
    lo = 0.0
    for _ in range(2200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        value = _poly(coefficients, mid)
        if value == 0:
            return mid
        if value < 0:
            lo = mid
        else:
            hi = mid
    return lo if abs(_poly(coefficients, lo)) <= abs(_poly(coefficients, hi)) else hi


def delta_max(params: StabilityParams) -> float:
    return positive_root(polynomial_coefficients(params))


def gamma(params: StabilityParams, delta: float) -> float:
    """Mean-square contraction factor at sampling period ``delta``."""
    if delta < 0:
        raise ConfigError(f"delta must be >= 0, got {delta}", field="delta")
    return 1.0 + _poly(polynomial_coefficients(params), float(delta))


def stability_report(params: StabilityParams, estimated_fields: Sequence[str] = ()) -> StabilityReport:
    coefficients = polynomial_coefficients(params)
    return StabilityReport(coefficients, positive_root(coefficients), sign_pattern(coefficients), params,
                           list(estimated_fields))


# -- numerical bound estimation ---------------------------------------------

@dataclass
class BoundEstimates:
    """Sampled suprema standing in for the Lipschitz and magnitude bounds."""

    L_f: float
    L_a: float
    C_A: float
    v_bound: float
    m: int
    samples: int
    inflation: float = INFLATION
    warnings: list[str] = field(default_factory=list)

    @property
    def contractive(self) -> bool:
        return self.L_f < 1

    def as_params(self, **rest) -> StabilityParams:
        """Merge with the remaining (measurement and moment) fields."""
        values = {"L_f": self.L_f, "L_a": self.L_a, "C_A": self.C_A, "v_bound": self.v_bound, "m": self.m}
        values.update(rest)
        return StabilityParams(**values)

    estimated_fields = ("L_f", "L_a", "C_A", "v_bound")


def estimate_bounds(crn: CRN, box: Sequence[tuple[float, float]], delta: float, samples: int = 1000,
                    seed: int = 0) -> BoundEstimates:
    """Estimate ``L_f``, ``L_a``, ``C_A`` and ``||V||`` over a box of states.

    Evaluates every box corner plus ``samples`` uniform interior points.
    Jacobian norms bound the Lipschitz constants on the convex box. The
    sampled suprema are inflated by 5%; ``v_bound`` is exact and is not.
    """
    box = np.asarray(box, dtype=float)
    if box.shape != (crn.n, 2) or np.any(box[:, 0] > box[:, 1]):
        raise ConfigError(f"box must be {crn.n} (low, high) pairs with low <= high", field="box")
    if samples < 100:
        raise ConfigError(f"need at least 100 samples, got {samples}", field="samples")
    rng = np.random.default_rng(seed)
    pts = box[:, 0] + rng.random((samples, crn.n)) * (box[:, 1] - box[:, 0])
    if crn.n <= 12:
        corners = np.array(np.meshgrid(*box, indexing="ij")).reshape(crn.n, -1).T
        pts = np.vstack([corners, pts])
    J = propensity_jacobian(crn, pts)
    F = np.eye(crn.n) + delta * (crn.V @ J)
    L_a = max(spectral_norm(j) for j in J)
    L_f = max(spectral_norm(f) for f in F)
    C_A = float(np.max(np.linalg.norm(propensities(crn, pts), axis=-1)))
    est = BoundEstimates(L_f=INFLATION * L_f, L_a=INFLATION * L_a, C_A=INFLATION * C_A,
                         v_bound=spectral_norm(crn.V), m=crn.m, samples=len(pts))
    if not est.contractive:
        est.warnings.append(f"estimated L_f = {est.L_f:.6g} >= 1: drift not contractive over the box")
    return est


# -- empirical check of exponential mean-square boundedness -----------------

@dataclass
class BoundCheck:
    empirical_gamma: float
    C0: float
    satisfied: bool
    transient_length: int

    def to_dict(self) -> dict:
        return asdict(self)


def check_exponential_bound(mse, gamma_value: float, eps: float = 1e-12) -> BoundCheck:
    """Test ``mse_k <= gamma^k mse_0 + C0`` (unit transient constant).

    ``C0`` is the smallest offset that makes the inequality hold at every
    step. The empirical decay rate is a log-linear fit to the running upper
    envelope over the transient, i.e. up to the first step where the series
    falls below 1.05 times its final-quarter mean.
    """
    mse = np.asarray(mse, dtype=float).ravel()
    if mse.size == 0:
        raise ConfigError("empty error series")
    if not np.all(np.isfinite(mse)):
        raise ConfigError("error series contains non-finite values")
    if not 0 < gamma_value < 1:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma_value}", field="gamma")
    k = np.arange(mse.size)
    C0 = float(np.max(mse - gamma_value ** k * mse[0]))
    tail = mse[-max(1, mse.size // 4):]
    satisfied = math.isfinite(C0) and float(tail.max()) <= C0 + eps * max(1.0, abs(C0))

    below = np.flatnonzero(mse < 1.05 * tail.mean())
    end = int(below[0]) if below.size else mse.size - 1
    envelope = np.maximum.accumulate(mse[: end + 1][::-1])[::-1]
    positive = envelope > 0
    empirical = float("nan")
    if np.count_nonzero(positive) >= 2:
        slope = np.polyfit(k[: end + 1][positive], np.log(envelope[positive]), 1)[0]
        empirical = float(np.exp(slope))
    return BoundCheck(empirical, C0, bool(satisfied), end + 1)
