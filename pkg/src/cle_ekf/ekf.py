"""Extended Kalman filter whose process noise follows the CLE diffusion.

The process noise covariance is rebuilt at every step from the current
posterior estimate, ``Q_k = G(x_k+) Q0 G(x_k+)^T`` with
``G = sqrt(delta) V diag(sqrt(A(x)))``. With the default ``Q0 = I`` this is
``delta * V diag(A(x_k+)) V^T``.

The array-level helpers (``predict_arrays``, ``correct_arrays``) broadcast
over leading axes so an ensemble of independent filters can be stepped in
lockstep; ``predict``/``correct``/``run`` are the single-filter API.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ._linalg import matmul, matvec, transpose
from .crn import CRN, _check_delta, diffusion, drift, propensity_jacobian
from .errors import ConfigError, NumericalError
from .sim import MeasurementModel, MeasurementSeries


@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        self.cov = 0.5 * (cov + cov.T)


@dataclass
class StepRecord:
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    posterior: FilterState
    Q: np.ndarray | None = None
    F: np.ndarray | None = None


def _sym(P):
    return 0.5 * (P + transpose(P))


def process_noise_cov(crn: CRN, estimate, delta: float, Q0=None) -> np.ndarray:
    """CLE process noise covariance ``G Q0 G^T`` evaluated at ``estimate``."""
    G = diffusion(crn, estimate, delta)
    if Q0 is not None:
        return _sym(matmul(matmul(G, np.asarray(Q0, dtype=float)), transpose(G)))
    Q = matmul(G, transpose(G))
    return _sym(Q)


def drift_jacobian(crn: CRN, x, delta: float, method: str = "analytic") -> np.ndarray:
    """``F = d f / d x`` for ``f(x) = x + delta V A(x)``."""
    delta = _check_delta(delta)
    x = np.asarray(x, dtype=float)
    if method == "analytic":
        return np.eye(crn.n) + delta * matmul(crn.V, propensity_jacobian(crn, x))
    if method == "fd":
        F = np.empty(x.shape[:-1] + (crn.n, crn.n))
        for i in range(crn.n):
            h = 1e-6 * np.maximum(1.0, np.abs(x[..., i]))
            e = np.zeros(crn.n)
            e[i] = 1.0
            step = h[..., None] * e
            F[..., :, i] = (drift(crn, x + step, delta) - drift(crn, x - step, delta)) / (2 * h[..., None])
        return F
    raise ConfigError(f"unknown jacobian method {method!r}", field="jacobian")


def predict_arrays(crn: CRN, mean, cov, delta: float, *, Q0=None, jacobian: str = "analytic"):
    """Prediction on raw arrays; returns ``(prior_mean, prior_cov, F, Q)``."""
    F = drift_jacobian(crn, mean, delta, jacobian)
    Q = process_noise_cov(crn, mean, delta, Q0)
    prior_mean = drift(crn, mean, delta)
    prior_cov = _sym(matmul(matmul(F, cov), transpose(F)) + Q)
    return prior_mean, prior_cov, F, Q


def correct_arrays(prior_mean, prior_cov, y, C, R):
    """Measurement update on raw arrays; returns ``(mean, cov, K, innovation)``.

    Gain in innovation form ``K = P- C^T (C P- C^T + R)^-1``.
    """
    CP = matmul(C, prior_cov)
    S = _sym(matmul(CP, C.T) + R)
    try:
        K = np.swapaxes(np.linalg.solve(S, CP), -1, -2)
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance is singular") from None
    innovation = y - matvec(C, prior_mean)
    mean = prior_mean + matvec(K, innovation)
    cov = _sym(prior_cov - matmul(K, CP))
    return mean, cov, K, innovation


def information_gain(post_cov, C, R) -> np.ndarray:
    """Information-form gain ``P+ C^T R^-1``; equals the innovation-form gain."""
    return post_cov @ C.T @ np.linalg.inv(R)


def predict(state: FilterState, crn: CRN, delta: float, *, Q0=None, jacobian: str = "analytic"):
    prior_mean, prior_cov, F, Q = predict_arrays(crn, state.mean, state.cov, delta, Q0=Q0, jacobian=jacobian)
    if not (np.all(np.isfinite(prior_mean)) and np.all(np.isfinite(prior_cov))):
        raise NumericalError("non-finite prediction", step=state.step + 1)
    return prior_mean, prior_cov, F, Q


def correct(prior_mean, prior_cov, y, model: MeasurementModel, *, step: int = 0,
            check_gain: bool = True) -> StepRecord:
    """Correct a prior with measurement ``y``.

    When ``check_gain`` is set and the posterior covariance is reasonably
    conditioned, the innovation-form gain is checked against ``P+ C^T R^-1``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (model.p,):
        raise ConfigError(f"measurement has shape {y.shape}, expected {(model.p,)}")
    if model.n != np.shape(prior_mean)[-1]:
        raise ConfigError(f"C has {model.n} columns, state has {np.shape(prior_mean)[-1]}", field="C")
    mean, cov, K, innovation = correct_arrays(prior_mean, prior_cov, y, model.C, model.R)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalError("non-finite correction", step=step)
    if check_gain and np.linalg.cond(cov) < 1e8:
        K_info = information_gain(cov, model.C, model.R)
        scale = max(np.linalg.norm(K), np.finfo(float).tiny)
        if np.linalg.norm(K - K_info) > 1e-8 * scale:
            raise NumericalError("gain forms disagree", step=step)
    return StepRecord(prior_mean, prior_cov, K, innovation, FilterState(mean, cov, step))


def iterate(crn: CRN, measurements: MeasurementSeries | np.ndarray, model: MeasurementModel, x0, P0,
            delta: float, *, Q0=None, jacobian: str = "analytic", check_gain: bool = False) -> Iterator[StepRecord]:
    """Yield one StepRecord per measurement without retaining history."""
    ys = measurements.values if isinstance(measurements, MeasurementSeries) else np.asarray(measurements, float)
    ys = ys.reshape(-1, model.p)
    state = FilterState(x0, P0, 0)
    if state.mean.shape != (crn.n,) or state.cov.shape != (crn.n, crn.n):
        raise ConfigError("initial mean/covariance do not match the number of species", field="x0")
    for k, y in enumerate(ys, start=1):
        prior_mean, prior_cov, F, Q = predict(state, crn, delta, Q0=Q0, jacobian=jacobian)
        rec = correct(prior_mean, prior_cov, y, model, step=k, check_gain=check_gain)
        rec.F, rec.Q = F, Q
        state = rec.posterior
        yield rec


def run(crn: CRN, measurements, model: MeasurementModel, x0, P0, delta: float, **kwargs) -> list[StepRecord]:
    """Alternate predict/correct over every measurement and keep all records."""
    return list(iterate(crn, measurements, model, x0, P0, delta, **kwargs))


# -- binary record dump -------------------------------------------------------
#
# Little-endian layout:
#   header  : 8-byte magic b"CLEEKF01", then uint32 n, uint32 m, uint32 p, uint64 N
#   record  : float64 values, in order
#             step (1), prior_mean (n), prior_cov (n*n), Q (n*n), F (n*n),
#             gain (n*p), innovation (p), posterior mean (n), posterior cov (n*n)
# Matrices are row-major.

RECORD_MAGIC = b"CLEEKF01"
_HEADER = np.dtype([("magic", "S8"), ("n", "<u4"), ("m", "<u4"), ("p", "<u4"), ("N", "<u8")])


def _record_width(n: int, p: int) -> int:
    return 1 + n + 4 * n * n + n * p + p + n


def write_records(path, records: list[StepRecord], m: int) -> None:
    if not records:
        raise ConfigError("no records to write")
    n, p = records[0].gain.shape
    header = np.array([(RECORD_MAGIC, n, m, p, len(records))], dtype=_HEADER)
    body = np.empty((len(records), _record_width(n, p)), dtype="<f8")
    for i, r in enumerate(records):
        body[i] = np.concatenate([[r.posterior.step], r.prior_mean, r.prior_cov.ravel(), r.Q.ravel(),
                                  r.F.ravel(), r.gain.ravel(), r.innovation, r.posterior.mean,
                                  r.posterior.cov.ravel()])
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(body.tobytes())


def read_records(path) -> list[StepRecord]:
    raw = open(path, "rb").read()
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if header["magic"] != RECORD_MAGIC:
        raise ConfigError(f"{path}: not a filter record dump")
    n, p, N = int(header["n"]), int(header["p"]), int(header["N"])
    body = np.frombuffer(raw[_HEADER.itemsize:], dtype="<f8").reshape(N, _record_width(n, p))
    sizes = [1, n, n * n, n * n, n * n, n * p, p, n, n * n]
    out = []
    for row in body:
        parts = np.split(row.astype(float), np.cumsum(sizes)[:-1])
        step, pm, pc, Q, F, K, innov, mean, cov = parts
        out.append(StepRecord(pm, pc.reshape(n, n), K.reshape(n, p), innov,
                              FilterState(mean, cov.reshape(n, n), int(step[0])),
                              Q.reshape(n, n), F.reshape(n, n)))
    return out
