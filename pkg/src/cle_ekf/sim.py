"""Euler-Maruyama simulation of the discrete CLE and linear noisy measurements.

Noise comes from a counter-based generator: the Gaussian vector for step
``k`` of stream ``s`` under seed ``seed`` is a pure function of
``(seed, s, k)``. Ensembles can therefore be split, reordered or run in
parallel without changing a single bit of any trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox

from ._linalg import matvec
from .crn import CRN, _check_delta, propensities
from .errors import ConfigError, NumericalError

PROCESS_STREAM = 0
MEASUREMENT_STREAM = 1

_CHUNK = 4096
_TWO_M53 = 2.0 ** -53


class NoiseStream:
    """Standard normal vectors of fixed width addressed by step index.

    Each step consumes a whole number of Philox blocks (four 64-bit words),
    so step ``k`` starts at counter ``k * blocks_per_step``. Words are paired
    into Box-Muller transforms, which keeps consumption fixed per step.
    """

    def __init__(self, seed: int, stream: int, width: int):
        seed, stream = int(seed), int(stream)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must be in [0, 2**64), got {seed}", field="seed")
        self.seed, self.stream, self.width = seed, stream, int(width)
        self._pairs = (self.width + 1) // 2
        self._blocks = max(1, -(-2 * self._pairs // 4))
        self._stride = 4 * self._blocks

    def normals(self, start: int, count: int) -> np.ndarray:
        """Rows ``start .. start+count-1`` as a ``(count, width)`` array."""
        if self.width == 0 or count == 0:
            return np.zeros((count, self.width))
        bitgen = Philox(key=[self.seed, self.stream], counter=int(start) * self._blocks)
        raw = bitgen.random_raw(count * self._stride).reshape(count, self._stride)
        raw = raw[:, : 2 * self._pairs]
        u1 = ((raw[:, 0::2] >> np.uint64(11)).astype(float) + 1.0) * _TWO_M53
        u2 = (raw[:, 1::2] >> np.uint64(11)).astype(float) * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty((count, 2 * self._pairs))
        z[:, 0::2] = r * np.cos(theta)
        z[:, 1::2] = r * np.sin(theta)
        return z[:, : self.width]


@dataclass
class Trajectory:
    delta: float
    states: np.ndarray  # (steps + 1, n)
    seed: int
    species: tuple[str, ...] = ()

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.delta


@dataclass
class MeasurementModel:
    C: np.ndarray
    R: np.ndarray
    r_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        p = self.C.shape[0]
        if self.R.shape != (p, p):
            raise ConfigError(f"R has shape {self.R.shape}, expected {(p, p)}", field="R")
        if not np.allclose(self.R, self.R.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.R).max())):
            raise ConfigError("R must be symmetric", field="R")
        if np.linalg.eigvalsh(self.R)[0] <= 0:
            raise ConfigError("R must be positive definite", field="R")
        if self.r_bounds is not None:
            lo, hi = self.r_bounds
            norm = np.linalg.norm(self.R, 2)
            if not 0 < lo <= norm <= hi:
                raise ConfigError(f"||R|| = {norm:g} outside declared bounds [{lo}, {hi}]", field="R")
        self._chol = np.linalg.cholesky(self.R)

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]


@dataclass
class MeasurementSeries:
    values: np.ndarray  # (steps, p); row k-1 observes state k
    seed: int
    delta: float = 1.0

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.values.shape[0] + 1) * self.delta


def cle_step(crn: CRN, x, delta: float, w) -> np.ndarray:
    """One Euler-Maruyama step ``x + delta V A(x) + sqrt(delta) V diag(sqrt A(x)) w``.

    Broadcasts over leading axes. With ``w = 0`` the result equals
    ``drift(crn, x, delta)`` bit for bit.
    """
    a = propensities(crn, x)
    kick = delta * a + np.sqrt(delta) * np.sqrt(a) * w
    return x + matvec(crn.V, kick)


def simulate_ensemble(crn: CRN, x0, delta: float, steps: int, seeds, *, noise: bool = True,
                      record_every: int = 1) -> np.ndarray:
    """Simulate one trajectory per seed in lockstep.

    Returns ``(len(seeds), rows, n)`` holding step 0, every
    ``record_every``-th step, and always the final step.
    """
    delta = _check_delta(delta)
    steps = int(steps)
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}", field="steps")
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (len(seeds), crn.n)))
    if not np.all(np.isfinite(x)):
        raise NumericalError("initial state is not finite", step=0)
    streams = [NoiseStream(s, PROCESS_STREAM, crn.m) for s in seeds]
    keep = sorted(set(range(0, steps + 1, record_every)) | {steps})
    out = np.empty((len(seeds), len(keep), crn.n))
    out[:, 0] = x
    slot = 1
    w_chunk = np.zeros((len(seeds), 0, crn.m))
    for k in range(steps):
        j = k % _CHUNK
        if j == 0:
            count = min(_CHUNK, steps - k)
            if noise:
                w_chunk = np.stack([s.normals(k, count) for s in streams])
            else:
                w_chunk = np.zeros((len(seeds), count, crn.m))
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            x = cle_step(crn, x, delta, w_chunk[:, j])
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=-1))[0])
            raise NumericalError("non-finite state", step=k + 1, run=bad if len(seeds) > 1 else None)
        if slot < len(keep) and keep[slot] == k + 1:
            out[:, slot] = x
            slot += 1
    return out


def simulate(crn: CRN, x0, delta: float, steps: int, seed: int, *, noise: bool = True) -> Trajectory:
    """Discrete CLE trajectory with ``steps + 1`` rows starting at ``x0``.

    ``noise=False`` forces every draw to zero, leaving plain Euler on the drift.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (crn.n,):
        raise ConfigError(f"x0 has shape {x0.shape}, expected {(crn.n,)}", field="x0")
    states = simulate_ensemble(crn, x0, delta, steps, [seed], noise=noise)[0]
    return Trajectory(float(delta), states, int(seed), crn.species)


def measurement_noise(model: MeasurementModel, seed: int, start: int, count: int) -> np.ndarray:
    """``v_k ~ N(0, R)`` for steps ``start+1 .. start+count``."""
    z = NoiseStream(seed, MEASUREMENT_STREAM, model.p).normals(start, count)
    return matvec(model._chol, z)


def measure(traj: Trajectory, model: MeasurementModel, seed: int, *, noise: bool = True) -> MeasurementSeries:
    """``y_k = C x_k + v_k`` for ``k = 1..steps``."""
    if model.n != traj.states.shape[1]:
        raise ConfigError(f"C has {model.n} columns but the trajectory has {traj.states.shape[1]} species",
                          field="C")
    y = matvec(model.C, traj.states[1:])
    if noise:
        y = y + measurement_noise(model, seed, 0, traj.steps)
    return MeasurementSeries(y, int(seed), traj.delta)
