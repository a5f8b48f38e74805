"""Gene-expression benchmark and Monte Carlo ensembles of simulate -> measure -> filter.

Runs are stepped in lockstep, one batch at a time. Batch membership is part
of the configuration (``batch``), not of the scheduling, and each run draws
its noise from its own counter-based stream. Per-step metric sums are
formed inside a batch in run order and then added batch by batch in batch
order, so the aggregate does not depend on how many workers ran the batches.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ._linalg import matvec
from .crn import CRN, Complement, Reaction, SpeciesValue, build_crn, crn_from_dict
from .ekf import StepRecord, correct_arrays, predict_arrays, process_noise_cov
from .errors import ConfigError, NumericalError
from .sim import MeasurementModel, NoiseStream, PROCESS_STREAM, cle_step, measurement_noise
from .stability import StabilityParams

GENE_SPECIES = ("P_o", "T", "R_i", "X")


@dataclass(frozen=True)
class GeneExpressionParams:
    """Rates for the four-species transcription/translation model.

    The default rate constants are illustrative, not published values: they
    put the deterministic steady state at roughly (P_o, T, R_i, X) =
    (5, 25, 16, 40), inside the box ``0 <= P_o <= P_tot``,
    ``0 <= R_i <= R_tot``, with transcript and protein relaxation times of
    10 s and 20 s.
    """

    k_bp: float = 1.0   # polymerase binding, scaled by inducer G
    k_up: float = 0.5   # polymerase unbinding
    k_tx: float = 0.5   # transcription
    k_br: float = 0.01  # ribosome binding to transcript
    k_ur: float = 0.5   # ribosome unbinding
    k_tl: float = 0.5   # translation
    d_T: float = 0.1
    d_X: float = 0.05
    P_tot: float = 10.0
    R_tot: float = 20.0
    G: float = 1.0
    x0: tuple[float, float, float, float] = (10.0, 0.0, 20.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        for f in fields(self):
            if f.name == "x0":
                continue
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"must be a nonnegative number, got {value!r}", field=f.name)
        if len(self.x0) != 4 or any(v < 0 for v in self.x0):
            raise ConfigError(f"initial state must be four nonnegative values, got {self.x0}", field="x0")
        P_o, _, R_i, _ = self.x0
        if P_o > self.P_tot:
            raise ConfigError(f"P_o = {P_o} exceeds P_tot = {self.P_tot}", field="x0")
        if R_i > self.R_tot:
            raise ConfigError(f"R_i = {R_i} exceeds R_tot = {self.R_tot}", field="x0")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneExpressionParams":
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown gene-expression parameter {key!r}", field=key)
        return cls(**doc)


def gene_expression_model(params: GeneExpressionParams = GeneExpressionParams()) -> CRN:
    """Eight-channel CLE model over (P_o, T, R_i, X)."""
    P, T, R, X = (SpeciesValue(i) for i in range(4))
    free_P = Complement(params.P_tot, 0)
    free_R = Complement(params.R_tot, 2)
    channels = [
        (Reaction(params.k_bp * params.G, (P,), "polymerase binding"), {"P_o": -1}),
        (Reaction(params.k_up, (free_P,), "polymerase unbinding"), {"P_o": 1}),
        (Reaction(params.k_tx, (free_P,), "transcription"), {"P_o": 1, "T": 1}),
        (Reaction(params.k_br, (T, R), "ribosome binding"), {"T": -1, "R_i": -1}),
        (Reaction(params.k_ur, (free_R,), "ribosome unbinding"), {"T": 1, "R_i": 1}),
        (Reaction(params.k_tl, (free_R,), "translation"), {"T": 1, "R_i": 1, "X": 1}),
        (Reaction(params.d_T, (T,), "transcript decay"), {"T": -1}),
        (Reaction(params.d_X, (X,), "protein decay"), {"X": -1}),
    ]
    return build_crn(GENE_SPECIES, channels)


EXAMPLE_STABILITY = {
    "L_f": 0.85, "L_a": 0.8, "v_bound": 2.7657, "C_A": 100.0, "r_lb": 10.0, "r_ub": 15.0,
    "c_bound": 1.0, "m": 8, "p": 2, "m1": 80.0, "m2": 800.0,
}


@dataclass
class ExperimentConfig:
    """Everything that determines an ensemble run; serialisable to JSON."""

    gene: GeneExpressionParams = field(default_factory=GeneExpressionParams)
    model: dict | None = None  # a CRN model document; overrides ``gene`` when set
    x0: list[float] | None = None  # true initial state; defaults to gene.x0
    delta: float = 5e-4
    horizon: float = 80.0
    runs: int = 100
    seed: int | list[int] = 0
    C: list[list[float]] = field(default_factory=lambda: [[0, 1, 0, 0], [0, 0, 0, 1]])
    R: list[list[float]] = field(default_factory=lambda: [[12.5, 0.0], [0.0, 12.5]])
    xhat0: list[float] = field(default_factory=lambda: [7.0, 3.0, 17.0, 3.0])
    P0: list[list[float]] = field(default_factory=lambda: (10.0 * np.eye(4)).tolist())
    Q0: list[list[float]] | None = None
    sim_substeps: int = 1
    batch: int = 100
    process_noise: bool = True
    measurement_noise: bool = True
    stability: dict = field(default_factory=lambda: dict(EXAMPLE_STABILITY))

    def __post_init__(self):
        if isinstance(self.gene, dict):
            self.gene = GeneExpressionParams.from_dict(self.gene)
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ConfigError(f"must be positive, got {self.delta}", field="delta")
        if not self.horizon > 0:
            raise ConfigError(f"must be positive, got {self.horizon}", field="horizon")
        if int(self.runs) != self.runs or self.runs < 1:
            raise ConfigError(f"must be a positive integer, got {self.runs}", field="runs")
        if int(self.batch) != self.batch or self.batch < 1:
            raise ConfigError(f"must be a positive integer, got {self.batch}", field="batch")
        if int(self.sim_substeps) != self.sim_substeps or self.sim_substeps < 1:
            raise ConfigError(f"must be a positive integer, got {self.sim_substeps}", field="sim_substeps")
        if isinstance(self.seed, (list, tuple)) and len(self.seed) != self.runs:
            raise ConfigError(f"{len(self.seed)} seeds given for {self.runs} runs", field="seed")
        steps = round(self.horizon / self.delta)
        if steps < 1 or abs(steps * self.delta - self.horizon) > 1e-9 * self.horizon:
            raise ConfigError(f"horizon {self.horizon} is not a whole number of steps of {self.delta}",
                              field="horizon")

    @property
    def steps(self) -> int:
        return round(self.horizon / self.delta)

    @property
    def seeds(self) -> list[int]:
        if isinstance(self.seed, (list, tuple)):
            return [int(s) for s in self.seed]
        return [int(self.seed) + r for r in range(self.runs)]

    def crn(self) -> CRN:
        return crn_from_dict(self.model) if self.model is not None else gene_expression_model(self.gene)

    def initial_state(self) -> np.ndarray:
        return np.asarray(self.x0 if self.x0 is not None else self.gene.x0, dtype=float)

    def measurement_model(self) -> MeasurementModel:
        return MeasurementModel(np.asarray(self.C, float), np.asarray(self.R, float))

    def stability_params(self) -> StabilityParams:
        return StabilityParams.from_dict(self.stability)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("experiment configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}", field=key)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["gene"] = asdict(self.gene)
        doc["gene"]["x0"] = list(self.gene.x0)
        return doc


@dataclass
class EnsembleMetrics:
    """Per-step ensemble means, indexed ``k = 0..steps`` at time ``k * delta``."""

    mse: np.ndarray  # mean ||x_k - xhat_k+||^2
    p_norm: np.ndarray  # mean ||P_k+||
    q_norm: np.ndarray  # mean ||Q_k||, Q_k built from xhat_k+
    runs: int
    delta: float
    innovations: np.ndarray | None = None  # run 0 only, (steps, p)
    first_run_error: np.ndarray | None = None  # run 0 only, x_k - xhat_k+, (steps + 1, n)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.mse.size) * self.delta


def _max_eig(S: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(S)[..., -1]


def _sq_norm(e: np.ndarray) -> np.ndarray:
    out = e[..., 0] * e[..., 0]
    for i in range(1, e.shape[-1]):
        out = out + e[..., i] * e[..., i]
    return out


def _run_batch(config: ExperimentConfig, run_ids: Sequence[int], keep_first: bool):
    crn = config.crn()
    model = config.measurement_model()
    C, R = model.C, model.R
    Q0 = None if config.Q0 is None else np.asarray(config.Q0, float)
    delta, sub = config.delta, config.sim_substeps
    dsim = delta / sub
    steps = config.steps
    seeds = [config.seeds[r] for r in run_ids]
    B, n = len(run_ids), crn.n

    x = np.tile(config.initial_state(), (B, 1))
    xhat = np.tile(np.asarray(config.xhat0, float), (B, 1))
    P = np.tile(np.asarray(config.P0, float), (B, 1, 1))
    if x.shape[1] != n or xhat.shape[1] != n or P.shape[1:] != (n, n):
        raise ConfigError(f"initial state, estimate and covariance must match {n} species", field="xhat0")
    P = 0.5 * (P + np.swapaxes(P, -1, -2))

    mse = np.empty(steps + 1)
    pn = np.empty(steps + 1)
    qn = np.empty(steps + 1)
    mse[0] = np.sum(_sq_norm(x - xhat))
    pn[0] = np.sum(_max_eig(P))
    innovations = np.empty((steps, model.p)) if keep_first else None
    errors = np.empty((steps + 1, n)) if keep_first else None
    if keep_first:
        errors[0] = x[0] - xhat[0]

    streams = [NoiseStream(s, PROCESS_STREAM, crn.m) for s in seeds]
    chunk = 2048
    for k0 in range(0, steps, chunk):
        count = min(chunk, steps - k0)
        if config.process_noise:
            w = np.stack([s.normals(k0 * sub, count * sub) for s in streams])
        else:
            w = np.zeros((B, count * sub, crn.m))
        if config.measurement_noise:
            v = np.stack([measurement_noise(model, s, k0, count) for s in seeds])
        else:
            v = np.zeros((B, count, model.p))
        for j in range(count):
            k = k0 + j
            for s in range(sub):
                x = cle_step(crn, x, dsim, w[:, j * sub + s])
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=-1))[0])
                raise NumericalError("non-finite true state", step=k + 1, run=run_ids[bad])
            y = matvec(C, x) + v[:, j]
            prior_mean, prior_cov, _, Q = predict_arrays(crn, xhat, P, delta, Q0=Q0)
            xhat, P, _, innov = correct_arrays(prior_mean, prior_cov, y, C, R)
            if not (np.all(np.isfinite(xhat)) and np.all(np.isfinite(P))):
                bad = int(np.flatnonzero(~(np.all(np.isfinite(xhat), axis=-1)
                                           & np.all(np.isfinite(P), axis=(-2, -1))))[0])
                raise NumericalError("non-finite filter state", step=k + 1, run=run_ids[bad])
            lam = _max_eig(np.concatenate([Q, P]))
            qn[k] = np.sum(lam[:B])
            pn[k + 1] = np.sum(lam[B:])
            mse[k + 1] = np.sum(_sq_norm(x - xhat))
            if keep_first:
                innovations[k] = innov[0]
                errors[k + 1] = x[0] - xhat[0]
    qn[steps] = np.sum(_max_eig(process_noise_cov(crn, xhat, delta, Q0)))
    return mse, pn, qn, innovations, errors


def _batches(config: ExperimentConfig) -> list[list[int]]:
    ids = list(range(config.runs))
    return [ids[i:i + config.batch] for i in range(0, config.runs, config.batch)]


def _run_batch_job(args):
    doc, run_ids, keep = args
    return _run_batch(ExperimentConfig.from_dict(doc), run_ids, keep)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> EnsembleMetrics:
    """Run the ensemble and average the per-step metrics over runs.

    ``jobs > 1`` farms batches out to worker processes; results are
    bit-identical to ``jobs = 1``.
    """
    batches = _batches(config)
    tasks = [(config.to_dict(), ids, ids[0] == 0) for ids in batches]
    if jobs > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(batches))) as pool:
            results = list(pool.map(_run_batch_job, tasks))
    else:
        results = [_run_batch(config, ids, keep) for _, ids, keep in tasks]

    mse, pn, qn, innovations, errors = results[0]
    mse, pn, qn = mse.copy(), pn.copy(), qn.copy()
    for m_b, p_b, q_b, _, _ in results[1:]:
        mse += m_b
        pn += p_b
        qn += q_b
    runs = config.runs
    return EnsembleMetrics(mse / runs, pn / runs, qn / runs, runs, config.delta, innovations, errors)


# -- innovation whiteness ---------------------------------------------------

@dataclass
class WhitenessReport:
    autocorrelation: np.ndarray  # (p, max_lag), lags 1..max_lag
    ljung_box: np.ndarray  # (p,)
    p_values: np.ndarray  # (p,)
    fraction_in_band: np.ndarray  # (p,)
    band: float
    samples: int

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "band": self.band,
            "ljung_box": self.ljung_box.tolist(),
            "p_values": self.p_values.tolist(),
            "fraction_in_band": self.fraction_in_band.tolist(),
        }


def innovation_whiteness(records: Sequence[StepRecord] | np.ndarray, max_lag: int = 20) -> WhitenessReport:
    """Sample autocorrelation and Ljung-Box statistic of each innovation channel.

    Accepts StepRecords or a raw ``(N, p)`` innovation array. A channel with
    zero variance is reported as perfectly correlated.
    """
    from scipy.stats import chi2

    if isinstance(records, np.ndarray):
        e = np.atleast_2d(records.T).T if records.ndim == 1 else records
    else:
        e = np.array([r.innovation for r in records], dtype=float)
    N = e.shape[0]
    if max_lag < 1 or N < 10 * max_lag:
        raise ConfigError(f"need at least {10 * max_lag} innovations for {max_lag} lags, got {N}",
                          field="max_lag")
    d = e - e.mean(axis=0)
    denom = np.sum(d ** 2, axis=0)
    lags = np.arange(1, max_lag + 1)
    acf = np.ones((e.shape[1], max_lag))
    for i in range(e.shape[1]):
        if denom[i] > 0:
            acf[i] = [np.dot(d[:-h, i], d[h:, i]) / denom[i] for h in lags]
    lb = N * (N + 2) * np.sum(acf ** 2 / (N - lags), axis=1)
    band = 1.96 / math.sqrt(N)
    return WhitenessReport(acf, lb, chi2.sf(lb, max_lag), np.mean(np.abs(acf) <= band, axis=1), band, N)


# -- outputs ----------------------------------------------------------------

CLAMPING_NOTE = ("propensities are clamped at zero before use in drift, diffusion and Q_k; "
                 "states are not clamped")


def tail(series: np.ndarray) -> np.ndarray:
    """Final quarter of a series (at least one point)."""
    return series[-max(1, len(series) // 4):]


def summarize(metrics: EnsembleMetrics, config: ExperimentConfig) -> dict:
    """Boundedness diagnostics for an ensemble, as a JSON-ready dict."""
    from .stability import check_exponential_bound, gamma, stability_report

    params = config.stability_params()
    report = stability_report(params)
    g = gamma(params, config.delta)
    doc = {
        "delta": config.delta,
        "runs": metrics.runs,
        "stability": report.to_dict(),
        "gamma": g,
        "delta_below_delta_max": config.delta < report.delta_max,
        "p_norm_tail_max_over_mean": float(tail(metrics.p_norm).max() / tail(metrics.p_norm).mean()),
        "q_norm_tail_cv": float(tail(metrics.q_norm).std() / tail(metrics.q_norm).mean()),
    }
    if 0 < g < 1:
        doc["bound_check"] = check_exponential_bound(metrics.mse, g).to_dict()
    if metrics.innovations is not None and len(metrics.innovations) >= 200:
        doc["whiteness_run0"] = innovation_whiteness(metrics.innovations, 20).to_dict()
    return doc


def write_outputs(metrics: EnsembleMetrics, config: ExperimentConfig, out_dir, *, plot: bool = False) -> list:
    from .csvio import write_json, write_table

    out_dir = Path(out_dir)
    k = np.arange(metrics.mse.size)
    written = [
        write_table(out_dir / "mse_norm.csv", ["k", "t", "value"], [k, metrics.times, metrics.mse], 1),
        write_table(out_dir / "p_norm.csv", ["k", "t", "value"], [k, metrics.times, metrics.p_norm], 1),
        write_table(out_dir / "q_norm.csv", ["k", "t", "value"], [k, metrics.times, metrics.q_norm], 1),
        write_json(out_dir / "config_echo.json",
                   {"config": config.to_dict(), "steps": config.steps, "propensity_clamping": CLAMPING_NOTE}),
        write_json(out_dir / "summary.json", summarize(metrics, config)),
    ]
    if plot:
        from .plotting import plot_ensemble

        written += plot_ensemble(metrics, out_dir, config.crn().species)
    return written
