"""Monte-Carlo error harness: MSE curves, bound overlays, chaos estimates.

Replicas are independent jobs keyed by replica index: replica r derives its
own master seed, simulates a fresh truth/observation path, runs the exact
Kalman-Bucy reference from the true prior and the finite-N filter on the
same increments, and reports squared errors on a fixed grid.  Aggregation
is a commutative reduction over the replica index, so results do not depend
on worker count or scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import hashlib

import numpy as np

from .fpf import run_fpf, run_meanfield_copies
from .kalman import run_kalman
from .model import LinearGaussianModel, RngStream, replica_seed, simulate_truth
from .riccati import scalar_constants

__all__ = [
    "FitResult",
    "ErrorReport",
    "PocReport",
    "fit_rate",
    "bound_curves",
    "mse_vs_time",
    "mse_vs_N",
    "poc_sweep",
    "write_mse_time_csv",
    "write_mse_n_csv",
    "write_poc_csv",
    "write_trajectory_csv",
]

# Hard cap on silently excluded replicas.
MAX_FAILURE_FRACTION = 0.01
GH_POINTS = 64


@dataclass(frozen=True)
class FitResult:
    """Fitted slope/rate with a 1.96-standard-error half-width."""

    value: float
    half_width: float
    mode: str


def fit_rate(xs, ys, mode: str, y_stderr=None) -> FitResult:
    """Least-squares rate or power-law fit.

    mode="exponential" regresses log y on x (value = decay/growth rate);
    mode="power" regresses log y on log x (value = slope).  When per-point
    standard errors of y are supplied the fit is weighted by the delta-method
    log-scale uncertainties se/y.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    if xs.size < 3:
        raise ValueError("rate fitting needs at least 3 points")
    if np.any(ys <= 0):
        raise ValueError("ys must be strictly positive for a log-scale fit")
    if mode == "exponential":
        x = xs
    elif mode == "power":
        if np.any(xs <= 0):
            raise ValueError("xs must be strictly positive for a power fit")
        x = np.log(xs)
    else:
        raise ValueError("mode must be 'exponential' or 'power'")
    y = np.log(ys)
    if y_stderr is None:
        w = np.ones_like(y)
    else:
        sigma_log = np.clip(np.asarray(y_stderr, dtype=float) / ys, 1e-12, None)
        w = 1.0 / sigma_log
    X = np.column_stack([np.ones_like(x), x])
    Xw = X * w[:, None]
    yw = y * w
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    dof = xs.size - 2
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(Xw.T @ Xw)
    return FitResult(value=float(coef[1]),
                     half_width=float(1.96 * np.sqrt(max(cov[1, 1], 0.0))),
                     mode=mode)


@dataclass(frozen=True)
class ErrorReport:
    """Time- or N-indexed Monte-Carlo error statistics with fits and bounds."""

    axis: str
    grid: np.ndarray
    mse_mean: np.ndarray
    se_mean: np.ndarray
    mse_cov: np.ndarray
    se_cov: np.ndarray
    bound_mean: np.ndarray | None
    bound_cov: np.ndarray | None
    fit_mean: FitResult | None
    fit_cov: FitResult | None
    n_replicas: int
    n_failed: int

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        for name in ("mse_mean", "se_mean", "mse_cov", "se_cov"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class PocReport:
    """Propagation-of-chaos statistics over an N grid."""

    N_grid: np.ndarray
    coupling_mse: np.ndarray
    se_coupling: np.ndarray
    weak_stat: np.ndarray
    se_weak: np.ndarray
    fit_coupling: FitResult
    fit_weak: FitResult | None
    n_replicas: int
    n_failed: int


def bound_curves(model: LinearGaussianModel, t_grid, N: int):
    """Scalar mean/covariance MSE bound overlays with Gaussian prior moments.

    bound_mean(t) = (c1 E|X0-m0|^2 + c2(t) E|X0-m0|^4) e^{-2 lambda0 t} / N
    bound_cov(t)  =  c3 E|X0-m0|^4 e^{-4 lambda0 t} / N

    with E|X0-m0|^2 = Sigma0 and E|X0-m0|^4 = 3 Sigma0^2.  Rejects d > 1,
    where the constants are not explicit.
    """
    if model.d != 1:
        raise ValueError("bound overlays are scalar-only (d = 1)")
    consts = scalar_constants(model)
    t = np.asarray(t_grid, dtype=float)
    S0 = float(model.Sigma0[0, 0])
    e2, e4 = S0, 3.0 * S0**2
    decay2 = np.exp(-2.0 * consts.lambda0 * t)
    bound_mean = (consts.c1 * e2 + consts.c2(t) * e4) * decay2 / N
    bound_cov = consts.c3 * e4 * decay2**2 / N
    return bound_mean, bound_cov


# ---------------------------------------------------------------------------
# replica machinery


def _chunk_worker(worker, job, replicas):
    out = []
    for r in replicas:
        try:
            out.append((r, worker(job, r)))
        except Exception as exc:  # excluded below, capped at 1%
            out.append((r, exc))
    return out


def _map_replicas(worker: Callable, job, M: int, workers: int) -> dict:
    """Evaluate worker(job, r) for r = 0..M-1, optionally across processes."""
    if workers is None or workers <= 1:
        return dict(_chunk_worker(worker, job, range(M)))
    chunks = [c for c in np.array_split(np.arange(M), 4 * workers) if c.size]
    results: dict = {}
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(_chunk_worker, worker, job, list(chunk))
                   for chunk in chunks]
        for fut in futures:
            results.update(dict(fut.result()))
    return results


def _collect(results: dict, M: int, what: str):
    """Split results into ordered successes and failures; enforce the 1% cap."""
    failures = [(r, v) for r, v in results.items() if isinstance(v, Exception)]
    if len(failures) > MAX_FAILURE_FRACTION * M:
        r0, exc = failures[0]
        raise RuntimeError(
            f"{len(failures)}/{M} {what} replicas failed (cap {MAX_FAILURE_FRACTION:.0%}); "
            f"first failure at replica {r0}: {exc}")
    ok = [results[r] for r in sorted(results) if not isinstance(results[r], Exception)]
    return ok, len(failures)


def _mean_se(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = stack.shape[0]
    return stack.mean(axis=0), stack.std(axis=0, ddof=1) / np.sqrt(n)


# ---------------------------------------------------------------------------
# MSE versus time


@dataclass(frozen=True)
class _TimeJob:
    model: LinearGaussianModel
    N: int
    dt: float
    T: float
    variant: str
    omega_mode: str
    master_seed: int
    grid_idx: np.ndarray


def _time_replica(job: _TimeJob, r: int):
    stream = RngStream(replica_seed(job.master_seed, r))
    obs = simulate_truth(job.model, job.dt, job.T, stream)
    kal = run_kalman(job.model, obs)
    run = run_fpf(job.model, obs, job.N, job.variant, stream,
                  omega_mode=job.omega_mode, record_particles=False)
    dm = run.means[job.grid_idx] - kal.means[job.grid_idx]
    dS = run.covs[job.grid_idx] - kal.covs[job.grid_idx]
    return (np.einsum("ij,ij->i", dm, dm),
            np.einsum("ijk,ijk->i", dS, dS))


def mse_vs_time(model: LinearGaussianModel, N: int, M: int, dt: float, T: float,
                variant: str, rng: RngStream, omega_mode: str = "zero",
                grid_points: int = 41, fit_window: float = 0.5,
                workers: int = 1) -> ErrorReport:
    """Monte-Carlo E|m^N_t - m_t|^2 and E|Sigma^N_t - Sigma_t|_F^2 versus time.

    The exponential decay rate is fitted on the trailing `fit_window`
    fraction of the horizon, where the transient (which decays strictly
    faster) has died out and the asymptotic filter-stability rate applies.
    Scalar models get Prop-style bound overlays.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    K = int(round(T / dt))
    grid_idx = np.unique(np.round(np.linspace(0, K, grid_points)).astype(int))
    job = _TimeJob(model, N, dt, T, variant, omega_mode, rng.master_seed, grid_idx)
    ok, n_failed = _collect(_map_replicas(_time_replica, job, M, workers), M, "mse-time")

    dm2 = np.stack([v[0] for v in ok])
    dS2 = np.stack([v[1] for v in ok])
    mse_mean, se_mean = _mean_se(dm2)
    mse_cov, se_cov = _mean_se(dS2)
    t_grid = grid_idx * dt

    bound_mean = bound_cov = None
    if model.d == 1:
        try:
            bound_mean, bound_cov = bound_curves(model, t_grid, N)
        except ValueError:
            pass  # e.g. sigma_B * C = 0: constants undefined

    tail = t_grid >= (1.0 - fit_window) * T
    fit_mean = fit_cov = None
    if tail.sum() >= 3 and np.all(mse_mean[tail] > 0) and np.all(mse_cov[tail] > 0):
        fit_mean = fit_rate(t_grid[tail], mse_mean[tail], "exponential", se_mean[tail])
        fit_cov = fit_rate(t_grid[tail], mse_cov[tail], "exponential", se_cov[tail])
    return ErrorReport(axis="time", grid=t_grid,
                       mse_mean=mse_mean, se_mean=se_mean,
                       mse_cov=mse_cov, se_cov=se_cov,
                       bound_mean=bound_mean, bound_cov=bound_cov,
                       fit_mean=fit_mean, fit_cov=fit_cov,
                       n_replicas=len(ok), n_failed=n_failed)


# ---------------------------------------------------------------------------
# MSE versus N


@dataclass(frozen=True)
class _NJob:
    model: LinearGaussianModel
    N_list: tuple
    dt: float
    t_star: float
    variant: str
    omega_mode: str
    master_seed: int


def _n_replica(job: _NJob, r: int):
    stream = RngStream(replica_seed(job.master_seed, r))
    obs = simulate_truth(job.model, job.dt, job.t_star, stream)
    kal = run_kalman(job.model, obs)
    out_m = np.empty(len(job.N_list))
    out_S = np.empty(len(job.N_list))
    for j, N in enumerate(job.N_list):
        run = run_fpf(job.model, obs, N, job.variant, stream,
                      omega_mode=job.omega_mode, record_particles=False)
        dm = run.means[-1] - kal.means[-1]
        dS = run.covs[-1] - kal.covs[-1]
        out_m[j] = dm @ dm
        out_S[j] = float((dS * dS).sum())
    return out_m, out_S


def mse_vs_N(model: LinearGaussianModel, N_list: Sequence[int], t_star: float,
             M: int, dt: float, variant: str, rng: RngStream,
             omega_mode: str = "zero", workers: int = 1) -> ErrorReport:
    """Monte-Carlo MSE at a fixed time versus ensemble size.

    Within one replica the same truth/observation path and Kalman reference
    feed every N (the per-particle streams are N-independent by design, so
    the ensembles stay coupled across the sweep); across replicas everything
    is independent.  Fits a weighted log-log slope.
    """
    N_arr = np.asarray(list(N_list), dtype=int)
    if np.any(np.diff(N_arr) <= 0) or np.any(N_arr < 2):
        raise ValueError("N_list must be strictly increasing with every N >= 2")
    if M < 2:
        raise ValueError("M must be at least 2")
    job = _NJob(model, tuple(int(n) for n in N_arr), dt, t_star, variant,
                omega_mode, rng.master_seed)
    ok, n_failed = _collect(_map_replicas(_n_replica, job, M, workers), M, "mse-N")

    dm2 = np.stack([v[0] for v in ok])
    dS2 = np.stack([v[1] for v in ok])
    mse_mean, se_mean = _mean_se(dm2)
    mse_cov, se_cov = _mean_se(dS2)
    fit_mean = fit_rate(N_arr, mse_mean, "power", se_mean) if len(N_arr) >= 3 else None
    fit_cov = fit_rate(N_arr, mse_cov, "power", se_cov) if len(N_arr) >= 3 else None
    return ErrorReport(axis="N", grid=N_arr.astype(float),
                       mse_mean=mse_mean, se_mean=se_mean,
                       mse_cov=mse_cov, se_cov=se_cov,
                       bound_mean=None, bound_cov=None,
                       fit_mean=fit_mean, fit_cov=fit_cov,
                       n_replicas=len(ok), n_failed=n_failed)


# ---------------------------------------------------------------------------
# propagation of chaos


def f_tanh(x):
    return np.tanh(x)


def f_const(x):
    return np.ones_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class _PocJob:
    model: LinearGaussianModel
    N_list: tuple
    dt: float
    t_star: float
    omega_mode: str
    master_seed: int
    f: Callable


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _poc_replica(job: _PocJob, r: int):
    stream = RngStream(replica_seed(job.master_seed, r))
    obs = simulate_truth(job.model, job.dt, job.t_star, stream)
    kal = run_kalman(job.model, obs)
    m_star = float(kal.means[-1, 0])
    S_star = float(kal.covs[-1, 0, 0])
    nodes, weights = np.polynomial.hermite.hermgauss(GH_POINTS)
    cond_exp = float(weights @ job.f(m_star + np.sqrt(2.0 * S_star) * nodes)
                     / np.sqrt(np.pi))
    out_c = np.empty(len(job.N_list))
    out_w = np.empty(len(job.N_list))
    for j, N in enumerate(job.N_list):
        run = run_fpf(job.model, obs, N, "deterministic", stream,
                      omega_mode=job.omega_mode, record_particles=False)
        mf = run_meanfield_copies(job.model, obs, N, stream,
                                  omega_mode=job.omega_mode, reference=kal,
                                  record_particles=False)
        if _sha(run.initial_particles) != _sha(mf.initial_particles):
            raise RuntimeError("coupling broken: initial particle draws differ")
        diff = run.final_particles - mf.final_particles
        out_c[j] = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
        out_w[j] = (float(np.mean(job.f(run.final_particles[:, 0]))) - cond_exp) ** 2
    return out_c, out_w


def poc_sweep(model: LinearGaussianModel, N_list: Sequence[int], t_star: float,
              M: int, rng: RngStream, f: Callable = f_tanh, dt: float = 1e-3,
              omega_mode: str = "zero", workers: int = 1) -> PocReport:
    """Coupled finite-N / mean-field error and the weak-convergence statistic.

    For each N the deterministic filter and its mean-field copies run on the
    same observation increments with bitwise-identical initial draws (hash
    checked).  coupling_mse averages |X^i - Xbar^i|^2 over particles and
    replicas; weak_stat is E|N^{-1} sum f(X^i) - E[f(X)|Z]|^2 with the
    conditional expectation evaluated by Gauss-Hermite quadrature against
    the exact Gaussian posterior from the Kalman reference.
    """
    if model.d != 1:
        raise ValueError("propagation-of-chaos experiments are scalar-only (d = 1)")
    N_arr = np.asarray(list(N_list), dtype=int)
    if np.any(np.diff(N_arr) <= 0) or np.any(N_arr < 2):
        raise ValueError("N_list must be strictly increasing with every N >= 2")
    job = _PocJob(model, tuple(int(n) for n in N_arr), dt, t_star,
                  omega_mode, rng.master_seed, f)
    ok, n_failed = _collect(_map_replicas(_poc_replica, job, M, workers), M, "poc")

    c = np.stack([v[0] for v in ok])
    w = np.stack([v[1] for v in ok])
    coupling_mse, se_coupling = _mean_se(c)
    weak_stat, se_weak = _mean_se(w)
    fit_coupling = fit_rate(N_arr, coupling_mse, "power", se_coupling)
    fit_weak = None
    if np.all(weak_stat > 0):
        fit_weak = fit_rate(N_arr, weak_stat, "power", se_weak)
    return PocReport(N_grid=N_arr.astype(float),
                     coupling_mse=coupling_mse, se_coupling=se_coupling,
                     weak_stat=weak_stat, se_weak=se_weak,
                     fit_coupling=fit_coupling, fit_weak=fit_weak,
                     n_replicas=len(ok), n_failed=n_failed)


# ---------------------------------------------------------------------------
# CSV export


def _write_csv(path, comments: list[str], header: list[str], columns: list) -> None:
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _fit_comment(label: str, fit: FitResult | None) -> str:
    if fit is None:
        return f"{label}: n/a"
    return f"{label}: value={fit.value:.6g} half_width={fit.half_width:.6g} mode={fit.mode}"


def write_mse_time_csv(report: ErrorReport, path, seed: int) -> None:
    n = report.grid.shape[0]
    nancol = np.full(n, np.nan)
    _write_csv(
        path,
        [f"seed={seed}", f"n_replicas={report.n_replicas} n_failed={report.n_failed}",
         _fit_comment("fit_mean", report.fit_mean), _fit_comment("fit_cov", report.fit_cov)],
        ["t", "mse_mean", "se_mean", "mse_cov", "se_cov", "bound_mean", "bound_cov"],
        [report.grid, report.mse_mean, report.se_mean, report.mse_cov, report.se_cov,
         report.bound_mean if report.bound_mean is not None else nancol,
         report.bound_cov if report.bound_cov is not None else nancol])


def write_mse_n_csv(report: ErrorReport, path, seed: int) -> None:
    _write_csv(
        path,
        [f"seed={seed}", f"n_replicas={report.n_replicas} n_failed={report.n_failed}",
         _fit_comment("slope_mean", report.fit_mean), _fit_comment("slope_cov", report.fit_cov)],
        ["N", "mse_mean", "se_mean", "mse_cov", "se_cov"],
        [report.grid, report.mse_mean, report.se_mean, report.mse_cov, report.se_cov])


def write_poc_csv(report: PocReport, path, seed: int) -> None:
    _write_csv(
        path,
        [f"seed={seed}", f"n_replicas={report.n_replicas} n_failed={report.n_failed}",
         _fit_comment("slope_coupling", report.fit_coupling),
         _fit_comment("slope_weak", report.fit_weak)],
        ["N", "coupling_mse", "se_coupling", "weak_stat", "se_weak"],
        [report.N_grid, report.coupling_mse, report.se_coupling,
         report.weak_stat, report.se_weak])


def write_trajectory_csv(fpf_run, kal_run, path, seed: int) -> None:
    """Per-particle snapshot rows at t_k, k = 0..K-1 (K*N rows plus header).

    For d = 1 the documented schema (t, i, x, m_N, Sigma_N, m_kf, Sigma_kf);
    for d > 1 the state columns generalize to per-component / vech layouts.
    """
    if fpf_run.particles is None:
        raise ValueError("trajectory export needs run_fpf(record_particles=True)")
    K = fpf_run.times.shape[0] - 1
    N = fpf_run.particles.shape[1]
    d = fpf_run.particles.shape[2]
    il = np.tril_indices(d)
    if d == 1:
        header = ["t", "i", "x", "m_N", "Sigma_N", "m_kf", "Sigma_kf"]
    else:
        header = (["t", "i"] + [f"x{j}" for j in range(d)]
                  + [f"m_N{j}" for j in range(d)]
                  + [f"Sigma_N_{i}{j}" for i, j in zip(*il)]
                  + [f"m_kf{j}" for j in range(d)]
                  + [f"Sigma_kf_{i}{j}" for i, j in zip(*il)])
    t_col = np.repeat(fpf_run.times[:K], N)
    i_col = np.tile(np.arange(N), K)
    x_cols = fpf_run.particles[:K].reshape(K * N, d)
    mN = np.repeat(fpf_run.means[:K], N, axis=0)
    SN = np.repeat(fpf_run.covs[:K][:, il[0], il[1]], N, axis=0)
    mk = np.repeat(kal_run.means[:K], N, axis=0)
    Sk = np.repeat(kal_run.covs[:K][:, il[0], il[1]], N, axis=0)
    data = np.column_stack([t_col, i_col, x_cols, mN, SN, mk, Sk])
    with open(path, "w") as fh:
        fh.write(f"# seed={seed}\n")
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
