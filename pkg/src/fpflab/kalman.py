"""Kalman-Bucy reference filter (Euler-discretized).

The conditional mean and covariance evolve as

    dm_t     = A m_t dt + K_t (dZ_t - C m_t dt),    K_t = Sigma_t C^T
    dSigma/dt = A Sigma + Sigma A^T + sigma sigma^T - Sigma C^T C Sigma

Both are stepped with the same forward Euler scheme as the particle
filters so that moment-exactness comparisons hold at the discrete level;
the RK4 path in `riccati` remains the high-accuracy covariance oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearGaussianModel, ObservationPath
from .riccati import riccati_rhs

__all__ = ["FilterState", "KalmanRun", "kalman_step", "run_kalman", "write_kalman_csv"]


@dataclass(frozen=True)
class FilterState:
    """Conditional (mean, covariance) at time t."""

    m: np.ndarray
    Sigma: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape != (m.shape[0], m.shape[0]):
            raise ValueError(f"Sigma shape {S.shape} does not match mean length {m.shape[0]}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "Sigma", S)


@dataclass(frozen=True)
class KalmanRun:
    """Filter trajectory on the shared grid: times (K+1,), means (K+1, d), covs (K+1, d, d)."""

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def state(self, k: int) -> FilterState:
        return FilterState(self.means[k].copy(), self.covs[k].copy(), float(self.times[k]))


def _euler_update(m, S, dZ, dt, model):
    gain = S @ model.C.T
    m_new = m + (model.A @ m) * dt + gain @ (dZ - (model.C @ m) * dt)
    S_new = S + riccati_rhs(S, model) * dt
    return m_new, 0.5 * (S_new + S_new.T)


def _run_scalar(m0, S0, dZ, dt, model, means, covs):
    # Scalar fast path: same recursion as _euler_update without per-step
    # array dispatch (the error harness runs d = 1 models).
    a = float(model.A[0, 0])
    c = float(model.C[0, 0])
    q = float(model.noise_cov[0, 0])
    ctc = float(model.CtC[0, 0])
    m, S = float(m0[0]), float(S0[0, 0])
    mcol, scol = means[:, 0], covs[:, 0, 0]
    dZf = dZ[:, 0].tolist()
    for k in range(dZ.shape[0]):
        m = m + a * m * dt + S * c * (dZf[k] - c * m * dt)
        S = S + (a * S + S * a + q - S * ctc * S) * dt
        mcol[k + 1] = m
        scol[k + 1] = S


def kalman_step(state: FilterState, dZ: np.ndarray, dt: float,
                model: LinearGaussianModel) -> FilterState:
    """One Euler step of the mean/covariance recursion."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dZ = np.atleast_1d(np.asarray(dZ, dtype=float))
    m_new, S_new = _euler_update(state.m, state.Sigma, dZ, dt, model)
    if not (np.isfinite(m_new).all() and np.isfinite(S_new).all()):
        raise FloatingPointError("non-finite filter state after update")
    return FilterState(m_new, S_new, state.t + dt)


def run_kalman(model: LinearGaussianModel, obs: ObservationPath,
               init: FilterState | None = None) -> KalmanRun:
    """Run the filter over all observation increments.

    `init` defaults to the prior (m0, Sigma0) at t = 0; a nonzero start time
    is rejected.  The covariance trajectory is deterministic given (model, dt)
    and never depends on the observation realization.
    """
    if init is None:
        init = FilterState(model.m0.copy(), model.Sigma0.copy(), 0.0)
    if init.t != 0.0:
        raise ValueError("initial state must have t = 0")
    K, d, dt = obs.steps, model.d, obs.dt
    means = np.empty((K + 1, d))
    covs = np.empty((K + 1, d, d))
    means[0], covs[0] = init.m, init.Sigma
    dZ = obs.dZ
    if d == 1 and model.m == 1:
        _run_scalar(init.m, init.Sigma, dZ, dt, model, means, covs)
    else:
        m, S = init.m, init.Sigma
        for k in range(K):
            m, S = _euler_update(m, S, dZ[k], dt, model)
            means[k + 1], covs[k + 1] = m, S
    bad = ~np.isfinite(means).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite filter state at step {int(np.argmax(bad))}")
    return KalmanRun(times=obs.times(), means=means, covs=covs)


def write_kalman_csv(run: KalmanRun, path) -> None:
    """Write rows (t, m[0..d), vech(Sigma)) with vech stacking the lower triangle row-wise."""
    d = run.means.shape[1]
    il = np.tril_indices(d)
    header = (["t"] + [f"m{j}" for j in range(d)]
              + [f"Sigma_{i}{j}" for i, j in zip(*il)])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(run.times.shape[0]):
            row = [run.times[k], *run.means[k], *run.covs[k][il]]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
