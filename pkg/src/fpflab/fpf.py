"""Finite-N feedback particle filters and their mean-field coupled copies.

Two interacting-ensemble forms of the linear filter are implemented:

stochastic   dX^i = A X^i dt + sigma_B dB^i
                    + K^N (dZ - (C X^i + C m^N)/2 dt)
deterministic dX^i = A m^N dt + K^N (dZ - C m^N dt) + G^N (X^i - m^N) dt

with empirical moments m^N, Sigma^N ((N-1)-normalized), gain K^N = Sigma^N C^T
and

    G^N = A - K^N C / 2 + sigma sigma^T (Sigma^N)^{-1} / 2 + Omega (Sigma^N)^{-1}

for any skew-symmetric Omega.  Both steps freeze moments at the step start.
The Omega term generates a covariance-preserving rotation of the deviations;
it is applied as the exact matrix exponential of dt * Omega (Sigma^N)^{-1} so
that the empirical moment trajectories are invariant under the choice of
Omega to round-off, not merely to O(dt).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .kalman import FilterState, KalmanRun, run_kalman
from .model import (
    PARTICLE_STREAM_BASE,
    LinearGaussianModel,
    ObservationPath,
    RngStream,
    prior_factor,
)
from .riccati import scalar_explicit

__all__ = [
    "Ensemble",
    "EmpiricalMoments",
    "FpfRun",
    "MeanFieldRun",
    "empirical_moments",
    "omega_solve",
    "gain_G",
    "step_deterministic",
    "step_stochastic",
    "initial_particles",
    "run_fpf",
    "run_meanfield_copies",
    "explicit_deterministic_scalar",
    "OMEGA_MODES",
    "VARIANTS",
]

OMEGA_MODES = ("zero", "optimal")
VARIANTS = ("deterministic", "stochastic")
OMEGA_RESIDUAL_TOL = 1e-10
# Relative eigenvalue threshold below which a direction counts as Ker(Sigma).
PINV_RTOL = 1e-12


@dataclass(frozen=True)
class Ensemble:
    """Particle states (N, d) at time t; N >= 2."""

    particles: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.particles, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"particles must have shape (N, d), got {X.shape}")
        if X.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 particles")
        object.__setattr__(self, "particles", X)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def d(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class EmpiricalMoments:
    """Sample mean, (N-1)-normalized covariance, and gain Sigma^N C^T."""

    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray | None = None


def _moments(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, centered particles, symmetrized covariance) of an (N, d) array."""
    N = X.shape[0]
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (N - 1)
    return mean, Xc, 0.5 * (cov + cov.T)


def empirical_moments(ens: Ensemble | np.ndarray,
                      model: LinearGaussianModel | None = None) -> EmpiricalMoments:
    """Empirical moments of an ensemble; the gain requires a model for C."""
    X = ens.particles if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("empirical moments need at least 2 particles")
    mean, _, cov = _moments(X)
    gain = cov @ model.C.T if model is not None else None
    return EmpiricalMoments(mean=mean, cov=cov, gain=gain)


def _skew_basis(d: int) -> list[np.ndarray]:
    basis = []
    for p in range(d):
        for q in range(p + 1, d):
            E = np.zeros((d, d))
            E[p, q], E[q, p] = 1.0, -1.0
            basis.append(E)
    return basis


def omega_solve(Sigma: np.ndarray, model: LinearGaussianModel) -> np.ndarray:
    """Optimal skew-symmetric Omega for a given covariance.

    Solves Omega S^{-1} + S^{-1} Omega = (A^T - A)
        + (S C^T C - C^T C S)/2 + (sigma sigma^T S - S sigma sigma^T)/2
    directly over the d(d-1)/2 independent skew entries, then verifies the
    residual and exact skew-symmetry.
    """
    S = 0.5 * (np.asarray(Sigma, dtype=float) + np.asarray(Sigma, dtype=float).T)
    d = model.d
    if S.shape != (d, d):
        raise ValueError(f"Sigma must be {d}x{d}, got {S.shape}")
    if d == 1:
        return np.zeros((1, 1))
    Sinv = np.linalg.inv(S)
    A, CtC, Q = model.A, model.CtC, model.noise_cov
    rhs = (A.T - A) + 0.5 * (S @ CtC - CtC @ S) + 0.5 * (Q @ S - S @ Q)

    basis = _skew_basis(d)
    iu = np.triu_indices(d, k=1)
    M = np.empty((len(basis), len(basis)))
    for j, E in enumerate(basis):
        M[:, j] = (E @ Sinv + Sinv @ E)[iu]
    try:
        w = np.linalg.solve(M, rhs[iu])
    except np.linalg.LinAlgError:
        raise ValueError("skew system is singular: covariance numerically degenerate")
    Omega = np.zeros((d, d))
    Omega[iu] = w
    Omega -= Omega.T
    residual = float(np.linalg.norm(Omega @ Sinv + Sinv @ Omega - rhs))
    if residual >= OMEGA_RESIDUAL_TOL:
        raise ValueError(f"Omega residual {residual:.3g} exceeds {OMEGA_RESIDUAL_TOL:g}")
    return Omega


def _scalar_inverse(S: float, q: float, pseudo_inverse: bool) -> float:
    """d = 1 counterpart of _sigma_inverse."""
    if S > 0.0:
        return 1.0 / S
    if not pseudo_inverse:
        raise ValueError(
            "empirical covariance is singular; enable pseudo-inverse mode "
            "only if Ker(Sigma) lies inside Ker(sigma_B sigma_B^T)")
    if abs(q) > 1e-10 * max(abs(q), 1.0):
        raise ValueError(
            "kernel condition violated: sigma_B sigma_B^T acts on the "
            "covariance kernel vector [1.]")
    return 0.0


def _sigma_inverse(S: np.ndarray, model: LinearGaussianModel,
                   pseudo_inverse: bool) -> np.ndarray:
    """Inverse of the empirical covariance, or its Moore-Penrose pseudo-inverse.

    Pseudo-inverse mode asserts the kernel condition Ker(Sigma) <= Ker(sigma
    sigma^T); a kernel vector on which the process noise acts is reported.
    """
    if not pseudo_inverse:
        try:
            return np.linalg.inv(S)
        except np.linalg.LinAlgError:
            raise ValueError(
                "empirical covariance is singular; enable pseudo-inverse mode "
                "only if Ker(Sigma) lies inside Ker(sigma_B sigma_B^T)")
    w, V = np.linalg.eigh(S)
    thresh = PINV_RTOL * max(float(w.max()), 0.0)
    Q = model.noise_cov
    qscale = max(float(np.abs(Q).max()), 1.0)
    inv_w = np.zeros_like(w)
    for i, wi in enumerate(w):
        if wi > thresh:
            inv_w[i] = 1.0 / wi
        else:
            v = V[:, i]
            if float(np.abs(Q @ v).max()) > 1e-10 * qscale:
                raise ValueError(
                    f"kernel condition violated: sigma_B sigma_B^T acts on the "
                    f"covariance kernel vector {np.array2string(v, precision=6)}")
    return (V * inv_w) @ V.T


def gain_G(Sigma_N: np.ndarray, Omega: np.ndarray, model: LinearGaussianModel,
           pseudo_inverse: bool = False) -> np.ndarray:
    """Deterministic-filter gain A - K^N C/2 + sigma sigma^T Sigma^{-1}/2 + Omega Sigma^{-1}."""
    S = np.atleast_2d(np.asarray(Sigma_N, dtype=float))
    Om = np.atleast_2d(np.asarray(Omega, dtype=float))
    Sinv = _sigma_inverse(S, model, pseudo_inverse)
    return (model.A - 0.5 * (S @ model.CtC) + 0.5 * (model.noise_cov @ Sinv)
            + Om @ Sinv)


def _det_update(X, mean, Xc, S, dZ, dt, model, omega_mode, pseudo_inverse):
    Sinv = _sigma_inverse(S, model, pseudo_inverse)
    gain = S @ model.C.T
    G0 = model.A - 0.5 * (S @ model.CtC) + 0.5 * (model.noise_cov @ Sinv)
    drift = (model.A @ mean) * dt + gain @ (dZ - (model.C @ mean) * dt)
    if omega_mode == "optimal":
        Omega = omega_solve(S, model)
        # Exact rotation: preserves the empirical covariance, so moments do
        # not depend on Omega beyond round-off.
        Xc = Xc @ expm(dt * (Omega @ Sinv)).T
    return (mean + drift) + Xc + dt * (Xc @ G0.T)


def _stoch_update(X, mean, dZ, dt, model, noise, gain):
    innov = dZ - 0.5 * dt * ((X + mean) @ model.C.T)
    return (X + dt * (X @ model.A.T) + np.sqrt(dt) * (noise @ model.sigma_B.T)
            + innov @ gain.T)


def step_deterministic(ens: Ensemble, dZ: np.ndarray, dt: float,
                       model: LinearGaussianModel, omega_mode: str = "zero",
                       pseudo_inverse: bool = False) -> Ensemble:
    """One deterministic-filter step with moments frozen at the step start."""
    if omega_mode not in OMEGA_MODES:
        raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
    dZ = np.atleast_1d(np.asarray(dZ, dtype=float))
    mean, Xc, S = _moments(ens.particles)
    X_new = _det_update(ens.particles, mean, Xc, S, dZ, dt, model,
                        omega_mode, pseudo_inverse)
    return Ensemble(X_new, ens.t + dt)


def step_stochastic(ens: Ensemble, dZ: np.ndarray, dt: float,
                    model: LinearGaussianModel, noise: np.ndarray) -> Ensemble:
    """One stochastic-filter step; `noise` holds the (N, d) standard-normal draws."""
    dZ = np.atleast_1d(np.asarray(dZ, dtype=float))
    noise = np.asarray(noise, dtype=float)
    if noise.shape != ens.particles.shape:
        raise ValueError(f"noise must have shape {ens.particles.shape}, got {noise.shape}")
    mean, _, S = _moments(ens.particles)
    X_new = _stoch_update(ens.particles, mean, dZ, dt, model, noise, S @ model.C.T)
    if not np.isfinite(X_new).all():
        raise FloatingPointError("non-finite particle state after stochastic step")
    return Ensemble(X_new, ens.t + dt)


def initial_particles(model: LinearGaussianModel, N: int, rng: RngStream,
                      noise_steps: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw N i.i.d. prior samples from the per-particle substreams.

    Particle i consumes stream 2+i: first its initial condition, then (when
    noise_steps > 0) its process-noise path of that many steps.  Holding the
    stream keyed to i makes draws bit-identical across ensemble sizes and
    across filter variants, which the coupling experiments rely on.
    """
    if N < 1:
        raise ValueError("need at least 1 particle")
    d = model.d
    L = prior_factor(model)
    X0 = np.empty((N, d))
    # Filled per particle in (N, steps, d) layout (contiguous writes), then
    # transposed once into the (steps, N, d) layout the step loop consumes.
    by_particle = np.empty((N, noise_steps, d)) if noise_steps > 0 else None
    for i in range(N):
        gen = rng.substream(PARTICLE_STREAM_BASE + i).generator()
        X0[i] = model.m0 + L @ gen.standard_normal(d)
        if noise_steps > 0:
            by_particle[i] = gen.standard_normal((noise_steps, d))
    noise = np.ascontiguousarray(by_particle.swapaxes(0, 1)) if noise_steps > 0 else None
    return X0, noise


@dataclass(frozen=True)
class FpfRun:
    """Recorded finite-N run: empirical moments each step, particles optional.

    initial_particles and final_particles are always kept (coupling checks
    and fixed-time statistics); the full (K+1, N, d) particle history is
    stored only when requested.
    """

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    initial_particles: np.ndarray
    final_particles: np.ndarray
    particles: np.ndarray | None
    variant: str
    omega_mode: str

    def moments(self, k: int, model: LinearGaussianModel | None = None) -> EmpiricalMoments:
        gain = self.covs[k] @ model.C.T if model is not None else None
        return EmpiricalMoments(self.means[k].copy(), self.covs[k].copy(), gain)


def run_fpf(model: LinearGaussianModel, obs: ObservationPath, N: int,
            variant: str, rng: RngStream, omega_mode: str = "zero",
            pseudo_inverse: bool = False,
            record_particles: bool = True) -> FpfRun:
    """Run a finite-N filter over an observation path.

    Particles are initialized i.i.d. from the prior on the per-particle
    substreams; the chosen step is iterated with moments recorded at every
    grid time (including t = 0 and the final time).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if omega_mode not in OMEGA_MODES:
        raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
    if N < 2:
        raise ValueError("a finite-N filter needs at least 2 particles")
    K, d, dt = obs.steps, model.d, obs.dt
    stochastic = variant == "stochastic"
    X, noise = initial_particles(model, N, rng, noise_steps=K if stochastic else 0)
    X0 = X.copy()

    means = np.empty((K + 1, d))
    covs = np.empty((K + 1, d, d))
    traj = np.empty((K + 1, N, d)) if record_particles else None
    dZ = obs.dZ
    if d == 1 and model.m == 1:
        # Scalar fast path: same formulas on flat (N,) arrays without
        # small-matrix dispatch; Omega is identically zero at d = 1, so the
        # omega_mode choice is vacuous here.
        a = float(model.A[0, 0])
        c = float(model.C[0, 0])
        q = float(model.noise_cov[0, 0])
        ctc = float(model.CtC[0, 0])
        x = X[:, 0].copy()
        dZf = dZ[:, 0].tolist()
        if stochastic:
            # (K, N) array of sigma_B * sqrt(dt) * eta, pre-scaled once.
            kicks = float(model.sigma_B[0, 0]) * np.sqrt(dt) * noise[:, :, 0]
        for k in range(K):
            mean = x.sum() / N  # x.mean() pays a wrapper tax in this loop
            xc = x - mean
            S = (xc @ xc) / (N - 1)
            means[k, 0], covs[k, 0, 0] = mean, S
            if record_particles:
                traj[k, :, 0] = x
            if stochastic:
                gain = S * c
                x = (x + (a * dt) * x + kicks[k]
                     + gain * (dZf[k] - (0.5 * c * dt) * (x + mean)))
            else:
                sinv = _scalar_inverse(S, q, pseudo_inverse)
                G0 = a - 0.5 * S * ctc + 0.5 * q * sinv
                drift = a * mean * dt + S * c * (dZf[k] - c * mean * dt)
                x = (mean + drift) + (1.0 + dt * G0) * xc
        X = x[:, None]
    else:
        for k in range(K):
            mean, Xc, S = _moments(X)
            means[k], covs[k] = mean, S
            if record_particles:
                traj[k] = X
            if stochastic:
                X = _stoch_update(X, mean, dZ[k], dt, model, noise[k], S @ model.C.T)
            else:
                X = _det_update(X, mean, Xc, S, dZ[k], dt, model, omega_mode,
                                pseudo_inverse)
    if not np.isfinite(X).all():
        raise FloatingPointError(f"non-finite particle state at step {K}")
    mean, _, S = _moments(X)
    means[K], covs[K] = mean, S
    if record_particles:
        traj[K] = X
    return FpfRun(times=obs.times(), means=means, covs=covs,
                  initial_particles=X0, final_particles=X, particles=traj,
                  variant=variant, omega_mode=omega_mode)


@dataclass(frozen=True)
class MeanFieldRun:
    """Independent mean-field copies evolved with the exact filter moments."""

    times: np.ndarray
    initial_particles: np.ndarray
    final_particles: np.ndarray
    particles: np.ndarray | None
    reference: KalmanRun


def run_meanfield_copies(model: LinearGaussianModel, obs: ObservationPath,
                         N: int, rng: RngStream, omega_mode: str = "zero",
                         reference: KalmanRun | None = None,
                         initial: np.ndarray | None = None,
                         record_particles: bool = True) -> MeanFieldRun:
    """Evolve N copies of the deterministic mean-field equation.

    Each copy consumes the exact (m_t, Sigma_t) from a Kalman run started at
    the true prior; initial copies reproduce the finite-N ensemble's initial
    draws bit-for-bit (same substreams), establishing the pathwise coupling.
    """
    if omega_mode not in OMEGA_MODES:
        raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
    if reference is None:
        reference = run_kalman(model, obs)
    K, d, dt = obs.steps, model.d, obs.dt
    if initial is None:
        X, _ = initial_particles(model, N, rng)
    else:
        X = np.array(initial, dtype=float)
        if X.shape != (N, d):
            raise ValueError(f"initial must have shape {(N, d)}, got {X.shape}")
    X0 = X.copy()

    traj = np.empty((K + 1, N, d)) if record_particles else None
    dZ = obs.dZ
    if d == 1 and model.m == 1:
        a = float(model.A[0, 0])
        c = float(model.C[0, 0])
        q = float(model.noise_cov[0, 0])
        ctc = float(model.CtC[0, 0])
        x = X[:, 0].copy()
        dZf = dZ[:, 0].tolist()
        m_ref = reference.means[:, 0].tolist()
        S_ref = reference.covs[:, 0, 0].tolist()
        for k in range(K):
            if record_particles:
                traj[k, :, 0] = x
            m_bar, S_bar = m_ref[k], S_ref[k]
            G0 = a - 0.5 * S_bar * ctc + 0.5 * q / S_bar
            drift = a * m_bar * dt + S_bar * c * (dZf[k] - c * m_bar * dt)
            x = (m_bar + drift) + (1.0 + dt * G0) * (x - m_bar)
        X = x[:, None]
    else:
        for k in range(K):
            if record_particles:
                traj[k] = X
            m_bar = reference.means[k]
            S_bar = reference.covs[k]
            Sinv = np.linalg.inv(S_bar)
            gain = S_bar @ model.C.T
            G0 = model.A - 0.5 * (S_bar @ model.CtC) + 0.5 * (model.noise_cov @ Sinv)
            drift = (model.A @ m_bar) * dt + gain @ (dZ[k] - (model.C @ m_bar) * dt)
            Xc = X - m_bar
            if omega_mode == "optimal":
                Omega = omega_solve(S_bar, model)
                Xc = Xc @ expm(dt * (Omega @ Sinv)).T
            X = (m_bar + drift) + Xc + dt * (Xc @ G0.T)
    if record_particles:
        traj[K] = X
    return MeanFieldRun(times=obs.times(), initial_particles=X0,
                        final_particles=X, particles=traj, reference=reference)


def explicit_deterministic_scalar(X0_list: np.ndarray, m0N: float, Sigma0N: float,
                                  t: float, model: LinearGaussianModel,
                                  obs: ObservationPath) -> np.ndarray:
    """Closed-form d = 1 particle positions of the deterministic filter.

    X^i_t = m^N_t + (Sigma^N_t / Sigma^N_0)^(1/2) (X^i_0 - m^N_0), with
    Sigma^N_t from the scalar explicit covariance solution and m^N_t from a
    Kalman mean run started at (m^N_0, Sigma^N_0) on the same observations.
    Serves as the integration-free oracle for run_fpf(deterministic).
    """
    if model.d != 1:
        raise ValueError("explicit particle solution requires d = 1")
    if Sigma0N <= 0.0:
        raise ValueError("Sigma^N_0 must be positive")
    k = int(round(t / obs.dt))
    if abs(k * obs.dt - t) > 1e-9 * max(t, 1.0) or not (0 <= k <= obs.steps):
        raise ValueError(f"t = {t} is not on the observation grid")
    X0 = np.asarray(X0_list, dtype=float).reshape(-1)
    ref = run_kalman(model, obs, FilterState([m0N], [[Sigma0N]], 0.0))
    mean_t = float(ref.means[k, 0])
    Sigma_t = scalar_explicit(Sigma0N, t, model)
    return mean_t + np.sqrt(Sigma_t / Sigma0N) * (X0 - m0N)
