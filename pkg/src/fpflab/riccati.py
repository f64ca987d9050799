"""Riccati machinery: matrix ODE integration, steady state, closed forms.

The filter covariance obeys

    dSigma/dt = A Sigma + Sigma A^T + sigma_B sigma_B^T - Sigma C^T C Sigma

whose stationary point Sigma_inf (the stabilizing ARE solution) and the
spectral bound lambda0 of F_inf = A - Sigma_inf C^T C drive every
convergence-rate statement downstream.  RK4 integration of the ODE is the
high-accuracy numerical oracle against which the scalar and vector explicit
solutions are checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .model import LinearGaussianModel

__all__ = [
    "SteadyState",
    "ScalarConstants",
    "riccati_rhs",
    "integrate_riccati",
    "solve_are",
    "scalar_steady_state",
    "scalar_explicit",
    "vector_explicit",
    "scalar_constants",
    "ARE_RESIDUAL_TOL",
]

ARE_RESIDUAL_TOL = 1e-10
# Smallest admissible covariance eigenvalue along an integrated trajectory.
PSD_FLOOR = -1e-10


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class SteadyState:
    """ARE solution Sigma_inf, spectral bound lambda0, closed-loop F_inf."""

    Sigma_inf: np.ndarray
    lambda0: float
    F_inf: np.ndarray


@dataclass(frozen=True)
class ScalarConstants:
    """Explicit d = 1 constants of the mean/covariance error bounds.

    lambda0 = (A^2 + sigma_B^2 C^2)^(1/2), Sigma_inf = (A + lambda0)/C^2,
    beta = (2 lambda0 / (lambda0 - A))^2, c1 = e^{|log beta|}, c3 = beta^2,
    c2(t) = (C^2 / 2 lambda0) beta^2 e^{|log beta|} (1 - e^{-2 lambda0 t}).
    """

    lambda0: float
    Sigma_inf: float
    beta: float
    c1: float
    c2: Callable[[np.ndarray | float], np.ndarray | float]
    c3: float


def riccati_rhs(Sigma: np.ndarray, model: LinearGaussianModel) -> np.ndarray:
    """Right side A S + S A^T + sigma sigma^T - S C^T C S, symmetrized."""
    S = np.asarray(Sigma, dtype=float)
    A = model.A
    val = A @ S + S @ A.T + model.noise_cov - S @ model.CtC @ S
    return _symmetrize(val)


def _rk4_step(S: np.ndarray, dt: float, model: LinearGaussianModel) -> np.ndarray:
    k1 = riccati_rhs(S, model)
    k2 = riccati_rhs(S + 0.5 * dt * k1, model)
    k3 = riccati_rhs(S + 0.5 * dt * k2, model)
    k4 = riccati_rhs(S + dt * k3, model)
    return _symmetrize(S + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def integrate_riccati(Sigma0: np.ndarray, model: LinearGaussianModel,
                      dt: float, T: float) -> tuple[np.ndarray, np.ndarray]:
    """RK4 integration of the covariance ODE from Sigma0 over [0, T].

    Returns (times, covariances) with shapes (K+1,) and (K+1, d, d); every
    stored matrix is symmetrized.  Aborts if a covariance loses positive
    semi-definiteness beyond the -1e-10 eigenvalue floor.
    """
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    K = int(round(T / dt))
    d = model.d
    S = _symmetrize(np.atleast_2d(np.asarray(Sigma0, dtype=float)))
    if S.shape != (d, d):
        raise ValueError(f"Sigma0 must be {d}x{d}, got {S.shape}")
    covs = np.empty((K + 1, d, d))
    covs[0] = S
    for k in range(K):
        S = _rk4_step(S, dt, model)
        min_eig = float(np.linalg.eigvalsh(S).min())
        if min_eig < PSD_FLOOR:
            raise FloatingPointError(
                f"covariance lost PSD at step {k + 1} (min eigenvalue {min_eig:.3g})")
        covs[k + 1] = S
    return np.arange(K + 1) * dt, covs


def solve_are(model: LinearGaussianModel, tol: float = ARE_RESIDUAL_TOL,
              max_horizon: float = 400.0) -> SteadyState:
    """Stabilizing ARE solution by long-horizon Riccati integration.

    Integrates the covariance ODE from the identity until the Frobenius norm
    of the right side drops below `tol`, then reads lambda0 off the spectrum
    of F_inf = A - Sigma_inf C^T C.  The RK4 map shares its fixed point with
    the ODE, so a coarse internal step suffices; it is refined if the
    trajectory transiently loses PSD.
    """
    d = model.d
    last_residual = np.inf
    for dt in (1e-2, 1e-3):
        S = np.eye(d)
        t = 0.0
        try:
            while t < max_horizon:
                for _ in range(100):  # one time-unit chunk
                    S = _rk4_step(S, dt, model)
                t += 100 * dt
                if float(np.linalg.eigvalsh(S).min()) < PSD_FLOOR:
                    raise FloatingPointError("transient PSD loss")
                last_residual = float(np.linalg.norm(riccati_rhs(S, model)))
                if last_residual < tol:
                    F_inf = model.A - S @ model.CtC
                    eigs = np.linalg.eigvals(F_inf)
                    lambda0 = float(-eigs.real.max())
                    if lambda0 <= 0.0:
                        raise ValueError(
                            f"F_inf is not Hurwitz (max real eigenvalue {-lambda0:.3g}); "
                            "check detectability/stabilizability")
                    return SteadyState(Sigma_inf=S, lambda0=lambda0, F_inf=F_inf)
        except FloatingPointError:
            continue  # retry with the finer step
    raise ValueError(
        f"Riccati integration did not reach ARE residual {tol:g} within horizon "
        f"{max_horizon} (achieved {last_residual:.3g})")


def scalar_steady_state(model: LinearGaussianModel) -> tuple[float, float]:
    """Closed-form (Sigma_inf, lambda0) for d = 1.

    For C != 0: lambda0 = (A^2 + sigma_B^2 C^2)^(1/2), Sigma_inf = (A + lambda0)/C^2.
    For C = 0 the ARE degenerates to 2 A Sigma + sigma_B^2 = 0, which requires
    a stable A.
    """
    if model.d != 1 or model.m != 1:
        raise ValueError("scalar closed forms require d = m = 1")
    a = float(model.A[0, 0])
    c = float(model.C[0, 0])
    s = float(model.sigma_B[0, 0])
    if c != 0.0:
        lam0 = float(np.hypot(a, s * c))
        return (a + lam0) / c**2, lam0
    if a >= 0.0:
        raise ValueError("C = 0 with unstable A: no stabilizing ARE solution")
    return s**2 / (-2.0 * a), -a


def scalar_explicit(Sigma0: float, t, model: LinearGaussianModel):
    """Closed-form scalar covariance at time t started from Sigma0.

    Sigma_t = Sigma_inf + e^{-2 lambda0 t} / (1/(Sigma0 - Sigma_inf)
              + (C^2 / 2 lambda0)(1 - e^{-2 lambda0 t}))

    The pole at Sigma0 = Sigma_inf is removable; inputs within 1e-12 of the
    fixed point return Sigma_inf exactly.  Accepts scalar or array t.
    """
    Sinf, lam0 = scalar_steady_state(model)
    t = np.asarray(t, dtype=float)
    if abs(float(Sigma0) - Sinf) < 1e-12:
        out = np.full_like(t, Sinf, dtype=float)
        return float(out) if out.ndim == 0 else out
    c = float(model.C[0, 0])
    e = np.exp(-2.0 * lam0 * t)
    denom = 1.0 / (float(Sigma0) - Sinf) + (c**2 / (2.0 * lam0)) * (1.0 - e)
    out = Sinf + e / denom
    return float(out) if out.ndim == 0 else out


def vector_explicit(Sigma0: np.ndarray, t: float, model: LinearGaussianModel,
                    dt: float = 1e-3,
                    steady: SteadyState | None = None) -> np.ndarray:
    """Closed-form matrix covariance at time t started from Sigma0.

    Sigma_t = Sigma_inf + e^{F_inf t} D_t^{-1} e^{F_inf^T t},
    D_t = (Sigma0 - Sigma_inf)^{-1} + int_0^t e^{F_inf^T s} C^T C e^{F_inf s} ds,

    with the integral accumulated by RK4 on dD/ds = e^{F_inf^T s} C^T C e^{F_inf s}
    using step dt (the shared trajectory grid).  Requires Sigma0 - Sigma_inf
    invertible; a singular D_t signals Sigma0 too close to a degenerate
    direction and raises.
    """
    if steady is None:
        steady = solve_are(model)
    Sinf, F = steady.Sigma_inf, steady.F_inf
    S0 = _symmetrize(np.atleast_2d(np.asarray(Sigma0, dtype=float)))
    d = model.d
    if t < 0:
        raise ValueError("t must be nonnegative")
    diff = S0 - Sinf
    try:
        D = np.linalg.inv(diff)
    except np.linalg.LinAlgError:
        raise ValueError("Sigma0 - Sigma_inf is singular; explicit form undefined")
    if t == 0.0:
        return S0.copy()

    CtC = model.CtC
    steps = max(int(round(t / dt)), 1)
    h = t / steps
    half = expm(F * (0.5 * h))  # one fixed propagator per call
    P = np.eye(d)  # e^{F s}, advanced incrementally

    def integrand(Ps: np.ndarray) -> np.ndarray:
        return Ps.T @ CtC @ Ps

    for _ in range(steps):
        P_half = P @ half
        P_full = P_half @ half
        k1 = integrand(P)
        k23 = integrand(P_half)
        k4 = integrand(P_full)
        D = D + (h / 6.0) * (k1 + 4.0 * k23 + k4)
        P = P_full

    try:
        inner = np.linalg.solve(D, P.T)
    except np.linalg.LinAlgError:
        raise ValueError("D_t is singular: Sigma0 lies too close to a degenerate direction")
    return _symmetrize(Sinf + P @ inner)


def scalar_constants(model: LinearGaussianModel) -> ScalarConstants:
    """Explicit scalar error-bound constants (requires sigma_B * C != 0)."""
    Sinf, lam0 = scalar_steady_state(model)
    a = float(model.A[0, 0])
    c = float(model.C[0, 0])
    s = float(model.sigma_B[0, 0])
    if s * c == 0.0:
        raise ValueError("scalar constants require sigma_B * C != 0")
    beta = (2.0 * lam0 / (lam0 - a)) ** 2
    c1 = float(np.exp(abs(np.log(beta))))
    c3 = beta**2

    def c2(t):
        t = np.asarray(t, dtype=float)
        val = (c**2 / (2.0 * lam0)) * beta**2 * c1 * (1.0 - np.exp(-2.0 * lam0 * t))
        return float(val) if val.ndim == 0 else val

    return ScalarConstants(lambda0=lam0, Sigma_inf=Sinf, beta=beta,
                           c1=c1, c2=c2, c3=c3)
