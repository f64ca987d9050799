"""Linear-Gaussian filtering problem: model definition, validation, simulation.

The hidden signal and the observation evolve as

    dX_t = A X_t dt + sigma_B dB_t
    dZ_t = C X_t dt + dW_t

with X_0 ~ N(m0, Sigma0) and B, W independent standard Wiener processes.
Everything downstream (Kalman-Bucy reference, particle filters, error
harness) consumes the same Euler-Maruyama discretization produced here, on
one global time step shared by signal, observations and filters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "LinearGaussianModel",
    "ObservationPath",
    "ValidationCheck",
    "ValidationReport",
    "validate_model",
    "simulate_truth",
    "prior_factor",
    "sample_prior",
    "replica_seed",
    "SIGNAL_STREAM",
    "OBSERVATION_STREAM",
    "PARTICLE_STREAM_BASE",
]

# Eigenvalues of A with real part above this threshold count as unstable or
# marginal and must pass the PBH rank tests.
PBH_REAL_THRESHOLD = -1e-12

# Fixed substream map: one master seed keys an entire run.
SIGNAL_STREAM = 0
OBSERVATION_STREAM = 1
PARTICLE_STREAM_BASE = 2  # particle i draws from stream 2 + i


@dataclass(frozen=True)
class RngStream:
    """Keyed reproducible random stream.

    Streams with distinct (master_seed, stream_id) pairs are statistically
    independent; identical pairs reproduce bit-identical draws.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(0, self.stream_id))
        return np.random.default_rng(ss)

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.master_seed, stream_id)


def replica_seed(master_seed: int, replica: int) -> int:
    """Derive an independent 64-bit master seed for one Monte-Carlo replica.

    Uses a spawn-key family disjoint from the one `RngStream.generator` uses,
    so replica-level and stream-level derivations cannot collide.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=(1, replica))
    return int(ss.generate_state(1, np.uint64)[0])


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.array(value, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class LinearGaussianModel:
    """Problem instance (A, C, sigma_B, m0, Sigma0).

    Scalars and nested lists are accepted and normalized to float arrays;
    A, sigma_B, Sigma0 are d x d, C is m x d, m0 has length d.  Dimension
    mismatches are rejected at construction, naming the offending field.
    """

    A: np.ndarray
    C: np.ndarray
    sigma_B: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    allow_singular_prior: bool = False

    def __post_init__(self):
        m0 = np.atleast_1d(np.array(self.m0, dtype=float))
        if m0.ndim != 1:
            raise ValueError(f"m0 must be a vector, got shape {m0.shape}")
        d = m0.shape[0]
        A = _as_matrix(self.A, "A")
        C = _as_matrix(self.C, "C")
        sigma_B = _as_matrix(self.sigma_B, "sigma_B")
        Sigma0 = _as_matrix(self.Sigma0, "Sigma0")
        if A.shape != (d, d):
            raise ValueError(f"A must be {d}x{d} to match m0, got {A.shape}")
        if sigma_B.shape != (d, d):
            raise ValueError(f"sigma_B must be {d}x{d}, got {sigma_B.shape}")
        if Sigma0.shape != (d, d):
            raise ValueError(f"Sigma0 must be {d}x{d}, got {Sigma0.shape}")
        if C.ndim != 2 or C.shape[1] != d:
            raise ValueError(f"C must have {d} columns, got shape {C.shape}")
        for name, arr in (("A", A), ("C", C), ("sigma_B", sigma_B),
                          ("m0", m0), ("Sigma0", Sigma0)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # Products used in every integration step; computed once.
        object.__setattr__(self, "_noise_cov", sigma_B @ sigma_B.T)
        object.__setattr__(self, "_CtC", C.T @ C)

    @classmethod
    def scalar(cls, A: float, C: float, sigma_B: float, m0: float,
               Sigma0: float, **kwargs) -> "LinearGaussianModel":
        return cls(A=[[A]], C=[[C]], sigma_B=[[sigma_B]], m0=[m0],
                   Sigma0=[[Sigma0]], **kwargs)

    @property
    def d(self) -> int:
        return self.m0.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def noise_cov(self) -> np.ndarray:
        """Process-noise covariance sigma_B sigma_B^T."""
        return self._noise_cov

    @property
    def CtC(self) -> np.ndarray:
        return self._CtC


@dataclass(frozen=True)
class ObservationPath:
    """One discretized realization of the observation increments.

    dZ has shape (steps, m); the optional hidden signal X_true has shape
    (steps + 1, d).  The horizon is steps * dt.
    """

    dt: float
    dZ: np.ndarray
    X_true: np.ndarray | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        dZ = np.asarray(self.dZ, dtype=float)
        if dZ.ndim != 2:
            raise ValueError(f"dZ must have shape (steps, m), got {dZ.shape}")
        object.__setattr__(self, "dZ", dZ)
        if self.X_true is not None:
            X = np.asarray(self.X_true, dtype=float)
            if X.shape[0] != dZ.shape[0] + 1:
                raise ValueError(
                    f"X_true must have steps+1 = {dZ.shape[0] + 1} rows, got {X.shape[0]}")
            object.__setattr__(self, "X_true", X)

    @property
    def steps(self) -> int:
        return self.dZ.shape[0]

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    def times(self) -> np.ndarray:
        """Grid t_k = k*dt for k = 0..steps."""
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[ValidationCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[ValidationCheck]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            detail = f" ({c.detail})" if c.detail else ""
            lines.append(f"  {c.name}: {status}{detail}")
        return "\n".join(lines)


def _pbh_rank_ok(A: np.ndarray, other: np.ndarray, stack: str) -> tuple[bool, list[complex]]:
    """PBH rank test over the unstable/marginal eigenvalues of A.

    stack="vertical" tests detectability with rows [A - lam I; C];
    stack="horizontal" tests stabilizability with columns [A - lam I, B].
    Returns (ok, failing eigenvalues).
    """
    d = A.shape[0]
    eye = np.eye(d)
    failing = []
    for lam in np.linalg.eigvals(A):
        if lam.real < PBH_REAL_THRESHOLD:
            continue
        block = A - lam * eye
        mat = np.vstack([block, other]) if stack == "vertical" else np.hstack([block, other])
        if np.linalg.matrix_rank(mat) < d:
            failing.append(complex(lam))
    return (not failing, failing)


def validate_model(model: LinearGaussianModel) -> ValidationReport:
    """Check the standing assumptions on a model.

    Reports symmetry and positive-(semi)definiteness of Sigma0, PBH
    detectability of (A, C) and PBH stabilizability of (A, sigma_B).
    Positive definiteness of Sigma0 is required unless the singular-prior
    relaxation is explicitly enabled on the model.
    """
    checks = []
    S0 = model.Sigma0
    sym_err = float(np.abs(S0 - S0.T).max())
    sym_ok = sym_err <= 1e-12 * (1.0 + float(np.abs(S0).max()))
    checks.append(ValidationCheck("sigma0_symmetric", sym_ok,
                                  f"max asymmetry {sym_err:.3g}"))
    if sym_ok:
        eigs = np.linalg.eigvalsh(0.5 * (S0 + S0.T))
        min_eig = float(eigs.min())
        psd_ok = min_eig >= -1e-10
        checks.append(ValidationCheck("sigma0_psd", psd_ok,
                                      f"min eigenvalue {min_eig:.3g}"))
        pd_ok = min_eig > 0.0 or model.allow_singular_prior
        detail = (f"min eigenvalue {min_eig:.3g}"
                  + ("; singular prior allowed" if model.allow_singular_prior else ""))
        checks.append(ValidationCheck("sigma0_positive_definite", pd_ok, detail))
    else:
        checks.append(ValidationCheck("sigma0_psd", False, "not symmetric"))
        checks.append(ValidationCheck("sigma0_positive_definite", False, "not symmetric"))

    det_ok, det_fail = _pbh_rank_ok(model.A, model.C, "vertical")
    checks.append(ValidationCheck(
        "detectable", det_ok,
        "" if det_ok else f"rank deficient at eigenvalue(s) {det_fail}"))
    stab_ok, stab_fail = _pbh_rank_ok(model.A, model.sigma_B, "horizontal")
    checks.append(ValidationCheck(
        "stabilizable", stab_ok,
        "" if stab_ok else f"rank deficient at eigenvalue(s) {stab_fail}"))
    return ValidationReport(tuple(checks))


def prior_factor(model: LinearGaussianModel) -> np.ndarray:
    """Left factor L with L L^T = Sigma0.

    Cholesky when Sigma0 is positive definite; eigenvalue factorization with
    clipped near-zero eigenvalues when it is PSD but singular.
    """
    S0 = 0.5 * (model.Sigma0 + model.Sigma0.T)
    try:
        return np.linalg.cholesky(S0)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S0)
        scale = max(float(w.max()), 1.0)
        if w.min() < -1e-10 * scale:
            raise ValueError(f"Sigma0 is not PSD (min eigenvalue {w.min():.3g})")
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample_prior(model: LinearGaussianModel, generator: np.random.Generator,
                 n: int | None = None) -> np.ndarray:
    """Draw n samples (or one, if n is None) from N(m0, Sigma0)."""
    L = prior_factor(model)
    if n is None:
        return model.m0 + L @ generator.standard_normal(model.d)
    return model.m0 + generator.standard_normal((n, model.d)) @ L.T


def _steps_for(dt: float, T: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > T:
        raise ValueError(f"dt = {dt} exceeds horizon T = {T}")
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T = {T} is not an integer multiple of dt = {dt}")
    return K


def simulate_truth(model: LinearGaussianModel, dt: float, T: float,
                   rng: RngStream) -> ObservationPath:
    """Euler-Maruyama simulation of the hidden signal and its observations.

    X_{k+1} = X_k + A X_k dt + sigma_B sqrt(dt) eta_k
    dZ_k    = C X_k dt + sqrt(dt) nu_k

    with eta_k, nu_k independent standard normals, X_0 ~ N(m0, Sigma0).
    The signal (including X_0) consumes stream 0, observation noise stream 1.
    """
    K = _steps_for(dt, T)
    d, m = model.d, model.m
    sig_gen = rng.substream(SIGNAL_STREAM).generator()
    obs_gen = rng.substream(OBSERVATION_STREAM).generator()

    X = np.empty((K + 1, d))
    X[0] = sample_prior(model, sig_gen)
    eta = sig_gen.standard_normal((K, d))
    nu = obs_gen.standard_normal((K, m))

    A, C, sigma_B = model.A, model.C, model.sigma_B
    sqdt = np.sqrt(dt)
    if d == 1:
        # Scalar fast path (the Monte-Carlo harness runs d = 1 models);
        # identical recursion without per-step array dispatch.
        a = float(A[0, 0])
        s = float(sigma_B[0, 0])
        x = float(X[0, 0])
        eta_flat = (sqdt * eta[:, 0]).tolist()
        col = X[:, 0]
        for k in range(K):
            x = x + a * x * dt + s * eta_flat[k]
            col[k + 1] = x
    else:
        for k in range(K):
            X[k + 1] = X[k] + (A @ X[k]) * dt + sigma_B @ (sqdt * eta[k])
    dZ = (X[:-1] @ C.T) * dt + sqdt * nu

    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise FloatingPointError(
            f"non-finite signal state at step {int(np.argmax(bad))}")
    if not np.isfinite(dZ).all():
        bad_k = int(np.argmax(~np.isfinite(dZ).all(axis=1)))
        raise FloatingPointError(f"non-finite observation increment at step {bad_k}")
    return ObservationPath(dt=dt, dZ=dZ, X_true=X)
