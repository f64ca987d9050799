"""Shared test utilities: random valid models, small oracles, CSV reading."""

import numpy as np

from fpflab import LinearGaussianModel


def read_csv(path) -> dict[str, np.ndarray]:
    """Read one of the harness CSVs: leading '#' comments, header row, data."""
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    names = lines[0].strip().split(",")
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    return {name: data[:, j] for j, name in enumerate(names)}


def random_valid_model(rng: np.random.Generator, d: int) -> LinearGaussianModel:
    """Random detectable/stabilizable model with O(1)-scaled matrices.

    sigma_B = I guarantees stabilizability; an invertible C guarantees
    detectability.  Sigma0 is a well-conditioned random SPD matrix.
    """
    A = rng.uniform(-1.0, 1.0, (d, d))
    C = np.eye(d) + 0.3 * rng.uniform(-1.0, 1.0, (d, d))
    while abs(np.linalg.det(C)) < 0.1:
        C = np.eye(d) + 0.3 * rng.uniform(-1.0, 1.0, (d, d))
    W = rng.uniform(-1.0, 1.0, (d, d))
    Sigma0 = W @ W.T + np.eye(d)
    m0 = rng.uniform(-2.0, 2.0, d)
    return LinearGaussianModel(A=A, C=C, sigma_B=np.eye(d), m0=m0, Sigma0=Sigma0)


def rk4_scalar_ode(rhs, y0: float, dt: float, steps: int) -> np.ndarray:
    """Plain RK4 on a scalar autonomous ODE; independent test oracle."""
    ys = np.empty(steps + 1)
    ys[0] = y = y0
    for k in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys[k + 1] = y
    return ys
