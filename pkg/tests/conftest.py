import pytest

from fpflab import LinearGaussianModel


@pytest.fixture(scope="session")
def paper_model() -> LinearGaussianModel:
    """d = 1 reference problem: A=0.1, sigma_B=1, C=1, m0=3, Sigma0=5."""
    return LinearGaussianModel.scalar(A=0.1, C=1.0, sigma_B=1.0, m0=3.0, Sigma0=5.0)
