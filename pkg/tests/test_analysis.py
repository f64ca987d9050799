import numpy as np
import pytest

from fpflab import (
    LinearGaussianModel,
    RngStream,
    bound_curves,
    fit_rate,
    mse_vs_N,
    mse_vs_time,
    poc_sweep,
    scalar_constants,
)
from fpflab.analysis import (
    ErrorReport,
    f_const,
    write_mse_n_csv,
    write_mse_time_csv,
    write_poc_csv,
)
from helpers import read_csv


class TestFitRate:
    def test_exact_exponential(self):
        t = np.array([0.0, 1.0, 2.0, 3.0])
        fit = fit_rate(t, np.exp(-2.0 * t), "exponential")
        assert fit.value == pytest.approx(-2.0, abs=1e-12)
        assert fit.half_width == pytest.approx(0.0, abs=1e-10)

    def test_exact_power(self):
        N = np.array([10.0, 100.0, 1000.0])
        fit = fit_rate(N, 7.0 / N, "power")
        assert fit.value == pytest.approx(-1.0, abs=1e-12)

    def test_halfwidth_calibration(self):
        # y = (5/N)(1 + 0.05 eps): the +/-1.96 SE half-width must cover the
        # true slope -1 in at least 90% of trials.
        rng = np.random.default_rng(17)
        N = np.geomspace(10, 1000, 16)
        hits = 0
        trials = 400
        for _ in range(trials):
            y = (5.0 / N) * (1.0 + 0.05 * rng.standard_normal(N.size))
            fit = fit_rate(N, y, "power")
            hits += abs(fit.value + 1.0) <= fit.half_width
        assert hits / trials >= 0.90

    def test_input_validation(self):
        with pytest.raises(ValueError):
            fit_rate([1.0, 2.0], [1.0, 2.0], "power")
        with pytest.raises(ValueError):
            fit_rate([1.0, 2.0, 3.0], [1.0, -2.0, 3.0], "exponential")
        with pytest.raises(ValueError):
            fit_rate([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], "cubic")


class TestBoundCurves:
    def test_value_at_zero(self, paper_model):
        c = scalar_constants(paper_model)
        bm, bc = bound_curves(paper_model, [0.0], N=100)
        assert bm[0] == pytest.approx(c.c1 * 5.0 / 100.0, rel=1e-12)
        assert bc[0] == pytest.approx(c.c3 * 3.0 * 25.0 / 100.0, rel=1e-12)

    def test_cov_bound_ratio_is_pure_decay(self, paper_model):
        c = scalar_constants(paper_model)
        t = np.array([0.0, 0.7, 1.9])
        _, bc = bound_curves(paper_model, t, N=50)
        np.testing.assert_allclose(bc / bc[0], np.exp(-4 * c.lambda0 * t), rtol=1e-12)

    def test_rejects_vector_case(self):
        model = LinearGaussianModel(A=-np.eye(2), C=np.eye(2), sigma_B=np.eye(2),
                                    m0=[0, 0], Sigma0=np.eye(2))
        with pytest.raises(ValueError):
            bound_curves(model, [0.0, 1.0], N=10)


class TestMseVsTime:
    def test_initial_mse_matches_clt(self, paper_model):
        # E|m^N_0 - m_0|^2 = Sigma0 / N for i.i.d. initialization.
        report = mse_vs_time(paper_model, N=100, M=200, dt=2e-3, T=0.5,
                             variant="deterministic", rng=RngStream(1))
        assert report.grid[0] == 0.0
        assert abs(report.mse_mean[0] - 0.05) < 5 * report.se_mean[0]
        assert report.n_replicas == 200
        assert np.all(report.se_mean >= 0)
        assert report.bound_mean is not None

    def test_bound_attaches_only_for_scalar(self):
        model = LinearGaussianModel(A=-np.eye(2), C=np.eye(2), sigma_B=np.eye(2),
                                    m0=[0, 0], Sigma0=np.eye(2))
        report = mse_vs_time(model, N=20, M=20, dt=5e-3, T=0.2,
                             variant="deterministic", rng=RngStream(2))
        assert report.bound_mean is None

    def test_deterministic_error_vanishes_at_long_horizon(self, paper_model):
        # Almost-sure convergence shows up as decay below any practical
        # floor: mse(T=5) < 1e-4 with N = 100.
        report = mse_vs_time(paper_model, N=100, M=64, dt=2e-3, T=5.0,
                             variant="deterministic", rng=RngStream(3))
        assert report.mse_mean[-1] < 1e-4

    def test_failure_cap_enforced(self):
        # An explosive discretization makes every replica diverge.
        model = LinearGaussianModel.scalar(A=5.0, C=1.0, sigma_B=1.0, m0=3.0,
                                           Sigma0=1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(RuntimeError, match="replicas failed"):
                mse_vs_time(model, N=10, M=5, dt=0.5, T=500.0,
                            variant="deterministic", rng=RngStream(4))

    def test_worker_count_does_not_change_results(self, paper_model):
        serial = mse_vs_time(paper_model, N=20, M=12, dt=5e-3, T=0.2,
                             variant="stochastic", rng=RngStream(5))
        parallel = mse_vs_time(paper_model, N=20, M=12, dt=5e-3, T=0.2,
                               variant="stochastic", rng=RngStream(5), workers=2)
        np.testing.assert_array_equal(serial.mse_mean, parallel.mse_mean)
        np.testing.assert_array_equal(serial.se_cov, parallel.se_cov)


class TestMseVsN:
    def test_doubling_M_shrinks_stderr(self, paper_model):
        kwargs = dict(N_list=[8, 16, 32], t_star=0.3, dt=5e-3,
                      variant="deterministic")
        small = mse_vs_N(paper_model, M=150, rng=RngStream(6), **kwargs)
        large = mse_vs_N(paper_model, M=300, rng=RngStream(6), **kwargs)
        ratio = np.mean(small.se_mean / large.se_mean)
        assert 1.15 < ratio < 1.75  # ~sqrt(2)

    def test_grid_validation(self, paper_model):
        with pytest.raises(ValueError):
            mse_vs_N(paper_model, [10, 10, 20], 0.5, 4, 1e-3, "deterministic",
                     RngStream(0))
        with pytest.raises(ValueError):
            mse_vs_N(paper_model, [1, 10], 0.5, 4, 1e-3, "deterministic",
                     RngStream(0))

    def test_report_shape_and_fit(self, paper_model):
        report = mse_vs_N(paper_model, [8, 16, 32], 0.3, M=80, dt=5e-3,
                          variant="deterministic", rng=RngStream(7))
        assert report.axis == "N"
        assert report.fit_mean is not None
        assert report.fit_mean.mode == "power"
        assert report.fit_mean.value < -0.5  # decreasing in N


class TestPocSweep:
    def test_constant_function_weak_stat_vanishes(self, paper_model):
        report = poc_sweep(paper_model, [4, 8, 16], t_star=0.2, M=4,
                           rng=RngStream(8), f=f_const, dt=5e-3)
        assert np.all(report.weak_stat < 1e-20)
        assert report.fit_weak is None
        assert report.fit_coupling is not None

    def test_rejects_vector_models(self):
        model = LinearGaussianModel(A=-np.eye(2), C=np.eye(2), sigma_B=np.eye(2),
                                    m0=[0, 0], Sigma0=np.eye(2))
        with pytest.raises(ValueError):
            poc_sweep(model, [4, 8], 0.2, 4, RngStream(0))

    def test_coupling_and_weak_decrease_with_N(self, paper_model):
        report = poc_sweep(paper_model, [8, 32, 128], t_star=0.5, M=60,
                           rng=RngStream(9), dt=2e-3)
        assert report.coupling_mse[0] > report.coupling_mse[-1]
        assert report.weak_stat[0] > report.weak_stat[-1]
        assert abs(report.fit_coupling.value + 1.0) < 0.45


class TestReportInvariants:
    def test_grid_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            ErrorReport(axis="N", grid=np.array([1.0, 1.0]),
                        mse_mean=np.zeros(2), se_mean=np.zeros(2),
                        mse_cov=np.zeros(2), se_cov=np.zeros(2),
                        bound_mean=None, bound_cov=None,
                        fit_mean=None, fit_cov=None, n_replicas=2, n_failed=0)

    def test_negative_mse_rejected(self):
        with pytest.raises(ValueError):
            ErrorReport(axis="N", grid=np.array([1.0, 2.0]),
                        mse_mean=np.array([-1.0, 0.0]), se_mean=np.zeros(2),
                        mse_cov=np.zeros(2), se_cov=np.zeros(2),
                        bound_mean=None, bound_cov=None,
                        fit_mean=None, fit_cov=None, n_replicas=2, n_failed=0)


class TestCsvWriters:
    def test_mse_time_schema(self, tmp_path, paper_model):
        report = mse_vs_time(paper_model, N=10, M=6, dt=5e-3, T=0.1,
                             variant="deterministic", rng=RngStream(10))
        path = tmp_path / "mse_time.csv"
        write_mse_time_csv(report, path, seed=10)
        text = path.read_text()
        assert text.startswith("# seed=10\n")
        data = read_csv(path)
        assert set(data) == {"t", "mse_mean", "se_mean", "mse_cov",
                             "se_cov", "bound_mean", "bound_cov"}
        np.testing.assert_allclose(data["mse_mean"], report.mse_mean, rtol=1e-15)

    def test_mse_n_schema_with_slope_comment(self, tmp_path, paper_model):
        report = mse_vs_N(paper_model, [8, 16, 32], 0.2, M=20, dt=5e-3,
                          variant="deterministic", rng=RngStream(11))
        path = tmp_path / "mse_n.csv"
        write_mse_n_csv(report, path, seed=11)
        header = [l for l in path.read_text().splitlines() if l.startswith("#")]
        assert any("slope_mean" in l for l in header)
        data = read_csv(path)
        assert set(data) == {"N", "mse_mean", "se_mean", "mse_cov", "se_cov"}

    def test_poc_schema(self, tmp_path, paper_model):
        report = poc_sweep(paper_model, [4, 8, 16], 0.1, M=4, rng=RngStream(12),
                           dt=5e-3)
        path = tmp_path / "poc.csv"
        write_poc_csv(report, path, seed=12)
        data = read_csv(path)
        assert set(data) == {"N", "coupling_mse", "se_coupling",
                             "weak_stat", "se_weak"}
