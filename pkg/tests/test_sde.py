import math

import numpy as np
import pytest

from chaoslab.fields import DensityField
from chaoslab.harness import make_initial_field
from chaoslab.model import builtin, constant_coefficients
from chaoslab.sde import (TimeGrid, empirical_density, exchangeability_test,
                          export_binary, export_csv, load_binary, make_bundle,
                          mean_force, simulate_mckean, simulate_particles)
from chaoslab.spde import picard_solve


def coeffs_const(s=1.0, v=1.0):
    return constant_coefficients(np.array([[s]]), np.array([[v]]))


class TestTimeGrid:
    def test_dt(self):
        g = TimeGrid(0.5, 500)
        assert g.dt == pytest.approx(1e-3)
        assert len(g.times) == 501

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)


class TestBundles:
    def test_determinism(self):
        g = TimeGrid(1.0, 100)
        b1 = make_bundle(g, 8, (1, 1), 12345)
        b2 = make_bundle(g, 8, (1, 1), 12345)
        assert np.array_equal(b1.W, b2.W)
        assert np.array_equal(b1.B, b2.B)

    def test_seed_sensitivity(self):
        g = TimeGrid(1.0, 100)
        b1 = make_bundle(g, 2, (1, 1), 5)
        b2 = make_bundle(g, 2, (1, 1), 6)
        assert np.abs(b1.W - b2.W).max() > 0

    def test_starts_at_zero(self):
        b = make_bundle(TimeGrid(1.0, 50), 3, (2, 2), 0)
        assert np.all(b.W[0] == 0)
        assert np.all(b.B[:, 0, :] == 0)

    def test_increment_statistics(self):
        # 10^4 increments: CLT band for the mean, 5% band for the variance
        g = TimeGrid(10.0, 10000)
        b = make_bundle(g, 1, (1, 1), 99)
        inc = np.diff(b.W[:, 0])
        assert abs(inc.mean()) < 4 * math.sqrt(g.dt) / 100
        assert abs(inc.var() / g.dt - 1.0) < 0.05

    def test_sub_bundle_independence(self):
        # W stream unchanged when N changes (disjoint stream ids)
        g = TimeGrid(1.0, 64)
        b1 = make_bundle(g, 2, (1, 1), 7)
        b2 = make_bundle(g, 64, (1, 1), 7)
        assert np.array_equal(b1.W, b2.W)
        assert np.array_equal(b1.B, b2.B[: 2])


class TestSimulateParticles:
    def test_pure_idiosyncratic_noise_is_exact(self):
        # k=0, sigma=1, nu=0, point-mass start: X = B exactly
        g = TimeGrid(1.0, 100)
        b = make_bundle(g, 16, (1, 1), 3)
        init = builtin("gauss_init(0, 1e-18)")
        traj = simulate_particles(builtin("zero"), coeffs_const(1.0, 0.0),
                                  init, b, g)
        dev = np.abs(traj.X[:, :, 0].T - b.B[:, :, 0] - traj.X[0, :, 0][:, None])
        assert dev.max() < 1e-8

    def test_common_noise_only_collapses(self):
        g = TimeGrid(1.0, 100)
        b = make_bundle(g, 8, (1, 1), 4)
        init = builtin("gauss_init(0, 1e-18)")
        traj = simulate_particles(builtin("zero"), coeffs_const(0.0, 1.0),
                                  init, b, g)
        spread = traj.X[:, :, 0].max(axis=1) - traj.X[:, :, 0].min(axis=1)
        assert spread.max() < 1e-7
        assert np.abs(traj.X[:, 0, 0] - b.W[:, 0]
                      - traj.X[0, 0, 0]).max() < 1e-7

    def test_drift_increment_bound(self):
        # reconstruct the drift from the stored path: each increment minus
        # the martingale part is bounded by ||k|| dt
        g = TimeGrid(0.5, 50)
        b = make_bundle(g, 64, (1, 1), 11)
        k = builtin("odd_bump(a=0.5, r=1)")
        traj = simulate_particles(k, coeffs_const(1.0, 1.0),
                                  builtin("gauss_init(0, 0.25)"), b, g,
                                  check_drift=True)
        for j in range(g.steps):
            drift = (traj.X[j + 1, :, 0] - traj.X[j, :, 0]
                     - (b.B[:, j + 1, 0] - b.B[:, j, 0])
                     - (b.W[j + 1, 0] - b.W[j, 0]))
            assert np.abs(drift).max() <= k.sup_norm * g.dt * (1 + 1e-9)

    def test_determinism(self):
        g = TimeGrid(0.2, 20)
        b = make_bundle(g, 32, (1, 1), 21)
        k = builtin("odd_bump(a=1, r=1)")
        t1 = simulate_particles(k, coeffs_const(), builtin("gauss_init(0,1)"), b, g)
        t2 = simulate_particles(k, coeffs_const(), builtin("gauss_init(0,1)"), b, g)
        assert np.array_equal(t1.X, t2.X)

    def test_weak_error_second_moment(self):
        # k=0, sigma=1, nu=0: Var(X_T) = Var(rho0) + T within 3 stderr
        g = TimeGrid(0.5, 100)
        n = 20000
        b = make_bundle(g, n, (1, 1), 17)
        traj = simulate_particles(builtin("zero"), coeffs_const(1.0, 0.0),
                                  builtin("gauss_init(0, 0.25)"), b, g)
        xT = traj.X[-1, :, 0]
        target = 0.75
        stderr = target * math.sqrt(2.0 / n)
        assert abs(xT.var() - target) < 3 * stderr


class TestMeanForce:
    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (200, 1))
        for name in ("odd_bump(a=0.7, r=1.3)", "step(a=0.5, r=2)"):
            k = builtin(name)
            direct = np.array([[k(x[i] - x).mean()] for i in range(len(x))])
            assert np.abs(mean_force(k, x) - direct.reshape(-1, 1)).max() < 1e-12

    def test_zero_kernel_fast_path(self):
        x = np.random.default_rng(1).normal(size=(50, 1))
        assert np.all(mean_force(builtin("zero"), x) == 0.0)


class TestMckeanCoupling:
    def make_path(self, k, coeffs, init, grid, bundle, cells=256, box=8.0):
        rho0 = make_initial_field(init, box, cells)
        return picard_solve(k, coeffs, rho0, bundle.W, grid,
                            rho0_descriptor=init)

    def test_zero_kernel_bitwise_coupling(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 16, (1, 1), 8)
        init = builtin("gauss_init(0, 0.25)")
        coeffs = coeffs_const()
        sol = self.make_path(builtin("zero"), coeffs, init, g, b)
        t_sys = simulate_particles(builtin("zero"), coeffs, init, b, g)
        t_lim = simulate_mckean(builtin("zero"), coeffs, sol, b, g)
        assert np.array_equal(t_sys.X, t_lim.X)

    def test_fingerprint_mismatch_rejected(self):
        g = TimeGrid(0.25, 50)
        b1 = make_bundle(g, 4, (1, 1), 1)
        b2 = make_bundle(g, 4, (1, 1), 2)
        init = builtin("gauss_init(0, 0.25)")
        coeffs = coeffs_const()
        sol = self.make_path(builtin("zero"), coeffs, init, g, b1)
        with pytest.raises(ValueError, match="fingerprint"):
            simulate_mckean(builtin("zero"), coeffs, sol, b2, g)

    def test_convolved_drift_bounded_by_kernel(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 32, (1, 1), 9)
        init = builtin("gauss_init(0, 0.25)")
        coeffs = coeffs_const()
        k = builtin("odd_bump(a=0.5, r=1)")
        sol = self.make_path(k, coeffs, init, g, b)
        from chaoslab.fields import convolve_kernel
        for f in sol.fields[:: 10]:
            conv = convolve_kernel(k, f)
            assert np.abs(conv).max() <= k.sup_norm * (1 + 1e-6)

    def test_gaussian_conditional_law(self):
        # k=0, sigma=1, nu=1: Y_T - W_T should be centered (CLT band over
        # a large cloud of idiosyncratic paths on one common path)
        g = TimeGrid(0.5, 100)
        n = 10000
        b = make_bundle(g, n, (1, 1), 33)
        init = builtin("gauss_init(0, 0.01)")
        coeffs = coeffs_const()
        sol = self.make_path(builtin("zero"), coeffs, init, g, b)
        t_lim = simulate_mckean(builtin("zero"), coeffs, sol, b, g)
        resid = t_lim.X[-1, :, 0] - b.W[-1, 0]
        target_var = 0.01 + 0.5
        assert abs(resid.mean()) < 4 * math.sqrt(target_var / n)
        assert abs(resid.var() - target_var) < 4 * target_var * math.sqrt(2.0 / n)


class TestEmpiricalDensity:
    def test_single_point_histogram(self):
        emp = empirical_density(np.array([0.05]), 0.0, 1.0, 10,
                                method="histogram")
        assert emp.field.values[0] == pytest.approx(10.0)
        assert emp.field.mass() == pytest.approx(1.0)

    def test_kde_l1_accuracy(self):
        # frozen oracle: 10^5 N(0,1) samples, bandwidth 0.1 -> L1 <= 0.03
        rng = np.random.default_rng(2024)
        pts = rng.normal(size=100000)
        emp = empirical_density(pts, -8.0, 8.0, 320, method="kde",
                                bandwidth=0.1)
        x = emp.field.centers(0)
        exact = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        l1 = np.abs(emp.field.values - exact).sum() * emp.field.cell_volume
        assert l1 <= 0.03

    def test_out_of_box_counted_not_clamped(self):
        pts = np.array([-5.0, 0.0, 0.5, 9.0])
        emp = empirical_density(pts, -1.0, 1.0, 8, method="histogram")
        assert emp.n_outside == 2
        assert emp.field.mass() == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            empirical_density(np.array([]), 0, 1, 4)

    def test_disjoint_subsamples_close(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 2000, (1, 1), 77)
        traj = simulate_particles(builtin("odd_bump(a=0.5, r=1)"),
                                  coeffs_const(), builtin("gauss_init(0,0.25)"),
                                  b, g)
        xT = traj.X[-1, :, 0]
        e1 = empirical_density(xT[: 1000], -6, 6, 128, bandwidth=0.15)
        e2 = empirical_density(xT[1000:], -6, 6, 128, bandwidth=0.15)
        d12 = np.abs(e1.field.values - e2.field.values).sum() * e1.field.cell_volume
        assert d12 < 0.25   # two halves of one exchangeable cloud agree


class TestExchangeability:
    def test_iid_system_passes(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 64, (1, 1), 5)
        traj = simulate_particles(builtin("zero"), coeffs_const(),
                                  builtin("gauss_init(0,1)"), b, g)
        rep = exchangeability_test(traj, permutations=64)
        assert rep.passed

    def test_coupled_system_passes(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 64, (1, 1), 6)
        traj = simulate_particles(builtin("odd_bump(a=0.5, r=1)"),
                                  coeffs_const(), builtin("gauss_init(0,1)"),
                                  b, g)
        rep = exchangeability_test(traj, permutations=64)
        assert rep.passed

    def test_pinned_particle_fails(self):
        g = TimeGrid(0.25, 50)
        b = make_bundle(g, 64, (1, 1), 7)
        traj = simulate_particles(builtin("zero"), coeffs_const(),
                                  builtin("gauss_init(0,1)"), b, g)
        X = traj.X.copy()
        X[:, 0, :] = 0.0       # adversarial: first particle frozen
        from chaoslab.sde import ParticleTrajectory
        bad = ParticleTrajectory(X, traj.N, traj.d, traj.dt, traj.seed)
        rep = exchangeability_test(bad, permutations=199)
        assert not rep.passed


class TestExport:
    def test_binary_roundtrip(self, tmp_path):
        g = TimeGrid(0.1, 10)
        b = make_bundle(g, 4, (1, 1), 77)
        traj = simulate_particles(builtin("zero"), coeffs_const(),
                                  builtin("gauss_init(0,1)"), b, g)
        p = tmp_path / "traj.bin"
        export_binary(traj, p)
        back = load_binary(p)
        assert np.array_equal(back.X, traj.X)
        assert back.N == traj.N and back.seed == traj.seed

    def test_csv_shape(self, tmp_path):
        g = TimeGrid(0.1, 5)
        b = make_bundle(g, 3, (1, 1), 1)
        traj = simulate_particles(builtin("zero"), coeffs_const(),
                                  builtin("gauss_init(0,1)"), b, g)
        p = tmp_path / "traj.csv"
        export_csv(traj, p)
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "t,i,x1"
        assert len(lines) == 1 + 6 * 3
