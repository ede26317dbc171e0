"""End-to-end acceptance checks at full scale.

Each test prints a one-line pass/fail summary with the measured quantity so
the suite output doubles as a results table.  The three large studies are
session-scoped fixtures so they run exactly once.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from chaoslab.entropy import (DominanceToy, cancellation_check, ckp_check,
                              conditional_dominance_check, gaussian_kl,
                              relative_entropy)
from chaoslab.fields import DensityField
from chaoslab.harness import StudyConfig, liouville_study, run_study
from chaoslab.model import builtin, constant_coefficients, gauss_init
from chaoslab.sde import TimeGrid, derive_seed, make_bundle
from chaoslab.spde import picard_solve, solve_linear_fpk


def _report(name, passed, detail):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    assert passed, f"{name}: {detail}"


def _gauss_field(lo, hi, cells, mu, var):
    x = DensityField(lo, hi, np.zeros(cells)).centers(0)
    vals = norm.pdf(x, mu, math.sqrt(var))
    h = (hi[0] - lo[0]) / cells
    return DensityField(lo, hi, vals / (vals.sum() * h))


# ---------------------------------------------------------------- studies

@pytest.fixture(scope="session")
def rate_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("rate_study")
    t0 = time.monotonic()
    res = run_study(StudyConfig(), out_dir=out)
    return res, out, time.monotonic() - t0


@pytest.fixture(scope="session")
def rate_study_no_common(tmp_path_factory):
    out = tmp_path_factory.mktemp("rate_study_nu0")
    cfg = StudyConfig(coeffs="const_aniso(s=1, v=0)")
    t0 = time.monotonic()
    res = run_study(cfg, out_dir=out)
    return res, out, time.monotonic() - t0


@pytest.fixture(scope="session")
def liouville_result():
    cfg = StudyConfig(kernel="odd_bump(a=0.25, r=1)")
    t0 = time.monotonic()
    res = liouville_study(cfg)
    return res, time.monotonic() - t0


# ------------------------------------------------------------ criterion 1

def test_gaussian_oracle_five_seeds():
    coeffs = constant_coefficients(1, 1.0, 1.0)
    grid = TimeGrid(0.5, 500)
    rho0 = _gauss_field((-4.0,), (4.0,), 1024, 0.0, 0.01)
    worst_err, worst_rt = 0.0, 0.0
    for s in range(5):
        bundle = make_bundle(grid, 1, (1, 1), derive_seed(20260826, "acc1", s))
        t0 = time.monotonic()
        sol = solve_linear_fpk(None, coeffs, rho0, bundle.W, grid)
        rt = time.monotonic() - t0
        fld = sol.fields[-1]
        x = fld.centers(0)
        exact = norm.pdf(x, bundle.W[-1, 0], math.sqrt(0.01 + 0.5))
        h = x[1] - x[0]
        err = float(np.sum(np.abs(fld.values - exact)) * h)
        worst_err, worst_rt = max(worst_err, err), max(worst_rt, rt)
    _report("criterion 1 (Gaussian oracle)",
            worst_err <= 1e-2 and worst_rt <= 5.0,
            f"max L1 err {worst_err:.3e} (tol 1e-2), "
            f"max runtime {worst_rt:.2f}s (cap 5s)")


# ------------------------------------------------------------ criterion 2

def test_conservation_and_positivity():
    coeffs = constant_coefficients(1, 1.0, 1.0)
    grid = TimeGrid(0.5, 500)
    rho0 = _gauss_field((-4.0,), (4.0,), 1024, 0.0, 0.01)
    bundle = make_bundle(grid, 1, (1, 1), derive_seed(20260826, "acc2", 0))
    runs = [solve_linear_fpk(None, coeffs, rho0, bundle.W, grid),
            picard_solve(builtin("odd_bump(a=0.5, r=1)"), coeffs, rho0,
                         bundle.W, grid)]
    worst_drift = max(float(np.max(np.abs(np.asarray(s.diagnostics["mass"])
                                          - 1.0))) for s in runs)
    worst_min = min(float(np.min(s.diagnostics["min"])) for s in runs)
    _report("criterion 2 (conservation & positivity)",
            worst_drift <= 1e-10 and worst_min >= 0.0,
            f"max |mass-1| {worst_drift:.3e} (tol 1e-10), "
            f"min cell {worst_min:.3e} (>= 0)")


# ------------------------------------------------------------ criterion 3

def test_picard_contraction():
    coeffs = constant_coefficients(1, 1.0, 1.0)
    grid = TimeGrid(0.5, 200)
    rho0 = _gauss_field((-4.0,), (4.0,), 1024, 0.0, 0.25)
    bundle = make_bundle(grid, 1, (1, 1), derive_seed(20260826, "acc3", 0))
    t0 = time.monotonic()
    sol = picard_solve(builtin("odd_bump(a=0.5, r=1)"), coeffs, rho0,
                       bundle.W, grid, tol=1e-8, max_iter=12)
    rt = time.monotonic() - t0
    inc = np.asarray(sol.increments)
    ratios = inc[2:] / inc[1:-1]
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    _report("criterion 3 (Picard contraction)",
            max_ratio < 0.9 and sol.iterations <= 12 and rt <= 60.0,
            f"{sol.iterations} iterations, max increment ratio after iter 2 "
            f"{max_ratio:.3f} (< 0.9), runtime {rt:.1f}s (cap 60s)")


# ------------------------------------------------------------ criterion 4

def test_rate_reproduction(rate_study):
    res, _, rt = rate_study
    slope = res.fit.slope
    _report("criterion 4 (convergence rate)",
            res.valid and -1.3 <= slope <= -0.7 and rt <= 1800.0,
            f"slope {slope:.3f} in [-1.3, -0.7], band "
            f"({res.fit.band[0]:.3f}, {res.fit.band[1]:.3f}), "
            f"runtime {rt / 60:.1f} min (cap 30 min)")


# ------------------------------------------------------------ criterion 5

def test_rate_without_common_noise(rate_study_no_common):
    res, _, rt = rate_study_no_common
    slope = res.fit.slope
    _report("criterion 5 (rate with nu=0)",
            res.valid and -1.3 <= slope <= -0.7 and rt <= 1800.0,
            f"slope {slope:.3f} in [-1.3, -0.7], "
            f"runtime {rt / 60:.1f} min (cap 30 min)")


# ------------------------------------------------------------ criterion 6

def test_liouville_entropy(liouville_result):
    res, rt = liouville_result
    ok = (res.H[0] <= 1e-10
          and float(res.H.max()) <= res.bound
          and float(res.ckp_margin.min()) >= -1e-8
          and float(res.subadd_margin.min()) >= -1e-6
          and rt <= 600.0)
    _report("criterion 6 (two-particle entropy)", ok,
            f"H(0) {res.H[0]:.2e} (<= 1e-10), sup H {res.H.max():.3e} <= "
            f"bound {res.bound:.1f}, min CKP margin {res.ckp_margin.min():.2e}"
            f", min subadditivity margin {res.subadd_margin.min():.2e}, "
            f"runtime {rt:.0f}s (cap 600s)")


# ------------------------------------------------------------ criterion 7

def _random_field(rng, cells=256):
    lo, hi = (-4.0,), (4.0,)
    x = DensityField(lo, hi, np.zeros(cells)).centers(0)
    mu = rng.uniform(-1.5, 1.5, 3)
    sd = rng.uniform(0.2, 1.0, 3)
    w = rng.dirichlet(np.ones(3))
    vals = sum(wi * norm.pdf(x, m, s) for wi, m, s in zip(w, mu, sd))
    h = x[1] - x[0]
    return DensityField(lo, hi, vals / (vals.sum() * h))


def test_inequality_suite():
    rng = np.random.default_rng(7)
    worst_h, worst_ckp, worst_kl = np.inf, np.inf, 0.0
    for _ in range(120):
        f, g = _random_field(rng), _random_field(rng)
        h = relative_entropy(f, g).value
        rep = ckp_check(f, g)
        worst_h = min(worst_h, h)
        worst_ckp = min(worst_ckp, rep.margin)
        mu1, mu2 = rng.uniform(-1, 1, 2)
        v1, v2 = rng.uniform(0.3, 2.0, 2)
        ff = _gauss_field((-12.0,), (12.0,), 4096, mu1, v1)
        gg = _gauss_field((-12.0,), (12.0,), 4096, mu2, v2)
        kl_grid = relative_entropy(ff, gg).value
        worst_kl = max(worst_kl, abs(kl_grid - gaussian_kl(mu1, v1, mu2, v2)))
    ok_pairs = worst_h >= 0 and worst_ckp >= 0 and worst_kl <= 1e-4

    worst_cancel = 0.0
    for kname in ("odd_bump(a=0.5, r=1)", "step(a=0.5, r=1)"):
        for iname in ("gauss_init(0, 0.25)", "two_bump_init"):
            k = builtin(kname)
            init = builtin(iname)
            rho = DensityField.from_pdf(init.pdf, -6.0, 6.0, 512)
            rho = DensityField(rho.lo, rho.hi,
                               rho.values / rho.mass())
            worst_cancel = max(worst_cancel,
                               cancellation_check(k, rho).max_integral)

    worst_dom = np.inf
    for b in (0.4, 0.9, 1.5):
        toy = DominanceToy(a=0.8, b=b, c=0.5, e=1.1, mu=0.3)
        worst_dom = min(worst_dom, conditional_dominance_check(toy))

    _report("criterion 7 (inequality suite)",
            ok_pairs and worst_cancel <= 1e-10 and worst_dom >= -1e-8,
            f"min H {worst_h:.2e} (>= 0), min CKP margin {worst_ckp:.2e} "
            f"(>= 0), max Gaussian-KL gap {worst_kl:.2e} (<= 1e-4), max "
            f"cancellation integral {worst_cancel:.2e} (<= 1e-10), min "
            f"dominance margin {worst_dom:.2e} (>= -1e-8)")


# ------------------------------------------------------------ criterion 8

def test_determinism_byte_identical(rate_study, tmp_path_factory):
    _, out1, _ = rate_study
    out2 = tmp_path_factory.mktemp("rate_study_rerun")
    run_study(StudyConfig(), out_dir=out2)
    b1 = (out1 / "rows.csv").read_bytes()
    b2 = (out2 / "rows.csv").read_bytes()
    _report("criterion 8 (byte-identical rerun)", b1 == b2,
            f"rows.csv rerun identical: {b1 == b2} ({len(b1)} bytes)")
