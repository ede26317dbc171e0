"""Pathwise solvers for the nonlinear stochastic Fokker-Planck equation
(d=1) and the two-particle joint-density equation (d=1, N=2).

Scheme per time step: conservative upwind advection, backward-Euler
diffusion in conservative flux form (tridiagonal solves, with curvature-
driven sub-stepping for accuracy), and the common-noise transport applied
as an exact translation of the grid box by nu*dW.  The translation
representation is statistically exact for spatially constant nu, so no
Ito correction is added for that step; spatially varying common noise is
rejected (in d=1 the divergence-free requirement forces nu to be constant
anyway).

Positivity (M-matrix + upwind under CFL) and exact interior mass
conservation (zero boundary flux, zero column sums) hold by construction;
mass is never renormalized, its drift is recorded as a diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .fields import DensityField, convolve_kernel
from .model import CoefficientSet, InitialDensity, KernelSpec
from .sde import TimeGrid, w_fingerprint


class StabilityError(RuntimeError):
    pass


class PositivityError(RuntimeError):
    pass


class PicardError(RuntimeError):
    def __init__(self, msg, increments):
        super().__init__(msg)
        self.increments = increments


_NEG_TOL = 1e-12


# ---------------------------------------------------------------------------
# per-step building blocks
# ---------------------------------------------------------------------------

def _advect(values: np.ndarray, vel: np.ndarray, dt: float, h: float,
            axis: int = 0) -> np.ndarray:
    """Conservative first-order upwind step with zero end fluxes."""
    v = np.moveaxis(np.asarray(vel, dtype=float), axis, 0)
    rho = np.moveaxis(values, axis, 0)
    cfl = np.abs(v).max() * dt / h
    if cfl > 1.0 + 1e-12:
        raise StabilityError(
            f"advective CFL {cfl:.3f} > 1; reduce dt or refine the grid")
    vf = 0.5 * (v[:-1] + v[1:])                      # interior faces
    flux = np.where(vf > 0, vf * rho[:-1], vf * rho[1:])
    out = rho.copy()
    out[:-1] -= (dt / h) * flux
    out[1:] += (dt / h) * flux
    return np.moveaxis(out, 0, axis)


def _diffusion_apply(values: np.ndarray, a: float, h: float,
                     axis: int = 0) -> np.ndarray:
    """L rho for the zero-flux conservative diffusion operator a*d^2/dx^2."""
    rho = np.moveaxis(values, axis, 0)
    out = np.empty_like(rho)
    out[1:-1] = rho[2:] - 2.0 * rho[1:-1] + rho[:-2]
    out[0] = rho[1] - rho[0]
    out[-1] = rho[-2] - rho[-1]
    return np.moveaxis(out * (a / h ** 2), 0, axis)


def _diffusion_substeps(values: np.ndarray, a: float, dt: float, h: float,
                        err_rate: float, cell_volume: float,
                        axis: int = 0) -> int:
    """Substep count keeping the backward-Euler error rate below err_rate.

    The leading error rate is ~ dt_sub * ||L^2 rho||_1 / 2.
    """
    curv = _diffusion_apply(_diffusion_apply(values, a, h, axis), a, h, axis)
    e_rate = 0.5 * float(np.abs(curv).sum()) * cell_volume
    return int(min(100000, max(1, math.ceil(dt * e_rate / max(err_rate, 1e-30)))))


def _diffuse(values: np.ndarray, a: float, dt: float, h: float,
             err_rate: float, cell_volume: float, axis: int = 0,
             n_sub: int | None = None) -> np.ndarray:
    """Backward-Euler diffusion over dt with curvature-driven sub-stepping."""
    if a == 0.0 or dt == 0.0:
        return values
    if n_sub is None:
        n_sub = _diffusion_substeps(values, a, dt, h, err_rate, cell_volume,
                                    axis)
    dts = dt / n_sub
    rho = np.moveaxis(values, axis, 0)
    n = rho.shape[0]
    mu = a * dts / h ** 2
    ab = np.zeros((3, n))
    ab[0, 1:] = -mu
    ab[2, :-1] = -mu
    ab[1, :] = 1.0 + 2.0 * mu
    ab[1, 0] = 1.0 + mu
    ab[1, -1] = 1.0 + mu
    shape = rho.shape
    rhs = rho.reshape(n, -1)
    for _ in range(n_sub):
        rhs = solve_banded((1, 1), ab, rhs)
    return np.moveaxis(rhs.reshape(shape), 0, axis)


def _clip_negatives(values: np.ndarray, where: str):
    mn = values.min()
    if mn < -_NEG_TOL:
        raise PositivityError(f"negative cell {mn:.3e} after {where}")
    if mn < 0.0:
        np.clip(values, 0.0, None, out=values)


def _constant_nu_row(coeffs: CoefficientSet, t: float, probe: np.ndarray):
    """(diffusion coefficient a, nu row) at time t; nu and sigma*sigma^T
    must be spatially constant on the probe set."""
    sig = coeffs.sigma(t, probe)
    nu = coeffs.nu(t, probe)
    ss = np.einsum("nik,njk->nij", sig, sig)
    scale = max(1.0, float(np.abs(ss).max()), float(np.abs(nu).max()))
    if (np.abs(ss - ss[0]).max() > 1e-10 * scale
            or np.abs(nu - nu[0]).max() > 1e-10 * scale):
        raise NotImplementedError(
            "solver requires spatially constant sigma*sigma^T and nu "
            "(forced in d=1 by the divergence-free/cancellation conditions)")
    return 0.5 * float(ss[0, 0, 0]), nu[0, 0, :].copy()


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpdeSolution:
    fields: list          # [steps+1] DensityField
    w_fp: str
    diagnostics: dict     # arrays over time: mass, l2, m2, min
    iterations: int | None = None
    increments: tuple | None = None
    rho0_descriptor: InitialDensity | None = None

    def diagnostics_csv(self, path, dt: float):
        d = self.diagnostics
        with open(path, "w") as fh:
            fh.write("t,mass,l2,m2,min\n")
            for j in range(len(d["mass"])):
                fh.write(f"{j * dt:.17g},{d['mass'][j]:.17g},{d['l2'][j]:.17g},"
                         f"{d['m2'][j]:.17g},{d['min'][j]:.17g}\n")


@dataclass(frozen=True)
class LiouvilleSolution2:
    fields: dict          # step index -> 2-D DensityField (stored snapshots)
    w_fp: str
    diagnostics: dict


def _diag_arrays(steps: int):
    return {name: np.zeros(steps + 1) for name in ("mass", "l2", "m2", "min")}


def _record(diag, j, f: DensityField):
    diag["mass"][j] = f.mass()
    diag["l2"][j] = f.l2_norm()
    diag["m2"][j] = f.second_moment()
    diag["min"][j] = f.min_value()


# ---------------------------------------------------------------------------
# 1-D solvers
# ---------------------------------------------------------------------------

def solve_linear_fpk(drift_field, coeffs: CoefficientSet, rho0: DensityField,
                     W: np.ndarray, grid: TimeGrid, err_rate: float = 0.008,
                     rho0_descriptor: InitialDensity | None = None) -> SpdeSolution:
    """Linear Fokker-Planck step train along the common path W (d=1).

    drift_field is the force k*rho (None, an array [steps(+1), cells]
    given on the moving grid, or a callable (t, centers) -> force); the
    advection velocity is its negative.  W has shape (steps+1,) or
    (steps+1, mt).
    """
    if rho0.dim != 1:
        raise ValueError("solve_linear_fpk is one-dimensional")
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != grid.steps + 1:
        raise ValueError("W length must be steps+1")
    n = rho0.cells[0]
    h = float(rho0.h[0])
    dt = grid.dt
    f = rho0
    fields = [f]
    diag = _diag_arrays(grid.steps)
    _record(diag, 0, f)
    for j in range(grid.steps):
        t = j * dt
        vals = f.values
        if drift_field is not None:
            if callable(drift_field):
                force = np.asarray(drift_field(t, f.centers(0)), dtype=float)
            else:
                force = np.asarray(drift_field[j], dtype=float)
            cfl = np.abs(force).max() * dt / h
            if cfl > 0.5 + 1e-12:
                raise StabilityError(
                    f"CFL {cfl:.3f} > 0.5 at step {j}; reduce dt")
            vals = _advect(vals, -force, dt, h)
            _clip_negatives(vals, f"advection step {j}")
        probe = f.centers(0)[[0, n // 2, n - 1]][:, None]
        a, nu_row = _constant_nu_row(coeffs, t, probe)
        vals = _diffuse(vals, a, dt, h, err_rate, h)
        _clip_negatives(vals, f"diffusion step {j}")
        shift = float(nu_row @ (W[j + 1] - W[j]))
        f = DensityField(f.lo, f.hi, vals).shifted(shift)
        fields.append(f)
        _record(diag, j + 1, f)
    return SpdeSolution(fields, w_fingerprint(W), diag,
                        rho0_descriptor=rho0_descriptor)


def picard_solve(k: KernelSpec, coeffs: CoefficientSet, rho0: DensityField,
                 W: np.ndarray, grid: TimeGrid, tol: float = 1e-8,
                 max_iter: int = 30, err_rate: float = 0.008,
                 rho0_descriptor: InitialDensity | None = None) -> SpdeSolution:
    """Fixed-point construction of the nonlinear solution.

    Iterate n: solve the linear equation with frozen force k * rho^{n-1}_t,
    starting from rho^0 identically equal to rho0.  Stops when the
    sup-over-time L2 increment drops below tol * ||rho0||_L2.
    """
    sqrt_h = math.sqrt(float(rho0.h[0]))
    threshold = tol * rho0.l2_norm()
    prev_vals = np.broadcast_to(rho0.values, (grid.steps + 1, rho0.cells[0]))
    increments = []
    for it in range(1, max_iter + 1):
        if k.sup_norm == 0.0:
            drift = None
        else:
            drift = np.empty((grid.steps, rho0.cells[0]))
            for j in range(grid.steps):
                drift[j] = convolve_kernel(
                    k, DensityField(rho0.lo, rho0.hi, prev_vals[j]))
        sol = solve_linear_fpk(drift, coeffs, rho0, W, grid, err_rate,
                               rho0_descriptor=rho0_descriptor)
        vals = np.stack([f.values for f in sol.fields])
        inc = float(np.sqrt(((vals - prev_vals) ** 2).sum(axis=1)).max() * sqrt_h)
        increments.append(inc)
        if inc < threshold:
            return SpdeSolution(sol.fields, sol.w_fp, sol.diagnostics,
                                iterations=max(it - 1, 1) if it > 1 else 1,
                                increments=tuple(increments),
                                rho0_descriptor=rho0_descriptor)
        prev_vals = vals
    raise PicardError(
        f"no convergence in {max_iter} iterations (last increment "
        f"{increments[-1]:.3e}, threshold {threshold:.3e})", increments)


# ---------------------------------------------------------------------------
# tensorization and the 2-particle solver
# ---------------------------------------------------------------------------

def tensorize(rho: DensityField, N: int) -> DensityField:
    if rho.dim != 1:
        raise ValueError("tensorize expects a 1-D field")
    if N == 1:
        return rho
    if N == 2:
        return DensityField(rho.lo * 2, rho.hi * 2,
                            np.outer(rho.values, rho.values))
    raise ValueError("tensor grids limited to N*d <= 2")


def marginal(rho2: DensityField, which: int = 1) -> DensityField:
    if rho2.dim != 2:
        raise ValueError("marginal expects a 2-D field")
    if which == 1:
        vals = rho2.values.sum(axis=1) * float(rho2.h[1])
        return DensityField((rho2.lo[0],), (rho2.hi[0],), vals)
    if which == 2:
        vals = rho2.values.sum(axis=0) * float(rho2.h[0])
        return DensityField((rho2.lo[1],), (rho2.hi[1],), vals)
    raise ValueError("which must be 1 or 2")


def solve_liouville_2(k: KernelSpec, coeffs: CoefficientSet,
                      rho0_2d: DensityField, W: np.ndarray, grid: TimeGrid,
                      err_rate: float = 0.008,
                      store_steps: list[int] | None = None) -> LiouvilleSolution2:
    """Joint density of the 2-particle system (d=1) along the path W.

    Per-coordinate drift -(k(0) + k(x_i - x_other))/2; the common noise
    shifts both coordinates by the same nu*dW (exact diagonal translation,
    which carries the full cross-coordinate coupling of the common-noise
    covariance).  Advection sweeps are averaged over the two axis orders so
    the swap symmetry of exchangeable initial data is preserved exactly.
    """
    if rho0_2d.dim != 2 or coeffs.d != 1:
        raise ValueError("solve_liouville_2 needs a 2-D field and d=1 coefficients")
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    n = rho0_2d.cells[0]
    h = float(rho0_2d.h[0])
    dt = grid.dt
    x = rho0_2d.centers(0)
    if k.sup_norm > 0.0:
        if k.sup_norm * grid.dt / h > 0.5 + 1e-12:
            raise StabilityError("CFL ||k|| dt / h > 0.5; reduce dt")
        diff = (x[:, None] - x[None, :])[..., None].reshape(-1, 1)
        kv = k(diff)[:, 0].reshape(n, n)
        k0 = float(k(np.zeros((1, 1)))[0, 0])
        v1 = -0.5 * (k0 + kv)          # velocity of coordinate 1
        v2 = -0.5 * (k0 + kv.T)
    else:
        v1 = v2 = None
    store = set(store_steps) if store_steps is not None \
        else set(range(grid.steps + 1))
    f = rho0_2d
    fields = {}
    diag = _diag_arrays(grid.steps)
    _record(diag, 0, f)
    if 0 in store:
        fields[0] = f
    cv = h * h
    for j in range(grid.steps):
        t = j * dt
        vals = f.values
        if v1 is not None:
            a01 = _advect(_advect(vals, v1, dt, h, axis=0), v2, dt, h, axis=1)
            a10 = _advect(_advect(vals, v2, dt, h, axis=1), v1, dt, h, axis=0)
            vals = 0.5 * (a01 + a10)
            _clip_negatives(vals, f"advection step {j}")
        probe = x[[0, n // 2, n - 1]][:, None]
        a, nu_row = _constant_nu_row(coeffs, t, probe)
        # one shared substep count keeps the two axis sweeps identical
        # operators, so the swap symmetry of the data survives exactly
        n_sub = max(_diffusion_substeps(vals, a, dt, h, err_rate, cv, axis=0),
                    _diffusion_substeps(vals, a, dt, h, err_rate, cv, axis=1))
        vals = _diffuse(vals, a, dt, h, err_rate, cv, axis=0, n_sub=n_sub)
        vals = _diffuse(vals, a, dt, h, err_rate, cv, axis=1, n_sub=n_sub)
        _clip_negatives(vals, f"diffusion step {j}")
        shift = float(nu_row @ (W[j + 1] - W[j]))
        f = DensityField(f.lo, f.hi, vals).shifted((shift, shift))
        _record(diag, j + 1, f)
        if j + 1 in store:
            fields[j + 1] = f
    return LiouvilleSolution2(fields, w_fingerprint(W), diag)


# ---------------------------------------------------------------------------
# a-priori diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticsReport:
    passed: bool
    sup_l2: float
    sup_m2: float
    first_violation_time: float | None


def l2_growth_cap(k_sup: float, delta: float, T: float, rho0_l2: float,
                  d: int = 1) -> float:
    """Gronwall cap C * ||rho0||_L2 with C = exp((2||k||^2 + d*delta) T)^(1/2)."""
    return math.exp((2.0 * k_sup ** 2 + d * delta) * T) ** 0.5 * rho0_l2


def diagnostics_check(sol: SpdeSolution, l2_cap: float, moment_cap: float,
                      dt: float) -> DiagnosticsReport:
    l2 = sol.diagnostics["l2"]
    m2 = sol.diagnostics["m2"]
    bad = np.flatnonzero((l2 > l2_cap) | (m2 > moment_cap))
    return DiagnosticsReport(bad.size == 0, float(l2.max()), float(m2.max()),
                             float(bad[0] * dt) if bad.size else None)
