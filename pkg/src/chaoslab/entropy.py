"""Relative entropy, L1 distances, and the inequality checks used by the
convergence experiments (Pinsker-type bound, marginal subadditivity,
dissipation terms, the centered-kernel cancellation identity, and the
conditioning-increases-entropy toy model).

All estimators are grid-quadrature based; particle input appears only in
the drift-fluctuation term, which is a plain Monte Carlo average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import DensityField, convolve_kernel
from .model import KernelSpec
from .sde import mean_force

_FLOOR = 1e-300
_AC_MASS_TOL = 1e-8


@dataclass(frozen=True)
class EntropyValue:
    value: float                  # +inf when absolute continuity fails
    mass_on_small_g: float        # f-mass where g <= floor

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def relative_entropy(f: DensityField, g: DensityField) -> EntropyValue:
    """sum f log(f/g) h^d with 0 log 0 = 0.

    g is clipped at 1e-300 inside the logarithm only; the +inf decision
    is made from the f-mass sitting where g <= floor.
    """
    f.require_same_grid(g)
    small = g.values <= _FLOOR
    bad_mass = float(f.values[small].sum() * f.cell_volume)
    if bad_mass > _AC_MASS_TOL:
        return EntropyValue(math.inf, bad_mass)
    fv = f.values
    gv = np.maximum(g.values, _FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(fv > 0, fv * (np.log(np.maximum(fv, _FLOOR)) - np.log(gv)),
                         0.0)
    val = float(terms.sum() * f.cell_volume)
    if -1e-9 < val < 0.0:       # round-off from near-equal unit-mass inputs
        val = 0.0
    return EntropyValue(val, bad_mass)


def l1_distance(f: DensityField, g: DensityField) -> float:
    f.require_same_grid(g)
    return float(np.abs(f.values - g.values).sum() * f.cell_volume)


@dataclass(frozen=True)
class CkpReport:
    margin: float          # 2H - ||f-g||_1^2
    entropy: float
    l1: float
    vacuous: bool          # H infinite: inequality holds trivially


def ckp_check(f: DensityField, g: DensityField) -> CkpReport:
    ent = relative_entropy(f, g)
    d1 = l1_distance(f, g)
    if not ent.finite:
        return CkpReport(math.inf, ent.value, d1, True)
    return CkpReport(2.0 * ent.value - d1 * d1, ent.value, d1, False)


def subadditivity_check(fN: DensityField, g: DensityField, r: int = 1,
                        sym_tol: float = 1e-8) -> float:
    """(r/N) H(fN | g tensor N) - H(r-marginal | g tensor r), N=2, r=1."""
    if fN.dim != 2 or r != 1:
        raise ValueError("implemented for the 2-particle field with r=1")
    asym = float(np.abs(fN.values - fN.values.T).sum() * fN.cell_volume)
    if asym > sym_tol:
        raise ValueError(f"input is not exchangeable-symmetric (L1 asymmetry "
                         f"{asym:.3e} > {sym_tol:.0e})")
    from .spde import marginal, tensorize
    full = relative_entropy(fN, tensorize(g, 2))
    marg = relative_entropy(marginal(fN, 1), g)
    return 0.5 * full.value - marg.value


@dataclass(frozen=True)
class FluctuationEstimate:
    value: float           # (N/delta) * mean_i |mean-force(i) - (k*rho)(x_i)|^2
    stderr: float
    n_batches: int


def fluctuation_term(particles: np.ndarray, k: KernelSpec, rho: DensityField,
                     delta: float, n_batches: int = 16) -> FluctuationEstimate:
    """Per-time integrand of the drift-fluctuation dissipation term.

    particles: (N, d) positions, assumed sampled from the system conditioned
    on the same common path as rho.  Batch-means standard error.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    n = len(x)
    if k.sup_norm == 0.0:
        return FluctuationEstimate(0.0, 0.0, n_batches)
    emp = mean_force(k, x)[:, 0]
    conv = convolve_kernel(k, rho)
    limit = np.interp(x[:, 0], rho.centers(0), conv, left=0.0, right=0.0)
    sq = (emp - limit) ** 2
    est = float(n * sq.mean() / delta)
    nb = min(n_batches, n)
    batches = np.array_split(sq, nb)
    means = np.array([n * b.mean() / delta for b in batches])
    stderr = float(means.std(ddof=1) / math.sqrt(nb)) if nb > 1 else 0.0
    return FluctuationEstimate(est, stderr, nb)


def fisher_term(fN: DensityField, g: DensityField, delta: float,
                floor: float = 1e-12) -> float:
    """(delta/4) sum_i int fN |d_i log(fN / g tensor 2)|^2 on the 2-D grid.

    Centered differences, restricted to cells where both densities exceed
    the floor.
    """
    if fN.dim != 2:
        raise ValueError("fisher_term operates on the 2-particle grid")
    from .spde import tensorize
    gg = tensorize(g, 2)
    fN.require_same_grid(gg)
    h = float(fN.h[0])
    ok = (fN.values > floor) & (gg.values > floor)
    logr = np.zeros_like(fN.values)
    logr[ok] = np.log(fN.values[ok]) - np.log(gg.values[ok])
    total = 0.0
    for axis in (0, 1):
        grad = np.zeros_like(logr)
        sl_f = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_c = [slice(None)] * 2
        sl_f[axis] = slice(2, None)
        sl_b[axis] = slice(None, -2)
        sl_c[axis] = slice(1, -1)
        grad[tuple(sl_c)] = (logr[tuple(sl_f)] - logr[tuple(sl_b)]) / (2 * h)
        okc = np.zeros_like(ok)
        okc[tuple(sl_c)] = ok[tuple(sl_f)] & ok[tuple(sl_b)] & ok[tuple(sl_c)]
        total += float((fN.values[okc] * grad[okc] ** 2).sum() * fN.cell_volume)
    return 0.25 * delta * total


@dataclass(frozen=True)
class DissipationReport:
    fisher: float
    fluctuation: float
    fluctuation_stderr: float


@dataclass(frozen=True)
class CancellationReport:
    max_integral: float    # max_z |int psi(z, y) rho(y) dy|
    psi_sup: float         # sup |psi|, must be <= 1/(2e)


def cancellation_check(k: KernelSpec, rho: DensityField,
                       probes: np.ndarray | None = None) -> CancellationReport:
    """Centered-kernel identity: psi(z,y) = (k(z-y) - (k*rho)(z)) / (16e||k||)
    integrates to zero against rho in y, with sup |psi| <= 1/(2e)."""
    if k.sup_norm == 0.0:
        raise ValueError("psi is undefined for a vanishing kernel")
    if abs(rho.mass() - 1.0) > 1e-6:
        raise ValueError("rho must have unit mass")
    y = rho.centers(0)
    h = float(rho.h[0])
    if probes is None:
        probes = y[:: max(1, len(y) // 64)]
    denom = 16.0 * math.e * k.sup_norm
    conv = convolve_kernel(k, rho)
    conv_at = np.interp(probes, y, conv)
    max_int = 0.0
    psi_sup = 0.0
    for z, cz in zip(probes, conv_at):
        kv = k((z - y)[:, None])[:, 0]
        psi = (kv - cz) / denom
        psi_sup = max(psi_sup, float(np.abs(psi).max()))
        max_int = max(max_int, abs(float((psi * rho.values).sum() * h)))
    return CancellationReport(max_int, psi_sup)


def gaussian_kl(mu1: float, v1: float, mu2: float, v2: float) -> float:
    return 0.5 * (v1 / v2 + (mu1 - mu2) ** 2 / v2 - 1.0 + math.log(v2 / v1))


@dataclass(frozen=True)
class DominanceToy:
    """X = mu + a G + b xi1, Y = c G + e xi2 with independent standard
    normal G, xi1, xi2; conditioning is on G."""
    a: float
    b: float
    c: float
    e: float
    mu: float = 0.0


def conditional_dominance_check(toy: DominanceToy, quad_order: int = 96) -> float:
    """E_G[ H(law(X|G) | law(Y|G)) ] - H(law X | law Y) (>= 0 by Jensen)."""
    if toy.b == 0.0 or toy.e == 0.0:
        raise ValueError("degenerate toy model: b and e must be nonzero")
    uncond = gaussian_kl(toy.mu, toy.a ** 2 + toy.b ** 2,
                         0.0, toy.c ** 2 + toy.e ** 2)
    nodes, weights = np.polynomial.hermite_e.hermegauss(quad_order)
    weights = weights / weights.sum()
    cond = sum(w * gaussian_kl(toy.mu + toy.a * g, toy.b ** 2,
                               toy.c * g, toy.e ** 2)
               for g, w in zip(nodes, weights))
    return float(cond - uncond)
