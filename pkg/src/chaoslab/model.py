"""Interaction kernels, diffusion coefficients, initial densities.

Coefficients are treated as black-box callables; structural conditions
(divergence-free common noise, derivative cancellation, ellipticity) are
checked numerically on a probe plan with central finite differences.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize_scalar


class CoefficientError(ValueError):
    """Raised for non-finite or structurally invalid coefficient data."""


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """Bounded square-integrable interaction force z -> R^d.

    ``eval`` maps an (n, d) array of points to an (n, d) array of force
    values.  ``sup_norm`` and ``l2_norm`` are declared bounds, checkable by
    probing / quadrature.  ``kind``/``params`` tag the built-ins so the
    particle loop can dispatch to a compiled fast path.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    dim: int
    sup_norm: float
    l2_norm: float
    support_radius: float = math.inf
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.eval(z)


# normalizer for the odd bump profile u * exp(-1/(1-u^2)) on (0, 1)
_ODD_PROFILE_PEAK = -minimize_scalar(
    lambda u: -u * math.exp(-1.0 / (1.0 - u * u)),
    bounds=(1e-9, 1.0 - 1e-9), method="bounded",
).fun


def _odd_bump_values(u: np.ndarray) -> np.ndarray:
    """Profile u*exp(-1/(1-u^2)) on |u|<1, zero outside, peak normalized to 1."""
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = ui * np.exp(-1.0 / (1.0 - ui * ui)) / _ODD_PROFILE_PEAK
    return out


def zero_kernel(dim: int = 1) -> KernelSpec:
    def _eval(z: np.ndarray) -> np.ndarray:
        return np.zeros_like(z)

    return KernelSpec(_eval, dim, sup_norm=0.0, l2_norm=0.0,
                      support_radius=0.0, kind="zero")


def odd_bump_kernel(a: float = 1.0, r: float = 1.0) -> KernelSpec:
    """Smooth odd compactly supported force in d=1, attractive, k(0)=0.

    Peak value is exactly ``a`` by construction.
    """
    if a < 0 or r <= 0:
        raise ValueError("odd_bump requires a >= 0, r > 0")

    def _eval(z: np.ndarray) -> np.ndarray:
        return _odd_bump_values(z / r) * a

    l2 = a * math.sqrt(quad(
        lambda u: (_odd_bump_values(np.array([u]))[0]) ** 2, -1, 1)[0] * r)
    return KernelSpec(_eval, 1, sup_norm=a, l2_norm=l2, support_radius=r,
                      kind="odd_bump", params={"a": a, "r": r})


def step_kernel(a: float = 1.0, r: float = 1.0) -> KernelSpec:
    """Truncated odd step a*sign(z) on |z| <= r (d=1); k(0) = 0."""
    if a < 0 or r <= 0:
        raise ValueError("step requires a >= 0, r > 0")

    def _eval(z: np.ndarray) -> np.ndarray:
        return np.where(np.abs(z) <= r, a * np.sign(z), 0.0)

    return KernelSpec(_eval, 1, sup_norm=a, l2_norm=a * math.sqrt(2 * r),
                      support_radius=r, kind="step", params={"a": a, "r": r})


# ---------------------------------------------------------------------------
# diffusion coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """Idiosyncratic (sigma) and common (nu) diffusion maps.

    sigma(t, z): (n, d) -> (n, d, m); nu(t, z): (n, d) -> (n, d, mt).
    ``delta`` is the declared ellipticity constant of sigma sigma^T and
    ``c1_bound`` a uniform bound on values and first derivatives.
    """

    sigma: Callable[[float, np.ndarray], np.ndarray]
    nu: Callable[[float, np.ndarray], np.ndarray]
    delta: float
    c1_bound: float
    dims: tuple[int, int, int]  # (d, m, mt)

    @property
    def d(self) -> int:
        return self.dims[0]


def constant_coefficients(sigma_mat: np.ndarray, nu_mat: np.ndarray,
                          delta: float | None = None) -> CoefficientSet:
    sigma_mat = np.atleast_2d(np.asarray(sigma_mat, dtype=float))
    nu_mat = np.atleast_2d(np.asarray(nu_mat, dtype=float))
    d, m = sigma_mat.shape
    d2, mt = nu_mat.shape
    if d2 != d:
        raise ValueError("sigma and nu must share the state dimension")
    if delta is None:
        delta = float(np.linalg.eigvalsh(sigma_mat @ sigma_mat.T).min())

    def _sigma(t: float, z: np.ndarray) -> np.ndarray:
        return np.broadcast_to(sigma_mat, (len(z), d, m)).copy()

    def _nu(t: float, z: np.ndarray) -> np.ndarray:
        return np.broadcast_to(nu_mat, (len(z), d, mt)).copy()

    bound = max(1.0, float(np.abs(sigma_mat).max()), float(np.abs(nu_mat).max()))
    return CoefficientSet(_sigma, _nu, delta=delta, c1_bound=bound,
                          dims=(d, m, mt))


def rotation_coefficients(sigma_scale: float = 1.0) -> CoefficientSet:
    """d=2 preset: isotropic sigma, divergence-free rotation field nu."""

    def _sigma(t: float, z: np.ndarray) -> np.ndarray:
        out = np.zeros((len(z), 2, 2))
        out[:, 0, 0] = sigma_scale
        out[:, 1, 1] = sigma_scale
        return out

    def _nu(t: float, z: np.ndarray) -> np.ndarray:
        out = np.zeros((len(z), 2, 1))
        out[:, 0, 0] = -z[:, 1]
        out[:, 1, 0] = z[:, 0]
        return out

    return CoefficientSet(_sigma, _nu, delta=sigma_scale ** 2, c1_bound=10.0,
                          dims=(2, 2, 1))


# ---------------------------------------------------------------------------
# initial densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialDensity:
    """Analytic initial density descriptor on R^1.

    kind: 'gauss' (mean, std) or 'two_bump' (mixture of two gaussians).
    """

    kind: str
    params: dict
    second_moment: float

    def pdf(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.kind == "gauss":
            mu, s = self.params["mean"], self.params["std"]
            return np.exp(-0.5 * ((z - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        if self.kind == "two_bump":
            c, s = self.params["center"], self.params["std"]
            a = np.exp(-0.5 * ((z - c) / s) ** 2)
            b = np.exp(-0.5 * ((z + c) / s) ** 2)
            return 0.5 * (a + b) / (s * math.sqrt(2 * math.pi))
        raise ValueError(f"unknown initial density kind {self.kind!r}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Inverse-CDF sampling (componentwise for the mixture)."""
        if self.kind == "gauss":
            mu, s = self.params["mean"], self.params["std"]
            from scipy.stats import norm
            return mu + s * norm.ppf(rng.random(n))
        if self.kind == "two_bump":
            c, s = self.params["center"], self.params["std"]
            from scipy.stats import norm
            signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            return signs * c + s * norm.ppf(rng.random(n))
        raise ValueError(f"unknown initial density kind {self.kind!r}")


def gauss_init(mean: float = 0.0, var: float = 1.0) -> InitialDensity:
    std = math.sqrt(var)
    return InitialDensity("gauss", {"mean": mean, "std": std},
                         second_moment=mean * mean + var)


def two_bump_init(center: float = 2.0, var: float = 0.25) -> InitialDensity:
    return InitialDensity("two_bump", {"center": center, "std": math.sqrt(var)},
                         second_moment=center * center + var)


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def _bump_nodes(epsilon: float, dim: int, order: int = 48):
    """Quadrature nodes/weights for the normalized smooth bump on |y| < eps.

    Weights are normalized to sum to one, so mollified values are convex
    combinations of kernel values (sup norms can only shrink).
    """
    x, w = np.polynomial.legendre.leggauss(order)
    if dim == 1:
        y = (x * epsilon)[:, None]
        dens = np.exp(-1.0 / np.maximum(1.0 - x * x, 1e-300)) * (np.abs(x) < 1)
        wts = w * dens
    elif dim == 2:
        gx, gy = np.meshgrid(x, x)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        r2 = (pts ** 2).sum(axis=1)
        mask = r2 < 1.0
        pts = pts[mask]
        dens = np.exp(-1.0 / (1.0 - r2[mask]))
        wts = (np.outer(w, w).ravel()[mask]) * dens
        y = pts * epsilon
    else:
        raise ValueError("mollification implemented for d <= 2")
    return y, wts / wts.sum()


def mollify_kernel(k: KernelSpec, epsilon: float) -> KernelSpec:
    """Convolve k with the unit-mass smooth bump scaled to radius epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    y, w = _bump_nodes(epsilon, k.dim)

    def _eval(z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        acc = np.zeros_like(z, dtype=float)
        for yi, wi in zip(y, w):
            acc += wi * k.eval(z - yi)
        if not np.all(np.isfinite(acc)):
            raise CoefficientError("non-finite value in mollified kernel")
        return acc

    return KernelSpec(_eval, k.dim, sup_norm=k.sup_norm, l2_norm=k.l2_norm,
                      support_radius=k.support_radius + epsilon,
                      kind="custom", params={"mollified_from": k.kind,
                                             "epsilon": epsilon})


def mollify_coefficients(coeffs: CoefficientSet, epsilon: float) -> CoefficientSet:
    """Componentwise mollification of sigma and nu; ellipticity is preserved."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = coeffs.d
    y, w = _bump_nodes(epsilon, d)

    def _smooth(f):
        def g(t: float, z: np.ndarray) -> np.ndarray:
            z = np.atleast_2d(z)
            acc = None
            for yi, wi in zip(y, w):
                v = wi * f(t, z - yi)
                acc = v if acc is None else acc + v
            if not np.all(np.isfinite(acc)):
                raise CoefficientError("non-finite value in mollified coefficient")
            return acc
        return g

    return replace(coeffs, sigma=_smooth(coeffs.sigma), nu=_smooth(coeffs.nu))


# ---------------------------------------------------------------------------
# numerical validation of the structural assumptions
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    worst_probe: tuple | None = None


@dataclass
class ValidationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def probe_plan(dim: int, n_random: int = 200, extent: float = 3.0,
               lattice: int = 5, seed: int = 0) -> np.ndarray:
    """Lattice plus random probe points in [-extent, extent]^dim."""
    axes = [np.linspace(-extent, extent, lattice)] * dim
    grid = np.stack(np.meshgrid(*axes), axis=-1).reshape(-1, dim)
    rng = np.random.default_rng(seed)
    rand = rng.uniform(-extent, extent, size=(n_random, dim))
    return np.vstack([grid, rand])


def validate(coeffs: CoefficientSet, rho0: InitialDensity | None,
             probes: np.ndarray, tol: float = 1e-6, T: float = 1.0,
             h_fd: float | None = None) -> ValidationReport:
    """Probe the five structural coefficient checks plus initial-density checks."""
    if len(probes) == 0:
        raise ValueError("probe plan is empty")
    d, m, mt = coeffs.dims
    if h_fd is None:
        h_fd = 1e-4 * max(1.0, float(np.abs(probes).max()))
    times = (0.0, T / 2, T)
    checks: list[CheckResult] = []

    def _eval(f, t, z, what):
        v = f(t, z)
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise CoefficientError(
                f"non-finite {what} at t={t}, probe {z[bad[0]]}")
        return v

    def _partial(f, t, beta):
        zp = probes.copy(); zp[:, beta] += h_fd
        zm = probes.copy(); zm[:, beta] -= h_fd
        return (_eval(f, t, zp, "coefficient") -
                _eval(f, t, zm, "coefficient")) / (2 * h_fd)

    def _worst(vals_by_time):
        w = 0.0; where = None
        for t, v in vals_by_time:
            flat = np.abs(v).reshape(len(probes), -1).max(axis=1)
            i = int(np.argmax(flat))
            if flat[i] > w:
                w, where = float(flat[i]), (t, tuple(probes[i]))
        return w, where

    # 1-2: uniform C^1 bounds on sigma and nu entries
    for name, f in (("sigma_c1_bound", coeffs.sigma), ("nu_c1_bound", coeffs.nu)):
        vals = []
        for t in times:
            v = np.abs(_eval(f, t, probes, name))
            dv = np.max([np.abs(_partial(f, t, b)) for b in range(d)], axis=0)
            vals.append((t, np.maximum(v, dv) - coeffs.c1_bound))
        w, where = _worst([(t, np.maximum(v, 0.0)) for t, v in vals])
        checks.append(CheckResult(name, w <= tol, w, where))

    # 3: divergence-free nu
    vals = []
    for t in times:
        div = sum(_partial(coeffs.nu, t, b)[:, b, :] for b in range(d))
        vals.append((t, div))
    w, where = _worst(vals)
    checks.append(CheckResult("nu_divergence_free", w <= tol, w, where))

    # 4: cancellation sum_beta d_beta (ss^T)_{ab} = 0 and same for nn^T
    def _prod(f, t, z):
        v = _eval(f, t, z, "coefficient")
        return np.einsum("nik,njk->nij", v, v)

    vals = []
    for t in times:
        for f in (coeffs.sigma, coeffs.nu):
            canc = np.zeros((len(probes), d))
            for beta in range(d):
                zp = probes.copy(); zp[:, beta] += h_fd
                zm = probes.copy(); zm[:, beta] -= h_fd
                dp = (_prod(f, t, zp) - _prod(f, t, zm)) / (2 * h_fd)
                canc += dp[:, :, beta]
            vals.append((t, canc))
    w, where = _worst(vals)
    checks.append(CheckResult("cancellation", w <= tol, w, where))

    # 5: ellipticity of sigma sigma^T
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(16, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = []
    for t in times:
        ss = _prod(coeffs.sigma, t, probes)
        quad_forms = np.einsum("ka,nab,kb->nk", dirs, ss, dirs)
        vals.append((t, np.maximum(coeffs.delta - quad_forms, 0.0)))
    w, where = _worst(vals)
    checks.append(CheckResult("ellipticity", w <= tol, w, where))

    if rho0 is not None:
        grid = np.linspace(-40, 40, 20001)
        vals_pdf = rho0.pdf(grid)
        mass = float(np.trapezoid(vals_pdf, grid))
        m2 = float(np.trapezoid(vals_pdf * grid ** 2, grid))
        checks.append(CheckResult("rho0_mass", abs(mass - 1.0) <= max(tol, 1e-8),
                                  abs(mass - 1.0)))
        checks.append(CheckResult("rho0_second_moment", math.isfinite(m2),
                                  abs(m2 - rho0.second_moment)))
    return ValidationReport(checks)


# ---------------------------------------------------------------------------
# preset catalog and the name(arg=value) grammar
# ---------------------------------------------------------------------------

_PRESETS: dict[str, Callable] = {
    "zero": zero_kernel,
    "odd_bump": odd_bump_kernel,
    "step": step_kernel,
    "const_iso": lambda s=1.0: constant_coefficients(
        np.array([[s]]), np.array([[s]])),
    "const_aniso": lambda s=1.0, v=1.0: constant_coefficients(
        np.array([[s]]), np.array([[v]])),
    "rotation": rotation_coefficients,
    "gauss_init": gauss_init,
    "two_bump_init": two_bump_init,
}


class UnknownPresetError(KeyError):
    def __init__(self, name: str):
        avail = ", ".join(sorted(_PRESETS))
        super().__init__(f"unknown preset {name!r}; available: {avail}")


_CALL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def builtin(spec: str):
    """Resolve a preset string like ``odd_bump(a=1, r=1)`` to an object."""
    match = _CALL_RE.match(spec)
    if not match:
        raise UnknownPresetError(spec)
    name, argstr = match.groups()
    if name not in _PRESETS:
        raise UnknownPresetError(name)
    args, kwargs = [], {}
    if argstr:
        for part in argstr.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" in part:
                key, val = part.split("=", 1)
                kwargs[key.strip()] = float(val)
            else:
                args.append(float(part))
    return _PRESETS[name](*args, **kwargs)


def builtin_library() -> dict[str, Callable]:
    """Catalog of named presets (kernels, coefficient sets, initial data)."""
    return dict(_PRESETS)
