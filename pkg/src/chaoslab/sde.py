"""Seeded Brownian bundles, Euler-Maruyama particle simulation, empirical
densities, and the exchangeability permutation test.

All randomness flows from a 64-bit master seed through a keyed hash chain,
so any sub-stream can be regenerated independently and bit-identically.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .fields import DensityField, convolve_kernel
from .model import CoefficientSet, InitialDensity, KernelSpec

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    _HAVE_NUMBA = False


def derive_seed(master_seed: int, *labels) -> int:
    """64-bit child seed from a blake2b chain keyed by the master seed."""
    h = hashlib.blake2b(digest_size=8,
                        key=int(master_seed).to_bytes(8, "little", signed=False))
    for lab in labels:
        h.update(str(lab).encode() + b"\x00")
    return int.from_bytes(h.digest(), "little")


def w_fingerprint(W: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(W, dtype=np.float64).tobytes(),
                           digest_size=16).hexdigest()


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class BrownianBundle:
    W: np.ndarray            # (steps+1, mt)
    B: np.ndarray            # (N, steps+1, m)
    master_seed: int
    stream_ids: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return w_fingerprint(self.W)


def make_bundle(grid: TimeGrid, N: int, dims: tuple[int, int],
                master_seed: int) -> BrownianBundle:
    """One common path W (mt-dim) and N idiosyncratic paths B (m-dim each)."""
    if N < 1:
        raise ValueError("N must be at least 1")
    m, mt = dims
    sd = np.sqrt(grid.dt)

    w_seed = derive_seed(master_seed, "common", 0)
    rng = np.random.default_rng(np.random.PCG64(w_seed))
    W = np.zeros((grid.steps + 1, mt))
    W[1:] = np.cumsum(rng.normal(0.0, sd, size=(grid.steps, mt)), axis=0)

    b_seed = derive_seed(master_seed, "idiosyncratic", 0)
    rng_b = np.random.default_rng(np.random.PCG64(b_seed))
    B = np.zeros((N, grid.steps + 1, m))
    B[:, 1:, :] = np.cumsum(
        rng_b.normal(0.0, sd, size=(N, grid.steps, m)), axis=1)

    return BrownianBundle(W, B, master_seed,
                          {"common": w_seed, "idiosyncratic": b_seed})


@dataclass(frozen=True)
class ParticleTrajectory:
    X: np.ndarray            # (steps+1, N, d)
    N: int
    d: int
    dt: float
    seed: int


# ---------------------------------------------------------------------------
# pairwise mean force
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    # both built-in kernels are odd, so each pair is evaluated once and
    # accumulated antisymmetrically (self term k(0)=0 drops out)

    @numba.njit(cache=True)
    def _mean_force_odd_bump(x, a, r, peak):
        n = x.shape[0]
        out = np.zeros(n)
        for i in range(n):
            xi = x[i]
            for j in range(i + 1, n):
                z = (xi - x[j]) / r
                if -1.0 < z < 1.0 and z != 0.0:
                    w = z * np.exp(-1.0 / (1.0 - z * z))
                    out[i] += w
                    out[j] -= w
        return out * (a / (peak * n))

    @numba.njit(cache=True)
    def _mean_force_step(x, a, r):
        n = x.shape[0]
        out = np.zeros(n)
        for i in range(n):
            xi = x[i]
            for j in range(i + 1, n):
                z = xi - x[j]
                if 0.0 < z <= r:
                    out[i] += 1.0
                    out[j] -= 1.0
                elif -r <= z < 0.0:
                    out[i] -= 1.0
                    out[j] += 1.0
        return out * (a / n)


def mean_force(k: KernelSpec, x: np.ndarray) -> np.ndarray:
    """(1/N) sum_j k(x_i - x_j) for all i; self term j=i included.

    x: (N, d).  Compiled double loop for the built-in d=1 kernels, blocked
    numpy for everything else.
    """
    n, d = x.shape
    if k.sup_norm == 0.0:
        return np.zeros_like(x)
    if _HAVE_NUMBA and d == 1 and k.kind == "odd_bump":
        from .model import _ODD_PROFILE_PEAK
        return _mean_force_odd_bump(
            np.ascontiguousarray(x[:, 0]), k.params["a"], k.params["r"],
            _ODD_PROFILE_PEAK)[:, None]
    if _HAVE_NUMBA and d == 1 and k.kind == "step":
        return _mean_force_step(
            np.ascontiguousarray(x[:, 0]), k.params["a"], k.params["r"])[:, None]
    out = np.zeros_like(x)
    block = max(1, 2 ** 22 // max(n, 1))
    for s in range(0, n, block):
        diff = x[s:s + block, None, :] - x[None, :, :]   # (b, n, d)
        kv = k(diff.reshape(-1, d)).reshape(diff.shape)
        out[s:s + block] = kv.mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

def _sample_initial(rho0, N: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.PCG64(seed))
    if isinstance(rho0, InitialDensity):
        if d != 1:
            raise ValueError("analytic initial densities are 1-dimensional")
        return rho0.sample(N, rng)[:, None]
    raise TypeError(f"cannot sample initial condition of type {type(rho0)!r}")


def simulate_particles(k: KernelSpec, coeffs: CoefficientSet,
                       rho0: InitialDensity, bundle: BrownianBundle,
                       grid: TimeGrid, check_drift: bool = False) -> ParticleTrajectory:
    """Explicit Euler-Maruyama for the N-particle system.

    X^i_{j+1} = X^i_j - mean_force(X_j)_i dt + sigma dB^i_j + nu dW_j.
    """
    d, m, mt = coeffs.dims
    N = bundle.B.shape[0]
    steps = grid.steps
    dt = grid.dt
    init_seed = derive_seed(bundle.master_seed, "initial", 0)
    x = _sample_initial(rho0, N, d, init_seed)
    X = np.empty((steps + 1, N, d))
    X[0] = x
    for j in range(steps):
        t = j * dt
        drift = -mean_force(k, x)
        if check_drift:
            assert np.all(np.linalg.norm(drift, axis=1) <= k.sup_norm + 1e-12)
        dB = bundle.B[:, j + 1, :] - bundle.B[:, j, :]
        dW = bundle.W[j + 1] - bundle.W[j]
        x = (x + drift * dt
             + np.einsum("nik,nk->ni", coeffs.sigma(t, x), dB)
             + coeffs.nu(t, x) @ dW)
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise FloatingPointError(
                f"non-finite state at step {j + 1}, particle {bad[0]}")
        X[j + 1] = x
    return ParticleTrajectory(X, N, d, dt, bundle.master_seed)


def simulate_mckean(k: KernelSpec, coeffs: CoefficientSet, rho_path,
                    bundle: BrownianBundle, grid: TimeGrid) -> ParticleTrajectory:
    """Euler-Maruyama for the limiting system with drift -(k * rho_t)(Y).

    rho_path must have been solved along the same common path as bundle
    (fingerprints are compared); the convolution is evaluated on the
    density grid and linearly interpolated at particle positions.
    """
    if rho_path.w_fp != bundle.fingerprint:
        raise ValueError("common-path fingerprint mismatch between the "
                         "density path and the Brownian bundle")
    d, m, mt = coeffs.dims
    if d != 1:
        raise NotImplementedError("limit simulation implemented for d=1")
    N = bundle.B.shape[0]
    steps = grid.steps
    dt = grid.dt
    rho0_desc = getattr(rho_path, "rho0_descriptor", None)
    if rho0_desc is None:
        raise ValueError("rho_path carries no sampleable initial density")
    init_seed = derive_seed(bundle.master_seed, "initial", 0)
    x = _sample_initial(rho0_desc, N, d, init_seed)
    X = np.empty((steps + 1, N, 1))
    X[0] = x
    for j in range(steps):
        t = j * dt
        f = rho_path.fields[j]
        if k.sup_norm == 0.0:
            drift = np.zeros_like(x)
        else:
            conv = convolve_kernel(k, f)
            centers = f.centers(0)
            drift = -np.interp(x[:, 0], centers, conv,
                               left=0.0, right=0.0)[:, None]
        dB = bundle.B[:, j + 1, :] - bundle.B[:, j, :]
        dW = bundle.W[j + 1] - bundle.W[j]
        x = (x + drift * dt
             + np.einsum("nik,nk->ni", coeffs.sigma(t, x), dB)
             + coeffs.nu(t, x) @ dW)
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise FloatingPointError(
                f"non-finite state at step {j + 1}, particle {bad[0]}")
        X[j + 1] = x
    return ParticleTrajectory(X, N, 1, dt, bundle.master_seed)


# ---------------------------------------------------------------------------
# empirical densities
# ---------------------------------------------------------------------------

def silverman_bandwidth(points: np.ndarray) -> float:
    n = len(points)
    s = float(np.std(points))
    iqr = float(np.subtract(*np.percentile(points, [75, 25])))
    scale = min(s, iqr / 1.349) if iqr > 0 else s
    return 0.9 * max(scale, 1e-12) * n ** (-0.2)


@dataclass(frozen=True)
class EmpiricalDensity:
    field: DensityField
    n_outside: int
    n_total: int


def empirical_density(positions: np.ndarray, lo: float, hi: float, cells: int,
                      method: str = "kde",
                      bandwidth: float | None = None) -> EmpiricalDensity:
    """Histogram or Gaussian-KDE density of d=1 points on [lo, hi].

    Out-of-box points are dropped and counted; the field mass equals the
    inside fraction (KDE values are renormalized on the box to that mass).
    """
    pts = np.asarray(positions, dtype=float).reshape(-1)
    if pts.size == 0:
        raise ValueError("empty point set")
    inside = pts[(pts >= lo) & (pts <= hi)]
    n_out = pts.size - inside.size
    frac = inside.size / pts.size
    h = (hi - lo) / cells
    x = lo + (np.arange(cells) + 0.5) * h
    if inside.size == 0:
        vals = np.zeros(cells)
    elif method == "histogram":
        counts, _ = np.histogram(inside, bins=cells, range=(lo, hi))
        vals = counts / (pts.size * h)
    elif method == "kde":
        bw = bandwidth if bandwidth is not None else silverman_bandwidth(inside)
        vals = np.zeros(cells)
        block = max(1, 2 ** 22 // cells)
        for s in range(0, inside.size, block):
            z = (x[None, :] - inside[s:s + block, None]) / bw
            vals += np.exp(-0.5 * z * z).sum(axis=0)
        vals /= inside.size * bw * np.sqrt(2 * np.pi)
        mass = vals.sum() * h
        if mass > 0:
            vals *= frac / mass
    else:
        raise ValueError(f"unknown method {method!r}")
    return EmpiricalDensity(DensityField((lo,), (hi,), vals), n_out, pts.size)


# ---------------------------------------------------------------------------
# exchangeability test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExchangeabilityReport:
    p_value: float
    passed: bool
    statistic: float
    permutations: int


def exchangeability_test(traj: ParticleTrajectory, permutations: int = 199,
                         level: float = 0.01, seed: int = 0,
                         n_windows: int = 16) -> ExchangeabilityReport:
    """Two-sample test for exchangeability of particle indices.

    The trajectory is cut into time windows; the per-window quadratic
    variation of the first-indexed particle (replicates of an
    index-dependent statistic) is compared against the same statistic
    evaluated at `permutations` random (window, permuted index) draws.
    Under exchangeability both samples share one marginal distribution; a
    Mann-Whitney rank test supplies the p-value.
    """
    if traj.N < 2:
        raise ValueError("need at least two particles")
    from scipy.stats import mannwhitneyu
    steps = traj.X.shape[0] - 1
    nw = max(2, min(n_windows, steps))
    edges = np.linspace(0, steps, nw + 1).astype(int)
    dx = np.diff(traj.X, axis=0)
    sq = (dx ** 2).sum(axis=2)             # (steps, N)
    qv = np.add.reduceat(sq, edges[:-1], axis=0)   # (nw, N)
    sample_a = qv[:, 0]
    rng = np.random.default_rng(np.random.PCG64(derive_seed(seed, "exch")))
    ws = rng.integers(0, nw, permutations)
    ps = rng.integers(0, traj.N, permutations)
    sample_b = qv[ws, ps]
    res = mannwhitneyu(sample_a, sample_b, alternative="two-sided",
                       method="asymptotic")
    p_val = float(res.pvalue)
    return ExchangeabilityReport(p_val, p_val > level, float(res.statistic),
                                 permutations)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

_MAGIC = b"CHTR"


def export_binary(traj: ParticleTrajectory, path):
    """Flat little-endian float64 dump with a (magic, N, d, steps, seed) header."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqQ", traj.N, traj.d, traj.X.shape[0] - 1,
                             traj.seed))
        fh.write(np.ascontiguousarray(traj.X, dtype="<f8").tobytes())


def load_binary(path) -> ParticleTrajectory:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("bad magic in trajectory file")
        N, d, steps, seed = struct.unpack("<qqqQ", fh.read(32))
        X = np.frombuffer(fh.read(), dtype="<f8").reshape(steps + 1, N, d)
    return ParticleTrajectory(X.copy(), N, d, float("nan"), seed)


def export_csv(traj: ParticleTrajectory, path):
    """One row per (t, i): t, i, x_1..x_d."""
    steps1, N, d = traj.X.shape
    with open(path, "w") as fh:
        fh.write("t,i," + ",".join(f"x{a + 1}" for a in range(d)) + "\n")
        for j in range(steps1):
            t = j * traj.dt
            for i in range(N):
                coords = ",".join(f"{v:.17g}" for v in traj.X[j, i])
                fh.write(f"{t:.17g},{i},{coords}\n")
