"""Experiment orchestration: config ingestion, convergence-rate studies
over N with common-noise replicates, the 2-particle entropy study, rate
fitting, and deterministic CSV/JSON persistence.

Everything downstream of a (config, master_seed) pair is deterministic;
wall-clock metadata is confined to the manifest so result files are
byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
import sys
import time
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import entropy as ent
from .fields import DensityField
from .model import CoefficientSet, InitialDensity, KernelSpec, builtin
from .sde import (TimeGrid, derive_seed, empirical_density, make_bundle,
                  simulate_particles)
from .spde import (marginal, picard_solve, solve_liouville_2, tensorize)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    kernel: str = "odd_bump(a=0.5, r=1)"
    coeffs: str = "const_aniso(s=1, v=1)"
    init: str = "gauss_init(0, 0.25)"
    T: float = 0.5
    steps: int = 200
    n_list: tuple = (256, 512, 1024, 2048, 4096)
    replicates: int = 16
    master_seed: int = 20260826
    cells: int = 1024
    box: float = 8.0
    method: str = "kde"
    bandwidth: float | str = 0.08
    checkpoints: int = 17
    workers: int = 1
    err_rate: float = 0.008
    picard_tol: float = 1e-8
    picard_max_iter: int = 30
    liouville_cells: int = 192
    schema_version: int = 1

    def __post_init__(self):
        ns = list(self.n_list)
        if ns != sorted(set(ns)):
            raise ConfigError("n_list must be strictly increasing")
        if self.replicates < 2:
            raise ConfigError("replicates must be at least 2")
        for name in ("kernel", "coeffs", "init"):
            builtin(getattr(self, name))   # raises on unknown presets

    def resolve(self) -> tuple[KernelSpec, CoefficientSet, InitialDensity]:
        return builtin(self.kernel), builtin(self.coeffs), builtin(self.init)

    @staticmethod
    def from_toml(path) -> "StudyConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        known = set(StudyConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}; "
                              f"known keys: {sorted(known)}")
        if "n_list" in raw:
            raw["n_list"] = tuple(raw["n_list"])
        return StudyConfig(**raw)

    def canonical(self) -> dict:
        d = asdict(self)
        d["n_list"] = list(d["n_list"])
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_steps(steps: int, n_checkpoints: int) -> list[int]:
    """n evenly spaced step indices including 0 and the final step."""
    return sorted(set(int(round(i * steps / (n_checkpoints - 1)))
                      for i in range(n_checkpoints)))


def make_initial_field(init: InitialDensity, box: float, cells: int) -> DensityField:
    f = DensityField.from_pdf(init.pdf, -box, box, cells, cell_average=True)
    return DensityField(f.lo, f.hi, f.values / f.mass())


ROW_COLUMNS = ("N", "rep", "seed", "w_fp", "config_hash", "sup_l1_sq",
               "l1_sq_final", "fluct_final", "n_outside_max", "status")


def run_replicate(cfg: StudyConfig, N: int, rep: int) -> dict:
    """One (N, replicate) pipeline; failures are captured into the row."""
    row = {"N": N, "rep": rep, "config_hash": cfg.config_hash,
           "sup_l1_sq": math.nan, "l1_sq_final": math.nan,
           "fluct_final": math.nan, "n_outside_max": 0,
           "seed": 0, "w_fp": "", "status": "ok"}
    try:
        kernel, coeffs, init = cfg.resolve()
        grid = TimeGrid(cfg.T, cfg.steps)
        seed = derive_seed(cfg.master_seed, "study", "N", N, "rep", rep)
        row["seed"] = seed
        d, m, mt = coeffs.dims
        bundle = make_bundle(grid, N, (m, mt), seed)
        row["w_fp"] = bundle.fingerprint

        rho0 = make_initial_field(init, cfg.box, cfg.cells)
        sol = picard_solve(kernel, coeffs, rho0, bundle.W, grid,
                           tol=cfg.picard_tol, max_iter=cfg.picard_max_iter,
                           err_rate=cfg.err_rate, rho0_descriptor=init)
        if sol.w_fp != bundle.fingerprint:
            raise RuntimeError("common-path fingerprint mismatch")
        traj = simulate_particles(kernel, coeffs, init, bundle, grid)

        bw = None if cfg.bandwidth == "silverman" else float(cfg.bandwidth)
        sup_sq = 0.0
        final_sq = math.nan
        n_out = 0
        cps = checkpoint_steps(cfg.steps, cfg.checkpoints)
        for idx in cps:
            fld = sol.fields[idx]
            offset = fld.lo[0] - rho0.lo[0]      # accumulated common shift
            pos = traj.X[idx, :, 0] - offset
            emp = empirical_density(pos, -cfg.box, cfg.box, cfg.cells,
                                    method=cfg.method, bandwidth=bw)
            n_out = max(n_out, emp.n_outside)
            comoving = DensityField(rho0.lo, rho0.hi, fld.values)
            l1 = float(np.abs(emp.field.values - comoving.values).sum()
                       * comoving.cell_volume)
            sup_sq = max(sup_sq, l1 * l1)
            if idx == cps[-1]:
                final_sq = l1 * l1
                fl = ent.fluctuation_term(pos[:, None], kernel, comoving,
                                          coeffs.delta)
                row["fluct_final"] = fl.value
        row["sup_l1_sq"] = sup_sq
        row["l1_sq_final"] = final_sq
        row["n_outside_max"] = n_out
    except Exception as exc:  # noqa: BLE001 - captured into the row by contract
        row["status"] = f"error:{type(exc).__name__}"
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def rows_to_csv(rows: list[dict], path):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(ROW_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in ROW_COLUMNS) + "\n")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    band: tuple[float, float]
    stderr: float


def fit_rate(points) -> RateFit:
    """OLS of log(value) on log(N) with a leave-one-out jackknife band."""
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    if any(v <= 0 for _, v in pts):
        raise ValueError("values must be positive")
    ln = np.log([n for n, _ in pts])
    lv = np.log([v for _, v in pts])

    def ols(xs, ys):
        s, i = np.polyfit(xs, ys, 1)
        return float(s), float(i)

    slope, intercept = ols(ln, lv)
    n = len(pts)
    jack = np.array([ols(np.delete(ln, i), np.delete(lv, i))[0]
                     for i in range(n)])
    se = math.sqrt((n - 1) / n * ((jack - jack.mean()) ** 2).sum())
    return RateFit(slope, intercept, (slope - 1.96 * se, slope + 1.96 * se), se)


@dataclass(frozen=True)
class StudyResult:
    rows: list
    per_n: dict
    fit: RateFit | None
    valid: bool
    failed_fraction: float
    runtime_s: float


def run_study(cfg: StudyConfig, out_dir=None) -> StudyResult:
    t0 = time.monotonic()
    tasks = [(N, rep) for N in cfg.n_list for rep in range(cfg.replicates)]
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            rows = list(ex.map(run_replicate, [cfg] * len(tasks),
                               [t[0] for t in tasks], [t[1] for t in tasks]))
    else:
        rows = [run_replicate(cfg, N, rep) for N, rep in tasks]
    rows.sort(key=lambda r: (r["N"], r["rep"]))

    ok = [r for r in rows if r["status"] == "ok"]
    failed_fraction = 1.0 - len(ok) / len(rows)
    valid = failed_fraction <= 0.2
    per_n = {}
    for N in cfg.n_list:
        vals = np.array([r["sup_l1_sq"] for r in ok if r["N"] == N])
        if vals.size:
            per_n[N] = {"mean": float(vals.mean()),
                        "stderr": float(vals.std(ddof=1) / math.sqrt(vals.size))
                        if vals.size > 1 else 0.0,
                        "m": int(vals.size)}
    fit = None
    if valid and len(per_n) >= 3:
        fit = fit_rate([(N, s["mean"]) for N, s in per_n.items()])
    runtime = time.monotonic() - t0
    result = StudyResult(rows, per_n, fit, valid, failed_fraction, runtime)
    if out_dir is not None:
        write_study_outputs(cfg, result, out_dir)
    return result


def write_study_outputs(cfg: StudyConfig, result: StudyResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_to_csv(result.rows, out / "rows.csv")
    summary = {
        "schema_version": cfg.schema_version,
        "per_n": {str(N): s for N, s in result.per_n.items()},
        "slope": result.fit.slope if result.fit else None,
        "intercept": result.fit.intercept if result.fit else None,
        "band": list(result.fit.band) if result.fit else None,
        "valid": result.valid,
        "failed_fraction": result.failed_fraction,
        "caveat": ("sup over time is taken over the configured checkpoint "
                   "grid, not the full step grid"),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    import numpy, scipy  # noqa: PLC0415
    manifest = {
        "config": cfg.canonical(),
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "seed_derivation": "blake2b(key=master_seed, labels="
                           "study/N/<N>/rep/<rep>)",
        "versions": {"python": platform.python_version(),
                     "numpy": numpy.__version__, "scipy": scipy.__version__},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "runtime_s": result.runtime_s,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# 2-particle entropy study
# ---------------------------------------------------------------------------

def entropy_bound(k_sup: float, T: float, delta: float) -> float:
    """16 e ||k|| T^2 exp(C T) / delta with the dissipation-proof rate
    C = 16 e ||k|| / delta."""
    C = 16.0 * math.e * k_sup / delta
    return 16.0 * math.e * k_sup * T * T * math.exp(C * T) / delta


@dataclass(frozen=True)
class LiouvilleStudyResult:
    times: np.ndarray
    H: np.ndarray
    ckp_margin: np.ndarray
    subadd_margin: np.ndarray
    fisher: np.ndarray
    fluct: np.ndarray
    bound: float
    integrated_residual: float
    w_fp: str

    def to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("t,H,ckp_margin,subadd_margin,fisher,fluct\n")
            for i in range(len(self.times)):
                fh.write(",".join(_fmt(float(a[i])) for a in
                                  (self.times, self.H, self.ckp_margin,
                                   self.subadd_margin, self.fisher,
                                   self.fluct)) + "\n")


def _grid_fluctuation(kernel: KernelSpec, f2: DensityField, rho: DensityField,
                      delta: float) -> float:
    """(1/delta) sum_i int f2 |(1/2) sum_j k(x_i-x_j) - (k*rho)(x_i)|^2."""
    from .fields import convolve_kernel
    x = rho.centers(0)
    n = len(x)
    kv = kernel((x[:, None] - x[None, :]).reshape(-1, 1))[:, 0].reshape(n, n)
    k0 = float(kernel(np.zeros((1, 1)))[0, 0])
    conv = convolve_kernel(kernel, rho)
    g1 = 0.5 * (k0 + kv) - conv[:, None]       # coordinate-1 fluctuation
    g2 = 0.5 * (k0 + kv.T) - conv[None, :]
    return float(((g1 ** 2 + g2 ** 2) * f2.values).sum()
                 * f2.cell_volume / delta)


def liouville_study(cfg: StudyConfig) -> LiouvilleStudyResult:
    """Joint 2-particle density vs the tensorized limit on one common path."""
    kernel, coeffs, init = cfg.resolve()
    if coeffs.d != 1:
        raise ConfigError("the 2-particle study requires d=1 coefficients")
    grid = TimeGrid(cfg.T, cfg.steps)
    seed = derive_seed(cfg.master_seed, "liouville", 0)
    bundle = make_bundle(grid, 2, (coeffs.dims[1], coeffs.dims[2]), seed)
    cells = cfg.liouville_cells
    rho0 = make_initial_field(init, cfg.box, cells)
    cps = checkpoint_steps(cfg.steps, cfg.checkpoints)

    sol1 = picard_solve(kernel, coeffs, rho0, bundle.W, grid,
                        tol=cfg.picard_tol, max_iter=cfg.picard_max_iter,
                        err_rate=cfg.err_rate, rho0_descriptor=init)
    sol2 = solve_liouville_2(kernel, coeffs, tensorize(rho0, 2), bundle.W,
                             grid, err_rate=cfg.err_rate, store_steps=cps)
    if sol1.w_fp != sol2.w_fp:
        raise RuntimeError("common-path fingerprint mismatch")

    H = np.zeros(len(cps))
    ckp = np.zeros(len(cps))
    sub = np.zeros(len(cps))
    fis = np.zeros(len(cps))
    flu = np.zeros(len(cps))
    for i, idx in enumerate(cps):
        f2 = sol2.fields[idx]
        f1 = sol1.fields[idx]
        # compare in the co-moving frame (both carry the same shift)
        f2c = DensityField((rho0.lo[0],) * 2, (rho0.hi[0],) * 2, f2.values)
        f1c = DensityField(rho0.lo, rho0.hi, f1.values)
        prod = tensorize(f1c, 2)
        H[i] = ent.relative_entropy(f2c, prod).value
        ckp[i] = ent.ckp_check(f2c, prod).margin
        sub[i] = ent.subadditivity_check(f2c, f1c)
        fis[i] = ent.fisher_term(f2c, f1c, coeffs.delta)
        if kernel.sup_norm > 0.0:
            flu[i] = _grid_fluctuation(kernel, f2c, f1c, coeffs.delta)
    times = np.array([idx * grid.dt for idx in cps])
    integral = float(np.trapezoid(flu - fis, times))
    bound = entropy_bound(kernel.sup_norm, cfg.T, coeffs.delta) \
        if kernel.sup_norm > 0 else 0.0
    return LiouvilleStudyResult(times, H, ckp, sub, fis, flu, bound,
                                integral - float(H[-1]), sol1.w_fp)
