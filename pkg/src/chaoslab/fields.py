"""Grid densities on translatable boxes.

A DensityField is a nonnegative cell-centered function on a uniform box.
The box itself can be translated (used to represent the common-noise shift
exactly, without resampling), so `lo`/`hi` are genuine coordinates and the
cell values never move.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DensityField:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    values: np.ndarray  # shape (cells,) in d=1, (cells, cells2) in d=2

    def __post_init__(self):
        if self.values.ndim != len(self.lo) or len(self.lo) != len(self.hi):
            raise ValueError("box dimension must match value array rank")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def cells(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def h(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def centers(self, axis: int = 0) -> np.ndarray:
        n = self.cells[axis]
        h = self.h[axis]
        return self.lo[axis] + (np.arange(n) + 0.5) * h

    # -- scalar queries ----------------------------------------------------

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.cell_volume)

    def l2_norm(self) -> float:
        return float(np.sqrt((self.values ** 2).sum() * self.cell_volume))

    def min_value(self) -> float:
        return float(self.values.min())

    def second_moment(self) -> float:
        if self.dim == 1:
            x = self.centers(0)
            return float((self.values * x ** 2).sum() * self.cell_volume)
        x0 = self.centers(0)[:, None]
        x1 = self.centers(1)[None, :]
        return float((self.values * (x0 ** 2 + x1 ** 2)).sum() * self.cell_volume)

    # -- geometry ----------------------------------------------------------

    def shifted(self, delta) -> "DensityField":
        """Translate the box by delta; values are untouched (exact shift)."""
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (self.dim,))
        return replace(self,
                       lo=tuple(np.asarray(self.lo) + delta),
                       hi=tuple(np.asarray(self.hi) + delta))

    def same_grid(self, other: "DensityField", tol: float = 1e-9) -> bool:
        return (self.cells == other.cells
                and np.allclose(self.lo, other.lo, atol=tol)
                and np.allclose(self.hi, other.hi, atol=tol))

    def require_same_grid(self, other: "DensityField"):
        if not self.same_grid(other):
            raise GridMismatchError(
                f"grids differ: {self.lo}/{self.hi}/{self.cells} vs "
                f"{other.lo}/{other.hi}/{other.cells}")

    # -- construction ------------------------------------------------------

    @staticmethod
    def from_pdf(pdf: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                 cells: int, cell_average: bool = False) -> "DensityField":
        """1-D field sampled at cell centers (or 3-point cell averages)."""
        h = (hi - lo) / cells
        x = lo + (np.arange(cells) + 0.5) * h
        if cell_average:
            # Simpson on each cell: endpoints + midpoint
            vals = (pdf(x - h / 2) + 4.0 * pdf(x) + pdf(x + h / 2)) / 6.0
        else:
            vals = pdf(x)
        return DensityField((lo,), (hi,), np.asarray(vals, dtype=float))


def convolve_kernel(k, rho: DensityField) -> np.ndarray:
    """(k * rho) at cell centers of a 1-D field; FFT on large grids."""
    n = rho.cells[0]
    h = float(rho.h[0])
    # kernel samples on the displacement lattice (centers minus centers)
    z = (np.arange(-(n - 1), n) * h)[:, None]
    kv = k(z)[:, 0]
    if n >= 1024:
        m = 1
        while m < 2 * n:
            m *= 2
        fa = np.fft.rfft(kv, m)
        fb = np.fft.rfft(rho.values, m)
        full = np.fft.irfft(fa * fb, m)[: 2 * n - 1]
    else:
        full = np.convolve(kv, rho.values)
    return full[n - 1: 2 * n - 1] * h
