"""Reduction of periodic-grid operators to the even (cosine) sector.

Even data u(-x) = u(x) is determined by its values at x_j, j = 0..n/2
(x in [-L, 0]); scalar operators on the full ring reduce to dense
(n/2+1)-square matrices.  The half-grid quadrature weight is h times
[1, 2, ..., 2, 1].  For spectral work the "weighted coordinates"
u~ = sqrt(w) u turn the quadrature pairing into the Euclidean one, so LAPACK
left/right eigenvectors are biorthogonal in exactly the norm the analysis
uses.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from solstab.fields import Field, Grid, Spinor


@lru_cache(maxsize=16)
def _half_data(n: int, L: float):
    m = n // 2 + 1
    h = 2.0 * L / n
    w = np.full(m, 2.0 * h)
    w[0] = h
    w[-1] = h
    x_half = -L + h * np.arange(m)
    return m, h, w, x_half


class EvenSector:
    """Dense even-sector calculus for one (n, L) grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.m, self.h, self.w, self.x = _half_data(grid.n, grid.L)
        self.sqw = np.sqrt(self.w)
        self._d2 = None

    # -- embedding / restriction -------------------------------------------
    def restrict(self, full: np.ndarray) -> np.ndarray:
        n = self.grid.n
        refl = np.roll(full[::-1], 1)
        return 0.5 * (full + refl)[: self.m]

    def embed(self, half: np.ndarray) -> np.ndarray:
        n = self.grid.n
        full = np.empty(n, dtype=half.dtype)
        full[: self.m] = half
        full[self.m:] = half[1:-1][::-1]
        return full

    def restrict_field(self, f: Field) -> np.ndarray:
        return self.restrict(f.values)

    def embed_field(self, half: np.ndarray) -> Field:
        return Field(self.grid, self.embed(half))

    # -- operators ----------------------------------------------------------
    @property
    def d2(self) -> np.ndarray:
        """Even-sector restriction of the spectral second derivative."""
        if self._d2 is None:
            n, m = self.grid.n, self.m
            k2 = -(self.grid.k ** 2)
            basis = np.zeros((n, m))
            basis[np.arange(m), np.arange(m)] = 1.0
            basis[n - np.arange(1, m - 1), np.arange(1, m - 1)] = 1.0
            ft = np.fft.fft(basis, axis=0)
            d2full = np.fft.ifft(k2[:, None] * ft, axis=0).real
            self._d2 = d2full[: m]
        return self._d2

    def schrodinger(self, omega: float, potential: np.ndarray) -> np.ndarray:
        """Dense -d2/dx2 + omega + potential(x) on the even sector."""
        A = -self.d2
        idx = np.arange(self.m)
        A[idx, idx] += omega + potential
        return A

    def weight_sym(self, A: np.ndarray) -> np.ndarray:
        """Similarity to weighted coordinates: W^(1/2) A W^(-1/2)."""
        return (self.sqw[:, None] * A) / self.sqw[None, :]

    def dot(self, u: np.ndarray, v: np.ndarray) -> complex:
        """Quadrature pairing int u conj(v) on half coordinates."""
        return complex(np.sum(self.w * u * np.conj(v)))

    # -- spinor block assembly ----------------------------------------------
    def spinor_restrict(self, s: Spinor) -> np.ndarray:
        return np.concatenate([self.restrict(s.up.values), self.restrict(s.lo.values)])

    def spinor_embed(self, half: np.ndarray) -> Spinor:
        return Spinor(self.embed_field(half[: self.m]), self.embed_field(half[self.m:]))

    @property
    def w2(self) -> np.ndarray:
        return np.concatenate([self.w, self.w])

    @property
    def sqw2(self) -> np.ndarray:
        return np.concatenate([self.sqw, self.sqw])

    def dot2(self, u: np.ndarray, v: np.ndarray) -> complex:
        return complex(np.sum(self.w2 * u * np.conj(v)))


_SECTORS: dict = {}


def even_sector(grid: Grid) -> EvenSector:
    key = (grid.n, grid.L)
    if key not in _SECTORS:
        _SECTORS[key] = EvenSector(grid)
    return _SECTORS[key]
