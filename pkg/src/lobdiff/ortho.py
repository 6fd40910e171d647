"""Sequential orthogonal decomposition of a correlation array.

Given correlations rho_ij (j <= i) of normalized variables Z^1, Z^2, ...,
build a lower-triangular array c with Z^i = sum_{j<=i} c_ij W^j for
orthonormal W, plus the inverse array alpha with W^i = sum_j alpha_ij Z^j.
Rows whose pivot c_ii vanishes carry no new randomness; their W^i is an
independent fair sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PIVOT_TOL = 1e-12
RADICAND_TOL = 1e-12


class NotPSDError(ValueError):
    def __init__(self, row: int, radicand: float):
        super().__init__(f"correlation array is not positive semidefinite: row {row} "
                         f"has radicand {radicand:.3e}")
        self.row = row
        self.radicand = radicand


@dataclass
class TriangularArray:
    """Lower-triangular array stored densely; entries above the diagonal are zero."""

    values: np.ndarray
    zero_pivot: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.tril(np.asarray(self.values, dtype=float))
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("triangular array must be square")
        if self.zero_pivot is None:
            self.zero_pivot = np.zeros(self.n, dtype=bool)
        self.zero_pivot = np.asarray(self.zero_pivot, dtype=bool)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, ij):
        i, j = ij
        return self.values[i, j]

    def entries(self):
        """(i, j, value) with 1-based positions in row-major lower-triangle order."""
        for i in range(self.n):
            for j in range(i + 1):
                yield i + 1, j + 1, float(self.values[i, j])

    @classmethod
    def from_entries(cls, n: int, entries) -> "TriangularArray":
        vals = np.zeros((n, n))
        for i, j, a in entries:
            if j > i:
                raise ValueError(f"entry ({i}, {j}) lies above the diagonal")
            vals[i - 1, j - 1] = a
        return cls(vals)

    def symmetric(self) -> np.ndarray:
        return self.values + np.tril(self.values, -1).T


def _check_rho(rho: np.ndarray) -> None:
    if np.any(np.abs(np.tril(rho)) > 1.0 + 1e-12):
        i, j = np.argwhere(np.abs(np.tril(rho)) > 1.0 + 1e-12)[0]
        raise ValueError(f"|rho| <= 1 violated at ({i + 1}, {j + 1}): {rho[i, j]}")


def decompose(rho: TriangularArray | np.ndarray) -> TriangularArray:
    r = rho.values if isinstance(rho, TriangularArray) else np.tril(np.asarray(rho, float))
    _check_rho(r)
    n = r.shape[0]
    c = np.zeros((n, n))
    zero = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in range(i):
            if zero[j]:
                c[i, j] = 0.0
            else:
                c[i, j] = (r[i, j] - c[i, :j] @ c[j, :j]) / c[j, j]
        rad = 1.0 - c[i, :i] @ c[i, :i]
        if rad < -RADICAND_TOL:
            raise NotPSDError(i + 1, rad)
        c[i, i] = np.sqrt(max(rad, 0.0))
        if c[i, i] <= PIVOT_TOL:
            c[i, i] = 0.0
            zero[i] = True
    return TriangularArray(c, zero)


def decompose_batch(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same recursion vectorized over leading axes of rho (..., n, n).

    Returns (c, zero_pivot).  Used per simulation step, where thousands of
    small arrays must be factorized.
    """
    r = np.asarray(rho, dtype=float)
    n = r.shape[-1]
    c = np.zeros_like(r)
    zero = np.zeros(r.shape[:-1], dtype=bool)
    for i in range(n):
        for j in range(i):
            num = r[..., i, j] - np.einsum("...k,...k->...", c[..., i, :j], c[..., j, :j])
            piv = c[..., j, j]
            c[..., i, j] = np.where(zero[..., j], 0.0, num / np.where(zero[..., j], 1.0, piv))
        rad = 1.0 - np.einsum("...k,...k->...", c[..., i, :i], c[..., i, :i])
        if np.any(rad < -RADICAND_TOL):
            raise NotPSDError(i + 1, float(rad.min()))
        d = np.sqrt(np.maximum(rad, 0.0))
        z = d <= PIVOT_TOL
        c[..., i, i] = np.where(z, 0.0, d)
        zero[..., i] = z
    return c, zero


def inverse_alpha(c: TriangularArray) -> TriangularArray:
    cv = c.values
    n = c.n
    zero = c.zero_pivot
    a = np.zeros((n, n))
    for i in range(n):
        a[i, i] = 1.0 if zero[i] else 1.0 / cv[i, i]
        for j in range(i - 1, -1, -1):
            if zero[j]:
                a[i, j] = 0.0
            else:
                a[i, j] = -(a[i, j + 1:i + 1] @ cv[j + 1:i + 1, j]) / cv[j, j]
    return TriangularArray(a, zero.copy())


def orthonormal_drivers(z: np.ndarray, c: np.ndarray, zero: np.ndarray, u: np.ndarray) -> np.ndarray:
    """W from normalized Z row by row: W^i = (Z^i - sum_{j<i} c_ij W^j) / c_ii, or U^i.

    z, u have shape (..., n); c has shape (..., n, n) or (n, n).
    """
    w = np.empty_like(z)
    n = z.shape[-1]
    for i in range(n):
        resid = z[..., i] - np.einsum("...k,...k->...", c[..., i, :i], w[..., :i])
        piv = c[..., i, i]
        w[..., i] = np.where(zero[..., i], u[..., i], resid / np.where(zero[..., i], 1.0, piv))
    return w


@dataclass
class DecompositionReport:
    max_row_norm: float
    reproduction_error: float
    correlation_zscore: float
    reconstruction_error: float
    cross_zscore: float
    driver_zscore: float
    se_multiplier: float
    sample_count: int

    @property
    def passed(self) -> bool:
        k = self.se_multiplier
        return (self.max_row_norm <= 1.0 + 1e-12 and self.reproduction_error <= 1e-10
                and self.correlation_zscore <= k and self.reconstruction_error <= 1e-10
                and self.cross_zscore <= k and self.driver_zscore <= k)


def _zscore(x: np.ndarray, y: np.ndarray, target: np.ndarray) -> float:
    """max |mean(x_i y_j) - target_ij| / SE over pairs with positive SE."""
    n = x.shape[0]
    mean = x.T @ y / n
    second = (x * x).T @ (y * y) / n
    se = np.sqrt(np.maximum(second - mean * mean, 0.0) / n)
    dev = np.abs(mean - target)
    ok = se > 0
    z = np.where(ok, dev / np.where(ok, se, 1.0), np.where(dev > 1e-10, np.inf, 0.0))
    return float(z.max()) if z.size else 0.0


def verify_decomposition(rho, c: TriangularArray, alpha: TriangularArray, sample_count: int,
                         rng: np.random.Generator, se_multiplier: float = 5.0) -> DecompositionReport:
    r = rho.values if isinstance(rho, TriangularArray) else np.tril(np.asarray(rho, float))
    full_rho = r + np.tril(r, -1).T
    cv = c.values
    nz = ~c.zero_pivot
    n = c.n
    row_norm = float(np.max(np.sum(np.tril(cv, -1) ** 2, axis=1))) if n else 0.0
    repro = cv @ cv.T - full_rho
    rows = nz[:, None] & nz[None, :]
    repro_err = float(np.max(np.abs(np.where(rows, repro, 0.0)))) if n else 0.0

    xi = rng.standard_normal((sample_count, n))
    z = xi @ cv.T
    # signs are only read at zero pivots
    u = np.where(rng.random((sample_count, n)) < 0.5, -1.0, 1.0) if c.zero_pivot.any() \
        else np.ones((sample_count, n))
    w = orthonormal_drivers(z, cv, c.zero_pivot, u)
    corr_z = _zscore(z, z, full_rho)
    recon = z @ alpha.values.T
    recon_err = float(np.max(np.abs(np.where(nz[None, :], recon - xi, 0.0)))) if n else 0.0
    cross = _zscore(z, w, cv)
    drivers = _zscore(w, w, np.eye(n))
    return DecompositionReport(row_norm, repro_err, corr_z, recon_err, cross, drivers,
                       se_multiplier, sample_count)


verify_lemma_A1 = verify_decomposition
