"""Haar basis on the half-line [0, inf).

Basis functions are enumerated diagonally: on anti-diagonal d = k + l + 1 the
level runs l = -1, 0, ..., d - 1.  Level -1 is the unit indicator block
[k, k+1); level l >= 0 is the usual dyadic wavelet on [k 2^-l, (k+1) 2^-l).

F_i(y) is the integral of f_i over [y, inf).  It is a piecewise linear tent
(or ramp for the indicator blocks) and is evaluated in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Points within this distance below a grid node are snapped onto it, so that
# y = 0.3 with dx = 0.1 lands in cell 3 despite 0.3 / 0.1 < 3 in binary.
GRID_SNAP = 1e-9


class GridAlignmentError(ValueError):
    """Raised when a step-function grid does not fit the requested basis."""


@dataclass(frozen=True)
class HaarIndex:
    i: int
    k: int
    l: int

    @property
    def support(self) -> tuple[float, float]:
        return support_of(self.k, self.l)


def index_to_kl(i: int) -> tuple[int, int]:
    if i < 1:
        raise ValueError(f"Haar index must be >= 1, got {i}")
    # largest d with d(d+1)/2 < i
    d = (math.isqrt(8 * (i - 1) + 1) - 1) // 2
    pos = i - d * (d + 1) // 2 - 1
    return d - pos, pos - 1


def kl_to_index(k: int, l: int) -> int:
    if k < 0 or l < -1:
        raise ValueError(f"invalid Haar pair (k={k}, l={l})")
    d = k + l + 1
    return d * (d + 1) // 2 + l + 2


def support_of(k: int, l: int) -> tuple[float, float]:
    if l < 0:
        return float(k), float(k + 1)
    h = 2.0 ** (-l)
    return k * h, (k + 1) * h


def _kl_arrays(indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [index_to_kl(int(i)) for i in indices]
    k = np.array([p[0] for p in pairs], dtype=np.int64)
    l = np.array([p[1] for p in pairs], dtype=np.int64)
    return k, l


def _f_kl(k, l, x):
    x = np.asarray(x, dtype=float)
    k = np.asarray(k)
    l = np.asarray(l)
    lv = np.maximum(l, 0)
    h = np.where(l < 0, 1.0, 2.0 ** (-lv.astype(float)))
    a = k * h
    amp = np.where(l < 0, 1.0, 2.0 ** (lv / 2.0))
    u = (x - a) / h
    inside = (u >= 0) & (u < 1)
    sign = np.where((l >= 0) & (u >= 0.5), -1.0, 1.0)
    return np.where(inside, amp * sign, 0.0)


def _F_kl(k, l, y):
    y = np.asarray(y, dtype=float)
    k = np.asarray(k)
    l = np.asarray(l)
    lv = np.maximum(l, 0)
    h = np.where(l < 0, 1.0, 2.0 ** (-lv.astype(float)))
    a = k * h
    u = np.clip((y - a) / h, 0.0, 1.0)
    ramp = 1.0 - u  # indicator block: length of [y, k+1) within the block
    tent = -(2.0 ** (-lv / 2.0)) * np.minimum(u, 1.0 - u)
    return np.where(l < 0, ramp * h, tent)


def eval_f(i: int, x) -> np.ndarray | float:
    k, l = index_to_kl(i)
    out = _f_kl(k, l, x)
    return float(out) if np.ndim(out) == 0 else out


def eval_F(i: int, y) -> np.ndarray | float:
    k, l = index_to_kl(i)
    out = _F_kl(k, l, y)
    return float(out) if np.ndim(out) == 0 else out


def grid_count(delta_x: float) -> int:
    """Return N = 1/dx, insisting that it is a positive integer."""
    n = round(1.0 / delta_x)
    if n < 1 or abs(n * delta_x - 1.0) > 1e-12:
        raise GridAlignmentError(f"1/delta_x must be a positive integer, got delta_x={delta_x!r}")
    return n


def snap_cell(y, delta_x: float) -> np.ndarray:
    """Index of the grid cell [j dx, (j+1) dx) holding y."""
    n = grid_count(delta_x)
    return np.floor(np.asarray(y, dtype=float) * n + GRID_SNAP).astype(np.int64)


def snap_down(y, delta_x: float) -> np.ndarray:
    n = grid_count(delta_x)
    return snap_cell(y, delta_x) / n


def eval_F_grid(i: int, y, delta_x: float):
    out = eval_F(i, snap_down(y, delta_x))
    return float(out) if np.ndim(out) == 0 else out


def F_matrix(indices: Sequence[int], y, delta_x: float | None = None) -> np.ndarray:
    """Matrix of F_i(y) (or the grid-snapped version) with shape y.shape + (n,)."""
    k, l = _kl_arrays(indices)
    y = np.asarray(y, dtype=float)
    if delta_x is not None:
        y = snap_down(y, delta_x)
    return _F_kl(k, l, y[..., None])


def f_matrix(indices: Sequence[int], x) -> np.ndarray:
    k, l = _kl_arrays(indices)
    return _f_kl(k, l, np.asarray(x, dtype=float)[..., None])


def levels(indices: Sequence[int]) -> np.ndarray:
    return _kl_arrays(indices)[1]


def index_set(m: int, l_max: int) -> list[int]:
    if m < 1 or l_max < -1:
        raise ValueError(f"index_set needs m >= 1 and l_max >= -1, got m={m}, l_max={l_max}")
    out = [kl_to_index(k, -1) for k in range(m)]
    for l in range(0, l_max + 1):
        out.extend(kl_to_index(k, l) for k in range(m * 2**l))
    return sorted(out)


def haar_indices(m: int, l_max: int) -> list[HaarIndex]:
    return [HaarIndex(i, *index_to_kl(i)) for i in index_set(m, l_max)]


def tail_level(epsilon: float) -> int:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    l0 = 0
    while 2.0 ** (-l0) > epsilon:
        l0 += 1
    return l0


def tail_subset(m: int, epsilon: float) -> tuple[list[int], int]:
    """Finite J inside I_m whose complement has sup_y sum F_i(y)^2 <= epsilon."""
    l0 = tail_level(epsilon)
    return index_set(m, l0), l0


def tail_mass(m: int, l0: int, y, l_cap: int = 48) -> np.ndarray:
    """sum over i in I_m with l0 < l(i) <= l_cap of F_i(y)^2.

    At each level only the block containing y can be nonzero, so this is a
    single evaluation per level.  Terms above l_cap add at most 2^-l_cap / 4.
    """
    y = np.asarray(y, dtype=float)
    total = np.zeros_like(y)
    for l in range(l0 + 1, l_cap + 1):
        h = 2.0 ** (-l)
        k = np.floor(y / h)
        val = _F_kl(k, l, y)
        total += np.where(k * h < m, val * val, 0.0)
    return total


def inner_ff(i: int, j: int) -> float:
    """Exact <f_i, f_j> using F_i differences over the pieces of f_j."""
    kj, lj = index_to_kl(j)
    a, b = support_of(kj, lj)
    if lj < 0:
        pieces = [(a, b, 1.0)]
    else:
        mid = 0.5 * (a + b)
        amp = 2.0 ** (lj / 2.0)
        pieces = [(a, mid, amp), (mid, b, -amp)]
    ki, li = index_to_kl(i)
    return float(sum(c * (_F_kl(ki, li, lo) - _F_kl(ki, li, hi)) for lo, hi, c in pieces))


def gram_matrix(indices: Sequence[int]) -> np.ndarray:
    """<f_i, f_j> for all pairs, vectorized over the pieces of f_j."""
    k, l = _kl_arrays(indices)
    a = np.where(l < 0, k.astype(float), k * 2.0 ** (-np.maximum(l, 0).astype(float)))
    h = np.where(l < 0, 1.0, 2.0 ** (-np.maximum(l, 0).astype(float)))
    mid = a + 0.5 * h
    amp = np.where(l < 0, 1.0, 2.0 ** (np.maximum(l, 0) / 2.0))
    Fi = lambda y: _F_kl(k[:, None], l[:, None], y[None, :])
    first = Fi(a) - Fi(np.where(l < 0, a + h, mid))
    second = Fi(mid) - Fi(a + h)
    return np.where(l[None, :] < 0, first, amp[None, :] * (first - second))


def project_step_function(values, delta_x: float, indices: Sequence[int]) -> np.ndarray:
    """Exact <v, f_i> for v constant on the cells [j dx, (j+1) dx).

    On a cell [x0, x1) the integral of f_i is F_i(x0) - F_i(x1), so the inner
    product is a weighted difference of F_i at the grid nodes.  Leading axes
    of `values` are treated as a batch.
    """
    values = np.asarray(values, dtype=float)
    n_cells = values.shape[-1]
    n = grid_count(delta_x)
    horizon = n_cells / n
    for idx in indices:
        k, l = index_to_kl(idx)
        lo, hi = support_of(k, l)
        if hi > horizon + 1e-12:
            raise GridAlignmentError(
                f"index {idx} has support up to {hi} but the grid stops at {horizon}")
    nodes = np.arange(n_cells + 1) / n
    Fn = F_matrix(indices, nodes)
    return values @ (Fn[:-1] - Fn[1:])


def step_function_norm2(values, delta_x: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return delta_x * np.sum(values * values, axis=-1)
