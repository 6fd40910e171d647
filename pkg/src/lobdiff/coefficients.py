"""Drift, volatility and correlation of the projected volume increments.

For a Haar index i the limit coefficients are

    mu_i = int h F_i,   sigma_i^2 = int g F_i^2,   sigma_i sigma_j rho_ij = int g F_i F_j,

and the pre-limit versions use the grid-snapped F^(n) and subtract
dt mu_i^(n) mu_j^(n) from the second moments.  Integrals are composite
Gauss-Legendre of order 8 over pieces whose endpoints contain every
breakpoint of the integrand, so piecewise-polynomial integrands are exact.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import haar
from .model import LOBState, ModelSpec, SeparableDensity
from .ortho import TriangularArray, decompose, decompose_batch

GL_ORDER = 8
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)
SIGMA_CLAMP = 1e-12
RHO_SLACK = 1e-9


class QuadratureError(ArithmeticError):
    pass


class InconsistentSpecError(ValueError):
    """Moment densities that cannot come from any order-flow distribution."""


def gl_panels(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of composite Gauss-Legendre on consecutive edge pairs."""
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    nodes = (a + b) * 0.5 + half * _GL_X[None, :]
    weights = half * _GL_W[None, :]
    return nodes.ravel(), weights.ravel()


def factor_breakpoints(index: int, delta_x: Optional[float]) -> tuple[float, float, list[float]]:
    k, l = haar.index_to_kl(index)
    lo, hi = haar.support_of(k, l)
    if l < 0:
        # F is 1 on [0, k] and a ramp on [k, k + 1]
        lo = 0.0
        knots = [0.0, float(k), hi]
    else:
        knots = [lo, 0.5 * (lo + hi), hi]
    return lo, hi, knots


def integrate_density_basis(density: Callable, s, factors: Sequence[int], grid_variant: bool = False,
                            y_max: float = 40.0, tol: float = 1e-12, delta_x: Optional[float] = None,
                            extra_breaks: Sequence[float] = ()) -> float:
    """int_0^inf density(s, y) * prod_i F_i(y) dy (F^(n) when grid_variant).

    Integration runs over the intersection of the factors' supports (or
    [0, y_max] without factors), split at every knot of the factors, at the
    dx grid when grid_variant, and at extra_breaks.  Each piece is bisected
    until two successive composite estimates agree to its share of tol.
    """
    if grid_variant and delta_x is None:
        raise ValueError("grid variant requires delta_x")
    lo, hi = 0.0, float(y_max)
    knots: set[float] = set()
    if factors:
        spans = [factor_breakpoints(i, delta_x) for i in factors]
        lo = max(sp[0] for sp in spans)
        hi = min(sp[1] for sp in spans)
        for sp in spans:
            knots.update(sp[2])
        if grid_variant:
            # F^(n)(y) = F(dx floor(y/dx)) stays nonzero up to the grid node above hi
            n = haar.grid_count(delta_x)
            lo = math.floor(lo * n + 1e-9) / n
            hi = math.ceil(hi * n - 1e-9) / n
    if hi <= lo:
        return 0.0
    brk = {lo, hi}
    brk.update(x for x in knots if lo < x < hi)
    brk.update(x for x in extra_breaks if lo < x < hi)
    if grid_variant:
        n = haar.grid_count(delta_x)
        j0, j1 = int(math.floor(lo * n + 1e-9)), int(math.ceil(hi * n - 1e-9))
        brk.update(j / n for j in range(j0, j1 + 1) if lo < j / n < hi)
    edges = np.array(sorted(brk))

    def integrand(y):
        val = np.asarray(density(s, y), dtype=float)
        if not np.all(np.isfinite(val)):
            raise QuadratureError("non-finite density value")
        for i in factors:
            val = val * (haar.eval_F_grid(i, y, delta_x) if grid_variant else haar.eval_F(i, y))
        return val

    def panel(a, b):
        y, w = gl_panels(np.array([a, b]))
        return float(np.dot(integrand(y), w))

    total_len = edges[-1] - edges[0]
    out = 0.0
    stack = [(a, b, panel(a, b)) for a, b in zip(edges[:-1], edges[1:])]
    while stack:
        a, b, whole = stack.pop()
        mid = 0.5 * (a + b)
        left, right = panel(a, mid), panel(mid, b)
        if abs(left + right - whole) <= tol * (b - a) / total_len or (b - a) < 1e-9:
            out += left + right
        else:
            stack.append((a, mid, left))
            stack.append((mid, b, right))
    return out


# ---------------------------------------------------------------------------
# per-state scalar routes (one integral per call)


def _state_features(spec: ModelSpec, s) -> np.ndarray:
    return np.asarray(spec.features(s) if isinstance(s, LOBState) else s, dtype=float)


def _density(spec: ModelSpec, which: str, pre_limit: bool) -> Optional[SeparableDensity]:
    return getattr(spec, f"{which}_n" if pre_limit else which)


def _scalar_integral(spec, s, which, factors, pre_limit, tol):
    dens = _density(spec, which, pre_limit)
    if dens is None:
        raise ValueError(f"model {spec.name} provides no {which} density")
    f = _state_features(spec, s)
    kinks = [float(f[0])] if any(t.kink_at_b for t in dens.terms) else []
    dx = spec.params.delta_x if pre_limit else None
    return integrate_density_basis(lambda st, y: dens(st, y), f, factors, grid_variant=pre_limit,
                                   y_max=spec.y_max, tol=tol, delta_x=dx, extra_breaks=kinks)


def mu_i(spec: ModelSpec, s, i: int, pre_limit: bool = False, tol: float = 1e-12) -> float:
    if _density(spec, "h", pre_limit) is None:
        return 0.0
    return _scalar_integral(spec, s, "h", [i], pre_limit, tol)


def _cov_ij(spec, s, i, j, pre_limit, tol):
    second = _scalar_integral(spec, s, "g", [i, j] if i != j else [i, i], pre_limit, tol)
    if pre_limit:
        second -= spec.params.delta_t * mu_i(spec, s, i, True, tol) * mu_i(spec, s, j, True, tol)
    return second


def sigma_i(spec: ModelSpec, s, i: int, pre_limit: bool = False, tol: float = 1e-12) -> float:
    rad = _cov_ij(spec, s, i, i, pre_limit, tol)
    if rad < -SIGMA_CLAMP:
        raise InconsistentSpecError(f"negative variance {rad:.3e} for index {i}")
    return math.sqrt(max(rad, 0.0))


def rho_ij(spec: ModelSpec, s, i: int, j: int, pre_limit: bool = False, tol: float = 1e-12) -> float:
    if i == j:
        return 1.0 if sigma_i(spec, s, i, pre_limit, tol) > 0 else 0.0
    si, sj = sigma_i(spec, s, i, pre_limit, tol), sigma_i(spec, s, j, pre_limit, tol)
    if si * sj == 0:
        return 0.0
    r = _cov_ij(spec, s, i, j, pre_limit, tol) / (si * sj)
    if abs(r) > 1 + RHO_SLACK:
        raise InconsistentSpecError(f"|rho_{i}{j}| = {abs(r):.12f} exceeds 1")
    return float(np.clip(r, -1.0, 1.0))


def d_matrix(spec: ModelSpec, s, indices: Sequence[int], pre_limit: bool = False,
             tol: float = 1e-12) -> TriangularArray:
    n = len(indices)
    sig = np.array([sigma_i(spec, s, i, pre_limit, tol) for i in indices])
    rho = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1):
            rho[a, b] = rho_ij(spec, s, indices[a], indices[b], pre_limit, tol)
    c = decompose(rho)
    return TriangularArray(sig[:, None] * c.values, c.zero_pivot)


# ---------------------------------------------------------------------------
# tabulated route (many states, all indices at once)


@dataclass
class CoefficientSet:
    fingerprint: tuple
    indices: tuple
    mu: np.ndarray
    sigma: np.ndarray
    rho: TriangularArray
    d: TriangularArray
    pre_limit: bool

    def to_json(self) -> str:
        return json.dumps({
            "fingerprint": [float(x) for x in self.fingerprint],
            "indices": [int(i) for i in self.indices],
            "pre_limit": self.pre_limit,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "rho": [[i, j, v] for i, j, v in self.rho.entries()],
            "d": [[i, j, v] for i, j, v in self.d.entries()],
        }, indent=1)


class MomentTable:
    """Quadrature nodes with the basis factors tabulated once.

    For a profile sampled on the nodes, first() gives int profile * F_i and
    second() gives int profile * F_i * F_j for all retained indices.  Pieces
    are the dyadic knots of the index set (and the dx grid in the snapped
    variant), each split into `subdivide` panels; with delta_x given the
    factors are the grid-snapped F^(n).
    """

    def __init__(self, indices: Sequence[int], delta_x: Optional[float] = None, subdivide: int = 4):
        self.indices = tuple(int(i) for i in indices)
        self.delta_x = delta_x
        if not self.indices:
            self.y = np.zeros(0)
            self.w = np.zeros(0)
            self.F = np.zeros((0, 0))
            return
        lv = haar.levels(self.indices)
        top = max(haar.support_of(*haar.index_to_kl(i))[1] for i in self.indices)
        finest = int(lv.max()) + 1
        if delta_x is not None:
            n = haar.grid_count(delta_x)
            edges = np.arange(int(math.ceil(top * n - 1e-9)) + 1) / n
            # F^(n) changes only at grid nodes, so each cell is one piece
            sub = 1
        else:
            step = 2.0 ** (-max(finest, 0))
            edges = np.arange(int(round(top / step)) + 1) * step
            sub = subdivide
        if sub > 1:
            fine = np.linspace(0.0, 1.0, sub + 1)[:-1]
            widths = np.diff(edges)
            edges = np.append((edges[:-1, None] + widths[:, None] * fine[None, :]).ravel(), edges[-1])
        self.edges = edges
        self.y, self.w = gl_panels(edges)
        self.F = haar.F_matrix(self.indices, self.y, delta_x)
        self._FF = None

    @property
    def n(self) -> int:
        return len(self.indices)

    def first(self, profile_vals: np.ndarray) -> np.ndarray:
        return (profile_vals * self.w) @ self.F

    def second(self, profile_vals: np.ndarray) -> np.ndarray:
        if self._FF is None:
            self._FF = self.F[:, :, None] * self.F[:, None, :]
        pw = profile_vals * self.w
        return np.tensordot(pw, self._FF, axes=([-1], [0]))


class CoefficientEngine:
    """Vectorized mu, covariance and volatility factors over batches of features.

    Profiles that do not move with b are integrated once.  In the snapped
    (pre-limit) variant the bid sits on the tick grid, so b-dependent
    profile integrals are memoized per bid value; the memo is guarded by a
    lock so the engine can be shared between worker threads.
    """

    def __init__(self, spec: ModelSpec, indices: Sequence[int], pre_limit: bool, subdivide: int = 4):
        self.spec = spec
        self.indices = tuple(int(i) for i in indices)
        self.pre_limit = pre_limit
        dx = spec.params.delta_x if pre_limit else None
        self.dt = spec.params.delta_t if pre_limit else 0.0
        self.table = MomentTable(self.indices, dx, subdivide)
        self.h = _density(spec, "h", pre_limit)
        self.g = _density(spec, "g", pre_limit)
        self._static: dict = {}
        self._memo: dict = {}
        self._lock = threading.Lock()
        self._frozen_cov = None

    @property
    def n(self) -> int:
        return len(self.indices)

    def _term_integrals(self, which: str, t_idx: int, term, b: np.ndarray) -> np.ndarray:
        """Integrals of one term's profile for each bid in b: (P, n) or (P, n, n)."""
        tab = self.table
        op = tab.first if which == "h" else tab.second
        if not term.b_dependent:
            key = (which, t_idx)
            if key not in self._static:
                self._static[key] = op(term.profile(np.zeros(1)[:, None], tab.y[None, :])[0])
            return np.broadcast_to(self._static[key], b.shape + self._static[key].shape)
        if not self.pre_limit:
            out = op(term.profile(b[:, None], tab.y[None, :]))
            if term.kink_at_b:
                out = out + self._kink_correction(which, term, b)
            return out
        uniq, inv = np.unique(b, return_inverse=True)
        rows = []
        for bv in uniq:
            key = (which, t_idx, float(bv))
            val = self._memo.get(key)
            if val is None:
                val = op(term.profile(np.array([bv])[:, None], tab.y[None, :])[0])
                with self._lock:
                    self._memo[key] = val
            rows.append(val)
        return np.stack(rows)[inv]

    def _kink_correction(self, which: str, term, b: np.ndarray) -> np.ndarray:
        """Re-integrate the panel containing b as two panels split at b.

        A profile with a slope jump at y = b is smooth on each side, so the
        split panels restore full Gauss-Legendre accuracy.
        """
        tab = self.table
        edges = tab.edges
        j = np.searchsorted(edges, b, side="right") - 1
        inside = (j >= 0) & (j < len(edges) - 1)
        inside &= (b > edges[np.clip(j, 0, len(edges) - 2)])
        shape = (len(b), self.n) if which == "h" else (len(b), self.n, self.n)
        out = np.zeros(shape)
        if not np.any(inside):
            return out
        rows = np.nonzero(inside)[0]
        jr, br = j[rows], b[rows]
        lo, hi = edges[jr], edges[jr + 1]
        g = _GL_X.size
        old_y = tab.y.reshape(-1, g)[jr]
        old_w = tab.w.reshape(-1, g)[jr]
        left_h, right_h = 0.5 * (br - lo), 0.5 * (hi - br)
        new_y = np.concatenate([(lo + br)[:, None] * 0.5 + left_h[:, None] * _GL_X,
                                (br + hi)[:, None] * 0.5 + right_h[:, None] * _GL_X], axis=1)
        new_w = np.concatenate([left_h[:, None] * _GL_W, right_h[:, None] * _GL_W], axis=1)
        y = np.concatenate([new_y, old_y], axis=1)
        w = np.concatenate([new_w, -old_w], axis=1)
        pw = term.profile(br[:, None], y) * w
        F = haar.F_matrix(self.indices, y, None)
        if which == "h":
            out[rows] = np.einsum("pq,pqi->pi", pw, F)
        else:
            out[rows] = np.einsum("pq,pqi,pqj->pij", pw, F, F)
        return out

    def mu(self, feats: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=float))
        out = np.zeros((feats.shape[0], self.n))
        if self.h is None or self.n == 0:
            return out
        b = feats[:, 0]
        for t_idx, term in enumerate(self.h.terms):
            out += np.asarray(term.weight(feats))[:, None] * self._term_integrals("h", t_idx, term, b)
        return out

    def second_moments(self, feats: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=float))
        out = np.zeros((feats.shape[0], self.n, self.n))
        if self.g is None or self.n == 0:
            return out
        b = feats[:, 0]
        for t_idx, term in enumerate(self.g.terms):
            out += np.asarray(term.weight(feats))[:, None, None] * self._term_integrals("g", t_idx, term, b)
        return out

    def moments(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu, cov) with cov_ij = sigma_i sigma_j rho_ij for each feature row."""
        mu = self.mu(feats)
        cov = self.second_moments(feats)
        if self.pre_limit:
            cov = cov - self.dt * mu[:, :, None] * mu[:, None, :]
        return mu, cov

    @staticmethod
    def split_covariance(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(sigma, rho) from covariance blocks, with rho = 0 where a sigma vanishes."""
        diag = np.diagonal(cov, axis1=-2, axis2=-1)
        if np.any(diag < -SIGMA_CLAMP):
            raise InconsistentSpecError(f"negative variance {diag.min():.3e}")
        sig = np.sqrt(np.maximum(diag, 0.0))
        outer = sig[..., :, None] * sig[..., None, :]
        pos = outer > 0
        rho = np.where(pos, cov / np.where(pos, outer, 1.0), 0.0)
        if np.any(np.abs(rho) > 1 + RHO_SLACK):
            raise InconsistentSpecError(f"correlation {np.abs(rho).max():.12f} exceeds 1")
        return sig, np.clip(rho, -1.0, 1.0)

    def factors(self, feats: np.ndarray):
        """(mu, sigma, c, zero_pivot, d) per feature row."""
        mu, cov = self.moments(feats)
        sig, rho = self.split_covariance(cov)
        c, zero = decompose_batch(rho)
        return mu, sig, c, zero, sig[..., :, None] * c

    def coefficient_set(self, feats: np.ndarray) -> CoefficientSet:
        f = np.asarray(feats, dtype=float).reshape(1, -1)
        mu, sig, c, zero, d = self.factors(f)
        _, cov = self.moments(f)
        _, rho = self.split_covariance(cov)
        return CoefficientSet(tuple(f[0]), self.indices, mu[0], sig[0], TriangularArray(rho[0]),
                              TriangularArray(d[0], zero[0]), self.pre_limit)


def initial_coefficients(cumulative: Callable, indices: Sequence[int]) -> np.ndarray:
    """<V0, f_i> for a smooth cumulated profile, integrated piecewise on each f_i."""
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        k, l = haar.index_to_kl(i)
        a, b = haar.support_of(k, l)
        edges = np.array([a, b] if l < 0 else [a, 0.5 * (a + b), b])
        fine = np.linspace(0, 1, 9)
        pts = np.unique((edges[:-1, None] + np.diff(edges)[:, None] * fine).ravel())
        y, w = gl_panels(pts)
        out[n] = np.dot(cumulative(y) * haar.eval_f(i, y), w)
    return out
