"""Scaling parameters, book state, model specifications and built-in examples.

Coefficient callbacks operate on a *feature vector*: a short array computed
from the book state by ``spec.features(state)`` whose first entry is always
the (clamped) best bid.  Everything a model's coefficients depend on must go
through these features, which keeps state-dependence explicit and lets the
simulators evaluate many paths at once.  Leading axes act as a batch.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from . import haar


class ModelValidityError(ValueError):
    """A coefficient evaluation violated one of the model's standing inequalities."""


# ---------------------------------------------------------------------------
# scaling and state


@dataclass(frozen=True)
class ScalingParams:
    """Tick size and price-event scale; event duration and order impact are derived."""

    delta_x: float
    delta_p: float

    def __post_init__(self):
        if not (self.delta_x > 0 and self.delta_p > 0):
            raise ValueError("delta_x and delta_p must be positive")
        haar.grid_count(self.delta_x)

    @property
    def n_per_unit(self) -> int:
        return haar.grid_count(self.delta_x)

    @property
    def delta_t(self) -> float:
        return self.delta_p * self.delta_x**2

    @property
    def delta_v(self) -> float:
        return math.sqrt(self.delta_t)

    def n_steps(self, T: float) -> int:
        return int(math.floor(T / self.delta_t + 1e-9))

    def as_dict(self) -> dict:
        return {"delta_x": self.delta_x, "delta_p": self.delta_p,
                "delta_t": self.delta_t, "delta_v": self.delta_v}


class Event(enum.IntEnum):
    PRICE_DOWN = 0
    PRICE_UP = 1
    ORDER = 2


@dataclass(frozen=True)
class OrderEvent:
    phi: Event
    omega: float = 0.0
    pi: float = 0.0


@dataclass
class LOBState:
    """Best bid b, density v on cells of width dx over [0, horizon), prefix view V.

    V[..., j] is the integral of v over [0, (j+1) dx).  Arrays may carry a
    leading batch axis.  ``overflow`` accumulates order volume placed beyond
    the stored horizon.
    """

    b: np.ndarray
    v: np.ndarray
    V: np.ndarray
    dx: float
    overflow: np.ndarray | float = 0.0
    nodes: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_density(cls, b, v, dx: float) -> "LOBState":
        v = np.array(v, dtype=float)
        return cls(np.asarray(b, dtype=float), v, dx * np.cumsum(v, axis=-1), dx)

    @property
    def n_cells(self) -> int:
        return self.v.shape[-1]

    def prefix(self) -> np.ndarray:
        """Antiderivative of v at the grid nodes 0, dx, ..., n dx.

        A simulator may supply ``nodes`` with V as a view into it, which
        avoids rebuilding this array at every step.
        """
        if self.nodes is not None:
            return self.nodes
        zeros = np.zeros(self.V.shape[:-1] + (1,))
        return np.concatenate([zeros, self.V], axis=-1)

    def check(self, tol: float = 1e-12) -> None:
        b = np.asarray(self.b)
        if np.any(b < 0):
            raise ModelValidityError("best bid is negative")
        ticks = b / self.dx
        if np.any(np.abs(ticks - np.round(ticks)) > 1e-9):
            raise ModelValidityError("best bid is off the tick grid")
        fresh = self.dx * np.cumsum(self.v, axis=-1)
        scale = max(1.0, float(np.max(np.abs(fresh), initial=0.0)))
        if np.max(np.abs(fresh - self.V), initial=0.0) > tol * scale:
            raise ModelValidityError("prefix view is inconsistent with the density")


@dataclass(frozen=True)
class InitialProfile:
    """Initial cumulated volume V0(x) = integral of v0 over [0, x].

    kind: 'linear' (v0 = slope * x), 'constant' (v0 = level) or 'zero'.
    Cells of the micro book hold exact cell averages of v0, so the grid
    prefix view equals V0 at every node.
    """

    kind: str = "linear"
    slope: float = 1.0
    level: float = 0.0

    def cumulative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return 0.5 * self.slope * x * x
        if self.kind == "constant":
            return self.level * x
        if self.kind == "zero":
            return np.zeros_like(x)
        raise ValueError(f"unknown initial profile kind {self.kind!r}")

    def cells(self, dx: float, n_cells: int) -> np.ndarray:
        nodes = np.arange(n_cells + 1) * dx
        return np.diff(self.cumulative(nodes)) / dx

    def state(self, b0: float, dx: float, horizon: float) -> LOBState:
        n_cells = int(round(horizon / dx))
        return LOBState.from_density(float(b0), self.cells(dx, n_cells), dx)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "slope": self.slope, "level": self.level}


# ---------------------------------------------------------------------------
# step-function calculus


def _gather(C: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Row-wise C[..., j]; j carries C's leading shape plus one trailing axis."""
    if C.ndim == 1:
        return C[j]
    flat = C.reshape(-1, C.shape[-1])
    jf = j.reshape(flat.shape[0], -1)
    return flat[np.arange(flat.shape[0])[:, None], jf].reshape(j.shape)


def prefix_integral(C: np.ndarray, dx: float, x) -> np.ndarray:
    """Integral of v over [0, x] from its prefix array C at nodes j*dx.

    Linear interpolation of C is exact for step functions.  x broadcasts
    against the leading axes of C; points past the last node are held flat.
    """
    C = np.asarray(C, dtype=float)
    n = C.shape[-1] - 1
    pos = np.clip(np.asarray(x, dtype=float) / dx, 0.0, float(n))
    lead = np.broadcast_shapes(pos.shape, C.shape[:-1])
    pos = np.broadcast_to(pos, lead)
    C = np.broadcast_to(C, lead + C.shape[-1:])
    j = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    frac = pos - j
    lo = _gather(C, j[..., None])[..., 0]
    hi = _gather(C, j[..., None] + 1)[..., 0]
    return lo + frac * (hi - lo)


def step_integral(v, dx: float, a, b) -> np.ndarray:
    """Integral over [a, b] of the step function with cell values v."""
    v = np.asarray(v, dtype=float)
    C = np.concatenate([np.zeros(v.shape[:-1] + (1,)), dx * np.cumsum(v, axis=-1)], axis=-1)
    return prefix_integral(C, dx, b) - prefix_integral(C, dx, a)


@dataclass(frozen=True)
class Kernel:
    """Coupling kernel supported on [-width, 0].

    family 'bump': amplitude * (1 - u^2)^2 with u = 1 + 2x/width (C^1, zero at
    both ends); family 'box': amplitude on [-width, 0].
    """

    family: str = "bump"
    width: float = 0.5
    amplitude: float = 1.0

    def __post_init__(self):
        if self.family not in ("bump", "box"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.width > 0:
            raise ValueError("kernel width must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= -self.width) & (x <= 0.0)
        if self.family == "box":
            return np.where(inside, self.amplitude, 0.0)
        u = 1.0 + 2.0 * x / self.width
        return np.where(inside, self.amplitude * (1.0 - u * u) ** 2, 0.0)

    def antiderivative(self, t):
        """Integral of the kernel over [-width, t]."""
        t = np.clip(np.asarray(t, dtype=float), -self.width, 0.0)
        if self.family == "box":
            return self.amplitude * (t + self.width)
        u = 1.0 + 2.0 * t / self.width
        u2 = u * u
        prim = u * (1.0 - u2 * (2.0 / 3.0 - 0.2 * u2))
        return self.amplitude * 0.5 * self.width * (prim + 8.0 / 15.0)

    @property
    def l1_norm(self) -> float:
        return float(abs(self.antiderivative(0.0)))

    def as_dict(self) -> dict:
        return {"family": self.family, "width": self.width, "amplitude": self.amplitude}


@functools.lru_cache(maxsize=64)
def _grid_weights(kernel: Kernel, dx: float, W: int) -> np.ndarray:
    """Kernel mass over cells at offsets -W..0 from a grid-aligned bid."""
    t = np.arange(-W, 1)
    w = kernel.antiderivative((t + 1) * dx) - kernel.antiderivative(t * dx)
    w[-1] = 0.0
    return w


def coupling_from_prefix(C: np.ndarray, dx: float, b, kernel: Kernel) -> np.ndarray:
    """Integral over [0, b] of v(x) kernel(x - b), v given by its prefix array."""
    C = np.asarray(C, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = np.broadcast_shapes(b.shape, C.shape[:-1])
    b = np.broadcast_to(b, lead)
    C = np.broadcast_to(C, lead + C.shape[-1:])
    n = C.shape[-1] - 1
    pos = b / dx
    jb = np.floor(pos + 1e-9).astype(np.int64)
    W = int(math.ceil(kernel.width / dx)) + 1
    if np.all(np.abs(pos - jb) < 1e-9) and n > W and C.ndim > 1 and jb.max() <= n:
        return _grid_coupling(C, dx, jb, kernel, W)
    j = jb[..., None] + np.arange(-W, 1)
    valid = (j >= 0) & (j < n)
    jc = np.clip(j, 0, max(n - 1, 0))
    dens = (_gather(C, jc + 1) - _gather(C, jc)) / dx
    lo = jc * dx
    hi = np.minimum((jc + 1) * dx, b[..., None])
    wts = kernel.antiderivative(hi - b[..., None]) - kernel.antiderivative(lo - b[..., None])
    wts = np.where(valid & (hi > lo), wts, 0.0)
    return np.sum(dens * wts, axis=-1)


@functools.lru_cache(maxsize=64)
def _node_weights(kernel: Kernel, dx: float, W: int) -> np.ndarray:
    """Weights on the W + 1 nodes below a grid-aligned bid (cell masses regrouped)."""
    w = _grid_weights(kernel, dx, W)[:W] / dx
    out = np.zeros(W + 1)
    out[1:] += w
    out[:-1] -= w
    return out


def _grid_coupling(C, dx, jb, kernel, W):
    """Fast path for bids on the grid: one shared weight vector over windowed rows.

    Only the W cells below the bid carry kernel mass.  Rows whose window
    would start below zero are handled cell by cell.
    """
    lead = C.shape[:-1]
    flat = C.reshape(-1, C.shape[-1])
    jb = jb.reshape(-1)
    start = np.maximum(jb - W, 0)
    windows = np.lib.stride_tricks.sliding_window_view(flat, W + 1, axis=-1)
    out = windows[np.arange(flat.shape[0]), start] @ _node_weights(kernel, dx, W)
    edge = np.flatnonzero(jb < W)
    if edge.size:
        out[edge] = _edge_coupling(flat[edge], dx, jb[edge], kernel, W)
    return out.reshape(lead)


def _edge_coupling(C, dx, jb, kernel, W):
    j = jb[:, None] + np.arange(-W, 0)
    valid = j >= 0
    jc = np.maximum(j, 0)
    dens = (_gather(C, jc + 1) - _gather(C, jc)) / dx
    wts = np.where(valid, _grid_weights(kernel, dx, W)[:W], 0.0)
    return np.sum(dens * wts, axis=-1)


def boundary_coupling(v, b, kernel: Kernel, dx: float) -> np.ndarray:
    """Integral over [0, b] of v(x) kernel(x - b) for a step function v."""
    v = np.asarray(v, dtype=float)
    C = np.concatenate([np.zeros(v.shape[:-1] + (1,)), dx * np.cumsum(v, axis=-1)], axis=-1)
    return coupling_from_prefix(C, dx, b, kernel)


def coarse_prefix(C: np.ndarray, dx: float, level: int) -> tuple[np.ndarray, float]:
    """Prefix array of the projection of v onto cells of width 2^-level."""
    h = 2.0 ** (-level)
    n = C.shape[-1] - 1
    n_coarse = int(math.floor(n * dx / h + 1e-9))
    pos = np.arange(n_coarse + 1) * h / dx
    j = np.minimum(np.floor(pos + 1e-9).astype(np.int64), max(n - 1, 0))
    frac = np.clip(pos - j, 0.0, 1.0)
    return C[..., j] + frac * (C[..., j + 1] - C[..., j]), h


# ---------------------------------------------------------------------------
# densities and specs


@dataclass(frozen=True)
class DensityTerm:
    """weight(features) * profile(b, y).

    b_dependent marks profiles that move with the best bid; kink_at_b marks
    profiles with a slope discontinuity at y = b (used to place quadrature
    breakpoints).
    """

    weight: Callable[[np.ndarray], np.ndarray]
    profile: Callable[[np.ndarray, np.ndarray], np.ndarray]
    b_dependent: bool = False
    kink_at_b: bool = False


@dataclass(frozen=True)
class SeparableDensity:
    terms: tuple[DensityTerm, ...]

    def __call__(self, feats, y) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        b = feats[..., 0]
        y = np.asarray(y, dtype=float)
        extra = (None,) * y.ndim
        total = 0.0
        for t in self.terms:
            w = np.asarray(t.weight(feats))[(...,) + extra]
            total = total + w * t.profile(b[(...,) + extra], y)
        return total

    @property
    def b_dependent(self) -> bool:
        return any(t.b_dependent for t in self.terms)


OrderSampler = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient functions of a book model.

    p, r2, h, g are limit coefficients; the *_n fields are their pre-limit
    counterparts at the bound scaling parameters (None for limit-only
    models).  r2 is the squared volatility, kept squared so the boundary
    relation r2 = dx * p at b = 0 holds exactly in floating point.
    The sampler maps (features, uniforms[..., n_uniforms]) to (omega, pi).
    eta is a constant with r + p^+ > eta wherever the model is evaluated.
    """

    name: str
    features: Callable[[LOBState], np.ndarray]
    feature_names: tuple[str, ...]
    p: Callable[[np.ndarray], np.ndarray]
    r2: Callable[[np.ndarray], np.ndarray]
    eta: float
    M: float
    h: Optional[SeparableDensity] = None
    g: Optional[SeparableDensity] = None
    params: Optional[ScalingParams] = None
    p_n: Optional[Callable] = None
    r2_n: Optional[Callable] = None
    h_n: Optional[SeparableDensity] = None
    g_n: Optional[SeparableDensity] = None
    order_sampler: Optional[OrderSampler] = None
    n_uniforms: int = 2
    g_state_independent: bool = False
    projection_level: Optional[int] = None
    y_max: float = 40.0
    constants: dict = field(default_factory=dict)

    @property
    def has_micro(self) -> bool:
        return self.p_n is not None and self.order_sampler is not None

    @property
    def has_volume(self) -> bool:
        return self.g is not None

    def r_n(self, feats):
        return np.sqrt(self.r2_n(feats))

    def r(self, feats):
        return np.sqrt(self.r2(feats))

    def with_sampler(self, sampler: OrderSampler, suffix: str) -> "ModelSpec":
        return replace(self, order_sampler=sampler, name=f"{self.name}{suffix}")


def scaled_sampler(spec: ModelSpec, factor: float) -> ModelSpec:
    """Negative control: the same model with every order size multiplied by factor."""
    base = spec.order_sampler

    def sampler(feats, u):
        omega, pi = base(feats, u)
        return factor * omega, pi

    return spec.with_sampler(sampler, f"*omega{factor:g}")


def event_probabilities(spec: ModelSpec, feats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(P_down, P_up, P_order) at the given features; P_up is the +dx branch."""
    prm = spec.params
    feats = np.asarray(feats, dtype=float)
    p = np.asarray(spec.p_n(feats), dtype=float)
    r2 = np.asarray(spec.r2_n(feats), dtype=float)
    price = prm.delta_p * r2
    bad_ineq = np.abs(prm.delta_x * p) > r2 * (1 + 1e-12)
    if np.any(bad_ineq):
        raise ModelValidityError("inequality |dx * p_n| <= r_n^2 violated "
                                 f"(worst features {feats[np.argmax(bad_ineq)] if feats.ndim > 1 else feats})")
    if np.any(price > 1.0) or np.any(r2 < 0):
        raise ModelValidityError("price-event mass dp * r_n^2 must lie in [0, 1]")
    # r2 - dx * p is exactly zero at b = 0 when r2 = dx * p, so P_down vanishes there
    p_down = np.maximum(0.5 * prm.delta_p * (r2 - prm.delta_x * p), 0.0)
    p_up = np.maximum(0.5 * prm.delta_p * (r2 + prm.delta_x * p), 0.0)
    return p_down, p_up, 1.0 - (p_down + p_up)


# ---------------------------------------------------------------------------
# example 1: exponential locations, unit sizes


def nondegeneracy_bound(eta: float, q: float, c2: float) -> float:
    """A constant below r + p^+ on the whole clamped box.

    With |window| <= q c2 the drift is at least eta - b q c2, so either
    b <= eta / (2 q c2) and p >= eta / 2, or r >= b exceeds that threshold.
    """
    return 0.5 * min(0.5 * eta, eta / (2.0 * q * c2))


def _exp_profile(b, y):
    return np.exp(-y) * np.ones_like(b)


def _exp_shape_profile(b, y):
    d = np.abs(y - b)
    return np.exp(-y) * (1.0 - d) / (1.0 + d)


def make_example_1(params: Optional[ScalingParams], alpha: float = 1.0, eta: float = 0.5,
                   q: float = 0.5, c1: float = 2.0, c2: float = 5.0, M: float = 1.0,
                   kernel: Kernel = Kernel()) -> ModelSpec:
    """Generalized Black-Scholes price with exponential order locations.

    Price drift b * int_{(b-q)^+}^b (alpha y - v(y)) dy + eta, squared
    volatility dx * eta + b^2, orders of size +-1 at Exp(1) distances.
    """
    for name, val in dict(alpha=alpha, eta=eta, q=q, c1=c1, c2=c2, M=M).items():
        if not val > 0:
            raise ValueError(f"example_1 constant {name} must be positive, got {val}")
    if M < 1.0:
        raise ValueError("example_1 uses unit order sizes, so M must be at least 1")
    i_cap = q * c2
    c_cap = c2 * kernel.l1_norm

    def features(state: LOBState) -> np.ndarray:
        b = np.clip(np.asarray(state.b, dtype=float), 0.0, c1)
        C = state.prefix()
        a = np.maximum(b - q, 0.0)
        window = prefix_integral(C, state.dx, b) - prefix_integral(C, state.dx, a)
        cpl = coupling_from_prefix(C, state.dx, b, kernel)
        return np.stack([b, np.clip(window, -i_cap, i_cap), np.clip(cpl, -c_cap, c_cap)], axis=-1)

    def drift(feats):
        b, window = feats[..., 0], feats[..., 1]
        a = np.maximum(b - q, 0.0)
        return b * (0.5 * alpha * (b * b - a * a) - window) + eta

    const = dict(alpha=alpha, eta=eta, q=q, c1=c1, c2=c2, M=M, kernel=kernel.as_dict())
    h = SeparableDensity((DensityTerm(lambda f: -f[..., 2], _exp_profile),
                          DensityTerm(lambda f: 0.5 * np.ones_like(f[..., 0]), _exp_shape_profile,
                                      b_dependent=True, kink_at_b=True)))
    g = SeparableDensity((DensityTerm(lambda f: np.ones_like(f[..., 0]), _exp_profile),))
    spec = ModelSpec(
        name="example_1", features=features, feature_names=("b", "window", "coupling"),
        p=drift, r2=lambda f: f[..., 0] ** 2, eta=nondegeneracy_bound(eta, q, c2), M=M, h=h, g=g,
        g_state_independent=True, y_max=40.0, constants=const)
    if params is None:
        return spec

    dx, dp, dv = params.delta_x, params.delta_p, params.delta_v
    if dp * (dx * eta + c1 * c1) > 1.0:
        raise ValueError("example_1 needs delta_p * (delta_x * eta + c1^2) <= 1")
    if dv * c_cap > 1.0:
        raise ValueError("example_1 needs delta_v * c2 * |kernel|_1 <= 1 for valid size probabilities")

    def r2_n(feats):
        return dx * eta + feats[..., 0] ** 2

    def mass(feats):
        return 1.0 - dp * r2_n(feats)

    def sampler(feats, u):
        b, cpl = feats[..., 0], feats[..., 2]
        pi = -np.log1p(-u[..., 0])
        d = np.abs(pi - b)
        up = (1.0 - dv * cpl + dv / (1.0 + d)) / (2.0 + dv)
        return np.where(u[..., 1] < up, 1.0, -1.0), pi

    h_n = SeparableDensity((
        DensityTerm(lambda f: -2.0 * f[..., 2] * mass(f) / (2.0 + dv), _exp_profile),
        DensityTerm(lambda f: mass(f) / (2.0 + dv), _exp_shape_profile,
                    b_dependent=True, kink_at_b=True)))
    g_n = SeparableDensity((DensityTerm(mass, _exp_profile),))
    return replace(spec, params=params, p_n=drift, r2_n=r2_n, h_n=h_n, g_n=g_n,
                   order_sampler=sampler, n_uniforms=2)


# ---------------------------------------------------------------------------
# example 2: Gaussian locations around the bid, uniform sizes


def _gauss_profile(b, y):
    return np.exp(-0.5 * (y - b) ** 2)


def gaussian_mass(b):
    """Integral of exp(-(y - b)^2 / 2) over y >= 0."""
    return math.sqrt(math.pi / 2.0) * (1.0 + special.erf(np.asarray(b, dtype=float) / math.sqrt(2.0)))


def make_example_2(params: Optional[ScalingParams], alpha: float = 1.0, eta: float = 0.5,
                   q: float = 0.5, c1: float = 2.0, c2: float = 5.0, M: float = 1.0,
                   l_0: int = 2, kernel: Kernel = Kernel()) -> ModelSpec:
    """Projection-class model: coefficients see v only through its level-l_0 cell averages."""
    for name, val in dict(alpha=alpha, eta=eta, q=q, c1=c1, c2=c2, M=M).items():
        if not val > 0:
            raise ValueError(f"example_2 constant {name} must be positive, got {val}")
    if l_0 < 0:
        raise ValueError("l_0 must be a nonnegative level")
    if q < 2.0 ** (-l_0):
        raise ValueError("example_2 needs q >= 2^-l_0")
    i_cap = q * c2
    c_cap = c2 * kernel.l1_norm
    h0 = 2.0 ** (-l_0)

    def features(state: LOBState) -> np.ndarray:
        b = np.clip(np.asarray(state.b, dtype=float), 0.0, c1)
        Cc, hc = coarse_prefix(state.prefix(), state.dx, l_0)
        b0 = np.floor(b / h0 + 1e-9) * h0
        a = np.maximum(b - q, 0.0)
        window = prefix_integral(Cc, hc, b0) - prefix_integral(Cc, hc, a)
        cpl = coupling_from_prefix(Cc, hc, b0, kernel)
        return np.stack([b, np.clip(window, -i_cap, i_cap), np.clip(cpl, -c_cap, c_cap)], axis=-1)

    def drift(feats):
        b, window = feats[..., 0], feats[..., 1]
        b0 = np.floor(b / h0 + 1e-9) * h0
        a = np.maximum(b - q, 0.0)
        return b * (0.5 * alpha * (b0 * b0 - a * a) - window) + eta

    const = dict(alpha=alpha, eta=eta, q=q, c1=c1, c2=c2, M=M, l_0=l_0, kernel=kernel.as_dict())
    norm = lambda f: 1.0 / gaussian_mass(f[..., 0])
    h = SeparableDensity((DensityTerm(lambda f: M * f[..., 2] * norm(f), _gauss_profile, b_dependent=True),))
    g = SeparableDensity((DensityTerm(lambda f: M * M / 3.0 * norm(f), _gauss_profile, b_dependent=True),))
    spec = ModelSpec(
        name="example_2", features=features, feature_names=("b", "window", "coupling"),
        p=drift, r2=lambda f: f[..., 0] ** 2, eta=nondegeneracy_bound(eta, q, c2), M=M, h=h, g=g,
        projection_level=l_0, y_max=float(c1 + 12.0), constants=const)
    if params is None:
        return spec

    dx, dp, dv = params.delta_x, params.delta_p, params.delta_v
    if dp * (dx * eta + c1 * c1) > 1.0:
        raise ValueError("example_2 needs delta_p * (delta_x * eta + c1^2) <= 1")
    if dv * c_cap >= 0.5:
        raise ValueError("example_2 needs delta_v * c2 * |kernel|_1 <= 1/2 for a valid size mixture")

    def r2_n(feats):
        return dx * eta + feats[..., 0] ** 2

    def mass(feats):
        return 1.0 - dp * r2_n(feats)

    def sampler(feats, u):
        b, cpl = feats[..., 0], feats[..., 2]
        lo = special.ndtr(-b)
        pi = b + special.ndtri(lo + u[..., 0] * (1.0 - lo))
        pi = np.maximum(pi, 0.0)
        a = 0.5 - dv * cpl
        w = u[..., 1]
        omega = np.where(w < a, -M * w / a, M * (w - a) / (1.0 - a))
        return omega, pi

    h_n = SeparableDensity((DensityTerm(lambda f: M * f[..., 2] * mass(f) * norm(f), _gauss_profile,
                                        b_dependent=True),))
    g_n = SeparableDensity((DensityTerm(lambda f: M * M / 3.0 * mass(f) * norm(f), _gauss_profile,
                                        b_dependent=True),))
    return replace(spec, params=params, p_n=drift, r2_n=r2_n, h_n=h_n, g_n=g_n,
                   order_sampler=sampler, n_uniforms=2)


# ---------------------------------------------------------------------------
# limit-only reductions


def _price_only(state: LOBState) -> np.ndarray:
    return np.asarray(state.b, dtype=float)[..., None]


def make_black_scholes(drift: float = 0.0, vol: float = 1.0) -> ModelSpec:
    """dB = drift * B dt + vol * B dZ with no volume feedback."""
    return ModelSpec(
        name="black_scholes", features=_price_only, feature_names=("b",),
        p=lambda f: drift * f[..., 0], r2=lambda f: (vol * f[..., 0]) ** 2,
        eta=0.0, M=0.0, constants=dict(drift=drift, vol=vol))


def make_constant_coefficients(drift: float = 0.0, vol: float = 0.0) -> ModelSpec:
    """dB = drift dt + vol dZ with no volume feedback."""
    return ModelSpec(
        name="constant", features=_price_only, feature_names=("b",),
        p=lambda f: np.full(f.shape[:-1], drift), r2=lambda f: np.full(f.shape[:-1], vol * vol),
        eta=0.0, M=0.0, constants=dict(drift=drift, vol=vol))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    condition: str
    state_index: int
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation]
    n_states: int

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_spec(spec: ModelSpec, probe_states: Sequence[LOBState], eta: Optional[float] = None,
                  n_sampler_probes: int = 64) -> ValidationReport:
    """Probe the standing assumptions of a micro model on the given states."""
    prm = spec.params
    eta = spec.eta if eta is None else eta
    out: list[Violation] = []
    grid = (np.arange(n_sampler_probes) + 0.5) / n_sampler_probes
    u = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    if spec.n_uniforms != 2:
        u = np.tile(grid[:, None], (1, spec.n_uniforms))
    for idx, st in enumerate(probe_states):
        f = np.asarray(spec.features(st), dtype=float)
        p = float(spec.p_n(f))
        r2 = float(spec.r2_n(f))
        b = float(np.asarray(st.b))
        if b == 0.0 and abs(r2 - prm.delta_x * p) > 1e-15 * max(1.0, abs(r2)):
            out.append(Violation("boundary r_n^2 = dx * p_n at b = 0", idx, f"r2={r2!r}, dx*p={prm.delta_x * p!r}"))
        if not math.sqrt(max(r2, 0.0)) + max(p, 0.0) > eta:
            out.append(Violation("nondegeneracy r_n + p_n^+ > eta", idx, f"r={math.sqrt(max(r2, 0.0))!r}, p={p!r}, eta={eta!r}"))
        if abs(prm.delta_x * p) > r2:
            out.append(Violation("inequality |dx * p_n| <= r_n^2", idx, f"dx*p={prm.delta_x * p!r}, r2={r2!r}"))
        price = prm.delta_p * r2
        probs = (0.5 * (price - prm.delta_p * prm.delta_x * p), 0.5 * (price + prm.delta_p * prm.delta_x * p), 1.0 - price)
        if any(not (0.0 <= x <= 1.0) for x in probs):
            out.append(Violation("event probabilities in [0, 1]", idx, f"probabilities={probs!r}"))
        if spec.order_sampler is not None:
            omega, pi = spec.order_sampler(np.broadcast_to(f, (len(u),) + f.shape), u)
            if np.any(np.abs(omega) > spec.M + 1e-12):
                out.append(Violation("order size |omega| <= M", idx, f"max |omega|={np.max(np.abs(omega))!r}"))
            if np.any(pi < 0) or not np.all(np.isfinite(pi)):
                out.append(Violation("order location pi >= 0", idx, f"min pi={np.min(pi)!r}"))
    return ValidationReport(out, len(probe_states))
