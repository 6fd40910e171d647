"""Event-by-event simulation of the discrete book.

Each step draws one of three events: the bid moves down or up by one tick,
or an order of size omega is placed at distance pi, adding dv * omega / dx
to the density cell holding pi.  Paths of an ensemble advance in lockstep as
rows of numpy arrays; each path draws from its own random streams, so its
trajectory is the same whatever batch it runs in.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import haar, rng
from .coefficients import CoefficientEngine
from .model import (Event, LOBState, ModelSpec, ModelValidityError, OrderEvent, ScalingParams,
                    event_probabilities)
from .ortho import orthonormal_drivers


class AbortedPathError(RuntimeError):
    pass


@dataclass
class Audit:
    """Running tally of the price-positivity and probability checks."""

    paths: int = 0
    steps: int = 0
    draws: int = 0
    negative_prices: int = 0
    probability_violations: int = 0
    min_price: float = math.inf
    max_probability_error: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    PROB_TOL = 1e-15

    def record(self, *, paths=0, steps=0, draws=0, min_price=math.inf, prob_err=0.0,
               negative=0, bad_probs=0):
        with self._lock:
            self.paths += paths
            self.steps += steps
            self.draws += draws
            self.negative_prices += negative
            self.probability_violations += bad_probs
            self.min_price = min(self.min_price, float(min_price))
            self.max_probability_error = max(self.max_probability_error, float(prob_err))

    @property
    def clean(self) -> bool:
        return self.negative_prices == 0 and self.probability_violations == 0

    def reset(self) -> None:
        with self._lock:
            self.paths = self.steps = self.draws = 0
            self.negative_prices = self.probability_violations = 0
            self.min_price = math.inf
            self.max_probability_error = 0.0


AUDIT = Audit()


def _check_probs(pd, pu, po):
    triple = np.stack([pd, pu, po])
    err = np.abs(pd + pu + po - 1.0)
    bad = (np.any((triple < 0) | (triple > 1), axis=0)) | (err > Audit.PROB_TOL)
    return float(err.max(initial=0.0)), int(np.count_nonzero(bad))


# ---------------------------------------------------------------------------
# single-path step


def apply_event(state: LOBState, event: OrderEvent, params: ScalingParams) -> LOBState:
    """Return the state after one event (the input is not modified)."""
    dx = params.delta_x
    b = float(state.b)
    v = state.v.copy()
    V = state.V.copy()
    overflow = float(state.overflow)
    if event.phi == Event.PRICE_DOWN:
        b = (round(b / dx) - 1) * dx
        if b < 0:
            raise ModelValidityError("price-down event at b = 0")
    elif event.phi == Event.PRICE_UP:
        b = (round(b / dx) + 1) * dx
    else:
        j = int(haar.snap_cell(event.pi, dx))
        mass = params.delta_v * event.omega
        if j < v.shape[-1]:
            v[j] += mass / dx
            V[j:] += mass
        else:
            overflow += mass
    return LOBState(np.asarray(b), v, V, dx, overflow)


def step(state: LOBState, spec: ModelSpec, gen: np.random.Generator,
         forced: Optional[OrderEvent] = None) -> tuple[LOBState, OrderEvent]:
    """Sample one event from the state (or apply a forced one) and update."""
    params = spec.params
    if forced is None:
        feats = spec.features(state)
        pd, pu, po = event_probabilities(spec, feats)
        err, bad = _check_probs(np.atleast_1d(pd), np.atleast_1d(pu), np.atleast_1d(po))
        AUDIT.record(draws=1, prob_err=err, bad_probs=bad)
        u = gen.random()
        if u < pd:
            ev = OrderEvent(Event.PRICE_DOWN)
        elif u < pd + pu:
            ev = OrderEvent(Event.PRICE_UP)
        else:
            omega, pi = spec.order_sampler(feats, gen.random(spec.n_uniforms))
            ev = OrderEvent(Event.ORDER, float(omega), float(pi))
    else:
        ev = forced
    new = apply_event(state, ev, params)
    AUDIT.record(min_price=float(new.b), negative=int(float(new.b) < 0))
    return new, ev


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class MicroPath:
    """One simulated path, truncated at the stopping index.

    features[k] are the model features of the state before step k + 1, so
    coefficient evaluations at S_{k} line up with the increment of step k + 1.
    """

    path_id: int
    seed: int
    params: ScalingParams
    T: float
    B: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    pi: np.ndarray
    features: np.ndarray
    tracked: tuple
    coef: Optional[np.ndarray]
    stopped: bool

    @property
    def n_steps(self) -> int:
        return len(self.phi)

    @property
    def times(self) -> np.ndarray:
        return np.minimum(np.arange(self.n_steps + 1) * self.params.delta_t, self.T)

    @property
    def stop_time(self) -> float:
        return min(self.n_steps * self.params.delta_t, self.T)


@dataclass
class EnsembleFinal:
    """Terminal values only, for sweeps where whole paths do not fit in memory."""

    path_ids: np.ndarray
    B: np.ndarray
    n_steps: np.ndarray
    stopped: np.ndarray
    tracked: tuple
    coef: np.ndarray
    params: ScalingParams

    @property
    def stop_time(self) -> np.ndarray:
        return self.n_steps * self.params.delta_t


def simulate_batch(spec: ModelSpec, state0: LOBState, T: float, m_stop: float,
                   tracked: Sequence[int] = (), seed: int = 0,
                   path_ids: Sequence[int] = (0,), record: str = "full",
                   block: int = 4096):
    """Run the given paths in lockstep from a common initial state.

    record='full' returns a list of MicroPath; record='final' an EnsembleFinal.
    """
    if not spec.has_micro:
        raise ValueError(f"model {spec.name} has no micro dynamics")
    if record not in ("full", "final"):
        raise ValueError("record must be 'full' or 'final'")
    params = spec.params
    dx, dv = params.delta_x, params.delta_v
    tracked = tuple(int(i) for i in tracked)
    path_ids = np.asarray(path_ids, dtype=np.int64)
    P = len(path_ids)
    K = params.n_steps(T)
    n = state0.n_cells
    if T <= 0 or m_stop <= 0:
        raise ValueError("T and m_stop must be positive")

    ticks = np.full(P, int(round(float(state0.b) / dx)), dtype=np.int64)
    stop_ticks = int(math.ceil(m_stop / dx - 1e-9))
    v = np.tile(state0.v, (P, 1))
    nodes = np.zeros((P, n + 1))
    nodes[:, 1:] = state0.V
    V = nodes[:, 1:]
    overflow = np.full(P, float(np.asarray(state0.overflow)))
    coef = np.tile(haar.project_step_function(state0.V, dx, tracked), (P, 1)) if tracked else np.zeros((P, 0))
    state = LOBState(ticks * dx, v, V, dx, overflow, nodes)

    active = ticks < stop_ticks
    n_done = np.zeros(P, dtype=np.int64)
    rows = np.arange(P)
    cols = np.arange(n)

    full = record == "full"
    if full:
        B_rec = np.empty((K + 1, P))
        B_rec[0] = ticks * dx
        phi_rec = np.empty((K, P), dtype=np.int8)
        om_rec = np.zeros((K, P))
        pi_rec = np.zeros((K, P))
        feat_rec = None
        coef_rec = np.empty((K + 1, P, len(tracked)))
        coef_rec[0] = coef

    ev_streams = rng.BatchStreams(seed, path_ids, rng.EVENT)
    ord_streams = rng.BatchStreams(seed, path_ids, rng.ORDER)
    max_err, n_bad, min_price, n_neg = 0.0, 0, float(ticks.min(initial=0)) * dx, 0

    k = 0
    while k < K and active.any():
        nb = min(block, K - k)
        ue = ev_streams.uniforms(nb, 1)[..., 0]
        uo = ord_streams.uniforms(nb, spec.n_uniforms)
        for s in range(nb):
            if not active.any():
                break
            state.b = ticks * dx
            feats = spec.features(state)
            pd, pu, po = event_probabilities(spec, feats)
            err, bad = _check_probs(pd[active], pu[active], po[active])
            max_err, n_bad = max(max_err, err), n_bad + bad
            u = ue[s]
            phi = np.where(u < pd, Event.PRICE_DOWN, np.where(u < pd + pu, Event.PRICE_UP, Event.ORDER))
            omega, pi = spec.order_sampler(feats, uo[s])
            is_order = active & (phi == Event.ORDER)
            mass = np.where(is_order, dv * omega, 0.0)
            cell = haar.snap_cell(np.where(is_order, pi, 0.0), dx)
            stored = cell < n
            cell_c = np.minimum(cell, n - 1)
            v[rows, cell_c] += np.where(stored, mass / dx, 0.0)
            np.add(V, np.where(stored, mass, 0.0)[:, None], out=V, where=cols >= cell_c[:, None])
            overflow += np.where(stored, 0.0, mass)
            if tracked:
                coef += mass[:, None] * haar.F_matrix(tracked, np.where(is_order, pi, 0.0), dx)
            ticks += (active & (phi == Event.PRICE_UP)).astype(np.int64)
            ticks -= (active & (phi == Event.PRICE_DOWN)).astype(np.int64)
            low = int(ticks.min())
            if low < 0:
                n_neg += int(np.count_nonzero(ticks < 0))
            min_price = min(min_price, low * dx)
            if full:
                if feat_rec is None:
                    feat_rec = np.empty((K, P, feats.shape[-1]))
                feat_rec[k] = feats
                B_rec[k + 1] = ticks * dx
                phi_rec[k] = phi
                om_rec[k] = np.where(is_order, omega, 0.0)
                pi_rec[k] = np.where(is_order, pi, 0.0)
                coef_rec[k + 1] = coef
            n_done[active] = k + 1
            active = active & (ticks < stop_ticks)
            k += 1
        if not np.all(np.isfinite(V)) or not np.all(np.isfinite(coef)):
            raise AbortedPathError(f"non-finite book state after step {k}")

    AUDIT.record(paths=P, steps=int(n_done.sum()), min_price=min_price, prob_err=max_err,
                 negative=n_neg, bad_probs=n_bad)
    stopped = ticks >= stop_ticks
    if not full:
        return EnsembleFinal(path_ids, ticks * dx, n_done, stopped, tracked, coef, params)
    if feat_rec is None:
        feat_rec = np.empty((K, P, len(spec.feature_names)))
    out = []
    for r, pid in enumerate(path_ids):
        kk = int(n_done[r])
        out.append(MicroPath(
            path_id=int(pid), seed=seed, params=params, T=T,
            B=B_rec[:kk + 1, r].copy(), phi=phi_rec[:kk, r].copy(), omega=om_rec[:kk, r].copy(),
            pi=pi_rec[:kk, r].copy(), features=feat_rec[:kk, r].copy(), tracked=tracked,
            coef=coef_rec[:kk + 1, r].copy() if tracked else None, stopped=bool(stopped[r])))
    return out


def run_path(spec: ModelSpec, state0: LOBState, T: float, m_stop: float,
             tracked: Sequence[int] = (), seed: int = 0, path_id: int = 0) -> MicroPath:
    return simulate_batch(spec, state0, T, m_stop, tracked, seed, [path_id], "full")[0]


def run_ensemble(spec: ModelSpec, state0: LOBState, T: float, m_stop: float, n_paths: int,
                 tracked: Sequence[int] = (), seed: int = 0, record: str = "final",
                 chunk: int = 100, threads: int = 1, first_path: int = 0):
    """Paths first_path .. first_path + n_paths - 1 in chunks, optionally on a thread pool.

    Results are assembled in path order, so the output does not depend on
    the number of threads.
    """
    ids = np.arange(first_path, first_path + n_paths)
    chunks = [ids[i:i + chunk] for i in range(0, n_paths, chunk)]
    job = lambda c: simulate_batch(spec, state0, T, m_stop, tracked, seed, c, record)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    if record == "full":
        return [p for part in parts for p in part]
    return EnsembleFinal(
        np.concatenate([p.path_ids for p in parts]), np.concatenate([p.B for p in parts]),
        np.concatenate([p.n_steps for p in parts]), np.concatenate([p.stopped for p in parts]),
        tuple(int(i) for i in tracked), np.concatenate([p.coef for p in parts]), spec.params)


# ---------------------------------------------------------------------------
# normalized increments


@dataclass
class StepProcess:
    """Piecewise-constant cadlag process with jumps on the grid k * dt."""

    dt: float
    values: np.ndarray
    T: float

    def __call__(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / self.dt + 1e-9).astype(np.int64)
        return self.values[np.clip(idx, 0, len(self.values) - 1)]


def price_increments(path: MicroPath, spec: ModelSpec) -> np.ndarray:
    """dZ_k = (dB_k - dt p_n(S_{k-1})) / r_n(S_{k-1})."""
    dt = spec.params.delta_t
    if path.n_steps == 0:
        return np.zeros(0)
    p = spec.p_n(path.features)
    r = spec.r_n(path.features)
    if np.any(r <= 0):
        raise ModelValidityError("zero price volatility along the path")
    return (np.diff(path.B) - dt * p) / r


def normalized_price_process(path: MicroPath, spec: ModelSpec) -> StepProcess:
    dz = price_increments(path, spec)
    return StepProcess(spec.params.delta_t, np.concatenate([[0.0], np.cumsum(dz)]), path.T)


def zbound(params: ScalingParams, eta: float, p=None) -> np.ndarray | float:
    """Upper bound on |dZ_k|^2; with p omitted the deterministic version using dt |p| <= dx."""
    dx, dt = params.delta_x, params.delta_t
    drift2 = dx * dx if p is None else (dt * np.asarray(p)) ** 2
    return 2.0 * (dx * dx + drift2) * (2.0 / eta) * (2.0 / eta + 1.0 / dx)


@dataclass
class NormalizedIncrements:
    indices: tuple
    dZ: np.ndarray
    X: np.ndarray
    Zi: np.ndarray
    dW: np.ndarray
    U: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    cross_mean: np.ndarray


def bernoulli_signs(seed: int, path_id: int, indices: Sequence[int], n_steps: int) -> np.ndarray:
    """Fair +-1 draws, one stream per (path, basis index)."""
    cols = [np.where(rng.stream(seed, path_id, rng.BERNOULLI, int(i)).random(n_steps) < 0.5, -1.0, 1.0)
            for i in indices]
    return np.stack(cols, axis=-1) if cols else np.zeros((n_steps, 0))


def volume_increments(path: MicroPath, params: ScalingParams, indices: Sequence[int]) -> np.ndarray:
    """<dV_k, f_i> = dv * omega_k * F_i^(n)(pi_k) on order events, else 0."""
    is_order = path.phi == Event.ORDER
    Fm = haar.F_matrix(indices, np.where(is_order, path.pi, 0.0), params.delta_x)
    return np.where(is_order, params.delta_v * path.omega, 0.0)[:, None] * Fm


def w_increments(path: MicroPath, spec: ModelSpec, indices: Sequence[int], seed: Optional[int] = None,
                 engine: Optional[CoefficientEngine] = None, chunk: int = 20000) -> NormalizedIncrements:
    """Normalized volume increments Z^i and orthonormal drivers dW^i along a path.

    Coefficients are evaluated at the state before each step.  Where sigma_i
    vanishes, Z^i is a fair sign times sqrt(dt); where the decomposition has
    a zero pivot, so is dW^i.  cross_mean[k] is the conditional mean of
    dW_k dZ_k, which is -dt^2 p / r times the drivers of mu / sigma.
    """
    params = spec.params
    dt = params.delta_t
    indices = tuple(int(i) for i in indices)
    seed = path.seed if seed is None else seed
    if engine is None:
        engine = CoefficientEngine(spec, indices, pre_limit=True)
    K, n = path.n_steps, len(indices)
    X = volume_increments(path, params, indices)
    U = bernoulli_signs(seed, path.path_id, indices, K)
    Zi = np.empty((K, n))
    dW = np.empty((K, n))
    mu = np.empty((K, n))
    sig = np.empty((K, n))
    cross = np.empty((K, n))
    dZ = price_increments(path, spec)
    scale = -dt * dt * spec.p_n(path.features) / spec.r_n(path.features) if K else np.zeros(0)
    sdt = math.sqrt(dt)
    for a in range(0, K, chunk):
        sl = slice(a, min(a + chunk, K))
        m_, s_, c_, z_, _ = engine.factors(path.features[sl])
        xbar = X[sl] - dt * m_
        pos = s_ > 0
        Zi[sl] = np.where(pos, xbar / np.where(pos, s_, 1.0), sdt * U[sl])
        dW[sl] = orthonormal_drivers(Zi[sl], c_, z_, sdt * U[sl])
        mu[sl], sig[sl] = m_, s_
        ratio = np.where(pos, m_ / np.where(pos, s_, 1.0), 0.0)
        cross[sl] = scale[sl, None] * orthonormal_drivers(ratio, c_, z_, np.zeros_like(ratio))
    return NormalizedIncrements(indices, dZ, X, Zi, dW, U, mu, sig, cross)


# ---------------------------------------------------------------------------
# single-step resampling at a frozen state


@dataclass
class SingleStepDraws:
    phi: np.ndarray
    omega: np.ndarray
    pi: np.ndarray
    dZ: np.ndarray


def single_step_draws(spec: ModelSpec, state: LOBState, n_draws: int, seed: int,
                      stream_id: int = 0) -> SingleStepDraws:
    """Independent one-step transitions out of a fixed state."""
    params = spec.params
    feats = np.asarray(spec.features(state), dtype=float)
    pd, pu, po = (float(x) for x in event_probabilities(spec, feats))
    err, bad = _check_probs(np.array([pd]), np.array([pu]), np.array([po]))
    AUDIT.record(draws=n_draws, prob_err=err, bad_probs=bad)
    g_ev = rng.stream(seed, stream_id, rng.EVENT)
    g_or = rng.stream(seed, stream_id, rng.ORDER)
    u = g_ev.random(n_draws)
    phi = np.where(u < pd, Event.PRICE_DOWN, np.where(u < pd + pu, Event.PRICE_UP, Event.ORDER)).astype(np.int8)
    omega, pi = spec.order_sampler(np.broadcast_to(feats, (n_draws,) + feats.shape),
                                   g_or.random((n_draws, spec.n_uniforms)))
    is_order = phi == Event.ORDER
    dB = params.delta_x * ((phi == Event.PRICE_UP).astype(float) - (phi == Event.PRICE_DOWN))
    dZ = (dB - params.delta_t * float(spec.p_n(feats))) / float(spec.r_n(feats))
    AUDIT.record(min_price=float(state.b) - params.delta_x * float(np.any(phi == Event.PRICE_DOWN)),
                 negative=int(float(state.b) == 0 and np.any(phi == Event.PRICE_DOWN)))
    return SingleStepDraws(phi, np.where(is_order, omega, 0.0), np.where(is_order, pi, 0.0), dZ)
