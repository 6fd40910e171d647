"""Euler-Maruyama integration of the limiting price/volume system.

The state is the bid B and the coefficients V_i = <V, f_i> of the cumulated
volume on the truncated index set.  Each step

    dB   = p(S) delta + r(S) sqrt(delta) xi_Z
    dV_i = mu_i(S) delta + sum_{j <= i} d_ij(S) sqrt(delta) xi_j

with independent standard normals.  Coefficients see the volume through a
step-function reconstruction of V from the retained coefficients.  A path
is frozen at the first grid time with B >= m.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import haar, rng
from .coefficients import CoefficientEngine, initial_coefficients
from .micro import AUDIT, AbortedPathError
from .model import InitialProfile, LOBState, ModelSpec


class Mode(str, enum.Enum):
    CONSTANT_DIFFUSION = "constant_diffusion"
    PROJECTION_CLASS = "projection_class"
    GENERAL = "general"


class UniquenessWarning(UserWarning):
    """Raised for general-mode runs, whose law may depend on the scheme."""


@dataclass(frozen=True)
class SdeConfig:
    m: int
    l_max: int
    delta: float
    T: float
    mode: Mode = Mode.CONSTANT_DIFFUSION

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.delta > self.T:
            raise ValueError("delta must not exceed T")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.T / self.delta + 1e-9))

    @property
    def indices(self) -> list[int]:
        return haar.index_set(self.m, self.l_max)

    @property
    def cell_width(self) -> float:
        """Width of the cells on which every retained basis function is constant."""
        return 2.0 ** (-(self.l_max + 1))

    @property
    def truncation_budget(self) -> float:
        """Sup-norm bound on the tail of the F-expansion beyond level l_max."""
        return 2.0 ** (-self.l_max)

    def as_dict(self) -> dict:
        return {"m": self.m, "l_max": self.l_max, "delta": self.delta, "T": self.T,
                "mode": self.mode.value}


@dataclass
class LimitInitial:
    b: float
    coef: np.ndarray

    @classmethod
    def from_profile(cls, b0: float, profile: InitialProfile, indices: Sequence[int]) -> "LimitInitial":
        return cls(float(b0), initial_coefficients(profile.cumulative, indices))


@dataclass
class LimitPath:
    """One path on the grid t_r = r * delta, truncated at the stopping index."""

    path_id: int
    delta: float
    indices: tuple
    B: np.ndarray
    V: np.ndarray
    xi_Z: np.ndarray
    xi_V: np.ndarray
    tau: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.B)) * self.delta


@dataclass
class LimitFinal:
    path_ids: np.ndarray
    indices: tuple
    B: np.ndarray
    V: np.ndarray
    tau: np.ndarray
    n_steps: np.ndarray


class Reconstruction:
    """Maps retained coefficients to a prefix array of cumulated volume.

    The expansion sum_i V_i f_i is constant on cells of the finest dyadic
    grid; node values are midpoint averages of neighbouring cells, V(0) = 0,
    and the last node is extrapolated linearly.
    """

    def __init__(self, indices: Sequence[int], m: int, l_max: int):
        self.h = 2.0 ** (-(l_max + 1))
        n_cells = int(round(m / self.h))
        mids = (np.arange(n_cells) + 0.5) * self.h
        self.basis = haar.f_matrix(indices, mids).T if len(indices) else np.zeros((0, n_cells))

    def prefix(self, coef: np.ndarray) -> np.ndarray:
        cells = coef @ self.basis
        nodes = np.empty(cells.shape[:-1] + (cells.shape[-1] + 1,))
        nodes[..., 0] = 0.0
        nodes[..., 1:-1] = 0.5 * (cells[..., :-1] + cells[..., 1:])
        nodes[..., -1] = 1.5 * cells[..., -1] - 0.5 * cells[..., -2] if cells.shape[-1] > 1 else cells[..., -1]
        return nodes

    def state(self, b: np.ndarray, coef: np.ndarray) -> LOBState:
        C = self.prefix(coef)
        V = C[..., 1:]
        return LOBState(b, np.diff(C, axis=-1) / self.h, V, self.h, 0.0, C)


def _features(spec: ModelSpec, recon: Optional[Reconstruction], b, coef) -> np.ndarray:
    if recon is None:
        st = LOBState(b, np.zeros(b.shape + (0,)), np.zeros(b.shape + (0,)), 1.0)
        return np.asarray(spec.features(st), dtype=float)
    return np.asarray(spec.features(recon.state(b, coef)), dtype=float)


class _Diffusion:
    """Supplies d(S) per step according to the uniqueness mode."""

    def __init__(self, spec: ModelSpec, engine: CoefficientEngine, mode: Mode, feats0: np.ndarray):
        self.engine = engine
        self.mode = mode
        self.level = spec.projection_level
        if mode == Mode.CONSTANT_DIFFUSION:
            if not spec.g_state_independent:
                raise ValueError(f"model {spec.name} has a state-dependent second-moment density; "
                                 "constant_diffusion mode does not apply")
            _, _, _, _, d = engine.factors(feats0[:1])
            self.fixed = d[0]
        elif mode == Mode.PROJECTION_CLASS:
            if self.level is None:
                raise ValueError(f"model {spec.name} does not declare a projection level")
        else:
            warnings.warn(f"general mode for model {spec.name}: no uniqueness guarantee, "
                          "results are exploratory", UniquenessWarning, stacklevel=3)
        self._keys = None
        self._d = None

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        if self.mode == Mode.CONSTANT_DIFFUSION:
            return self.fixed
        # features are functions of the level-l_0 projection; reuse rows whose fingerprint is unchanged
        keys = feats
        if self._keys is not None and self._keys.shape == keys.shape:
            same = np.all(keys == self._keys, axis=-1)
            if same.all():
                return self._d
            if same.any():
                d = self._d.copy()
                d[~same] = self.engine.factors(feats[~same])[4]
                self._keys, self._d = keys.copy(), d
                return d
        self._keys, self._d = keys.copy(), self.engine.factors(feats)[4]
        return self._d


def simulate(spec: ModelSpec, s0: LimitInitial, cfg: SdeConfig, seed: int = 0,
             path_ids: Sequence[int] = (0,), record: str = "full", noise=None, block: int = 256):
    """Batched Euler-Maruyama over the given path ids.

    noise, if given, is a pair (xi_Z (K, P), xi_V (K, P, n)) of standard
    normals used in place of the seeded streams.  record='full' returns a
    list of LimitPath, record='final' a LimitFinal.
    """
    if record not in ("full", "final"):
        raise ValueError("record must be 'full' or 'final'")
    path_ids = np.asarray(path_ids, dtype=np.int64)
    P = len(path_ids)
    K = cfg.n_steps
    delta = cfg.delta
    sq = math.sqrt(delta)
    volume = spec.has_volume
    indices = tuple(cfg.indices) if volume else ()
    n = len(indices)
    coef0 = np.asarray(s0.coef, dtype=float)
    if coef0.shape != (n,):
        raise ValueError(f"initial coefficients have shape {coef0.shape}, expected ({n},)")

    recon = Reconstruction(indices, cfg.m, cfg.l_max) if volume else None
    b = np.full(P, float(s0.b))
    coef = np.tile(coef0, (P, 1))
    engine = diffusion = None
    if volume:
        engine = CoefficientEngine(spec, indices, pre_limit=False)
        diffusion = _Diffusion(spec, engine, cfg.mode, _features(spec, recon, b[:1], coef[:1]))

    active = b < cfg.m
    n_done = np.zeros(P, dtype=np.int64)
    full = record == "full"
    if full:
        B_rec = np.empty((K + 1, P))
        B_rec[0] = b
        V_rec = np.empty((K + 1, P, n))
        V_rec[0] = coef
        xz_rec = np.zeros((K, P))
        xv_rec = np.zeros((K, P, n))

    if noise is None:
        z_streams = rng.BatchStreams(seed, path_ids, rng.PRICE_NOISE)
        v_streams = [rng.BatchStreams(seed, path_ids, rng.VOLUME_NOISE, i) for i in indices]
    min_price = float(b.min(initial=0.0))
    n_neg = 0

    k = 0
    while k < K and active.any():
        nb = min(block, K - k)
        if noise is None:
            xz_blk = z_streams.normals(nb, 1)[..., 0]
            xv_blk = (np.concatenate([s.normals(nb, 1) for s in v_streams], axis=-1)
                      if n else np.zeros((nb, P, 0)))
        else:
            xz_blk = np.asarray(noise[0][k:k + nb], dtype=float)
            xv_blk = np.asarray(noise[1][k:k + nb], dtype=float) if n else np.zeros((nb, P, 0))
        for s in range(nb):
            if not active.any():
                break
            feats = _features(spec, recon, b, coef)
            p = np.asarray(spec.p(feats), dtype=float)
            r = np.sqrt(np.maximum(np.asarray(spec.r2(feats), dtype=float), 0.0))
            db = p * delta + r * sq * xz_blk[s]
            if volume:
                mu = engine.mu(feats)
                d = diffusion(feats)
                noise_v = (xv_blk[s] @ d.T if d.ndim == 2
                           else np.einsum("pij,pj->pi", d, xv_blk[s]))
                dv = mu * delta + sq * noise_v
                coef = np.where(active[:, None], coef + dv, coef)
            b = np.where(active, b + db, b)
            if not (np.all(np.isfinite(b)) and np.all(np.isfinite(coef))):
                raise AbortedPathError(f"non-finite limit state at step {k + 1}")
            neg = active & (b < 0)
            if neg.any():
                n_neg += int(np.count_nonzero(neg))
                min_price = min(min_price, float(b[neg].min()))
            if full:
                B_rec[k + 1] = b
                V_rec[k + 1] = coef
                xz_rec[k] = np.where(active, xz_blk[s], 0.0)
                xv_rec[k] = np.where(active[:, None], xv_blk[s], 0.0)
            n_done[active] = k + 1
            active = active & (b < cfg.m)
            k += 1

    AUDIT.record(paths=P, steps=int(n_done.sum()), min_price=min_price, negative=n_neg)
    stopped = b >= cfg.m
    tau = np.where(stopped, n_done * delta, np.inf)
    if not full:
        return LimitFinal(path_ids, indices, b, coef, tau, n_done)
    out = []
    for r_, pid in enumerate(path_ids):
        kk = int(n_done[r_])
        out.append(LimitPath(int(pid), delta, indices, B_rec[:kk + 1, r_].copy(),
                             V_rec[:kk + 1, r_].copy(), xz_rec[:kk, r_].copy(),
                             xv_rec[:kk, r_].copy(), float(tau[r_])))
    return out


@dataclass
class SampleTable:
    """One row per path: stopping time, terminal bid, selected coefficients."""

    path_id: np.ndarray
    tau_m: np.ndarray
    B_T: np.ndarray
    V: np.ndarray
    observables: tuple = field(default_factory=tuple)

    @property
    def columns(self) -> list[str]:
        return ["path_id", "tau_m", "B_T"] + [f"V_{i}" for i in self.observables]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in range(len(self.path_id)):
            w.writerow([int(self.path_id[r]), repr(float(self.tau_m[r])), repr(float(self.B_T[r]))]
                       + [repr(float(x)) for x in self.V[r]])
        return buf.getvalue()


def marginal_samples(spec: ModelSpec, s0: LimitInitial, cfg: SdeConfig, n_paths: int,
                     observables: Sequence[int] = (), master_seed: int = 0,
                     chunk: int = 500, first_path: int = 0) -> SampleTable:
    """Terminal values at T ^ tau_m for n_paths independent paths.

    observables are Haar indices from the retained set; tau_m is inf for
    paths that never reach m before T.
    """
    observables = tuple(int(i) for i in observables)
    idx = list(cfg.indices) if spec.has_volume else []
    missing = [i for i in observables if i not in idx]
    if missing:
        raise ValueError(f"observables {missing} are not in the retained index set")
    cols = [idx.index(i) for i in observables]
    ids = np.arange(first_path, first_path + n_paths)
    parts = [simulate(spec, s0, cfg, master_seed, ids[a:a + chunk], "final")
             for a in range(0, n_paths, chunk)]
    V = np.concatenate([p.V for p in parts]) if parts else np.zeros((0, len(idx)))
    return SampleTable(ids, np.concatenate([p.tau for p in parts]),
                       np.concatenate([p.B for p in parts]), V[:, cols], observables)
