"""Statistical checks of the micro model against its coefficients and its limit.

Every check returns TestReport objects.  A report passes either when
|statistic - reference| <= k * SE (kind 'se') or when the statistic stays
below a declared threshold (kind 'threshold'); k and all thresholds come
from one DiagnosticsConfig that is echoed into each report.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

from . import haar, rng
from .coefficients import CoefficientEngine
from .micro import MicroPath, NormalizedIncrements, price_increments, single_step_draws, zbound
from .model import LOBState, ModelSpec, ModelValidityError


@dataclass(frozen=True)
class DiagnosticsConfig:
    se_multiplier: float = 5.0
    ks_threshold: float = 0.1
    lindeberg_eps: float = 0.1
    qv_band: tuple = (0.9, 1.1)
    trend_z: float = 2.0
    n_bootstrap: int = 200

    def as_dict(self) -> dict:
        d = asdict(self)
        d["qv_band"] = list(self.qv_band)
        return d


@dataclass
class TestReport:
    name: str
    statistic: float
    reference: float
    se: Optional[float]
    threshold: Optional[float]
    passed: bool
    kind: str
    sample_sizes: dict
    seeds: tuple = ()
    config: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def _se_report(name, stat, ref, se, cfg, sizes, seeds=(), detail=None) -> TestReport:
    k = cfg.se_multiplier
    ok = bool(abs(stat - ref) <= k * se)
    return TestReport(name, float(stat), float(ref), float(se), None, ok, "se", sizes,
                      tuple(seeds), cfg.as_dict(), detail or {})


def _max_z_report(name, mean, target, se, cfg, sizes, seeds=(), detail=None) -> TestReport:
    """Worst |mean - target| / SE over an array of moment estimates; threshold k."""
    dev = np.abs(np.asarray(mean) - np.asarray(target))
    se = np.asarray(se)
    pos = se > 0
    z = np.where(pos, dev / np.where(pos, se, 1.0), np.where(dev > 1e-14, np.inf, 0.0))
    zmax = float(z.max()) if z.size else 0.0
    d = {"worst_position": [int(x) for x in np.unravel_index(int(np.argmax(z)), z.shape)] if z.size else []}
    d.update(detail or {})
    return TestReport(name, zmax, 0.0, None, cfg.se_multiplier, bool(zmax <= cfg.se_multiplier),
                      "threshold", sizes, tuple(seeds), cfg.as_dict(), d)


def reports_to_json(reports: Sequence[TestReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)


def reports_to_text(reports: Sequence[TestReport]) -> str:
    rows = [("test", "statistic", "reference", "se", "threshold", "pass")]
    for r in reports:
        rows.append((r.name, f"{r.statistic:.6g}", f"{r.reference:.6g}",
                     "" if r.se is None else f"{r.se:.3g}",
                     "" if r.threshold is None else f"{r.threshold:.3g}", "yes" if r.passed else "NO"))
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows) + "\n"


# ---------------------------------------------------------------------------
# streaming moments


class MomentAccumulator:
    """Running sums of x_i y_j and (x_i y_j)^2 over sample rows."""

    def __init__(self, nx: int, ny: int):
        self.n = 0
        self.s1 = np.zeros((nx, ny))
        self.s2 = np.zeros((nx, ny))

    def add(self, x: np.ndarray, y: np.ndarray) -> None:
        self.n += x.shape[0]
        self.s1 += x.T @ y
        self.s2 += (x * x).T @ (y * y)

    def mean_se(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.s1 / self.n
        var = np.maximum(self.s2 / self.n - m * m, 0.0)
        return m, np.sqrt(var / self.n)


# ---------------------------------------------------------------------------
# moment identities at a frozen state


def moment_identity_test(spec: ModelSpec, state: LOBState, indices: Sequence[int], n_draws: int,
                         seed: int, cfg: DiagnosticsConfig = DiagnosticsConfig(),
                         reference: Optional[ModelSpec] = None) -> list[TestReport]:
    """Empirical one-step moments of <dV, f_i> against the quadrature coefficients.

    Draws come from `spec`; coefficients from `reference` (default: spec),
    so a mismatched sampler can be tested against the declared model.
    """
    if n_draws < 10_000:
        raise ValueError("moment identity test needs at least 10^4 draws")
    reference = spec if reference is None else reference
    indices = tuple(int(i) for i in indices)
    prm = spec.params
    dt = prm.delta_t
    draws = single_step_draws(spec, state, n_draws, seed)
    is_order = draws.phi == 2
    X = np.where(is_order, prm.delta_v * draws.omega, 0.0)[:, None] * \
        haar.F_matrix(indices, draws.pi, prm.delta_x)
    eng = CoefficientEngine(reference, indices, pre_limit=True)
    feats = np.asarray(reference.features(state), dtype=float).reshape(1, -1)
    mu, cov = eng.moments(feats)
    mu, cov = mu[0], cov[0]
    sizes = {"n_draws": n_draws, "n_indices": len(indices)}
    mean = X.mean(axis=0)
    se1 = X.std(axis=0) / math.sqrt(n_draws)
    first = _max_z_report("first_moment", mean, dt * mu, se1, cfg, sizes, (seed,),
                          {"empirical": mean.tolist(), "expected": (dt * mu).tolist()})
    xc = X - dt * mu
    acc = MomentAccumulator(len(indices), len(indices))
    for a in range(0, n_draws, 200_000):
        acc.add(xc[a:a + 200_000], xc[a:a + 200_000])
    m2, se2 = acc.mean_se()
    diag = np.arange(len(indices))
    second = _max_z_report("second_moment", m2[diag, diag], dt * cov[diag, diag], se2[diag, diag], cfg,
                           sizes, (seed,), {"empirical": m2[diag, diag].tolist(),
                                            "expected": (dt * cov[diag, diag]).tolist()})
    off = np.tril_indices(len(indices), -1)
    cross = _max_z_report("cross_moment", m2[off], dt * cov[off], se2[off], cfg, sizes, (seed,))
    return [first, second, cross]


# ---------------------------------------------------------------------------
# martingale-array checks on micro paths
#
# Each check is an accumulator fed one path at a time, so long ensembles can
# be streamed through without holding every path in memory.


class QVAccumulator:
    """Quadratic variation of Z per unit time, the Lindeberg sum and the pathwise dZ^2 bound."""

    def __init__(self, spec: ModelSpec, cfg: DiagnosticsConfig = DiagnosticsConfig()):
        self.spec, self.cfg = spec, cfg
        self.qv, self.lind, self.horizon = [], [], []
        self.worst_ratio = 0.0
        self.n_price = 0
        self.n_steps = 0
        self.seeds = set()

    def add(self, path: MicroPath, dz: Optional[np.ndarray] = None) -> None:
        prm = self.spec.params
        price = path.phi != 2
        self.n_price += int(np.count_nonzero(price))
        self.n_steps += path.n_steps
        self.seeds.add(path.seed)
        if dz is None:
            try:
                dz = price_increments(path, self.spec)
            except ModelValidityError:
                # no price volatility: Z is undefined, report as degenerate
                dz = np.zeros(path.n_steps)
        t = path.stop_time
        self.horizon.append(t)
        self.qv.append(float(np.sum(dz * dz)) / t if t > 0 else 0.0)
        self.lind.append(float(np.sum(dz * dz * (np.abs(dz) > self.cfg.lindeberg_eps))))
        if path.n_steps and np.any(price):
            bound = zbound(prm, self.spec.eta, self.spec.p_n(path.features))
            self.worst_ratio = max(self.worst_ratio, float(np.max(dz * dz / bound)))

    def reports(self) -> list[TestReport]:
        cfg = self.cfg
        N = len(self.qv)
        if N < 100:
            raise ValueError("quadratic-variation test needs at least 100 paths")
        qv = np.asarray(self.qv)
        sizes = {"n_paths": N, "n_steps": self.n_steps}
        seeds = tuple(sorted(self.seeds))
        lo, hi = cfg.qv_band
        mean_qv = float(qv.mean())
        degenerate = self.n_price == 0
        qv_rep = TestReport("quadratic_variation", mean_qv, 1.0, float(qv.std() / math.sqrt(N)), None,
                            bool(lo <= mean_qv <= hi and not degenerate), "band", sizes, seeds,
                            cfg.as_dict(), {"band": [lo, hi], "degenerate": degenerate})
        eps = cfg.lindeberg_eps
        c_n = float(zbound(self.spec.params, self.spec.eta))
        lbound = float(np.max(self.horizon)) * c_n / eps**2
        lind = float(np.mean(self.lind))
        lind_rep = TestReport("lindeberg", lind, 0.0, None, lbound, bool(lind <= lbound), "threshold",
                              sizes, seeds, cfg.as_dict(), {"eps": eps, "c_n": c_n})
        bound_rep = TestReport("increment_bound", self.worst_ratio, 0.0, None, 1.0,
                               bool(self.worst_ratio <= 1.0), "threshold", sizes, seeds, cfg.as_dict(),
                               {"statistic": "max |dZ|^2 / c_n over all steps"})
        return [qv_rep, lind_rep, bound_rep]


class OrthonormalityAccumulator:
    """E[dW^i dW^j] / dt against the identity, pooled over all steps."""

    def __init__(self, n: int, dt: float, cfg: DiagnosticsConfig = DiagnosticsConfig()):
        self.acc = MomentAccumulator(n, n)
        self.dt, self.cfg, self.n = dt, cfg, n

    def add(self, inc: NormalizedIncrements) -> None:
        self.acc.add(inc.dW, inc.dW)

    def report(self, seeds=()) -> TestReport:
        m, se = self.acc.mean_se()
        return _max_z_report("driver_orthonormality", m / self.dt, np.eye(self.n), se / self.dt, self.cfg,
                             {"n_steps": self.acc.n, "n_indices": self.n}, seeds)


class CylindricalAccumulator:
    """Cov(W(phi_a, t), W(phi_b, s)) against (t ^ s) <phi_a, phi_b>.

    phis holds the test functions as rows of basis coefficients on the
    retained indices; W(phi, t) = sum_i <phi, f_i> W^i(t).
    """

    def __init__(self, phis: np.ndarray, t_grid: Sequence[float], dt: float,
                 cfg: DiagnosticsConfig = DiagnosticsConfig()):
        self.phis = np.atleast_2d(np.asarray(phis, dtype=float))
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.dt, self.cfg = dt, cfg
        self.vals = []

    def add(self, inc: NormalizedIncrements) -> None:
        cum = np.concatenate([np.zeros((1, inc.dW.shape[1])), np.cumsum(inc.dW, axis=0)])
        ks = np.minimum(np.floor(self.t_grid / self.dt + 1e-9).astype(np.int64), len(cum) - 1)
        self.vals.append(self.phis @ cum[ks].T)

    def reports(self, seeds=()) -> list[TestReport]:
        A, G = self.phis.shape[0], len(self.t_grid)
        flat = np.asarray(self.vals).reshape(len(self.vals), A * G)
        N = flat.shape[0]
        flat = flat - flat.mean(axis=0)
        prod = flat[:, :, None] * flat[:, None, :]
        cov = prod.mean(axis=0) * N / (N - 1)
        se = prod.std(axis=0) / math.sqrt(N)
        tt = np.minimum.outer(self.t_grid, self.t_grid)
        target = np.einsum("ab,st->asbt", self.phis @ self.phis.T, tt).reshape(A * G, A * G)
        iu = np.triu_indices(A * G)
        sizes = {"n_paths": N, "n_functions": A, "n_times": G}
        diag = np.arange(A * G)
        return [_max_z_report("cylindrical_covariance", cov[iu], target[iu], se[iu], self.cfg, sizes, seeds),
                _max_z_report("cylindrical_variance", cov[diag, diag], target[diag, diag], se[diag, diag],
                              self.cfg, sizes, seeds)]


class CrossAccumulator:
    """Per-path sum of dW(phi)_k dZ_k averaged over paths, against 0.

    The conditional cross-moment is not exactly zero in the discrete model;
    its pathwise sum is computed exactly and added to the tolerance.
    """

    def __init__(self, phi: np.ndarray, cfg: DiagnosticsConfig = DiagnosticsConfig(),
                 name: str = "price_volume_cross"):
        self.phi = np.asarray(phi, dtype=float)
        self.cfg, self.name = cfg, name
        self.sums, self.bias = [], []

    def add(self, inc: NormalizedIncrements) -> None:
        self.sums.append(float(np.sum((inc.dW @ self.phi) * inc.dZ)))
        self.bias.append(float(np.sum(inc.cross_mean @ self.phi)))

    def report(self, seeds=()) -> TestReport:
        sums, bias = np.asarray(self.sums), np.asarray(self.bias)
        N = len(sums)
        mean = float(sums.mean())
        se = float(sums.std() / math.sqrt(N))
        bound = float(np.max(np.abs(bias))) if N else 0.0
        ok = abs(mean) <= self.cfg.se_multiplier * se + bound
        return TestReport(self.name, mean, 0.0, se, None, bool(ok), "se", {"n_paths": N}, tuple(seeds),
                          self.cfg.as_dict(), {"deterministic_bound": bound, "mean_bias": float(bias.mean())})


def qv_and_lindeberg_test(paths: Iterable[MicroPath], spec: ModelSpec,
                          cfg: DiagnosticsConfig = DiagnosticsConfig()) -> list[TestReport]:
    acc = QVAccumulator(spec, cfg)
    for p in paths:
        acc.add(p)
    return acc.reports()


def orthonormality_test(increments: Iterable[NormalizedIncrements], dt: float,
                        cfg: DiagnosticsConfig = DiagnosticsConfig(), seeds=()) -> TestReport:
    acc = None
    for inc in increments:
        acc = acc or OrthonormalityAccumulator(inc.dW.shape[1], dt, cfg)
        acc.add(inc)
    return acc.report(seeds)


def cylindrical_covariance_test(increments: Iterable[NormalizedIncrements], phis: np.ndarray,
                                t_grid: Sequence[float], dt: float,
                                cfg: DiagnosticsConfig = DiagnosticsConfig(), seeds=()) -> list[TestReport]:
    acc = CylindricalAccumulator(phis, t_grid, dt, cfg)
    for inc in increments:
        acc.add(inc)
    return acc.reports(seeds)


def cross_independence_test(increments: Iterable[NormalizedIncrements], phi: np.ndarray,
                            cfg: DiagnosticsConfig = DiagnosticsConfig(), seeds=(),
                            name: str = "price_volume_cross") -> TestReport:
    acc = CrossAccumulator(phi, cfg, name)
    for inc in increments:
        acc.add(inc)
    return acc.report(seeds)


def martingale_suite(spec: ModelSpec, state0: LOBState, T: float, m_stop: float, n_paths: int,
                     indices: Sequence[int], phis: np.ndarray, t_grid: Sequence[float], seed: int,
                     cfg: DiagnosticsConfig = DiagnosticsConfig(), chunk: int = 40,
                     threads: int = 1) -> list[TestReport]:
    """Quadratic variation, increment bound, driver orthonormality, cylindrical
    covariance and price-volume cross-moments from one streamed ensemble.

    The cross-moment is tested for every test function, plus a negative
    control with the price innovation mixed into the drivers (expected to fail).
    """
    from .micro import run_ensemble, w_increments
    dt = spec.params.delta_t
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    engine = CoefficientEngine(spec, indices, pre_limit=True)
    qv = QVAccumulator(spec, cfg)
    ortho = OrthonormalityAccumulator(len(indices), dt, cfg)
    cyl = CylindricalAccumulator(phis, t_grid, dt, cfg)
    cross = [CrossAccumulator(phi, cfg, f"price_volume_cross[{a}]") for a, phi in enumerate(phis)]
    control = CrossAccumulator(phis[0], cfg, "price_volume_cross_shared_noise_control")
    for first in range(0, n_paths, chunk):
        paths = run_ensemble(spec, state0, T, m_stop, min(chunk, n_paths - first), indices, seed,
                             record="full", chunk=max(1, chunk // max(threads, 1)), threads=threads,
                             first_path=first)
        for p in paths:
            inc = w_increments(p, spec, indices, engine=engine)
            qv.add(p, inc.dZ)
            ortho.add(inc)
            cyl.add(inc)
            for acc in cross:
                acc.add(inc)
            control.add(inject_shared_noise(inc))
        del paths
    seeds = (seed,)
    out = qv.reports() + [ortho.report(seeds)] + cyl.reports(seeds) + [acc.report(seeds) for acc in cross]
    ctrl = control.report(seeds)
    ctrl.detail["negative_control"] = True
    return out + [ctrl]


def truncation_tail(phi: Callable, indices: Sequence[int], m: int, cells_per_unit: int = 1 << 12) -> float:
    """Dropped mass ||phi||^2 - sum_{i in indices} <phi, f_i>^2 for phi supported in [0, m].

    phi is sampled at cell midpoints of a fine dyadic grid, so the result is
    exact for step functions on that grid.
    """
    h = 1.0 / cells_per_unit
    x = (np.arange(m * cells_per_unit) + 0.5) * h
    vals = np.asarray(phi(x), dtype=float)
    coef = haar.project_step_function(vals, h, indices)
    return float(h * np.sum(vals * vals) - np.sum(coef * coef))


def inject_shared_noise(inc: NormalizedIncrements, weight: float = 1.0) -> NormalizedIncrements:
    """Negative control: mix the price innovation into every volume driver."""
    mixed = (inc.dW + weight * inc.dZ[:, None]) / math.sqrt(1.0 + weight * weight)
    return replace(inc, dW=mixed)


# ---------------------------------------------------------------------------
# two-sample comparisons


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov distance and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_two_sample needs two nonempty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    ne = a.size * b.size / (a.size + b.size)
    sq = math.sqrt(ne)
    p = float(special.kolmogorov((sq + 0.12 + 0.11 / sq) * d))
    return d, min(max(p, 0.0), 1.0)


def bootstrap_ks_se(a, b, n_boot: int, seed: int, stream_id: int = 0) -> float:
    """Standard deviation of the KS distance under resampling both samples."""
    g = rng.stream(seed, stream_id, rng.BOOTSTRAP)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ds = np.empty(n_boot)
    for r in range(n_boot):
        ds[r] = ks_two_sample(a[g.integers(0, a.size, a.size)], b[g.integers(0, b.size, b.size)])[0]
    return float(ds.std(ddof=1))


@dataclass
class SweepRow:
    label: str
    delta_x: float
    delta_p: float
    n_micro: int
    n_limit: int
    distance: float
    p_value: float
    bootstrap_se: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    rows: list[SweepRow]
    trend_ok: bool
    final_ok: bool
    report: TestReport

    def table_csv(self) -> str:
        head = "label,delta_x,delta_p,n_micro,n_limit,distance,p_value,bootstrap_se\n"
        return head + "".join(
            f"{r.label},{r.delta_x!r},{r.delta_p!r},{r.n_micro},{r.n_limit},{r.distance!r},"
            f"{r.p_value!r},{r.bootstrap_se!r}\n" for r in self.rows)


def stopped_price(B: np.ndarray, m: float) -> np.ndarray:
    """Observable min(B(T ^ tau_m), m), which removes the overshoot of the limit's grid stopping."""
    return np.minimum(np.asarray(B, dtype=float), m)


def convergence_sweep(micro_samples: Sequence[tuple[str, float, float, np.ndarray]], limit_sample: np.ndarray,
                      seed: int, cfg: DiagnosticsConfig = DiagnosticsConfig()) -> SweepResult:
    """KS distance between micro and limit samples along a ladder of scalings.

    micro_samples lists (label, delta_x, delta_p, observable values) from
    coarse to fine.  The trend passes when no rung exceeds its predecessor
    by more than trend_z combined bootstrap SEs; the final rung must be at
    most ks_threshold.
    """
    rows = []
    for r, (label, dx, dp, vals) in enumerate(micro_samples):
        d, p = ks_two_sample(vals, limit_sample)
        se = bootstrap_ks_se(vals, limit_sample, cfg.n_bootstrap, seed, r)
        rows.append(SweepRow(label, dx, dp, len(vals), len(limit_sample), d, p, se))
    trend_ok = all(rows[k + 1].distance <= rows[k].distance
                   + cfg.trend_z * math.hypot(rows[k].bootstrap_se, rows[k + 1].bootstrap_se)
                   for k in range(len(rows) - 1))
    final = rows[-1].distance
    final_ok = final <= cfg.ks_threshold
    report = TestReport("convergence_sweep", final, 0.0, rows[-1].bootstrap_se, cfg.ks_threshold,
                        bool(trend_ok and final_ok), "threshold",
                        {"n_micro": [r.n_micro for r in rows], "n_limit": len(limit_sample)}, (seed,),
                        cfg.as_dict(), {"distances": [r.distance for r in rows], "trend_ok": trend_ok,
                                        "final_ok": final_ok})
    return SweepResult(rows, trend_ok, final_ok, report)
