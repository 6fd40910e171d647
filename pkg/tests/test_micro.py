import dataclasses

import numpy as np
import pytest

from lobdiff import haar, micro
from lobdiff.model import (Event, InitialProfile, LOBState, OrderEvent, ScalingParams, event_probabilities,
                           make_example_1, make_example_2)

PRM = ScalingParams(0.05, 0.2)


def start(b=0.8, dx=0.05):
    return InitialProfile("linear", 1.0).state(b, dx, 6.0)


def test_forced_price_down():
    dx = 0.1
    st0 = LOBState.from_density(0.3, np.ones(20), dx)
    new = micro.apply_event(st0, OrderEvent(Event.PRICE_DOWN), ScalingParams(dx, 0.04))
    assert float(new.b) == pytest.approx(0.2, abs=1e-15)
    assert np.array_equal(new.v, st0.v) and np.array_equal(new.V, st0.V)


def test_forced_order():
    dx = 0.1
    prm = ScalingParams(dx, 0.04)  # dv = sqrt(0.04 * 0.01) = 0.02
    st0 = LOBState.from_density(0.5, np.zeros(20), dx)
    new = micro.apply_event(st0, OrderEvent(Event.ORDER, 1.0, 0.3), prm)
    assert new.v[3] == pytest.approx(0.2, abs=1e-15)
    assert np.count_nonzero(new.v) == 1
    assert np.all(new.V[:3] == 0) and np.allclose(new.V[3:], 0.02, atol=1e-15)
    new.check()


def test_price_down_at_zero_refused():
    st0 = LOBState.from_density(0.0, np.zeros(5), 0.1)
    with pytest.raises(micro.ModelValidityError):
        micro.apply_event(st0, OrderEvent(Event.PRICE_DOWN), ScalingParams(0.1, 0.04))


def test_incremental_view_matches_rebuild():
    rng = np.random.default_rng(3)
    prm = ScalingParams(0.02, 0.1)
    st = start(0.8, 0.02)
    for _ in range(500):
        ev = OrderEvent(Event.ORDER, float(rng.choice([-1.0, 1.0])), float(rng.exponential()))
        st = micro.apply_event(st, ev, prm)
    st.check(tol=1e-12)


def test_zero_horizon_path():
    spec = make_example_1(PRM)
    path = micro.run_path(spec, start(), 0.5 * PRM.delta_t, 2.0, seed=1)
    assert path.n_steps == 0 and list(path.B) == [0.8]


def test_no_price_events_when_order_mass_is_one():
    spec = dataclasses.replace(make_example_1(PRM), p_n=lambda f: np.zeros(f.shape[:-1]),
                               r2_n=lambda f: np.zeros(f.shape[:-1]))
    path = micro.run_path(spec, start(), 0.2, 2.0, seed=2)
    assert path.n_steps == PRM.n_steps(0.2)
    assert np.all(path.B == 0.8) and np.all(path.phi == Event.ORDER)


def test_tracked_coefficients_telescope():
    spec = make_example_1(PRM)
    tracked = (1, 3, 6, 9)
    path = micro.run_path(spec, start(), 0.5, 4.0, tracked=tracked, seed=5)
    orders = path.phi == Event.ORDER
    assert orders.any()
    direct = PRM.delta_v * np.sum(path.omega[orders, None] * haar.F_matrix(tracked, path.pi[orders], PRM.delta_x), axis=0)
    assert np.max(np.abs(path.coef[-1] - path.coef[0] - direct)) <= 1e-12
    # the tracked start is the projection of the initial step function
    expect0 = haar.project_step_function(start().V, PRM.delta_x, tracked)
    assert np.array_equal(path.coef[0], expect0)


def test_price_representation_and_reconstruction():
    spec = make_example_1(PRM)
    idx = (1, 2, 3, 4, 5, 6)
    path = micro.run_path(spec, start(), 0.5, 4.0, tracked=idx, seed=7)
    dz = micro.price_increments(path, spec)
    p, r = spec.p_n(path.features), spec.r_n(path.features)
    recon = path.B[0] + np.cumsum(p * PRM.delta_t + r * dz)
    assert np.max(np.abs(recon - path.B[1:])) <= 1e-10
    inc = micro.w_increments(path, spec, idx)
    coef_recon = path.coef[0] + np.cumsum(inc.mu * PRM.delta_t + inc.sigma * inc.Zi, axis=0)
    scale = np.maximum(1.0, np.abs(path.coef[1:]))
    assert np.max(np.abs(coef_recon - path.coef[1:]) / scale) <= 1e-8


def test_single_price_up_normalized_process():
    dx = 0.05
    prm = ScalingParams(dx, 0.2)
    spec = dataclasses.replace(make_example_1(prm), p_n=lambda f: np.zeros(f.shape[:-1]),
                               r2_n=lambda f: np.full(f.shape[:-1], 0.25))
    path = micro.MicroPath(0, 0, prm, 1.0, np.array([0.5, 0.55, 0.55]), np.array([Event.PRICE_UP, Event.ORDER]),
                           np.zeros(2), np.zeros(2), np.zeros((2, 3)), (), None, False)
    Z = micro.normalized_price_process(path, spec)
    assert Z(0.0) == 0.0
    assert Z(prm.delta_t) == pytest.approx(dx / 0.5, abs=1e-14)
    assert Z(2.5 * prm.delta_t) == pytest.approx(dx / 0.5, abs=1e-14)


def test_zero_price_mean_at_frozen_state():
    spec = make_example_1(ScalingParams(0.02, 0.1))
    draws = micro.single_step_draws(spec, start(0.8, 0.02), 1_000_000, seed=3)
    se = draws.dZ.std() / np.sqrt(draws.dZ.size)
    assert abs(draws.dZ.mean()) <= 4 * se


def frozen_path(spec, state, n, seed):
    d = micro.single_step_draws(spec, state, n, seed)
    f = np.asarray(spec.features(state))
    prm = spec.params
    dB = prm.delta_x * ((d.phi == Event.PRICE_UP).astype(float) - (d.phi == Event.PRICE_DOWN))
    B = float(state.b) + np.concatenate([[0.0], np.cumsum(dB)])
    return micro.MicroPath(0, seed, prm, n * prm.delta_t, B, d.phi, d.omega, d.pi,
                           np.broadcast_to(f, (n, f.size)).copy(), (), None, False)


def test_w_orthonormal_at_frozen_state():
    spec = make_example_1(ScalingParams(0.02, 0.1))
    path = frozen_path(spec, start(0.8, 0.02), 100_000, seed=11)
    inc = micro.w_increments(path, spec, range(1, 7))
    dt = spec.params.delta_t
    prod = inc.dW[:, :, None] * inc.dW[:, None, :]
    mean = prod.mean(axis=0)
    se = prod.std(axis=0) / np.sqrt(len(prod))
    assert np.all(np.abs(mean - dt * np.eye(6)) <= 5 * se)


def test_w_equals_z_for_uncorrelated_indices():
    # without a first-moment density the pre-limit correlation of F_3 and F_5
    # (disjoint supports) is exactly zero, so the decomposition is the identity
    spec = dataclasses.replace(make_example_1(ScalingParams(0.02, 0.1)), h_n=None)
    path = frozen_path(spec, start(0.8, 0.02), 2000, seed=12)
    inc = micro.w_increments(path, spec, (3, 5))
    assert np.array_equal(inc.dW, inc.Zi)


def test_zero_pivot_uses_fair_signs():
    spec = make_example_1(ScalingParams(0.02, 0.1))
    path = frozen_path(spec, start(0.8, 0.02), 20_000, seed=13)
    inc = micro.w_increments(path, spec, (1, 1))
    sdt = np.sqrt(spec.params.delta_t)
    assert np.allclose(np.abs(inc.dW[:, 1]), sdt, rtol=1e-12)
    assert abs(np.mean(inc.dW[:, 1] > 0) - 0.5) <= 5 * 0.5 / np.sqrt(20_000)


def test_determinism_and_chunk_invariance():
    spec = make_example_2(ScalingParams(0.05, 0.2))
    st = start()
    a = micro.run_ensemble(spec, st, 0.3, 2.0, 12, tracked=(1, 3), seed=9, chunk=12)
    b = micro.run_ensemble(spec, st, 0.3, 2.0, 12, tracked=(1, 3), seed=9, chunk=5, threads=2)
    assert np.array_equal(a.B, b.B) and np.array_equal(a.coef, b.coef) and np.array_equal(a.n_steps, b.n_steps)
    full = micro.run_ensemble(spec, st, 0.3, 2.0, 12, tracked=(1, 3), seed=9, record="full", chunk=4)
    assert np.array_equal([p.B[-1] for p in full], a.B)
    # a path does not depend on which other paths share its batch
    tail = micro.run_ensemble(spec, st, 0.3, 2.0, 4, tracked=(1, 3), seed=9, first_path=8)
    assert np.array_equal(tail.B, a.B[8:])
    c = micro.run_ensemble(spec, st, 0.3, 2.0, 12, tracked=(1, 3), seed=10)
    assert not np.array_equal(a.B, c.B)


def test_stopping_truncates_path():
    spec = make_example_1(PRM)
    paths = micro.run_ensemble(spec, start(0.8), 1.0, 0.9, 20, seed=4, record="full")
    for p in paths:
        if p.stopped:
            assert p.B[-1] >= 0.9 - 1e-12 and np.all(p.B[:-1] < 0.9 - 1e-12)
        else:
            assert p.n_steps == PRM.n_steps(1.0)


def test_positivity_and_probability_audit():
    before = (micro.AUDIT.negative_prices, micro.AUDIT.probability_violations)
    spec = make_example_1(ScalingParams(0.05, 0.2), eta=0.05)
    fin = micro.run_ensemble(spec, start(0.1), 1.0, 3.0, 50, seed=21)
    assert np.all(fin.B >= 0)
    assert (micro.AUDIT.negative_prices, micro.AUDIT.probability_violations) == before
    assert micro.AUDIT.max_probability_error <= 1e-15


def test_zbound_dominates_increments():
    spec = make_example_1(PRM)
    path = micro.run_path(spec, start(), 1.0, 4.0, seed=8)
    dz = micro.price_increments(path, spec)
    assert np.all(dz**2 <= micro.zbound(PRM, spec.eta, spec.p_n(path.features)))
    assert np.all(dz**2 <= micro.zbound(PRM, spec.eta))
