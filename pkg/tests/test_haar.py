import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lobdiff import haar


@pytest.mark.parametrize("i,kl", [(1, (0, -1)), (2, (1, -1)), (3, (0, 0)), (4, (2, -1)),
                                  (5, (1, 0)), (6, (0, 1)), (9, (1, 1))])
def test_index_examples(i, kl):
    assert haar.index_to_kl(i) == kl
    assert haar.kl_to_index(*kl) == i


def test_index_round_trip():
    seen = set()
    for i in range(1, 2000):
        k, l = haar.index_to_kl(i)
        assert l >= -1 and k >= 0
        assert haar.kl_to_index(k, l) == i
        seen.add((k, l))
    assert len(seen) == 1999


@pytest.mark.parametrize("i,x,val", [(3, 0.25, 1.0), (3, 0.75, -1.0), (1, 1.0, 0.0),
                                     (6, 0.1, np.sqrt(2)), (6, 0.3, -np.sqrt(2)), (6, 0.6, 0.0)])
def test_eval_f(i, x, val):
    assert haar.eval_f(i, x) == pytest.approx(val, abs=1e-15)


@pytest.mark.parametrize("i,y,val", [(1, 0.5, 0.5), (3, 0.0, 0.0), (3, 0.5, -0.5), (1, 2.0, 0.0),
                                     (2, 0.3, 1.0), (3, 0.25, -0.25)])
def test_eval_F(i, y, val):
    assert haar.eval_F(i, y) == pytest.approx(val, abs=1e-15)


def test_F_matches_numerical_tail_integral():
    # independent route: midpoint sum of f_i over [y, 10] on a fine dyadic grid
    x = (np.arange(10 * 2**14) + 0.5) / 2**14
    for i in range(1, 40):
        f = haar.eval_f(i, x)
        for y in (0.0, 0.125, 0.3, 0.5, 0.8125, 1.0, 1.7, 2.5):
            oracle = f[x >= y].sum() / 2**14
            assert haar.eval_F(i, y) == pytest.approx(oracle, abs=2e-4)


@pytest.mark.parametrize("i,y,dx,val", [(1, 0.57, 0.1, 0.5), (1, 0.5, 0.1, 0.5), (3, 0.99, 0.25, -0.25)])
def test_eval_F_grid(i, y, dx, val):
    assert haar.eval_F_grid(i, y, dx) == pytest.approx(val, abs=1e-15)


def test_index_set_examples():
    assert haar.index_set(1, 0) == [1, 3]
    assert haar.index_set(2, -1) == [1, 2]
    assert haar.index_set(1, 1) == [1, 3, 6, 9]


def test_index_set_membership():
    for m in (1, 2, 3):
        for l_max in (-1, 0, 1, 2, 3):
            got = haar.index_set(m, l_max)
            assert got == sorted(got)
            brute = []
            for i in range(1, 400):
                k, l = haar.index_to_kl(i)
                lo, _ = haar.support_of(k, l)
                if l <= l_max and lo < m:
                    brute.append(i)
            assert got == brute


def test_tail_subset_examples():
    J, l0 = haar.tail_subset(1, 0.25)
    assert l0 == 2 and J == haar.index_set(1, 2)
    assert haar.tail_subset(1, 1.0)[1] == 0
    assert haar.tail_subset(2, 2.0**-5)[1] == 5
    assert haar.tail_level(0.3) == 2


def test_gram_orthonormal_to_200():
    idx = list(range(1, 201))
    g = haar.gram_matrix(idx)
    assert np.max(np.abs(g - np.eye(200))) <= 1e-12
    for i, j in [(1, 1), (3, 6), (6, 9), (17, 17), (40, 3)]:
        assert haar.inner_ff(i, j) == pytest.approx(float(i == j), abs=1e-12)


def test_F_bound_and_single_nonzero_per_level():
    y = np.linspace(0, 4, 4097)
    idx = list(range(1, 300))
    F = haar.F_matrix(idx, y)
    lev = haar.levels(idx)
    bound = np.where(lev < 0, 1.0, 2.0 ** (-np.maximum(lev, 0) / 2.0))
    assert np.all(np.abs(F) <= bound[None, :] + 1e-15)
    for l in range(0, lev.max() + 1):
        assert np.all(np.count_nonzero(F[:, lev == l], axis=1) <= 1)


@pytest.mark.parametrize("l0", range(1, 9))
@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_tail_bound(m, l0):
    eps = 2.0 ** (-l0)
    J, got = haar.tail_subset(m, eps)
    assert got == l0
    # brute force over every tail index of levels l0+1..L, one level at a time;
    # levels above L add at most 2^-L / 4
    L = l0 + 2
    y = np.unique(np.concatenate([np.linspace(0, m, 2001), np.arange(m * 2**(l0 + 2) + 1) / 2**(l0 + 2)]))
    brute = np.zeros_like(y)
    snapped = np.zeros_like(y)
    for l in range(l0 + 1, L + 1):
        level_idx = [haar.kl_to_index(k, l) for k in range(m * 2**l)]
        assert not set(level_idx) & set(J)
        brute += np.sum(haar.F_matrix(level_idx, y) ** 2, axis=1)
        snapped += np.sum(haar.F_matrix(level_idx, y, 2.0**-(l0 + 2)) ** 2, axis=1)
    assert brute.max() + 2.0**-L / 4 <= eps
    assert snapped.max() + 2.0**-L / 4 <= eps
    assert np.max(np.abs(haar.tail_mass(m, l0, y, l_cap=L) - brute)) <= 1e-12


def test_project_step_function_examples():
    assert haar.project_step_function(np.ones(4), 0.25, [3])[0] == pytest.approx(0.0, abs=1e-15)
    assert haar.project_step_function(np.ones(4), 0.25, [1])[0] == pytest.approx(1.0)
    assert haar.project_step_function([1, 1, 0, 0], 0.25, [3])[0] == pytest.approx(0.5)
    with pytest.raises(haar.GridAlignmentError):
        haar.project_step_function(np.ones(4), 0.25, [2])


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 3), l_max=st.integers(0, 5), data=st.data())
def test_parseval_on_dyadic_steps(m, l_max, data):
    n_cells = m * 2**l_max
    vals = np.array(data.draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=n_cells,
                                       max_size=n_cells)))
    coef = haar.project_step_function(vals, 2.0**-l_max, haar.index_set(m, l_max))
    norm2 = haar.step_function_norm2(vals, 2.0**-l_max)
    assert np.sum(coef**2) == pytest.approx(norm2, rel=1e-10, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(i=st.integers(1, 500), y=st.floats(0, 30))
def test_F_grid_is_snapped_F(i, y):
    dx = 1 / 64
    assert haar.eval_F_grid(i, y, dx) == haar.eval_F(i, np.floor(y * 64 + 1e-9) / 64)
    assert abs(haar.eval_F(i, y)) <= 1.0
