import dataclasses
import math

import numpy as np
import pytest

from lobdiff import coefficients as co
from lobdiff import haar
from lobdiff.model import (DensityTerm, InitialProfile, ScalingParams, SeparableDensity, make_example_1,
                           make_example_2)

# <h F_i> and <g F_i^2> for the first-example limit at b = 1, coupling 0.3,
# from 30-digit adaptive quadrature of the closed-form F_i (independent of the package)
EX1_MU = [-0.076189397455387802, -0.091535580865255994, 0.021572097028355627, -0.12506342709790673,
          0.005735327769505486, 0.015916737415882948, -0.14887621451031857, 0.008181104476028865,
          5.4913867056985709e-5]
EX1_SIG2 = [0.26424111765711536, 0.72932943352677462, 0.05117979823184851, 0.90042586326427211,
            0.018827995572799602, 0.016275795006656569, 0.96336872222253164, 0.0069264324896999075,
            0.0098717686827349938]
EX1_G31 = -0.083833096795015628


def unit_box(s, y):
    return np.where((np.asarray(y) >= 0) & (np.asarray(y) <= 1), 1.0, 0.0) + 0.0 * np.asarray(s)[..., :1].sum()


def box_spec():
    base = make_example_1(None)
    box = SeparableDensity((DensityTerm(lambda f: np.ones_like(f[..., 0]),
                                        lambda b, y: np.where(y <= 1.0, 1.0, 0.0) * np.ones_like(b)),))
    return dataclasses.replace(base, h=box, g=box, y_max=1.0)


FEATS = np.array([1.0, 0.0, 0.3])


def test_integrate_examples():
    dens = lambda s, y: np.where(np.asarray(y) <= 1.0, 1.0, 0.0)
    assert co.integrate_density_basis(dens, None, [1], y_max=1.0) == pytest.approx(0.5, abs=1e-13)
    assert co.integrate_density_basis(dens, None, [1, 1], y_max=1.0) == pytest.approx(1 / 3, abs=1e-13)
    const = lambda s, y: 2.5 * np.ones_like(np.asarray(y, dtype=float))
    # F_3 is the nonpositive tent on [0, 1], so its integral is -1/4
    assert co.integrate_density_basis(const, None, [3]) == pytest.approx(-2.5 / 4, abs=1e-13)
    # F_2 is 1 on [0, 1], so indicator blocks still overlap through their tails
    assert co.integrate_density_basis(dens, None, [1, 2], y_max=1.0) == pytest.approx(0.5, abs=1e-13)
    # level-0 tents on [0, 1] and [1, 2] are disjoint
    assert co.integrate_density_basis(const, None, [3, 5]) == 0.0


def test_gauss_legendre_exactness():
    # degree 14 density against a linear factor, degree 13 against two
    d14 = lambda s, y: np.asarray(y, dtype=float) ** 14
    assert co.integrate_density_basis(d14, None, [1]) == pytest.approx(1 / 240, abs=1e-13)
    d13 = lambda s, y: np.asarray(y, dtype=float) ** 13
    # int_0^1/2 y^15 dy + int_1/2^1 y^13 (1-y)^2 dy
    exact = 0.5**16 / 16 + sum(cf * (1 - 0.5 ** (13 + p + 1)) / (13 + p + 1)
                               for cf, p in ((1, 0), (-2, 1), (1, 2)))
    assert co.integrate_density_basis(d13, None, [3, 3]) == pytest.approx(exact, abs=1e-13)
    y, w = co.gl_panels(np.array([0.0, 0.3, 1.0]))
    assert np.dot(y**15, w) == pytest.approx(1 / 16, abs=1e-14)


def test_non_finite_density_raises():
    with pytest.raises(co.QuadratureError):
        co.integrate_density_basis(lambda s, y: np.full(np.shape(y), np.nan), None, [1])


def test_box_density_coefficients():
    spec = box_spec()
    assert co.mu_i(spec, FEATS, 1) == pytest.approx(0.5, abs=1e-12)
    assert co.sigma_i(spec, FEATS, 1) == pytest.approx(math.sqrt(1 / 3), abs=1e-12)
    # int F_3 F_1 over [0, 1] = -(int_0^1/2 y(1-y) + int_1/2^1 (1-y)^2) = -(1/12 + 1/24)
    s3 = math.sqrt(1 / 12)
    assert co.sigma_i(spec, FEATS, 3) == pytest.approx(s3, abs=1e-12)
    assert co.rho_ij(spec, FEATS, 3, 1) == pytest.approx(-(1 / 12 + 1 / 24) / (s3 * math.sqrt(1 / 3)), abs=1e-12)
    assert co.rho_ij(spec, FEATS, 2, 1) == pytest.approx(math.sqrt(3) / 2, abs=1e-12)
    assert co.rho_ij(spec, FEATS, 5, 3) == 0.0
    assert co.rho_ij(spec, FEATS, 3, 3) == 1.0


def test_zero_first_moment_density():
    spec = dataclasses.replace(make_example_1(None), h=None)
    assert co.mu_i(spec, FEATS, 4) == 0.0


def test_example_1_limit_against_oracle():
    spec = make_example_1(None)
    for i, (m, s2) in enumerate(zip(EX1_MU, EX1_SIG2), start=1):
        assert co.mu_i(spec, FEATS, i) == pytest.approx(m, abs=1e-12)
        assert co.sigma_i(spec, FEATS, i) ** 2 == pytest.approx(s2, abs=1e-12)
    assert EX1_SIG2[0] == pytest.approx(1 - 2 / math.e, abs=1e-15)
    r31 = co.rho_ij(spec, FEATS, 3, 1)
    assert r31 == pytest.approx(EX1_G31 / math.sqrt(EX1_SIG2[0] * EX1_SIG2[2]), abs=1e-12)


def test_engine_agrees_with_scalar_route():
    idx = list(range(1, 10))
    for spec, pre in ((make_example_1(None), False), (make_example_1(ScalingParams(0.05, 0.1)), True),
                      (make_example_2(None), False), (make_example_2(ScalingParams(0.05, 0.1)), True)):
        eng = co.CoefficientEngine(spec, idx, pre_limit=pre)
        for b in (0.0, 0.55, 1.0):
            f = np.array([b, 0.1, -0.2])
            mu, sig, c, zero, d = eng.factors(f)
            ref_mu = [co.mu_i(spec, f, i, pre) for i in idx]
            ref_sig = [co.sigma_i(spec, f, i, pre) for i in idx]
            assert np.max(np.abs(mu[0] - ref_mu)) <= 1e-10
            assert np.max(np.abs(sig[0] - ref_sig)) <= 1e-10
            ref_d = co.d_matrix(spec, f, idx, pre).values
            assert np.max(np.abs(d[0] - ref_d)) <= 1e-8


def test_engine_limit_matches_oracle():
    eng = co.CoefficientEngine(make_example_1(None), list(range(1, 10)), pre_limit=False)
    mu, cov = eng.moments(FEATS)
    assert np.max(np.abs(mu[0] - EX1_MU)) <= 1e-12
    assert np.max(np.abs(np.diag(cov[0]) - EX1_SIG2)) <= 1e-12
    assert cov[0, 2, 0] == pytest.approx(EX1_G31, abs=1e-12)


def test_d_matrix_reproduces_covariance():
    spec = make_example_2(None)
    idx = haar.index_set(2, 3)
    eng = co.CoefficientEngine(spec, idx, pre_limit=False)
    feats = np.array([[0.3, 0.1, 0.2], [1.2, -0.4, 0.0], [0.0, 0.0, 0.5]])
    mu, cov = eng.moments(feats)
    _, sig, _, _, d = eng.factors(feats)
    assert np.max(np.abs(d @ np.swapaxes(d, -1, -2) - cov)) <= 1e-9
    assert np.all(np.triu(d, 1) == 0)
    # sigma bound: sum of sigma_i^2 over the truncated set is at most m M^2
    assert np.all(np.sum(sig**2, axis=1) <= 2 * spec.M**2)


def test_d_matrix_two_by_two():
    c = co.decompose(np.array([[1.0, 0], [0.5, 1.0]]))
    d = np.array([1.0, 1.0])[:, None] * c.values
    assert d[1, 0] == pytest.approx(0.5) and d[1, 1] == pytest.approx(math.sqrt(0.75))


def test_pre_limit_converges_on_ladder():
    idx = list(range(1, 10))
    feats = np.array([0.8, 0.1, 0.2])
    lim_eng = co.CoefficientEngine(make_example_1(None), idx, pre_limit=False)
    lim_mu, lim_sig = lim_eng.factors(feats)[:2]
    errs = []
    # both the tick size and the price-event share shrink along the ladder
    for dx in (0.1, 0.05, 0.025):
        eng = co.CoefficientEngine(make_example_1(ScalingParams(dx, dx)), idx, pre_limit=True)
        mu, sig = eng.factors(feats)[:2]
        errs.append((np.max(np.abs(mu - lim_mu)), np.max(np.abs(sig - lim_sig))))
    for (m0, s0), (m1, s1) in zip(errs[:-1], errs[1:]):
        assert m1 < m0 and s1 < s0
    # first-order rate: each halving at least roughly halves the error
    assert errs[-1][1] <= 0.7 * errs[0][1] / 2


def test_sigma_sum_bound_example_1():
    spec = make_example_1(ScalingParams(0.02, 0.1))
    for m in (1, 2, 3):
        eng = co.CoefficientEngine(spec, haar.index_set(m, 4), pre_limit=True)
        st = InitialProfile("linear", 1.0).state(0.8, 0.02, 6.0)
        sig = eng.factors(spec.features(st))[1]
        assert np.sum(sig**2) <= m * spec.M**2


def test_coefficient_set_json():
    eng = co.CoefficientEngine(make_example_1(None), [1, 2, 3], pre_limit=False)
    cs = eng.coefficient_set(FEATS)
    text = cs.to_json()
    assert '"mu"' in text and '"d"' in text
    assert np.all(np.abs(cs.rho.values) <= 1)


def test_initial_coefficients_linear_profile():
    # V0(x) = x^2 / 2: <V0, f_1> = 1/6, <V0, f_3> = int_0^1/2 - int_1/2^1 of x^2/2 = -1/8
    got = co.initial_coefficients(lambda x: 0.5 * x * x, [1, 3])
    assert got == pytest.approx([1 / 6, -1 / 8], abs=1e-14)
