import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krigeplan.kriging import (EmpiricalVariogram, SampleSet, VariogramParams, empirical_semivariogram,
                               fit_samples, fit_spherical, noisy_kv, predict_map, predict_point, predict_targets,
                               solve_ok_weights, spherical_gamma)


def gauss_solve(a, b):
    """Gaussian elimination with partial pivoting, plain Python lists."""
    n = len(b)
    m = [list(map(float, row)) + [float(v)] for row, v in zip(a, b)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0.0] * n
    for r in reversed(range(n)):
        x[r] = (m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))) / m[r][r]
    return x


def oracle(coords, values, target, params):
    t = len(coords)
    a = [[0.0] * (t + 1) for _ in range(t + 1)]
    b = [0.0] * (t + 1)
    for i in range(t):
        for j in range(t):
            a[i][j] = spherical_gamma(math.dist(coords[i], coords[j]), params)
        a[i][t] = a[t][i] = 1.0
        b[i] = spherical_gamma(math.dist(coords[i], target), params)
    b[t] = 1.0
    x = gauss_solve(a, b)
    w, lam = np.array(x[:t]), x[t]
    return w, lam, float(w @ values), lam + float(w @ np.array(b[:t]))


def random_fixture(rng, t, size=32):
    cells = rng.choice(size * size, size=t + 1, replace=False)
    coords = [(int(c // size), int(c % size)) for c in cells[:t]]
    target = (int(cells[t] // size), int(cells[t] % size))
    params = VariogramParams(rng.uniform(0.1, 3), rng.uniform(1, 30), rng.uniform(0, 0.5))
    return SampleSet(coords, rng.normal(size=t)), target, params


class TestSpherical:
    P = VariogramParams(2.0, 5.0, 0.3)

    def test_zero(self):
        assert spherical_gamma(0.0, self.P) == 0.0

    def test_at_range(self):
        assert spherical_gamma(5.0, self.P) == pytest.approx(2.3)

    def test_beyond_range(self):
        assert spherical_gamma(10.0, self.P) == pytest.approx(2.3)

    def test_interior(self):
        h = 2.0
        assert spherical_gamma(h, self.P) == pytest.approx(2.0 * (1.5 * 0.4 - 0.5 * 0.4**3) + 0.3)

    def test_array(self):
        out = spherical_gamma(np.array([0.0, 5.0]), self.P)
        assert out.tolist() == pytest.approx([0.0, 2.3])

    def test_negative_distance(self):
        with pytest.raises(ValueError):
            spherical_gamma(-1.0, self.P)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            VariogramParams(1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            VariogramParams(-1.0, 1.0, 0.0)


class TestEmpirical:
    def test_equal_values(self):
        emp = empirical_semivariogram(SampleSet([(0, 0), (3, 4)], [1.0, 1.0]))
        assert emp.semivariances == (0.0,)

    def test_two_samples(self):
        emp = empirical_semivariogram(SampleSet([(0, 0), (3, 4)], [0.0, 2.0]))
        assert emp.lag_centers == (5.0,) and emp.semivariances == (2.0,) and emp.pair_counts == (1,)

    def test_collinear_three(self):
        emp = empirical_semivariogram(SampleSet([(0, 0), (0, 3), (0, 6)], [0.0, 1.0, 2.0]))
        assert emp.lag_centers == pytest.approx((3.0, 6.0))
        assert emp.semivariances == pytest.approx((0.5, 2.0))
        assert emp.pair_counts == (2, 1)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            empirical_semivariogram(SampleSet([(0, 0)], [1.0]))


class TestFit:
    def test_recovers_model(self):
        truth = VariogramParams(1.0, 10.0, 0.1)
        lags = np.arange(1, 9) * 2.0
        emp = EmpiricalVariogram(tuple(lags), tuple(spherical_gamma(lags, truth)), (30,) * 8)
        fit = fit_spherical(emp)
        assert fit.as_tuple() == pytest.approx(truth.as_tuple(), abs=1e-3)

    def test_flat(self):
        fit = fit_spherical(EmpiricalVariogram((1.0, 2.0, 3.0), (0.0, 0.0, 0.0), (3, 3, 3)))
        assert fit.partial_sill == 0.0 and fit.nugget == 0.0

    def test_single_bin(self):
        fit = fit_spherical(EmpiricalVariogram((4.0,), (0.5,), (1,)))
        assert fit.as_tuple() == (0.5, 4.0, 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 50.0))
    def test_scale_covariance(self, seed, c):
        rng = np.random.default_rng(seed)
        cells = rng.choice(256, size=8, replace=False)
        locs = [(int(k // 16), int(k % 16)) for k in cells]
        z = rng.normal(size=8)
        s1, s2 = SampleSet(locs, z), SampleSet(locs, c * z)
        p1, p2 = fit_samples(s1), fit_samples(s2)
        # the fit sees identical normalised data up to round-off; the optimiser's
        # stopping point can move by ~1e-6 relative along flat directions
        assert p2.range == pytest.approx(p1.range, rel=1e-4)
        assert p2.partial_sill == pytest.approx(c * c * p1.partial_sill, rel=1e-4, abs=1e-12)
        target = (int(rng.integers(16)), int(rng.integers(16)))
        m1, _ = predict_point(s1, target, p1)
        m2, _ = predict_point(s2, target, p2)
        assert m2 == pytest.approx(c * m1, rel=1e-6, abs=1e-9)


class TestWeights:
    def test_single_sample(self):
        s = SampleSet([(2, 3)], [7.5])
        w, _ = solve_ok_weights(s, (10, 10), VariogramParams(1, 5, 0))
        assert w.tolist() == [1.0]
        assert predict_point(s, (10, 10), VariogramParams(1, 5, 0))[0] == 7.5

    def test_equidistant(self):
        s = SampleSet([(0, 0), (0, 4)], [1.0, 3.0])
        w, _ = solve_ok_weights(s, (3, 2), VariogramParams(1.3, 7, 0.2))
        assert w == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_oracle_t3(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s, target, params = random_fixture(rng, 3)
            w, lam = solve_ok_weights(s, target, params)
            ow, olam, omean, okv = oracle(s.coords.tolist(), s.z, target, params)
            assert np.max(np.abs(w - ow)) < 1e-8 and abs(lam - olam) < 1e-8
            mean, kv = predict_point(s, target, params)
            assert abs(mean - omean) < 1e-8 and abs(kv - max(okv, 0.0)) < 1e-8

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 15))
    def test_weights_sum_to_one(self, seed, t):
        s, target, params = random_fixture(np.random.default_rng(seed), t)
        w, _ = solve_ok_weights(s, target, params)
        assert abs(w.sum() - 1.0) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_permutation_invariance(self, seed, t):
        rng = np.random.default_rng(seed)
        s, target, params = random_fixture(rng, t)
        perm = rng.permutation(t)
        s2 = SampleSet([s.locations[i] for i in perm], [s.values[i] for i in perm])
        a, b = predict_point(s, target, params), predict_point(s2, target, params)
        assert a == pytest.approx(b, abs=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 10))
    def test_kv_nonnegative_before_clamp(self, seed, t):
        s, _, params = random_fixture(np.random.default_rng(seed), t)
        _, kv = predict_targets(s, np.array([[r, c] for r in range(0, 32, 3) for c in range(0, 32, 3)], float),
                                params, clamp=False)
        assert kv.min() >= -1e-9


class TestPredict:
    def test_exact_at_samples(self):
        rng = np.random.default_rng(2)
        s, _, params = random_fixture(rng, 6)
        for loc, z in zip(s.locations, s.values):
            mean, kv = predict_point(s, loc, params)
            assert mean == pytest.approx(z, abs=1e-8) and kv <= 1e-8

    def test_map_exact_and_shape(self):
        s = SampleSet([(1, 1), (2, 2), (3, 3), (10, 4)], [0.1, 0.5, 0.2, 0.9])
        pm = predict_map(s, 12, 9, fit_samples(s))
        assert pm.shape == (12, 9)
        for (r, c), z in zip(s.locations, s.values):
            assert pm.mean[int(r), int(c)] == pytest.approx(z, abs=1e-8)
            assert pm.variance[int(r), int(c)] <= 1e-8

    def test_single_sample_variance_profile(self):
        params = VariogramParams(1.0, 6.0, 0.2)
        s = SampleSet([(0, 0)], [3.0])
        pm = predict_map(s, 1, 20, params)
        # KV = 2 gamma(h) for a lone sample: rises to the range, then flat
        expect = 2 * spherical_gamma(np.arange(20.0), params)
        assert pm.variance[0] == pytest.approx(expect, abs=1e-12)
        assert np.all(np.diff(pm.variance[0, :7]) > 0) and np.ptp(pm.variance[0, 6:]) < 1e-12
        assert np.all(pm.mean == 3.0)

    def test_flat_samples(self):
        s = SampleSet([(0, 0), (5, 1), (2, 7)], [0.4, 0.4, 0.4])
        pm = predict_map(s, 8, 8, VariogramParams(1, 4, 0))
        assert np.allclose(pm.mean, 0.4, atol=1e-12)

    def test_chunked_matches(self):
        s = SampleSet([(1, 1), (2, 2), (3, 3), (6, 0)], [0.1, 0.5, 0.2, 0.7])
        p = fit_samples(s)
        a, b = predict_map(s, 10, 10, p), predict_map(s, 10, 10, p, chunk=7)
        assert np.allclose(a.mean, b.mean, atol=1e-13) and np.allclose(a.variance, b.variance, atol=1e-13)


class TestNoise:
    def test_bounded(self):
        v = np.zeros((32, 32))
        assert np.abs(noisy_kv(v, np.random.default_rng(0))).max() < 1e-5

    def test_deterministic(self):
        v = np.random.default_rng(0).random((8, 8))
        assert np.array_equal(noisy_kv(v, np.random.default_rng(9)), noisy_kv(v, np.random.default_rng(9)))

    def test_mean_clt(self):
        v = np.zeros((32, 32))
        means = [noisy_kv(v, np.random.default_rng(s)).mean() for s in range(100)]
        assert np.all(np.abs(means) <= 3 * 1e-6 / 32 * 1.5)
        assert abs(np.mean(means)) <= 3 * 1e-6 / 32 / 10
