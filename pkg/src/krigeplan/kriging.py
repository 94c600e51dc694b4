"""Ordinary kriging with a spherical variogram.

Distances are Euclidean in grid-cell units.  The variogram is evaluated with
gamma(0) = 0 even when the nugget is positive, so the interpolator is exact
at sampled locations and the kriging variance (KV) vanishes there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

JITTER = 1e-10
NOISE_STD = 1e-6  # noisy KV: b ~ N(0, 1e-12)
DEFAULT_N_LAGS = 6


class KrigingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VariogramParams:
    partial_sill: float
    range: float
    nugget: float

    def __post_init__(self):
        if not (self.partial_sill >= 0 and self.nugget >= 0 and self.range > 0):
            raise ValueError(f"invalid variogram parameters: {self}")

    def as_tuple(self):
        return (self.partial_sill, self.range, self.nugget)


@dataclass(frozen=True)
class EmpiricalVariogram:
    lag_centers: tuple
    semivariances: tuple
    pair_counts: tuple

    def __post_init__(self):
        n = len(self.lag_centers)
        if len(self.semivariances) != n or len(self.pair_counts) != n:
            raise ValueError("lag, semivariance and count lists differ in length")
        if n > 1 and np.any(np.diff(self.lag_centers) <= 0):
            raise ValueError("lag centers must be strictly increasing")


@dataclass(frozen=True)
class SampleSet:
    """Ordered observations: the path so far and the values read along it."""

    locations: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        locs = tuple(tuple(float(c) for c in loc) for loc in self.locations)
        vals = tuple(float(v) for v in self.values)
        if len(locs) != len(vals):
            raise ValueError("locations and values differ in length")
        if len(set(locs)) != len(locs):
            raise ValueError("duplicate sample locations")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def append(self, location, value) -> "SampleSet":
        return SampleSet(self.locations + (tuple(location),), self.values + (value,))

    @property
    def coords(self) -> np.ndarray:
        return np.asarray(self.locations, dtype=float).reshape(-1, 2)

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class PredictionMap:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def shape(self):
        return self.mean.shape


def spherical_gamma(h, params: VariogramParams):
    """Spherical variogram; accepts scalars or arrays of distances."""
    p, r, n = params.as_tuple()
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distance must be non-negative")
    hr = np.minimum(h / r, 1.0)
    g = p * (1.5 * hr - 0.5 * hr**3) + n
    g = np.where(h == 0, 0.0, g)
    return float(g) if g.ndim == 0 else g


def empirical_semivariogram(samples: SampleSet, n_lags: int = DEFAULT_N_LAGS) -> EmpiricalVariogram:
    """Matheron estimator over equal-width distance bins.

    Each bin is reported at the mean distance of the pairs falling in it, and
    empty bins are omitted.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    if n_lags < 1:
        raise ValueError("n_lags must be >= 1")
    d = pdist(samples.coords)
    z = samples.z
    i, j = np.triu_indices(len(z), k=1)
    sq = 0.5 * (z[i] - z[j]) ** 2
    dmax = d.max()
    if dmax <= 0:
        raise ValueError("all samples share one location")
    width = dmax / n_lags
    idx = np.minimum((d / width).astype(int), n_lags - 1)
    lags, gammas, counts = [], [], []
    for b in range(n_lags):
        m = idx == b
        c = int(m.sum())
        if c == 0:
            continue
        lags.append(float(d[m].mean()))
        gammas.append(float(sq[m].mean()))
        counts.append(c)
    return EmpiricalVariogram(tuple(lags), tuple(gammas), tuple(counts))


def _box_lsq2(a, b, y, w, hi):
    """min_{p,n} sum w (p a + n b - y)^2 with 0 <= p <= hi[0], 0 <= n <= hi[1].

    ``a`` has one row per candidate range (shape G x L); ``b`` is the constant
    nugget column.  The problem is a convex 2-variable QP, so its optimum is the
    unconstrained solution when feasible, otherwise the best edge solution.
    Returns (p, n, cost), each of length G.
    """
    sw = w[None, :]
    saa = np.sum(sw * a * a, axis=1)
    sab = np.sum(sw * a * b, axis=1)
    sbb = np.sum(w * b * b)
    say = np.sum(sw * a * y, axis=1)
    sby = np.sum(w * b * y)

    def cost(p, n):
        r = p[:, None] * a + n[:, None] * b[None, :] - y[None, :]
        return np.sum(sw * r * r, axis=1)

    cands = []
    det = saa * sbb - sab**2
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(det > 0, (say * sbb - sab * sby) / det, -1.0)
        n = np.where(det > 0, (saa * sby - sab * say) / det, -1.0)
        ok = (p >= 0) & (p <= hi[0]) & (n >= 0) & (n <= hi[1])
        cands.append((p, n, np.where(ok, cost(p, n), np.inf)))
        for n_fix in (0.0, hi[1]):
            n_e = np.full_like(saa, n_fix)
            p_e = np.clip(np.where(saa > 0, (say - n_fix * sab) / saa, 0.0), 0.0, hi[0])
            cands.append((p_e, n_e, cost(p_e, n_e)))
        for p_fix in (0.0, hi[0]):
            p_e = np.full_like(saa, p_fix)
            n_e = np.clip((sby - p_fix * sab) / sbb, 0.0, hi[1])
            cands.append((p_e, n_e, cost(p_e, n_e)))
    ps = np.stack([c[0] for c in cands])
    ns = np.stack([c[1] for c in cands])
    cs = np.stack([c[2] for c in cands])
    k = np.argmin(cs, axis=0)
    idx = np.arange(a.shape[0])
    return ps[k, idx], ns[k, idx], cs[k, idx]


N_RANGE_GRID = 256
REFINE_ROUNDS = 10


def fit_spherical(emp: EmpiricalVariogram, sill_guess: float | None = None) -> VariogramParams:
    """Weighted least-squares fit of (partial sill, range, nugget).

    Residuals are weighted by the square root of the pair counts.  For a fixed
    range the model is linear in sill and nugget, so those are solved exactly
    (with bounds) and only the range is searched, on a grid that is refined
    around the best point.  The fit runs on
    semivariances divided by their maximum, which makes it covariant under
    rescaling of the observations.  ``sill_guess`` is accepted for API
    compatibility; the profiled search needs no starting point.
    """
    lags = np.asarray(emp.lag_centers, dtype=float)
    sv = np.asarray(emp.semivariances, dtype=float)
    counts = np.asarray(emp.pair_counts, dtype=float)
    if len(lags) == 0:
        raise ValueError("empty variogram")
    if len(lags) == 1:
        return VariogramParams(max(sv[0], 0.0), max(lags[0], 1e-12), 0.0)
    max_lag = lags.max()
    scale = sv.max()
    if scale <= 0:
        return VariogramParams(0.0, float(max_lag), 0.0)

    y = sv / scale
    w = counts  # squared sqrt(count) weights
    hi = (10.0, 1.0)
    r_lo, r_hi = 1e-3 * max_lag, 2.0 * max_lag
    ones = np.ones_like(lags)

    def basis(r):
        hr = np.minimum(lags[None, :] / np.asarray(r, dtype=float).reshape(-1, 1), 1.0)
        return 1.5 * hr - 0.5 * hr**3

    def costs(rs):
        return _box_lsq2(basis(rs), ones, y, w, hi)[2]

    # Coarse grid, then repeated local refinement.  The profile can be exactly
    # flat in r (e.g. when no lag falls between two candidate ranges); ties
    # within a relative 1e-9 go to the shortest range, which keeps the result
    # stable under round-off.
    lo, up, n_pts = r_lo, r_hi, N_RANGE_GRID
    for _ in range(REFINE_ROUNDS):
        grid = np.linspace(lo, up, n_pts)
        c = costs(grid)
        k = int(np.flatnonzero(c <= c.min() * (1 + 1e-9) + 1e-21)[0])
        r = float(grid[k])
        lo, up, n_pts = grid[max(k - 1, 0)], grid[min(k + 1, n_pts - 1)], 33
    p, n, _ = _box_lsq2(basis(r), ones, y, w, hi)
    return VariogramParams(float(p[0]) * scale, r, float(n[0]) * scale)


def fit_samples(samples: SampleSet, n_lags: int = DEFAULT_N_LAGS) -> VariogramParams:
    """Empirical variogram plus spherical fit, seeded with the sample variance."""
    emp = empirical_semivariogram(samples, n_lags)
    return fit_spherical(emp, sill_guess=float(np.var(samples.z)))


def _ok_matrix(coords, params):
    t = len(coords)
    a = np.zeros((t + 1, t + 1))
    a[:t, :t] = spherical_gamma(squareform(pdist(coords)), params) if t > 1 else 0.0
    a[:t, t] = 1.0
    a[t, :t] = 1.0
    return a


def _solve(a, rhs):
    t = a.shape[0] - 1
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        pass
    a = a.copy()
    a[np.arange(t), np.arange(t)] += JITTER
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise KrigingError("ordinary kriging system is singular") from exc


def _gamma_to(samples, target, params):
    d = cdist(samples.coords, np.asarray(target, dtype=float).reshape(1, 2))[:, 0]
    return spherical_gamma(d, params)


def solve_ok_weights(samples: SampleSet, target, params: VariogramParams):
    """Solve the augmented OK system for one target; returns (weights, lagrange)."""
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    rhs = np.append(_gamma_to(samples, target, params), 1.0)
    sol = _solve(_ok_matrix(samples.coords, params), rhs)
    return sol[:-1], float(sol[-1])


def predict_point(samples: SampleSet, target, params: VariogramParams):
    w, lam = solve_ok_weights(samples, target, params)
    g0 = _gamma_to(samples, target, params)
    mean = float(w @ samples.z)
    kv = lam + float(w @ g0)
    return mean, max(kv, 0.0)


def grid_points(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.column_stack([rr.ravel(), cc.ravel()]).astype(float)


def predict_targets(samples: SampleSet, targets: np.ndarray, params: VariogramParams,
                    clamp: bool = True):
    """Kriging mean and KV at many targets with a single factorisation."""
    coords = samples.coords
    t = len(coords)
    g0 = spherical_gamma(cdist(coords, targets), params).reshape(t, -1)
    rhs = np.vstack([g0, np.ones((1, g0.shape[1]))])
    sol = _solve(_ok_matrix(coords, params), rhs)
    w, lam = sol[:-1], sol[-1]
    mean = samples.z @ w
    kv = lam + np.einsum("ij,ij->j", w, g0)
    if clamp:
        kv = np.maximum(kv, 0.0)
    return mean, kv


def predict_map(samples: SampleSet, h: int, w: int, params: VariogramParams,
                chunk: int | None = None) -> PredictionMap:
    """Kriging mean and KV for every cell of an h x w grid.

    Cells are independent given the samples, so ``chunk`` may be used to
    evaluate them in blocks (or hand blocks to separate workers).
    """
    pts = grid_points(h, w)
    if chunk is None:
        mean, kv = predict_targets(samples, pts, params)
    else:
        parts = [predict_targets(samples, pts[i:i + chunk], params)
                 for i in range(0, len(pts), chunk)]
        mean = np.concatenate([p[0] for p in parts])
        kv = np.concatenate([p[1] for p in parts])
    return PredictionMap(mean.reshape(h, w), kv.reshape(h, w))


def noisy_kv(variance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return variance + rng.normal(0.0, NOISE_STD, size=np.shape(variance))

