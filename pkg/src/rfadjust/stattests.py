"""Two-sample tests of values against a 0/1 assignment, and OLS residuals.

Sidedness follows the treatment arm: ``"greater"`` is the alternative that
treated values are stochastically larger than control values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import ResidualVector

__all__ = [
    "TestResult",
    "SIDES",
    "ENUMERATION_CAP",
    "t_test",
    "wilcoxon_rank_sum",
    "permutation_test",
    "ols_residuals",
    "rank_sum_null_counts",
]

SIDES = ("two-sided", "greater", "less")
ENUMERATION_CAP = 200_000
PERMUTATION_BATCH = 10_000


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    sided: str
    method: str
    exact: bool = False
    n_resamples: int = 0
    degenerate: bool = False
    df: float | None = None

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "sided": self.sided,
            "method": self.method,
            "exact": self.exact,
            "n_resamples": self.n_resamples,
            "degenerate": self.degenerate,
            "df": self.df,
        }


def _split(values, assignment, min_per_arm):
    v = np.asarray(values, dtype=np.float64)
    z = np.asarray(assignment)
    if v.ndim != 1 or z.shape != v.shape:
        raise ValueError(f"values {v.shape} and assignment {z.shape} must be equal-length vectors")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    zb = z.astype(np.float64)
    if not np.all((zb == 0) | (zb == 1)):
        raise ValueError("assignment must contain only 0 and 1")
    zb = zb == 1
    n1 = int(zb.sum())
    n0 = v.size - n1
    if n1 < min_per_arm or n0 < min_per_arm:
        raise ValueError(f"need at least {min_per_arm} values per arm (n1={n1}, n0={n0})")
    return v, zb, n1, n0


def _check_sided(sided):
    if sided not in SIDES:
        raise ValueError(f"sided must be one of {SIDES}, got {sided!r}")


def _p_from_cdf(sided, sf, cdf):
    if sided == "greater":
        return sf
    if sided == "less":
        return cdf
    return min(1.0, 2.0 * min(sf, cdf))


def t_test(values, assignment, sided="two-sided", variant="welch") -> TestResult:
    """Two-sample t test of treatment mean minus control mean.

    ``variant="welch"`` uses Welch-Satterthwaite degrees of freedom,
    ``"pooled"`` the equal-variance statistic with ``n - 2`` df.
    """
    _check_sided(sided)
    if variant not in ("welch", "pooled"):
        raise ValueError(f"variant must be 'welch' or 'pooled', got {variant!r}")
    v, z, n1, n0 = _split(values, assignment, 2)
    x1, x0 = v[z], v[~z]
    diff = x1.mean() - x0.mean()
    s1, s0 = x1.var(ddof=1), x0.var(ddof=1)
    method = "welch-t" if variant == "welch" else "t"
    if variant == "pooled":
        df = float(n1 + n0 - 2)
        sp2 = ((n1 - 1) * s1 + (n0 - 1) * s0) / df
        se = math.sqrt(sp2 * (1.0 / n1 + 1.0 / n0))
    else:
        a, b = s1 / n1, s0 / n0
        se = math.sqrt(a + b)
        df = (a + b) ** 2 / (a * a / (n1 - 1) + b * b / (n0 - 1)) if se > 0 else float(n1 + n0 - 2)

    scale = max(1.0, float(np.max(np.abs(v))))
    if se <= 1e-14 * scale:
        if abs(diff) <= 1e-14 * scale:
            return TestResult(0.0, 1.0, sided, method, degenerate=True, df=df)
        stat = math.copysign(math.inf, diff)
        if sided == "two-sided":
            p = 0.0
        else:
            p = 0.0 if (diff > 0) == (sided == "greater") else 1.0
        return TestResult(stat, p, sided, method, degenerate=True, df=df)

    stat = diff / se
    p = _p_from_cdf(sided, float(stats.t.sf(stat, df)), float(stats.t.cdf(stat, df)))
    return TestResult(float(stat), p, sided, method, df=float(df))


def rank_sum_null_counts(n: int, k: int) -> np.ndarray:
    """``counts[s]`` = number of ``k``-subsets of ``{1..n}`` with sum ``s``."""
    max_sum = k * (2 * n - k + 1) // 2
    # counts[j, s] over subsets of the ranks seen so far
    counts = np.zeros((k + 1, max_sum + 1), dtype=np.int64)
    counts[0, 0] = 1
    for r in range(1, n + 1):
        for j in range(min(k, r), 0, -1):
            counts[j, r:] += counts[j - 1, :max_sum + 1 - r]
    return counts[k]


def wilcoxon_rank_sum(values, assignment, sided="two-sided") -> TestResult:
    """Wilcoxon rank-sum test; the statistic is the treatment-arm rank sum.

    Midranks are used for ties.  The null distribution is enumerated exactly
    when there are no ties and ``C(n, n1) <= 200000``; otherwise the normal
    approximation with continuity and tie corrections is used.  The
    continuity correction is half the spacing of attainable rank sums.
    """
    _check_sided(sided)
    v, z, n1, n0 = _split(values, assignment, 2)
    n = n1 + n0
    ranks = stats.rankdata(v)
    w = float(ranks[z].sum())
    mu = n1 * (n + 1) / 2.0
    _, tie_counts = np.unique(v, return_counts=True)
    has_ties = bool(np.any(tie_counts > 1))

    if not has_ties and math.comb(n, n1) <= ENUMERATION_CAP:
        # enumerate the smaller arm; W = total - W_other
        total = n * (n + 1) // 2
        k = min(n1, n0)
        counts = rank_sum_null_counts(n, k)
        sums = np.arange(counts.size)
        if k != n1:
            sums = total - sums
        w_int = int(round(w))
        # 2W - 2mu is an integer, so every comparison below is exact
        dev = np.abs(2 * sums - n1 * (n + 1))
        obs_dev = abs(2 * w_int - n1 * (n + 1))
        if sided == "greater":
            hits = counts[sums >= w_int].sum()
        elif sided == "less":
            hits = counts[sums <= w_int].sum()
        else:
            hits = counts[dev >= obs_dev].sum()
        denom = math.comb(n, n1)
        return TestResult(w, float(hits) / denom, sided, "wilcoxon", exact=True)

    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var = n1 * n0 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return TestResult(w, 1.0, sided, "wilcoxon", degenerate=True)
    sd = math.sqrt(var)
    d = w - mu
    # half the lattice step of W: even-sized tie groups put W on a 0.5 grid
    cc = 0.25 if np.any(tie_counts % 2 == 0) else 0.5
    if sided == "greater":
        p = float(stats.norm.sf((d - cc) / sd))
    elif sided == "less":
        p = float(stats.norm.cdf((d + cc) / sd))
    else:
        p = min(1.0, 2.0 * float(stats.norm.sf((abs(d) - cc) / sd)))
    return TestResult(w, p, sided, "wilcoxon")


def _extreme_count(stat_values, observed, sided, tol):
    if sided == "greater":
        return int(np.count_nonzero(stat_values >= observed - tol))
    if sided == "less":
        return int(np.count_nonzero(stat_values <= observed + tol))
    return int(np.count_nonzero(np.abs(stat_values) >= abs(observed) - tol))


def permutation_test(values, assignment, sided="two-sided", statistic="mean-difference",
                     mode="exact", n_resamples=10_000, seed=0) -> TestResult:
    """Randomization test of the difference in means under complete randomization.

    ``mode="exact"`` enumerates all ``C(n, n1)`` assignments (capped at
    200000).  ``mode="sampled"`` draws ``n_resamples`` assignments and reports
    ``(k + 1) / (m + 1)``, counting the observed assignment as one of the
    draws.  Draws come in fixed blocks of 10000, block ``b`` using the stream
    ``SeedSequence(seed, spawn_key=(b,))``.  ``mode="auto"`` picks exact when
    the enumeration fits under the cap.
    """
    _check_sided(sided)
    if statistic != "mean-difference":
        raise ValueError(f"unsupported statistic {statistic!r}")
    v, z, n1, n0 = _split(values, assignment, 1)
    n = n1 + n0
    total = v.sum()
    coef = 1.0 / n1 + 1.0 / n0

    def mean_diff(treated_sums):
        return treated_sums * coef - total / n0

    observed = float(v[z].mean() - v[~z].mean())
    tol = 1e-10 * max(1.0, float(np.max(np.abs(v)))) * n
    n_assign = math.comb(n, n1)
    if mode == "auto":
        mode = "exact" if n_assign <= ENUMERATION_CAP else "sampled"

    if mode == "exact":
        if n_assign > ENUMERATION_CAP:
            raise ValueError(
                f"exact enumeration needs C({n}, {n1}) = {n_assign} assignments, above the "
                f"cap of {ENUMERATION_CAP}; use mode='sampled'")
        combos = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n), n1)),
                             dtype=np.int64, count=n_assign * n1).reshape(n_assign, n1)
        sims = mean_diff(v[combos].sum(axis=1))
        hits = _extreme_count(sims, observed, sided, tol)
        return TestResult(observed, hits / n_assign, sided, "permutation", exact=True)

    if mode != "sampled":
        raise ValueError(f"mode must be 'exact', 'sampled' or 'auto', got {mode!r}")
    m = int(n_resamples)
    if m < 1:
        raise ValueError("n_resamples must be >= 1")
    hits = 0
    done = 0
    block = 0
    while done < m:
        size = min(PERMUTATION_BATCH, m - done)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(block,)))
        keys = rng.random((size, n))
        treated = np.argpartition(keys, n1 - 1, axis=1)[:, :n1]
        sims = mean_diff(v[treated].sum(axis=1))
        hits += _extreme_count(sims, observed, sided, tol)
        done += size
        block += 1
    return TestResult(observed, (hits + 1) / (m + 1), sided, "permutation", n_resamples=m)


def ols_residuals(X, Y) -> ResidualVector:
    """Residuals of the least-squares fit of ``Y`` on ``[1, X]``.

    Rank-deficient or saturated designs (``p + 1 >= n``) use the minimum-norm
    solution and set ``degenerate``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = Y.shape[0]
    if n < 1 or X.shape[0] != n:
        raise ValueError(f"X has {X.shape[0]} rows, Y has {n}")
    design = np.column_stack([np.ones(n), X])
    coef, _, rank, _ = np.linalg.lstsq(design, Y, rcond=None)
    resid = Y - design @ coef
    degenerate = rank < design.shape[1] or design.shape[1] >= n
    if degenerate:
        # saturated fits interpolate; clear round-off so the residuals are exactly flat
        scale = max(1.0, float(np.max(np.abs(Y))))
        resid = np.where(np.abs(resid) < 1e-10 * scale, 0.0, resid)
    return ResidualVector(resid, "ols", degenerate=bool(degenerate))

