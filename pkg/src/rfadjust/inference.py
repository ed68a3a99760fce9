"""Forest-adjusted randomization tests and treatment-effect estimation.

The adjusted test of ``H0: tau = tau0`` runs four steps:

1. ``Y = R - tau0 * Z``;
2. fit a regression forest on ``(X, Y)``; the assignment is never a feature;
3. ``e = Y - oob_prediction``;
4. test ``e`` against ``Z`` and estimate the effect from ``e``.

Because the forest never sees ``Z``, the residuals are a fixed vector under
re-randomization, which is what keeps the tests valid.  Out-of-bag
predictions matter: in-sample predictions partly memorize each subject's own
outcome, including its treatment shift, and pull the estimate towards zero
(see :func:`overfitting_bias_diagnostic`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import forest as rf
from .data import ResidualVector, TrialDataset, adjusted_response
from .seeding import derive_seed, stream
from .stattests import TestResult, permutation_test, t_test, wilcoxon_rank_sum

__all__ = [
    "EffectEstimate",
    "AdjustedAnalysis",
    "BiasDiagnostic",
    "TEST_KINDS",
    "VARIANCE_CONVENTIONS",
    "rf_residuals",
    "rf_adjusted_test",
    "run_test",
    "estimate_effect",
    "variance_formula",
    "t_interval",
    "confidence_interval",
    "InversionError",
    "overfitting_bias_diagnostic",
    "cross_estimation",
    "cross_estimate_from_predictions",
    "sample_size_reduction",
]

TEST_KINDS = ("t", "wilcoxon", "permutation")
VARIANCE_CONVENTIONS = ("finite-population", "bernoulli")
_METHOD_BY_SOURCE = {
    "oob-forest": "rf-oob",
    "insample-forest": "rf-insample",
    "ols": "ols",
    "none": "unadjusted",
}


class InversionError(RuntimeError):
    """Test inversion could not bracket a confidence limit."""


@dataclass(frozen=True)
class EffectEstimate:
    tau_hat: float
    variance: float
    std_error: float
    method: str
    residual_source: str
    ci_level: float | None = None
    ci: tuple[float, float] | None = None
    variance_convention: str = "finite-population"

    def with_ci(self, level: float, ci: tuple[float, float]) -> "EffectEstimate":
        return EffectEstimate(self.tau_hat, self.variance, self.std_error, self.method,
                              self.residual_source, level, (float(ci[0]), float(ci[1])),
                              self.variance_convention)


@dataclass(frozen=True)
class AdjustedAnalysis:
    residuals: ResidualVector
    test: TestResult
    estimate: EffectEstimate
    tau0: float
    oob_r_squared: float
    never_oob_count: int
    importance: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    @property
    def forest_diagnostics(self) -> dict:
        return {
            "oob_r_squared": self.oob_r_squared,
            "never_oob_count": self.never_oob_count,
            "importance": [float(v) for v in self.importance],
        }

    def to_dict(self) -> dict:
        """The analysis JSON object."""
        ci = self.estimate.ci
        return {
            "method": f"{self.test.method}-rf",
            "p_value": self.test.p_value,
            "statistic": self.test.statistic,
            "sided": self.test.sided,
            "tau0": self.tau0,
            "tau_hat": self.estimate.tau_hat,
            "std_error": self.estimate.std_error,
            "ci": [ci[0], ci[1]] if ci is not None else None,
            "ci_level": self.estimate.ci_level,
            "oob_r_squared": self.oob_r_squared,
            "never_oob_count": self.never_oob_count,
            "importance": [float(v) for v in self.importance],
            "covariates": list(self.covariate_names),
            "residual_source": self.residuals.source,
            "variance_convention": self.estimate.variance_convention,
            "exact": self.test.exact,
            "n_resamples": self.test.n_resamples,
            "degenerate": self.test.degenerate or self.residuals.degenerate,
        }


@dataclass(frozen=True)
class BiasDiagnostic:
    tau_oob: float
    tau_insample: float


def _assignment_mask(assignment):
    z = np.asarray(assignment).astype(np.float64)
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("assignment must contain only 0 and 1")
    z = z == 1
    if z.all() or not z.any():
        raise ValueError("both arms must be nonempty")
    return z


def variance_formula(residuals, n1: int, n0: int, convention="finite-population") -> float:
    """Variance of the difference in mean residuals under re-randomization.

    ``"finite-population"``: ``n / ((n-1) n1 n0) * sum((e - mean(e))**2)``,
    the exact variance over all complete randomizations with ``e`` fixed.
    ``"bernoulli"``: ``sum(e**2) / (n1 n0)``, which is the variance
    under independent assignment with ``P(Z=1) = n1/n`` and uncentered
    residuals.
    """
    e = np.asarray(getattr(residuals, "values", residuals), dtype=np.float64)
    n1, n0 = int(n1), int(n0)
    if n1 < 1 or n0 < 1:
        raise ValueError(f"both arm sizes must be >= 1 (n1={n1}, n0={n0})")
    if convention == "bernoulli":
        return float(np.sum(e * e) / (n1 * n0))
    if convention == "finite-population":
        n = e.size
        if n != n1 + n0:
            raise ValueError(f"{n} residuals but n1 + n0 = {n1 + n0}")
        d = e - e.mean()
        return float(n / ((n - 1) * n1 * n0) * np.sum(d * d))
    raise ValueError(f"unknown variance convention {convention!r}")


def estimate_effect(residuals, assignment, convention="finite-population") -> EffectEstimate:
    """Difference in mean residuals (treatment minus control) and its variance."""
    if isinstance(residuals, ResidualVector):
        e, source = residuals.values, residuals.source
    else:
        e, source = np.asarray(residuals, dtype=np.float64), "none"
    z = _assignment_mask(assignment)
    if z.shape != e.shape:
        raise ValueError("residuals and assignment lengths differ")
    tau_hat = float(e[z].mean() - e[~z].mean())
    var = variance_formula(e, int(z.sum()), int((~z).sum()), convention)
    return EffectEstimate(tau_hat, var, math.sqrt(var), _METHOD_BY_SOURCE[source], source,
                          variance_convention=convention)


def t_interval(estimate: EffectEstimate, n: int, level: float) -> tuple[float, float]:
    """``tau_hat +/- t_{n-2} quantile * std_error``."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    q = float(stats.t.ppf(0.5 + level / 2.0, n - 2))
    half = q * estimate.std_error
    return estimate.tau_hat - half, estimate.tau_hat + half


def rf_residuals(X, Y, forest_config=None, source="oob-forest"):
    """Fit a forest on ``(X, Y)``; returns ``(ResidualVector, model)``."""
    model = rf.fit_forest(X, Y, forest_config)
    if source == "oob-forest":
        pred = rf.oob_predict(model, X)
    elif source == "insample-forest":
        pred = rf.insample_predict(model)
    else:
        raise ValueError(f"forest residual source must be oob or insample, got {source!r}")
    return ResidualVector(np.asarray(Y, dtype=np.float64) - pred, source), model


def run_test(values, assignment, test_kind, sided, t_variant="welch",
             permutation_mode="auto", n_resamples=10_000, seed=0) -> TestResult:
    """Dispatch one of the supported two-sample tests."""
    if test_kind == "t":
        return t_test(values, assignment, sided, t_variant)
    if test_kind == "wilcoxon":
        return wilcoxon_rank_sum(values, assignment, sided)
    if test_kind == "permutation":
        return permutation_test(values, assignment, sided, mode=permutation_mode,
                                n_resamples=n_resamples, seed=seed)
    raise ValueError(f"test_kind must be one of {TEST_KINDS}, got {test_kind!r}")


def _oob_r_squared(Y, e):
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum(e * e)) / ss_tot


def rf_adjusted_test(dataset: TrialDataset, tau0=0.0, test_kind="wilcoxon",
                     sided="two-sided", forest_config=None, ci_level=0.95,
                     variance_convention="finite-population", t_variant="welch",
                     permutation_mode="auto", n_resamples=10_000) -> AdjustedAnalysis:
    """Forest-adjusted test of ``H0: tau = tau0``.

    The effect estimate is reported in outcome units: the difference in mean
    residuals plus ``tau0``, with a t interval at ``ci_level`` (``None``
    skips the interval).  A sampled permutation test draws its resamples from
    a stream derived from the forest seed.
    """
    dataset.require_testable()
    cfg = forest_config or rf.ForestConfig()
    Y = adjusted_response(dataset, tau0)
    resid, model = rf_residuals(dataset.covariates, Y, cfg)
    test = run_test(resid.values, dataset.assignment, test_kind, sided, t_variant,
                    permutation_mode, n_resamples, seed=derive_seed(cfg.seed, 1))
    est = estimate_effect(resid, dataset.assignment, variance_convention)
    est = EffectEstimate(est.tau_hat + float(tau0), est.variance, est.std_error, est.method,
                         est.residual_source, variance_convention=variance_convention)
    if ci_level is not None:
        est = est.with_ci(ci_level, t_interval(est, dataset.n, ci_level))
    return AdjustedAnalysis(
        residuals=resid,
        test=test,
        estimate=est,
        tau0=float(tau0),
        oob_r_squared=_oob_r_squared(Y, resid.values),
        never_oob_count=int(model.never_oob.sum()),
        importance=rf.variable_importance(model),
        covariate_names=dataset.covariate_names,
    )


def confidence_interval(dataset: TrialDataset, level=0.95, method="t-residual",
                        test_kind="t", forest_config=None,
                        variance_convention="finite-population", tol=1e-3):
    """Confidence interval for ``tau``.

    ``"t-residual"`` uses residuals at ``tau0 = 0`` and a t quantile.
    ``"test-inversion"`` collects the ``tau0`` values at which the two-sided
    adjusted test does not reject at ``1 - level``, refitting the forest at
    every probe.  Each limit is bracketed by doubling steps from the point
    estimate (up to 10 residual SDs away) and refined by bisection to ``tol``.
    """
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    base = rf_adjusted_test(dataset, 0.0, "t", "two-sided", forest_config, ci_level=level,
                            variance_convention=variance_convention)
    if method == "t-residual":
        return base.estimate.ci
    if method != "test-inversion":
        raise ValueError(f"unknown interval method {method!r}")

    alpha = 1.0 - level
    center = base.estimate.tau_hat
    step0 = max(base.estimate.std_error, tol)
    reach = 10.0 * float(np.std(base.residuals.values, ddof=1))
    reach = max(reach, 2 * step0)

    def accepts(tau0):
        res = rf_adjusted_test(dataset, tau0, test_kind, "two-sided", forest_config,
                               ci_level=None, variance_convention=variance_convention)
        return res.test.p_value > alpha

    if not accepts(center):
        raise InversionError(f"the test rejects tau0 = {center:.6g} at the point estimate")

    def limit(direction):
        inside = center
        k = 0
        while True:
            offset = min(step0 * 2.0 ** k, reach)
            probe = center + direction * offset
            if not accepts(probe):
                outside = probe
                break
            inside = probe
            if offset >= reach:
                raise InversionError(
                    f"no rejection within {reach:.4g} (10 residual SDs) of the estimate "
                    f"on the {'upper' if direction > 0 else 'lower'} side")
            k += 1
        while abs(outside - inside) > tol:
            mid = 0.5 * (inside + outside)
            if accepts(mid):
                inside = mid
            else:
                outside = mid
        return 0.5 * (inside + outside)

    return limit(-1.0), limit(1.0)


def overfitting_bias_diagnostic(dataset: TrialDataset, forest_config=None) -> BiasDiagnostic:
    """Effect estimates from OOB residuals and from in-sample residuals.

    Both come from the same fitted forest on the observed outcomes.
    """
    model = rf.fit_forest(dataset.covariates, dataset.outcomes, forest_config)
    z = dataset.assignment == 1
    R = dataset.outcomes
    e_oob = R - rf.oob_predict(model, dataset.covariates)
    e_in = R - rf.insample_predict(model)
    return BiasDiagnostic(
        tau_oob=float(e_oob[z].mean() - e_oob[~z].mean()),
        tau_insample=float(e_in[z].mean() - e_in[~z].mean()),
    )


def cross_estimate_from_predictions(Y, assignment, g0, g1):
    """Cross-estimation effect and variance from given arm-wise predictions.

    ``g0[i]``, ``g1[i]`` must not depend on subject ``i``'s own outcome.  The
    variance uses the arm sizes ``n_z`` and ``p = n1 / n``::

        tau = mean(g1 - g0) + mean_{Z=1}(Y - g1) - mean_{Z=0}(Y - g0)
        var = sum_z sum_{Z_i=z} (Y_i - (1-p) g1_i - p g0_i)**2 / (n_z (n_z - 1))

    Returns ``(tau_hat, variance)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    g0 = np.asarray(g0, dtype=np.float64)
    g1 = np.asarray(g1, dtype=np.float64)
    z = _assignment_mask(assignment)
    n = Y.size
    n1 = int(z.sum())
    n0 = n - n1
    if n1 < 2 or n0 < 2:
        raise ValueError("cross-estimation needs at least 2 subjects per arm")
    tau = float(np.mean(g1 - g0) + np.mean(Y[z] - g1[z]) - np.mean(Y[~z] - g0[~z]))
    p = n1 / n
    r = Y - (1.0 - p) * g1 - p * g0
    var = float(np.sum(r[z] ** 2) / (n1 * (n1 - 1)) + np.sum(r[~z] ** 2) / (n0 * (n0 - 1)))
    return tau, var


def _crossfit_arm(X, Y, idx, folds, cfg, arm):
    """Out-of-fold predictions for arm rows and fold-averaged ones for the rest."""
    n = X.shape[0]
    order = stream(cfg.seed, 2, arm).permutation(idx)
    parts = np.array_split(order, folds)
    own = np.empty(n)
    other = np.zeros(n)
    outside = np.ones(n, dtype=bool)
    outside[idx] = False
    for k, held in enumerate(parts):
        train = np.setdiff1d(idx, held, assume_unique=True)
        if train.size < 2:
            raise ValueError(f"arm {arm} is too small for {folds}-fold cross-fitting")
        model = rf.fit_forest(X[train], Y[train],
                              cfg.replace(seed=derive_seed(cfg.seed, 3, arm, k)))
        own[held] = rf.predict(model, X[held])
        if outside.any():
            other[outside] += rf.predict(model, X[outside])
    pred = other / folds
    pred[idx] = own[idx]
    return pred


def cross_estimation(dataset: TrialDataset, forest_config=None, folds=2, sided="greater"):
    """Cross-estimation comparator with per-arm forests.

    Each arm is split into ``folds`` folds; an arm member is predicted by the
    forest trained on the other folds of its arm, and a member of the other
    arm by the average of that arm's fold forests.  Returns an
    :class:`EffectEstimate` and a normal-approximation :class:`TestResult`.
    """
    cfg = forest_config or rf.ForestConfig()
    folds = int(folds)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    z = dataset.assignment == 1
    if z.sum() < folds or (~z).sum() < folds:
        raise ValueError(f"each arm needs at least {folds} subjects for {folds}-fold cross-fitting")
    X, Y = dataset.covariates, dataset.outcomes
    g1 = _crossfit_arm(X, Y, np.flatnonzero(z), folds, cfg, 1)
    g0 = _crossfit_arm(X, Y, np.flatnonzero(~z), folds, cfg, 0)
    tau, var = cross_estimate_from_predictions(Y, dataset.assignment, g0, g1)
    se = math.sqrt(var)
    est = EffectEstimate(tau, var, se, "cross-estimation", "none",
                         variance_convention="cross-estimation")
    if se == 0.0:
        if tau == 0.0:
            return est, TestResult(0.0, 1.0, sided, "z", degenerate=True)
        agrees = sided == "two-sided" or (tau > 0) == (sided == "greater")
        return est, TestResult(math.copysign(math.inf, tau), 0.0 if agrees else 1.0, sided,
                               "z", degenerate=True)
    stat = tau / se
    sf, cdf = float(stats.norm.sf(stat)), float(stats.norm.cdf(stat))
    if sided == "greater":
        p = sf
    elif sided == "less":
        p = cdf
    else:
        p = min(1.0, 2.0 * min(sf, cdf))
    return est, TestResult(stat, p, sided, "z")


def sample_size_reduction(N, gamma) -> float:
    """Approximate subjects saved, ``N * gamma``, when adjustment explains a
    fraction ``gamma`` of the outcome variance.

    A first-order planning heuristic only: it ignores the loss of efficiency
    from estimating the adjustment model.
    """
    N = int(N)
    gamma = float(gamma)
    if N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    return N * gamma
