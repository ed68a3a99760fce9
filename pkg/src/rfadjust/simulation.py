"""Monte Carlo engine for type-I error and power of the competing tests.

Data models (``sig(x) = 1 / (1 + exp(-x))``, ``X`` iid standard normal,
``Z`` balanced complete randomization)::

    m1: tau Z + b sig(x1/2) + b x2^2 + b cos(x3) + b x4 + eps
    m2: tau Z + b sig(x1/2) + b x2^2 + b cos(x3) + b sign(cos(x3)) x4 + eps
    m3: tau Z + b sig(x1/2) + b x2 + b x3 + b x4 + eps
    m4: tau Z + b (sig(x1/2) - 1/2) Z + b x2^2 + b cos(x3) + b x4 + eps

Errors are used uncentered (lognormal and Gumbel have nonzero means); the
shift is common to both arms and cancels in every two-arm comparison.

Replicate ``r`` of a scenario draws its data from the stream
``(master_seed, r, 0)`` and its forest seeds from ``(master_seed, r, 1)``,
so results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import forest as rf
from .data import TrialDataset, complete_randomization
from .inference import cross_estimation, rf_residuals
from .seeding import derive_seed, stream
from .stattests import ols_residuals, t_test, wilcoxon_rank_sum

__all__ = [
    "MODELS",
    "ERROR_LAWS",
    "ALL_TESTS",
    "ScenarioConfig",
    "ScenarioResult",
    "ConfigError",
    "ReplicateError",
    "sample_error",
    "outcome_mean",
    "generate_dataset",
    "replicate_pvalues",
    "run_scenario",
    "power_curve",
    "crossing_n",
    "load_scenario_config",
    "CSV_COLUMNS",
]

MODELS = ("m1", "m2", "m3", "m4")
ERROR_LAWS = ("normal", "lognormal", "gumbel")
ALL_TESTS = ("t", "wilcoxon", "t-lm", "wilcoxon-lm", "t-rf", "wilcoxon-rf", "ce")
CSV_COLUMNS = ("model", "N", "p", "beta", "tau", "error", "test", "alpha",
               "rejection_rate", "mc_se", "n_reps", "seed")
_FOREST_KEYS = ("n_trees", "mtry", "min_leaf", "max_depth")
DEFAULT_CHUNK = 25


class ConfigError(ValueError):
    """Invalid scenario configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ReplicateError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"replicate {index} failed: {cause!r}")
        self.index = index


@dataclass(frozen=True)
class ScenarioConfig:
    model: str = "m1"
    N: int = 200
    p: int = 40
    beta: float = 0.8
    tau: float = 0.0
    error: str = "normal"
    n_reps: int = 10_000
    alpha: float = 0.05
    sided: str = "greater"
    tests: tuple[str, ...] = ALL_TESTS
    master_seed: int = 0
    forest: dict = field(default_factory=dict)
    ce_folds: int = 2
    t_variant: str = "welch"

    def __post_init__(self):
        object.__setattr__(self, "tests", tuple(self.tests))
        object.__setattr__(self, "forest", dict(self.forest))
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}", "model")
        if self.error not in ERROR_LAWS:
            raise ConfigError(f"error must be one of {ERROR_LAWS}, got {self.error!r}", "error")
        if int(self.N) != self.N or self.N < 4 or self.N % 2:
            raise ConfigError(f"N must be an even integer >= 4, got {self.N}", "N")
        if int(self.p) != self.p or self.p < 4:
            raise ConfigError(f"p must be an integer >= 4 (the models use x1..x4), got {self.p}", "p")
        if int(self.n_reps) != self.n_reps or self.n_reps < 1:
            raise ConfigError(f"n_reps must be a positive integer, got {self.n_reps}", "n_reps")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}", "alpha")
        if self.sided not in ("greater", "less", "two-sided"):
            raise ConfigError(f"invalid sided {self.sided!r}", "sided")
        if not self.tests:
            raise ConfigError("tests must be a nonempty list", "tests")
        for t in self.tests:
            if t not in ALL_TESTS:
                raise ConfigError(f"unknown test {t!r}; choose from {ALL_TESTS}", "tests")
        if len(set(self.tests)) != len(self.tests):
            raise ConfigError("tests contains duplicates", "tests")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer", "master_seed")
        if self.t_variant not in ("welch", "pooled"):
            raise ConfigError("t_variant must be 'welch' or 'pooled'", "t_variant")
        for k in self.forest:
            if k not in _FOREST_KEYS:
                raise ConfigError(f"unknown forest setting {k!r}; allowed {_FOREST_KEYS} "
                                  "(forest seeds are derived per replicate)", f"forest.{k}")
        try:
            self.forest_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc), "forest") from None
        if "ce" in self.tests and (self.ce_folds < 2 or self.N // 2 < 2 * self.ce_folds):
            raise ConfigError("ce_folds must be >= 2 and leave >= 2 training rows per fold",
                              "ce_folds")

    def forest_config(self, seed: int) -> rf.ForestConfig:
        cfg = rf.ForestConfig(seed=seed, **self.forest)
        cfg.resolve_mtry(self.p)
        return cfg

    def replace(self, **changes) -> "ScenarioConfig":
        return ScenarioConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tests"] = list(self.tests)
        return d

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    rejections: dict[str, int]
    n_reps_completed: int
    wall_time: float = 0.0

    @property
    def rejection_rate(self) -> dict[str, float]:
        return {t: k / self.n_reps_completed for t, k in self.rejections.items()}

    @property
    def mc_std_error(self) -> dict[str, float]:
        out = {}
        for t, r in self.rejection_rate.items():
            out[t] = math.sqrt(r * (1.0 - r) / self.n_reps_completed)
        return out

    def rows(self) -> list[dict]:
        c = self.config
        rate, se = self.rejection_rate, self.mc_std_error
        return [{
            "model": c.model, "N": c.N, "p": c.p, "beta": c.beta, "tau": c.tau,
            "error": c.error, "test": t, "alpha": c.alpha,
            "rejection_rate": rate[t], "mc_se": se[t],
            "n_reps": self.n_reps_completed, "seed": c.master_seed,
        } for t in c.tests]


def sample_error(law: str, rng: np.random.Generator, size=None):
    """Draw errors: standard normal, ``exp`` of a standard normal, or
    standard Gumbel via ``-log(-log(U))``."""
    if law == "normal":
        return rng.standard_normal(size)
    if law == "lognormal":
        return np.exp(rng.standard_normal(size))
    if law == "gumbel":
        # U strictly inside (0, 1)
        u = (rng.integers(0, 2 ** 53, size=size) + 0.5) / 2.0 ** 53
        return -np.log(-np.log(u))
    raise ValueError(f"unknown error law {law!r}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def outcome_mean(model: str, X, Z, beta: float, tau: float) -> np.ndarray:
    """Noise-free outcome of a data model."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    s1 = _sigmoid(x1 / 2.0)
    if model == "m1":
        g = s1 + x2 ** 2 + np.cos(x3) + x4
    elif model == "m2":
        g = s1 + x2 ** 2 + np.cos(x3) + np.sign(np.cos(x3)) * x4
    elif model == "m3":
        g = s1 + x2 + x3 + x4
    elif model == "m4":
        g = (s1 - 0.5) * Z + x2 ** 2 + np.cos(x3) + x4
    else:
        raise ValueError(f"unknown model {model!r}")
    return tau * Z + beta * g


def generate_dataset(config: ScenarioConfig, replicate_index: int) -> TrialDataset:
    rng = stream(config.master_seed, replicate_index, 0)
    X = rng.standard_normal((config.N, config.p))
    Z = complete_randomization(config.N, config.N // 2, rng)
    eps = sample_error(config.error, rng, config.N)
    y = outcome_mean(config.model, X, Z, config.beta, config.tau) + eps
    return TrialDataset(X, y, Z)


def replicate_pvalues(config: ScenarioConfig, replicate_index: int) -> dict[str, float]:
    """p-value of every configured test on one simulated trial."""
    d = generate_dataset(config, replicate_index)
    y, z, sided = d.outcomes, d.assignment, config.sided
    seed = derive_seed(config.master_seed, replicate_index, 1)
    out = {}
    lm = rfres = None
    for test in config.tests:
        if test == "t":
            out[test] = t_test(y, z, sided, config.t_variant).p_value
        elif test == "wilcoxon":
            out[test] = wilcoxon_rank_sum(y, z, sided).p_value
        elif test in ("t-lm", "wilcoxon-lm"):
            if lm is None:
                lm = ols_residuals(d.covariates, y).values
            if test == "t-lm":
                out[test] = t_test(lm, z, sided, config.t_variant).p_value
            else:
                out[test] = wilcoxon_rank_sum(lm, z, sided).p_value
        elif test in ("t-rf", "wilcoxon-rf"):
            if rfres is None:
                rfres = rf_residuals(d.covariates, y, config.forest_config(seed))[0].values
            if test == "t-rf":
                out[test] = t_test(rfres, z, sided, config.t_variant).p_value
            else:
                out[test] = wilcoxon_rank_sum(rfres, z, sided).p_value
        elif test == "ce":
            ce_cfg = config.forest_config(derive_seed(config.master_seed, replicate_index, 2))
            _, res = cross_estimation(d, ce_cfg, config.ce_folds, sided)
            out[test] = res.p_value
    return out


def _run_chunk(config: ScenarioConfig, start: int, stop: int):
    counts = dict.fromkeys(config.tests, 0)
    for r in range(start, stop):
        try:
            pv = replicate_pvalues(config, r)
        except Exception as exc:  # noqa: BLE001 - reported with the replicate index
            raise ReplicateError(r, exc) from exc
        for t, p in pv.items():
            if p <= config.alpha:
                counts[t] += 1
    return start, stop, counts


def _init_worker():
    rf.set_threads(1)


def default_workers() -> int:
    env = os.environ.get("RFADJUST_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def run_scenario(config: ScenarioConfig, workers: int | None = None,
                 chunk_size: int = DEFAULT_CHUNK, progress=None) -> ScenarioResult:
    """Rejection counts of every test over ``config.n_reps`` replicates.

    ``progress(done, total)`` is called after each completed chunk.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    t0 = time.perf_counter()
    bounds = [(s, min(s + chunk_size, config.n_reps))
              for s in range(0, config.n_reps, chunk_size)]
    totals = dict.fromkeys(config.tests, 0)
    done = 0

    def absorb(counts, n):
        nonlocal done
        for t, k in counts.items():
            totals[t] += k
        done += n
        if progress is not None:
            progress(done, config.n_reps)

    if workers == 1:
        for s, e in bounds:
            _, _, counts = _run_chunk(config, s, e)
            absorb(counts, e - s)
    else:
        # spawn, not fork: forking after the numba thread pool has started can
        # kill the children
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_init_worker) as pool:
            futures = [pool.submit(_run_chunk, config, s, e) for s, e in bounds]
            for fut in futures:
                s, e, counts = fut.result()
                absorb(counts, e - s)
    return ScenarioResult(config, totals, done, time.perf_counter() - t0)


def power_curve(template: ScenarioConfig, N_grid, workers=None, progress=None):
    """One :class:`ScenarioResult` per sample size in ``N_grid``."""
    grid = [int(n) for n in N_grid]
    if not grid:
        raise ValueError("N_grid must be nonempty")
    results = []
    for n in grid:
        cfg = template.replace(N=n)
        results.append(run_scenario(cfg, workers, progress=progress))
    return results


def crossing_n(results, target=0.8) -> dict[str, int | None]:
    """Smallest grid N at which each test's rejection rate reaches ``target``."""
    tests = results[0].config.tests
    out = {}
    for t in tests:
        hits = [r.config.N for r in results if r.rejection_rate[t] >= target]
        out[t] = min(hits) if hits else None
    return out


def _coerce(name, value, typ):
    try:
        if typ is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if typ is str:
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}", name) from None
    return value


_FIELD_TYPES = {"model": str, "N": int, "p": int, "beta": float, "tau": float, "error": str,
                "n_reps": int, "alpha": float, "sided": str, "master_seed": int,
                "ce_folds": int, "t_variant": str}


def scenario_from_mapping(raw) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("scenario config must be a mapping of ScenarioConfig fields")
    known = {f.name for f in fields(ScenarioConfig)}
    kwargs = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}", str(k))
        if k in _FIELD_TYPES:
            kwargs[k] = _coerce(k, v, _FIELD_TYPES[k])
        elif k == "tests":
            if isinstance(v, str):
                v = [v]
            if not isinstance(v, list) or not all(isinstance(t, str) for t in v):
                raise ConfigError("tests: expected a list of test names", "tests")
            kwargs[k] = tuple(v)
        elif k == "forest":
            if v is None:
                v = {}
            if not isinstance(v, dict):
                raise ConfigError("forest: expected a mapping", "forest")
            fk = {}
            for fkey, fval in v.items():
                if fkey not in _FOREST_KEYS:
                    raise ConfigError(f"unknown forest setting {fkey!r}", f"forest.{fkey}")
                if fval is None and fkey in ("mtry", "max_depth"):
                    fk[fkey] = None
                else:
                    fk[fkey] = _coerce(f"forest.{fkey}", fval, int)
            kwargs[k] = fk
    return ScenarioConfig(**kwargs)


def load_scenario_config(path) -> ScenarioConfig:
    """Read a YAML (or JSON) scenario file whose keys are ScenarioConfig fields."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return scenario_from_mapping(raw)
