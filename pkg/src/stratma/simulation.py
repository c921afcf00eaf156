"""Factorial simulation study, resampling repeats and the exhaustive oracle."""

from __future__ import annotations

import hashlib
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from statistics import NormalDist
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .allocation import neyman_allocation, proportional_allocation
from .core import Mode, PopulationTable, StrataAssignment
from .errors import ConfigError, EnumerationTooLarge, InvalidR2, NonpositiveWeights, StratmaError
from .sampling import Seed, as_seed, order_sample
from .variance import (
    arm_estimate,
    arm_exact_term,
    arm_s2_hat,
    arm_within_term,
    stratum_moments,
)

BIAS_LEVELS = ("none", "small", "moderate", "large", "extreme_contrast")
VARIANCE_LEVELS = ("homogeneous", "heterogeneous", "extreme_contrast")
STRATA_LEVELS = ("balanced_exact", "balanced_approx", "unbalanced")
R2_LEVELS = (0.4, 0.85)
H_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))

# Stratum bias patterns in units of sigma_Y, and residual variance shapes, for K = 4.
_BIAS_4 = {
    "none": (0.0, 0.0, 0.0, 0.0),
    "small": (-0.25, -0.08, 0.08, 0.25),
    "moderate": (-0.5, -0.17, 0.17, 0.5),
    "large": (-1.0, -0.34, 0.34, 1.0),
    "extreme_contrast": (-1.0, 0.0, 0.0, 1.0),
}
_VARIANCE_4 = {
    "homogeneous": (1.0, 1.0, 1.0, 1.0),
    "heterogeneous": (0.25, 1.5, 2.75, 4.0),
    "extreme_contrast": (0.1, 1.0, 1.0, 10.0),
}
_BIAS_SPAN = {"small": 0.25, "moderate": 0.5, "large": 1.0}

ESTIMATORS = ("oracle", "subset", "ma_srs", "ma_strat_prop", "ma_strat_opt")
METRICS = ("bias", "emp_se", "mse", "mean_est_se", "coverage", "var_reduction_vs_srs", "var_inflation_vs_full")


def bias_pattern(level: str, K: int) -> np.ndarray:
    """Uncentred stratum biases b'_k in units of sigma_Y."""
    if level not in _BIAS_4:
        raise ConfigError(f"unknown bias pattern {level!r}")
    if K == 4:
        return np.array(_BIAS_4[level])
    if level == "none":
        return np.zeros(K)
    if level == "extreme_contrast":
        out = np.zeros(K)
        out[0], out[-1] = -1.0, 1.0
        return out
    span = _BIAS_SPAN[level]
    return np.linspace(-span, span, K)


def variance_pattern(level: str, K: int) -> np.ndarray:
    """Relative residual variances v_k."""
    if level not in _VARIANCE_4:
        raise ConfigError(f"unknown variance pattern {level!r}")
    if K == 4:
        return np.array(_VARIANCE_4[level])
    if level == "homogeneous":
        return np.ones(K)
    if level == "heterogeneous":
        return np.linspace(0.25, 4.0, K)
    out = np.ones(K)
    out[0], out[-1] = 0.1, 10.0
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    N: int = 1000
    K: int = 4
    sigma_y: float = 3.0
    tau: float = 0.0
    bias: str = "none"
    variance: str = "homogeneous"
    r2: float = 0.4
    strata: str = "balanced_exact"
    h: float = 0.1
    reps: int = 1000
    seed: int = 0
    min_floor: int = 2
    level: float = 0.95
    optimal_sd: str = "oracle"
    pilot_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.N < 4 or self.N % 2:
            raise ConfigError("N must be an even number of at least 4")
        if self.K < 1:
            raise ConfigError("K must be positive")
        if not 0 < self.h <= 1:
            raise ConfigError("h must lie in (0, 1]")
        if not 0 < self.r2 < 1:
            raise InvalidR2(f"target R2 must lie in (0, 1), got {self.r2}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.bias not in BIAS_LEVELS:
            raise ConfigError(f"bias must be one of {BIAS_LEVELS}")
        if self.variance not in VARIANCE_LEVELS:
            raise ConfigError(f"variance must be one of {VARIANCE_LEVELS}")
        if self.strata not in STRATA_LEVELS:
            raise ConfigError(f"strata must be one of {STRATA_LEVELS}")
        if self.optimal_sd not in ("oracle", "pilot"):
            raise ConfigError("optimal_sd must be 'oracle' or 'pilot'")

    @property
    def arm_size(self) -> int:
        return self.N // 2

    @property
    def budget(self) -> int:
        return int(math.floor(self.h * self.arm_size + 1e-9))

    def population_key(self) -> int:
        """Identifier of the population-generating factors.

        The coding fraction, replication count and allocation settings are
        left out, so cells that differ only in those see the same simulated
        populations and sampling keys.
        """
        text = repr((self.N, self.K, float(self.sigma_y), float(self.tau), self.bias, self.variance, float(self.r2), self.strata))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class Calibration:
    b: np.ndarray
    sigma2_eps: np.ndarray
    c: float
    V: float
    weights: np.ndarray
    b_prime: np.ndarray

    def implied_r2(self, sigma_y: float) -> float:
        w = self.weights
        var_e = np.sum(w * self.b**2) - np.sum(w * self.b) ** 2 + np.sum(w * self.sigma2_eps)
        return float(1 - var_e / sigma_y**2)


def calibrate_dgp(
    bias: str, variance: str, r2: float, sigma_y: float = 3.0, weights: Sequence[float] | None = None, K: int | None = None
) -> Calibration:
    """Scale stratum biases and noise variances to hit a target pseudo-R2."""
    if not 0 < r2 < 1:
        raise InvalidR2(f"target R2 must lie in (0, 1), got {r2}")
    if weights is None:
        K = K or 4
        w = np.full(K, 1.0 / K)
    else:
        w = np.asarray(weights, dtype=float)
        K = len(w)
        if np.any(w <= 0):
            raise NonpositiveWeights("stratum weights must be positive")
        if not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise NonpositiveWeights("stratum weights must sum to 1")
    b_prime = bias_pattern(bias, K) * sigma_y
    b_prime = b_prime - np.sum(w * b_prime)
    v = variance_pattern(variance, K)
    V = float(np.sum(w * v))
    var_b = float(np.sum(w * b_prime**2))
    c = sigma_y**2 * (1 - r2) / (var_b + 1)
    return Calibration(b=math.sqrt(c) * b_prime, sigma2_eps=c * v / V, c=c, V=V, weights=w, b_prime=b_prime)


def scenario_weights(cfg: ScenarioConfig) -> np.ndarray:
    """Stratum probabilities; the unbalanced draw is fixed per population key."""
    if cfg.strata != "unbalanced":
        return np.full(cfg.K, 1.0 / cfg.K)
    rng = Seed(cfg.seed).rng(cfg.population_key(), 2**31)
    pi = rng.uniform(0.2, 0.8, cfg.K)
    return pi / pi.sum()


@dataclass(frozen=True, eq=False)
class _Draw:
    y0: np.ndarray
    y1: np.ndarray
    y_hat: np.ndarray
    arm: np.ndarray
    stratum: np.ndarray
    keys: np.ndarray
    pilot_keys: np.ndarray


def _draw_population(cfg: ScenarioConfig, calib: Calibration, pi: np.ndarray, rng: np.random.Generator) -> _Draw:
    m = cfg.arm_size
    arm = np.repeat([0, 1], m)
    if cfg.strata == "balanced_exact":
        one = np.sort(np.arange(m) % cfg.K)
        stratum = np.concatenate([one, one])
    else:
        stratum = rng.choice(cfg.K, size=cfg.N, p=pi)
    y0 = rng.normal(0.0, cfg.sigma_y, cfg.N)
    y1 = y0 + cfg.tau
    eps = rng.normal(0.0, 1.0, cfg.N) * np.sqrt(calib.sigma2_eps[stratum])
    y_obs = np.where(arm == 1, y1, y0)
    y_hat = y_obs + calib.b[stratum] + eps
    keys = rng.random(cfg.N)
    pilot_keys = rng.random(cfg.N)
    return _Draw(y0, y1, y_hat, arm, stratum, keys, pilot_keys)


@dataclass(frozen=True, eq=False)
class SimulatedPopulation:
    """A fully coded table plus both potential outcomes for every unit."""

    table: PopulationTable
    y0: np.ndarray
    y1: np.ndarray
    strata: StrataAssignment
    calibration: Calibration

    @property
    def true_ate(self) -> float:
        return float(np.mean(self.y1 - self.y0))


def generate_population(cfg: ScenarioConfig, seed: Seed | int | None = None, replication: int = 0) -> SimulatedPopulation:
    """The population used by replication ``replication`` of ``cfg``."""
    seed = as_seed(cfg.seed if seed is None else seed)
    pi = scenario_weights(cfg)
    calib = calibrate_dgp(cfg.bias, cfg.variance, cfg.r2, cfg.sigma_y, pi)
    d = _draw_population(cfg, calib, pi, seed.rng(cfg.population_key(), replication))
    y_obs = np.where(d.arm == 1, d.y1, d.y0)
    width = len(str(cfg.N - 1))
    table = PopulationTable(
        ids=[f"u{i:0{width}d}" for i in range(cfg.N)],
        y_hat=d.y_hat,
        arm=d.arm,
        y=y_obs,
        stratum=d.stratum + 1,
        mode=Mode.TWO_ARM,
    )
    # Dense per-arm numbering in case a stratum is empty in one arm.
    strata = StrataAssignment.from_column(table) if cfg.strata != "balanced_exact" else StrataAssignment(d.stratum + 1, d.arm)
    return SimulatedPopulation(table, d.y0, d.y1, strata, calib)


# ---------------------------------------------------------------------------
# Batched replications


def _quotas(sizes: np.ndarray, budget: int, sds: np.ndarray | None, min_floor: int) -> np.ndarray:
    out = np.zeros_like(sizes)
    for r in range(sizes.shape[0]):
        live = sizes[r] > 0
        if sds is None:
            q = proportional_allocation(sizes[r][live].tolist(), budget, min_floor).n[0]
        else:
            q = neyman_allocation(sizes[r][live].tolist(), sds[r][live].tolist(), budget, min_floor).n[0]
        out[r, live] = q
    return out


def _pilot_sds(cfg, resid, codes, pilot_keys, sizes) -> np.ndarray:
    """Stratum residual SDs from a separate small random pilot sample."""
    m = resid.shape[-1]
    n_pilot = max(2, int(math.floor(cfg.pilot_fraction * m)))
    mask = order_sample(np.zeros_like(codes), np.array([n_pilot]), pilot_keys)
    counts, _, var = stratum_moments(np.where(mask, resid, 0.0), codes, mask, cfg.K)
    pooled = np.array([np.var(resid[r][mask[r]], ddof=1) for r in range(resid.shape[0])])
    var = np.where(counts >= 2, var, pooled[:, None])
    return np.sqrt(var)


def _arm_batch(cfg: ScenarioConfig, y, y_hat, codes, keys, pilot_keys) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Arm-level estimates and variances for every design, batch over reps."""
    R, m = y.shape
    K = cfg.K
    n = cfg.budget
    resid = y - y_hat
    zero = np.zeros_like(codes)
    one_size = np.full((R, 1), m)
    one_quota = np.full((R, 1), n)
    out = {}

    out["oracle"] = (y.mean(axis=1), y.var(axis=1, ddof=1) / m)

    srs = order_sample(zero, np.array([n]), keys)
    ys = np.where(srs, y, 0.0)
    sub_mean = ys.sum(axis=1) / n
    sub_var = np.where(srs, (y - sub_mean[:, None]) ** 2, 0.0).sum(axis=1) / (n - 1) / n if n > 1 else np.full(R, np.nan)
    out["subset"] = (sub_mean, sub_var)

    out["ma_srs"] = (
        arm_estimate(y_hat, resid, zero, srs, one_size, one_quota),
        arm_within_term(resid, zero, srs, one_size, one_quota) + arm_s2_hat(y, zero, srs, one_size, one_quota) / m,
    )

    sizes = stratum_moments(np.zeros_like(y), codes, None, K)[0].astype(int)
    if cfg.optimal_sd == "oracle":
        _, _, pop_var = stratum_moments(resid, codes, None, K)
        sds = np.sqrt(np.where(sizes > 1, pop_var, 0.0))
    else:
        sds = _pilot_sds(cfg, resid, codes, pilot_keys, sizes)
    for name, s in (("ma_strat_prop", None), ("ma_strat_opt", sds)):
        quotas = _quotas(sizes, n, s, cfg.min_floor)
        mask = order_sample(codes, quotas, keys)
        out[name] = (
            arm_estimate(y_hat, resid, codes, mask, sizes, quotas),
            arm_within_term(resid, codes, mask, sizes, quotas) + arm_s2_hat(y, codes, mask, sizes, quotas) / m,
        )
    return out


def simulate_replications(cfg: ScenarioConfig, chunk: int = 200) -> dict[str, np.ndarray]:
    """Per-replication estimates and variances for every estimator.

    Returns arrays keyed ``<estimator>_est``, ``<estimator>_var`` and
    ``true_ate``. Replication r always uses the generator keyed by
    (seed, population key, r), whatever the chunking.
    """
    seed = Seed(cfg.seed)
    pi = scenario_weights(cfg)
    calib = calibrate_dgp(cfg.bias, cfg.variance, cfg.r2, cfg.sigma_y, pi)
    m = cfg.arm_size
    if cfg.budget < 2:
        raise ConfigError(f"coding budget {cfg.budget} per arm is too small")
    pieces: dict[str, list[np.ndarray]] = {}
    for start in range(0, cfg.reps, chunk):
        reps = range(start, min(cfg.reps, start + chunk))
        draws = [_draw_population(cfg, calib, pi, seed.rng(cfg.population_key(), r)) for r in reps]
        stack = {f.name: np.stack([getattr(d, f.name) for d in draws]) for f in fields(_Draw)}
        per_arm = {}
        for z in (0, 1):
            sl = slice(z * m, (z + 1) * m)
            y = np.where(z == 1, stack["y1"], stack["y0"])[:, sl]
            per_arm[z] = _arm_batch(
                cfg, y, stack["y_hat"][:, sl], stack["stratum"][:, sl], stack["keys"][:, sl], stack["pilot_keys"][:, sl]
            )
        pieces.setdefault("true_ate", []).append(np.mean(stack["y1"] - stack["y0"], axis=1))
        for name in ESTIMATORS:
            pieces.setdefault(f"{name}_est", []).append(per_arm[1][name][0] - per_arm[0][name][0])
            pieces.setdefault(f"{name}_var", []).append(per_arm[1][name][1] + per_arm[0][name][1])
    return {k: np.concatenate(v) for k, v in pieces.items()}


@dataclass(frozen=True)
class EstimatorMetrics:
    bias: float
    emp_se: float
    mse: float
    mean_est_se: float
    coverage: float
    var_reduction_vs_srs: float
    var_inflation_vs_full: float


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    metrics: Mapping[str, EstimatorMetrics]

    def rows(self) -> list[dict]:
        base = scenario_factors(self.config)
        return [{**base, "estimator": name, **asdict(m)} for name, m in self.metrics.items()]


def scenario_factors(cfg: ScenarioConfig) -> dict:
    return {
        "N": cfg.N, "K": cfg.K, "sigma_y": cfg.sigma_y, "tau": cfg.tau, "bias_pattern": cfg.bias,
        "variance_pattern": cfg.variance, "r2": cfg.r2, "strata": cfg.strata, "h": cfg.h, "reps": cfg.reps, "seed": cfg.seed,
    }


def summarize(cfg: ScenarioConfig, sims: Mapping[str, np.ndarray]) -> ScenarioResult:
    """Monte Carlo metrics for each estimator.

    Coverage is a proportion in [0, 1]; variance reduction is in percent
    relative to the model-assisted SRS estimator.
    """
    z = NormalDist().inv_cdf(0.5 + cfg.level / 2)
    truth = sims["true_ate"]
    emp_var = {name: float(np.var(sims[f"{name}_est"], ddof=1)) if cfg.reps > 1 else math.nan for name in ESTIMATORS}
    out = {}
    for name in ESTIMATORS:
        est = sims[f"{name}_est"]
        se = np.sqrt(sims[f"{name}_var"])
        err = est - truth
        with np.errstate(invalid="ignore", divide="ignore"):
            out[name] = EstimatorMetrics(
                bias=float(np.mean(err)),
                emp_se=math.sqrt(emp_var[name]) if not math.isnan(emp_var[name]) else math.nan,
                mse=float(np.mean(err**2)),
                mean_est_se=float(np.mean(se)),
                coverage=float(np.mean(np.abs(err) <= z * se)),
                var_reduction_vs_srs=float(100 * (1 - emp_var[name] / emp_var["ma_srs"])),
                var_inflation_vs_full=float(emp_var[name] / emp_var["oracle"]),
            )
    return ScenarioResult(cfg, out)


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    return summarize(cfg, simulate_replications(cfg))


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class GridConfig:
    """Factor levels whose Cartesian product forms the scenario grid."""

    bias: tuple[str, ...] = BIAS_LEVELS
    variance: tuple[str, ...] = VARIANCE_LEVELS
    r2: tuple[float, ...] = R2_LEVELS
    strata: tuple[str, ...] = STRATA_LEVELS
    h: tuple[float, ...] = H_LEVELS
    N: int = 1000
    K: int = 4
    sigma_y: float = 3.0
    tau: float = 0.0
    reps: int = 1000
    seed: int = 0
    min_floor: int = 2
    optimal_sd: str = "oracle"

    def cells(self) -> list[ScenarioConfig]:
        return [
            ScenarioConfig(
                N=self.N, K=self.K, sigma_y=self.sigma_y, tau=self.tau, bias=b, variance=v, r2=r, strata=s, h=h,
                reps=self.reps, seed=self.seed, min_floor=self.min_floor, optimal_sd=self.optimal_sd,
            )
            for b, v, r, s, h in itertools.product(self.bias, self.variance, self.r2, self.strata, self.h)
        ]

    @classmethod
    def from_dict(cls, d: Mapping) -> GridConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        for k in ("bias", "variance", "r2", "strata", "h"):
            if k in kw and not isinstance(kw[k], tuple):
                kw[k] = (kw[k],)
        return cls(**kw)


def _run_cell(cfg: ScenarioConfig) -> list[dict]:
    try:
        return [{**row, "error": ""} for row in run_scenario(cfg).rows()]
    except (StratmaError, ValueError) as exc:
        nan = {m: math.nan for m in METRICS}
        return [{**scenario_factors(cfg), "estimator": e, **nan, "error": f"{type(exc).__name__}: {exc}"} for e in ESTIMATORS]


def run_grid(grid: GridConfig | Sequence[ScenarioConfig], threads: int = 1) -> pd.DataFrame:
    """Long-format results, one row per (cell, estimator), in grid order.

    Failing cells produce rows with NaN metrics and an error message.
    """
    cells = grid.cells() if isinstance(grid, GridConfig) else list(grid)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return pd.DataFrame([row for rows in results for row in rows])


# ---------------------------------------------------------------------------
# Resampling a fixed coded dataset


def resample_repeats(
    pop: PopulationTable,
    strata: StrataAssignment,
    budget: Mapping[int, int] | int,
    repeats: int = 20,
    seed: Seed | int = 0,
    min_floor: int = 2,
) -> pd.DataFrame:
    """Estimates from ``repeats`` independent coding draws of one dataset.

    The dataset must be fully coded. Each repeat draws an SRS sample (used
    by the subset and model-assisted SRS estimators) and stratified samples
    under proportional and oracle-SD Neyman allocation.
    """
    from .estimators import estimate_ma_srs, estimate_ma_stratified, estimate_oracle, estimate_subset
    from .sampling import srs_sample, stratified_sample

    seed = as_seed(seed)
    oracle = estimate_oracle(pop)
    resid = pop.y - pop.y_hat
    sizes = {z: strata.sizes(z) for z in pop.arms}
    sds = {}
    for z in pop.arms:
        _, _, var = stratum_moments(resid[pop.arm == z], strata.codes(z), None, strata.K(z))
        sds[z] = np.sqrt(np.where(sizes[z] > 1, var, 0.0))
    prop = proportional_allocation(sizes, budget, min_floor)
    opt = neyman_allocation(sizes, sds, budget, min_floor)
    srs_budget = {z: prop.budget(z) for z in pop.arms}
    rows = []
    for r in range(repeats):
        # Stratified draws share the repeat's stream, so the two allocations
        # see nested random orders within each stratum.
        s = Seed(seed.master, seed.stream + r)
        srs = srs_sample(pop, srs_budget, s)
        reports = {
            "oracle": oracle,
            "subset": estimate_subset(pop, srs),
            "ma_srs": estimate_ma_srs(pop, srs),
            "ma_strat_prop": estimate_ma_stratified(pop, strata, stratified_sample(pop, strata, prop, s), prop),
            "ma_strat_opt": estimate_ma_stratified(pop, strata, stratified_sample(pop, strata, opt, s), opt),
        }
        for name, rep in reports.items():
            rows.append({"repeat": r, "estimator": name, "estimate": rep.estimate, "se": rep.se})
    return pd.DataFrame(rows)


def summarize_repeats(table: pd.DataFrame) -> pd.DataFrame:
    g = table.groupby("estimator", sort=False)
    return pd.DataFrame(
        {"mean": g["estimate"].mean(), "emp_var": g["estimate"].var(ddof=1), "mean_se": g["se"].mean()}
    ).reset_index()


# ---------------------------------------------------------------------------
# Exhaustive enumeration oracle


@dataclass(frozen=True)
class TinyPopulation:
    """Both potential outcomes and both potential surrogates of every unit."""

    y0: np.ndarray
    y1: np.ndarray
    y_hat0: np.ndarray
    y_hat1: np.ndarray
    n_treated: int

    def __post_init__(self) -> None:
        arrs = [np.asarray(a, dtype=float) for a in (self.y0, self.y1, self.y_hat0, self.y_hat1)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("potential outcome vectors must share one length")
        for name, a in zip(("y0", "y1", "y_hat0", "y_hat1"), arrs):
            object.__setattr__(self, name, a)
        if not 0 < self.n_treated < len(arrs[0]):
            raise ValueError("n_treated must leave both arms non-empty")

    @property
    def N(self) -> int:
        return len(self.y0)

    @property
    def true_ate(self) -> float:
        return float(np.mean(self.y1 - self.y0))

    def observed(self, treated: np.ndarray) -> PopulationTable:
        arm = treated.astype(int)
        return PopulationTable(
            ids=[f"u{i}" for i in range(self.N)],
            y_hat=np.where(treated, self.y_hat1, self.y_hat0),
            arm=arm,
            y=np.where(treated, self.y1, self.y0),
            mode=Mode.TWO_ARM,
        )


def rank_strata(n_strata: int) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Strata from the rank of the observed surrogate within each arm."""

    def fn(y_hat: np.ndarray, arm: np.ndarray) -> np.ndarray:
        labels = np.zeros(len(y_hat), dtype=int)
        for z in (0, 1):
            idx = np.flatnonzero(arm == z)
            order = idx[np.lexsort((idx, y_hat[idx]))]
            labels[order] = np.arange(len(idx)) * n_strata // len(idx) + 1
        return labels

    return fn


def _stratified_masks(codes: np.ndarray, quotas: Sequence[int]) -> np.ndarray:
    per = []
    for k, q in enumerate(quotas):
        members = np.flatnonzero(codes == k)
        per.append(list(itertools.combinations(members.tolist(), int(q))))
    draws = []
    for combo in itertools.product(*per):
        mask = np.zeros(len(codes), dtype=bool)
        for chosen in combo:
            mask[list(chosen)] = True
        draws.append(mask)
    return np.array(draws)


def _srs_masks(m: int, n: int) -> np.ndarray:
    out = []
    for chosen in itertools.combinations(range(m), n):
        mask = np.zeros(m, dtype=bool)
        mask[list(chosen)] = True
        out.append(mask)
    return np.array(out)


@dataclass(frozen=True)
class OracleResult:
    """Exact moments over every (assignment, draw) pair, plus per-assignment detail.

    ``means``/``variances`` are keyed by estimator name. Per-assignment
    arrays are in the order of ``assignments`` (lexicographic treated sets).
    """

    true_ate: float
    means: Mapping[str, float]
    variances: Mapping[str, float]
    assignments: tuple[tuple[int, ...], ...]
    ate_full: np.ndarray
    cond_var: Mapping[str, np.ndarray]
    cond_mean: Mapping[str, np.ndarray]
    cond_var_formula: np.ndarray
    plugin_mean: np.ndarray
    plugin_mean_srs: np.ndarray
    strata: tuple[np.ndarray, ...] = field(default=())
    n_pairs: int = 0


def exhaustive_oracle(
    tiny: TinyPopulation,
    quotas: Mapping[int, Sequence[int]],
    strata_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    cap: int = 10**7,
) -> OracleResult:
    """Enumerate every treatment assignment and every coding draw.

    ``strata_fn(y_hat_observed, arm)`` returns 1-based stratum labels for an
    assignment (default: rank strata with one stratum per quota entry);
    ``quotas[z]`` gives n_zk for the resulting strata. The SRS comparator
    codes sum(quotas[z]) units in arm z. Estimator moments are computed
    directly over all (assignment, treated draw, control draw) triples.
    """
    if strata_fn is None:
        strata_fn = rank_strata(len(quotas[0]))
    n_assign = math.comb(tiny.N, tiny.n_treated)
    m = {1: tiny.n_treated, 0: tiny.N - tiny.n_treated}
    budgets = {z: int(sum(quotas[z])) for z in (0, 1)}
    srs_pairs = math.comb(m[1], budgets[1]) * math.comb(m[0], budgets[0])
    if n_assign * srs_pairs > cap:
        raise EnumerationTooLarge(f"{n_assign * srs_pairs} assignment-draw pairs exceed the cap {cap}")
    srs = {z: _srs_masks(m[z], budgets[z]) for z in (0, 1)}

    names = ("oracle", "subset", "ma_srs", "ma_stratified")
    truth = tiny.true_ate
    assignments, strata_list = [], []
    # Per arm: stacked unit arrays (A, m), stratum sizes (A, K), and the
    # stratified draws of all assignments concatenated with their owner index.
    unit = {z: {"y": [], "h": [], "codes": [], "sizes": []} for z in (0, 1)}
    draws: dict[int, list[np.ndarray]] = {0: [], 1: []}
    owners: dict[int, list[np.ndarray]] = {0: [], 1: []}

    for a, treated_idx in enumerate(itertools.combinations(range(tiny.N), tiny.n_treated)):
        treated = np.zeros(tiny.N, dtype=bool)
        treated[list(treated_idx)] = True
        arm = treated.astype(int)
        y = np.where(treated, tiny.y1, tiny.y0)
        y_hat = np.where(treated, tiny.y_hat1, tiny.y_hat0)
        labels = np.asarray(strata_fn(y_hat, arm))
        assignments.append(treated_idx)
        strata_list.append(labels)
        for z in (0, 1):
            sel = arm == z
            codes = labels[sel] - 1
            K = int(codes.max()) + 1
            q = np.asarray(quotas[z])
            if len(q) != K:
                raise ValueError(f"arm {z}: {K} strata but {len(q)} quotas")
            strat = _stratified_masks(codes, q)
            u = unit[z]
            u["y"].append(y[sel])
            u["h"].append(y_hat[sel])
            u["codes"].append(codes)
            u["sizes"].append(np.bincount(codes, minlength=K))
            draws[z].append(strat)
            owners[z].append(np.full(len(strat), a))

    per_arm: dict[str, dict[int, np.ndarray]] = {k: {} for k in names}
    owner_of: dict[int, np.ndarray] = {}
    formula = np.zeros(n_assign)
    plugin_mean = np.zeros(n_assign)
    plugin_srs = np.zeros(n_assign)
    for z in (0, 1):
        yz, hz, codes, sizes = (np.stack(unit[z][k]) for k in ("y", "h", "codes", "sizes"))
        rz = yz - hz
        q = np.asarray(quotas[z])
        own = np.concatenate(owners[z])
        strat = np.concatenate(draws[z])
        owner_of[z] = own
        per_arm["ma_stratified"][z] = arm_estimate(hz[own], rz[own], codes[own], strat, sizes[own], q)
        pv = arm_within_term(rz[own], codes[own], strat, sizes[own], q) + arm_s2_hat(yz[own], codes[own], strat, sizes[own], q) / m[z]
        plugin_mean += np.bincount(own, weights=pv, minlength=n_assign) / np.bincount(own, minlength=n_assign)
        formula += arm_exact_term(rz, codes, sizes, q)

        S = srs[z][None, :, :]
        shape = (n_assign, S.shape[1], m[z])
        zero = np.zeros(shape, dtype=int)
        one_size, one_quota = np.array([m[z]]), np.array([budgets[z]])
        h3, r3, y3 = (np.broadcast_to(v[:, None, :], shape) for v in (hz, rz, yz))
        per_arm["ma_srs"][z] = arm_estimate(h3, r3, zero, S, one_size, one_quota)
        plugin_srs += np.mean(
            arm_within_term(r3, zero, S, one_size, one_quota) + arm_s2_hat(y3, zero, S, one_size, one_quota) / m[z], axis=1
        )
        per_arm["subset"][z] = (S * y3).sum(axis=-1) / budgets[z]
        per_arm["oracle"][z] = yz.mean(axis=1)[:, None]
    ate_full = per_arm["oracle"][1][:, 0] - per_arm["oracle"][0][:, 0]

    cond_mean = {k: np.zeros(n_assign) for k in names}
    cond_var = {k: np.zeros(n_assign) for k in names}
    sum_est = {k: 0.0 for k in names}
    sum_sq = {k: 0.0 for k in names}
    n_pairs = 0
    bounds = {z: np.searchsorted(owner_of[z], np.arange(n_assign + 1)) for z in (0, 1)}
    for a in range(n_assign):
        for k in names:
            if k == "ma_stratified":
                e1 = per_arm[k][1][bounds[1][a]:bounds[1][a + 1]]
                e0 = per_arm[k][0][bounds[0][a]:bounds[0][a + 1]]
            else:
                e1, e0 = per_arm[k][1][a], per_arm[k][0][a]
            # Every (treated draw, control draw) pair is equally likely given the assignment.
            est = e1[:, None] - e0[None, :]
            n_pairs += est.size
            cond_mean[k][a] = est.mean()
            cond_var[k][a] = np.mean((est - est.mean()) ** 2)
            sum_est[k] += est.mean()
            sum_sq[k] += np.mean((est - truth) ** 2)

    means = {k: sum_est[k] / n_assign for k in names}
    variances = {k: sum_sq[k] / n_assign - (means[k] - truth) ** 2 for k in names}
    return OracleResult(
        true_ate=truth,
        means=means,
        variances=variances,
        assignments=tuple(assignments),
        ate_full=ate_full,
        cond_var=cond_var,
        cond_mean=cond_mean,
        cond_var_formula=formula,
        plugin_mean=plugin_mean,
        plugin_mean_srs=plugin_srs,
        strata=tuple(strata_list),
        n_pairs=n_pairs,
    )


# ---------------------------------------------------------------------------
# Coded corpora with stratum-level surrogate bias


@dataclass(frozen=True)
class CorpusConfig:
    """A fully coded two-arm dataset whose surrogate over-scores more in higher strata.

    Stratum k has gold outcomes centred at ``outcome_means[k]`` with SD
    ``outcome_sd``; residuals (gold minus surrogate) in stratum k have mean
    ``resid_means[k]`` and SD ``resid_sds[k]``.
    """

    N: int = 5000
    effect: float = 0.3
    outcome_means: tuple[float, ...] = (1.0, 3.0, 5.0, 7.0)
    outcome_sd: float = 6.0
    resid_means: tuple[float, ...] = (-1.0, -2.0, -4.0, -8.0)
    resid_sds: tuple[float, ...] = (0.2, 0.4, 0.8, 3.2)


def generate_corpus(cfg: CorpusConfig = CorpusConfig(), seed: Seed | int = 0) -> tuple[PopulationTable, StrataAssignment]:
    """Equal-size strata in each arm, stratum labels stored in the table."""
    rng = as_seed(seed).rng(7, 7)
    K = len(cfg.outcome_means)
    m = cfg.N // 2
    arm = np.repeat([0, 1], m)
    stratum = np.concatenate([np.sort(np.arange(m) % K)] * 2)
    mu = np.asarray(cfg.outcome_means)[stratum] + cfg.effect * arm
    y = mu + rng.normal(0.0, cfg.outcome_sd, cfg.N)
    e = np.asarray(cfg.resid_means)[stratum] + rng.normal(0.0, 1.0, cfg.N) * np.asarray(cfg.resid_sds)[stratum]
    width = len(str(cfg.N - 1))
    table = PopulationTable(
        ids=[f"c{i:0{width}d}" for i in range(cfg.N)], y_hat=y - e, arm=arm, y=y, stratum=stratum + 1, mode=Mode.TWO_ARM
    )
    return table, StrataAssignment(stratum + 1, arm)
