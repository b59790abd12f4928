"""
局所時間と検証
Local-time estimation, the Y = ½L₀ and Tanaka identities, empirical CDF /
Kolmogorov–Smirnov distances and the Monte Carlo verification of stationary
laws, regulator rates and hitting probabilities against the analytic engine.
"""
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from . import kernels
from .analytic import AnalyticProfile, HittingProbabilities, NoStationaryDistributionError
from .coefficients import CoefficientField, DomainError, DomainKind, require_valid
from .config import Scheme, SimConfig
from .logger import run_logger
from .simulator import (
    NOISE_STREAM,
    ExplodedPathError,
    PathSample,
    occupation_local_time,
    path_generator,
    run_ensemble,
)

SE_BAND = 3.0
DEFAULT_KS_THRESHOLD = 0.02
HIST_BINS = 40
EXIT_CHUNK = 4096


class LocalTimeCheck(BaseModel):
    name: str
    level: float
    estimate: float
    target: float
    standard_error: float
    tolerance: float
    # 偏差を標準誤差で割った値; 窓幅による許容分を含まない
    z_score: float
    within_se_band: bool
    passed: bool


class RegulatorEstimate(BaseModel):
    boundary: str
    method: str
    mean: float
    standard_error: float
    target: float
    tolerance: float
    z_score: float
    within_se_band: bool
    passed: bool


class RatioCheck(BaseModel):
    estimate: float
    standard_error: float
    target: float
    tolerance: float
    z_score: float
    within_se_band: bool
    passed: bool


class HistogramRow(BaseModel):
    lower: float
    upper: float
    empirical_density: float
    analytic_density: float


class VerificationReport(BaseModel):
    domain: str
    seed: int
    path_count: int
    sample_count: int
    exploded_count: int
    dt: float
    horizon: float
    burn_in: float
    epsilon: float
    ks_distance: float
    ks_threshold: float
    ks_passed: bool
    regulator_estimates: List[RegulatorEstimate] = Field(default_factory=list)
    analytic_targets: Dict[str, float] = Field(default_factory=dict)
    localtime_checks: List[LocalTimeCheck] = Field(default_factory=list)
    ratio_check: Optional[RatioCheck] = None
    histogram: List[HistogramRow] = Field(default_factory=list)
    passed: bool


class HittingEstimate(BaseModel):
    path_count: int
    p_c_first: float
    p_d_first: float
    standard_error_c: float
    standard_error_d: float
    unresolved: int
    target: HittingProbabilities
    passed: bool


def mean_and_se(values: np.ndarray) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        return (float(values.mean()) if n else math.nan), math.nan
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n))


def default_epsilon(field: CoefficientField, dt: float, level: float) -> float:
    """ε = 5·σ̄·√dt (σ̄ は level 近傍での σ の最大値)"""
    reach = 5.0 * float(field.sigma(level)) * math.sqrt(dt)
    probes = np.clip(level + np.linspace(-reach, reach, 21), field.domain.lower, field.domain.upper)
    return 5.0 * float(np.max(field.sigma(probes))) * math.sqrt(dt)


def bandwidth_allowance(field: CoefficientField, level: float, epsilon: float, target: float) -> float:
    """占有窓の一次バイアス |β(level)|·ε/2·|target|"""
    return abs(float(field.beta(level))) * epsilon / 2.0 * abs(target)


def estimate_local_time(path: PathSample, field: CoefficientField, x: float, epsilon: float) -> float:
    """
    L_x(horizon) ≈ Σ_k 1(|z_k − x| < ε)·σ²(z_k)·dt / |(x − ε, x + ε) ∩ domain|

    In the interior the window has length 2ε; at a reflecting boundary only
    the inside half counts.
    """
    field.require_domain(x)
    return occupation_local_time(path, field, x, epsilon)


def check_y_halfL0(path: PathSample, field: CoefficientField, epsilon: Optional[float] = None) -> float:
    """Y(horizon) − ½·L₀(horizon)"""
    if path.mode not in (kernels.MODE_SYMMETRIZED, kernels.MODE_PROJECTED_HALF):
        raise ValueError("Y = ½L₀ applies to one-sided paths")
    if path.exploded:
        raise ExplodedPathError(f"path {path.rng_stream} exploded at t={path.explosion_time}")
    if epsilon is None:
        epsilon = default_epsilon(field, path.dt, 0.0)
    return float(path.y_net[-1]) - 0.5 * estimate_local_time(path, field, 0.0, epsilon)


def tanaka_residual(path: PathSample, a: float, epsilon: float) -> float:
    """
    |X(T) − a| − |X(0) − a| − Σ sgn(X_k − a)(X_{k+1} − X_k) − L̂_a(T)

    sgn(0) = −1 here. Needs the unreflected states of a full-line path.
    """
    if path.mode != kernels.MODE_RAW:
        raise ValueError("tanaka_residual needs a full-line path")
    if path.exploded:
        raise ExplodedPathError(f"path {path.rng_stream} exploded at t={path.explosion_time}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    dqv = np.diff(path.qv)
    local_time = kernels.occupation(path.x_raw, dqv, a, epsilon, 0) / (2.0 * epsilon)
    return float(kernels.tanaka_increment(path.x_raw, a)) - local_time


def empirical_cdf(samples: Sequence[float], x):
    samples = np.sort(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("empirical_cdf needs at least one sample")
    value = np.searchsorted(samples, x, side="right") / samples.size
    return float(value) if np.ndim(value) == 0 else value


def ks_distance(samples: Sequence[float], cdf: Callable) -> float:
    """sup_x |F_n(x) − F(x)| (順序統計量による)"""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("ks_distance needs at least one sample")
    return float(stats.kstest(samples, cdf).statistic)


def histogram_bins(profile: AnalyticProfile, count: int = HIST_BINS) -> np.ndarray:
    domain = profile.domain
    lo = domain.lower if math.isfinite(domain.lower) else profile.sample_stationary(0.001)
    hi = domain.upper if math.isfinite(domain.upper) else profile.sample_stationary(0.999)
    return np.linspace(lo, hi, count + 1)


def _histogram_rows(profile: AnalyticProfile, edges: np.ndarray, counts: np.ndarray) -> List[HistogramRow]:
    total = counts.sum()
    widths = np.diff(edges)
    analytic = np.diff(profile.stationary_cdf(edges)) / widths
    empirical = counts / (total * widths) if total else np.zeros_like(widths)
    return [
        HistogramRow(lower=float(lo), upper=float(hi), empirical_density=float(e), analytic_density=float(h))
        for lo, hi, e, h in zip(edges[:-1], edges[1:], empirical, analytic)
    ]


def z_score(deviation: float, se: float) -> float:
    """偏差の標準誤差単位での大きさ"""
    if deviation == 0.0:
        return 0.0
    if not se > 0.0:
        return math.copysign(math.inf, deviation) if se == 0.0 else math.nan
    return deviation / se


def _se_fields(deviation: float, se: float) -> Dict[str, object]:
    z = z_score(deviation, se)
    return {"z_score": z, "within_se_band": abs(z) <= SE_BAND}


def _regulator_estimate(boundary: str, method: str, values: np.ndarray, target: float,
                        allowance: float = 0.0) -> RegulatorEstimate:
    mean, se = mean_and_se(values)
    tolerance = SE_BAND * se + allowance
    return RegulatorEstimate(boundary=boundary, method=method, mean=mean, standard_error=se,
                             target=target, tolerance=tolerance, **_se_fields(mean - target, se),
                             passed=abs(mean - target) <= tolerance)


def _local_time_check(name: str, level: float, residuals: np.ndarray, allowance: float) -> LocalTimeCheck:
    mean, se = mean_and_se(residuals)
    tolerance = SE_BAND * se + allowance
    return LocalTimeCheck(name=name, level=level, estimate=mean, target=0.0, standard_error=se,
                          tolerance=tolerance, **_se_fields(mean, se), passed=abs(mean) <= tolerance)


def _ratio_check(numerator: np.ndarray, denominator: np.ndarray, target: float, allowance: float) -> RatioCheck:
    n = numerator.size
    m_a, m_0 = float(numerator.mean()), float(denominator.mean())
    ratio = m_a / m_0
    if n > 1:
        cov = np.cov(numerator, denominator, ddof=1)
        variance = (cov[0, 0] - 2.0 * ratio * cov[0, 1] + ratio ** 2 * cov[1, 1]) / (m_0 ** 2 * n)
        se = math.sqrt(max(variance, 0.0))
    else:
        se = math.nan
    tolerance = SE_BAND * se + allowance
    return RatioCheck(estimate=ratio, standard_error=se, target=target, tolerance=tolerance,
                      **_se_fields(ratio - target, se),
                      passed=abs(ratio - target) <= tolerance)


def verify_stationarity(field: CoefficientField, cfg: SimConfig, *,
                        ks_threshold: float = DEFAULT_KS_THRESHOLD,
                        epsilon: Optional[float] = None,
                        bins: Optional[np.ndarray] = None,
                        workers: Optional[int] = None,
                        progress: bool = False) -> VerificationReport:
    """
    定常分布とレギュレータ期待値をシミュレーションで検証する

    Paths start from the stationary law and pooled endpoints are compared to
    the analytic CDF. Regulator rates are averaged over the last unit of time
    after burn-in. For an interval Y_a is taken from the folded driver's local
    time at a and also from the split regulator.
    """
    profile = AnalyticProfile(field)
    if not profile.positive_recurrent:
        raise NoStationaryDistributionError(
            f"{field.domain.kind.value} field has no stationary distribution (C = {profile.C!r})")
    cfg = cfg.model_copy(update={"x0": None})
    kind = field.domain.kind

    levels: List[float] = []
    if kind != DomainKind.FULL_LINE:
        levels.append(0.0)
    if kind == DomainKind.INTERVAL:
        levels.append(field.domain.a)
    if epsilon is None:
        epsilon = max((default_epsilon(field, cfg.dt, level) for level in levels),
                      default=default_epsilon(field, cfg.dt, 0.0))
    edges = np.asarray(bins, dtype=float) if bins is not None else histogram_bins(profile)

    ensemble = run_ensemble(field, cfg, levels=levels, epsilon=epsilon, bins=edges,
                            workers=workers, progress=progress)
    samples = ensemble.endpoints()
    ks = ks_distance(samples, profile.stationary_cdf)

    report = VerificationReport(
        domain=kind.value,
        seed=cfg.seed,
        path_count=cfg.path_count,
        sample_count=int(samples.size),
        exploded_count=ensemble.exploded_count,
        dt=cfg.dt,
        horizon=cfg.horizon,
        burn_in=cfg.burn_in,
        epsilon=epsilon,
        ks_distance=ks,
        ks_threshold=ks_threshold,
        ks_passed=ks <= ks_threshold,
        analytic_targets={"C": profile.C},
        histogram=_histogram_rows(profile, edges, ensemble.histogram()),
        passed=False,
    )

    if kind != DomainKind.FULL_LINE:
        expectations = profile.regulator_expectations()
        length = ensemble.window_length
        report.analytic_targets["ey0"] = expectations.ey0

        y0 = ensemble.column("y0_window") / length
        lt0 = ensemble.local_time_window(0) / length
        report.regulator_estimates.append(_regulator_estimate("0", "regulator", y0, expectations.ey0))
        report.localtime_checks.append(_local_time_check(
            "y_half_l0", 0.0, y0 - 0.5 * lt0,
            bandwidth_allowance(field, 0.0, epsilon, expectations.ey0)))

        if kind == DomainKind.INTERVAL:
            a = field.domain.a
            exp_b_a = math.exp(profile.cumulative_beta(a))
            report.analytic_targets["eya"] = expectations.eya
            report.analytic_targets["exp_B_a"] = exp_b_a
            allowance = bandwidth_allowance(field, a, epsilon, expectations.eya)

            ya = ensemble.column("ya_window") / length
            ya_local = 0.5 * ensemble.local_time_window(1) / length
            report.regulator_estimates.append(_regulator_estimate("a", "regulator", ya, expectations.eya))
            report.regulator_estimates.append(
                _regulator_estimate("a", "local_time", ya_local, expectations.eya, allowance))
            report.localtime_checks.append(_local_time_check("y_a_half_l_a", a, ya - ya_local, allowance))
            report.ratio_check = _ratio_check(
                ya_local, y0, exp_b_a, bandwidth_allowance(field, a, epsilon, exp_b_a))

    checks = [report.ks_passed, report.exploded_count == 0]
    checks += [r.passed for r in report.regulator_estimates]
    checks += [c.passed for c in report.localtime_checks]
    if report.ratio_check is not None:
        checks.append(report.ratio_check.passed)
    report.passed = all(checks)

    run_logger.log_app(
        "info", f"verify: ks={ks:.6g} (threshold {ks_threshold}), passed={report.passed}")
    return report


def estimate_hitting_probabilities(field: CoefficientField, cfg: SimConfig,
                                   c: float, x: float, d: float) -> HittingEstimate:
    """
    駆動過程の初到達頻度 (c と d のどちらに先に到達するか)

    Half-line fields run the symmetrized driver, full-line fields run
    unreflected. Paths still inside (c, d) at the horizon are counted as
    unresolved.
    """
    if not c < x < d:
        raise ValueError(f"hitting probabilities need c < x < d, got c={c}, x={x}, d={d}")
    require_valid(field)
    kind = field.domain.kind
    if kind == DomainKind.HALF_LINE:
        mode = kernels.MODE_SYMMETRIZED
    elif kind == DomainKind.FULL_LINE:
        mode = kernels.MODE_RAW
    else:
        raise DomainError("hitting probabilities are estimated for half_line and full_line fields")

    target = AnalyticProfile(field).hitting_probabilities(c, x, d)
    max_steps = cfg.n_steps
    hits_c = hits_d = 0
    for i in range(cfg.path_count):
        gen = path_generator(cfg.seed, i, NOISE_STREAM)
        pos, steps, side = x, 0, 0
        while steps < max_steps:
            xi = gen.standard_normal(min(EXIT_CHUNK, max_steps - steps))
            pos, taken, side = kernels.first_exit(field.packed, mode, 0.0, pos, c, d, cfg.dt, xi)
            steps += taken
            if side != 0:
                break
        if side < 0:
            hits_c += 1
        elif side > 0:
            hits_d += 1

    n = cfg.path_count
    p_c, p_d = hits_c / n, hits_d / n
    se_c = math.sqrt(p_c * (1.0 - p_c) / n)
    se_d = math.sqrt(p_d * (1.0 - p_d) / n)
    passed = (abs(p_c - target.p_c_first) <= SE_BAND * se_c
              and abs(p_d - target.p_d_first) <= SE_BAND * se_d)
    return HittingEstimate(path_count=n, p_c_first=p_c, p_d_first=p_d, standard_error_c=se_c,
                           standard_error_d=se_d, unresolved=n - hits_c - hits_d,
                           target=target, passed=passed)


def compare_schemes(field: CoefficientField, cfg: SimConfig, *, workers: Optional[int] = None) -> float:
    """対称化 Euler と射影 Euler の終点分布の二標本 KS 距離"""
    symmetrized = run_ensemble(field, cfg.model_copy(update={"scheme": Scheme.SYMMETRIZED}), workers=workers)
    projected = run_ensemble(field, cfg.model_copy(update={"scheme": Scheme.PROJECTED}), workers=workers)
    return float(stats.ks_2samp(symmetrized.endpoints(), projected.endpoints()).statistic)
