"""
経路シミュレーション
Euler–Maruyama simulation of the full-line driver, reflected through |x|
(one boundary) or the fold map g (two boundaries), regulator extraction and
the parallel ensemble runner.
"""
import asyncio
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm.asyncio import tqdm

from . import kernels
from .analytic import AnalyticProfile
from .coefficients import CoefficientField, DomainError, DomainKind, require_valid
from .config import Scheme, SimConfig, get_worker_count
from .logger import run_logger

# SeedSequence の spawn_key 第2成分
START_STREAM = 0
NOISE_STREAM = 1

BATCH_SIZE = 64


class ExplodedPathError(RuntimeError):
    """爆発で打ち切られた経路"""


class PathSample(BaseModel):
    """一本の反射経路"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rng_stream: int
    mode: int
    a: float = 0.0
    dt: float
    times: np.ndarray
    x_raw: np.ndarray
    z: np.ndarray
    dW: np.ndarray
    qv: np.ndarray
    push: np.ndarray
    y_net: Optional[np.ndarray] = None
    exploded: bool = False
    explosion_time: Optional[float] = None

    @property
    def noise_sign(self) -> np.ndarray:
        """W̃ / Ŵ を作る符号 (sgn(x), sgn(a − x), 射影とそのままなら 1)"""
        x = self.x_raw[:-1]
        if self.mode == kernels.MODE_SYMMETRIZED:
            return np.sign(x)
        if self.mode == kernels.MODE_FOLDED:
            return np.sign(self.a - x)
        return np.ones_like(x)


def path_generator(seed: int, stream: int, purpose: int) -> np.random.Generator:
    """(seed, 経路番号, 用途) から決まるカウンタベース乱数"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream, purpose))))


def start_uniform(seed: int, stream: int) -> float:
    return max(path_generator(seed, stream, START_STREAM).random(), np.finfo(float).tiny)


def driver_mode(field: CoefficientField, scheme: Scheme) -> int:
    kind = field.domain.kind
    if kind == DomainKind.HALF_LINE:
        return kernels.MODE_PROJECTED_HALF if scheme == Scheme.PROJECTED else kernels.MODE_SYMMETRIZED
    if kind == DomainKind.INTERVAL:
        return kernels.MODE_PROJECTED_INTERVAL if scheme == Scheme.PROJECTED else kernels.MODE_FOLDED
    return kernels.MODE_RAW


def _start_state(field: CoefficientField, cfg: SimConfig, rng_stream: int, x0: Optional[float]) -> float:
    if x0 is not None:
        return float(x0)
    if cfg.x0 is not None:
        return cfg.x0
    profile = AnalyticProfile(field)
    if profile.positive_recurrent:
        return profile.sample_stationary(start_uniform(cfg.seed, rng_stream))
    return 0.0


def _simulate(field: CoefficientField, cfg: SimConfig, rng_stream: int, mode: int,
              z0: float, x_raw0: Optional[float] = None, noise: Optional[np.ndarray] = None) -> PathSample:
    field.require_domain(z0)
    a = field.domain.a if field.domain.kind == DomainKind.INTERVAL else 0.0
    if noise is None:
        noise = path_generator(cfg.seed, rng_stream, NOISE_STREAM).standard_normal(cfg.n_steps)
    xi = np.ascontiguousarray(noise, dtype=float)
    x_start = z0 if x_raw0 is None else float(x_raw0)

    x_raw, z, dw, push, exploded = kernels.euler_path(
        field.packed, mode, a, x_start, cfg.dt, xi, cfg.explosion_bound)

    steps = dw.shape[0]
    vol = field.sigma(z[:steps]) if steps else np.zeros(0)
    qv = np.concatenate(([0.0], np.cumsum(vol ** 2 * cfg.dt)))
    path = PathSample(
        rng_stream=rng_stream,
        mode=mode,
        a=a,
        dt=cfg.dt,
        times=np.arange(steps + 1) * cfg.dt,
        x_raw=x_raw,
        z=z,
        dW=dw,
        qv=qv,
        push=push,
        exploded=bool(exploded),
        explosion_time=steps * cfg.dt if exploded else None,
    )
    if path.exploded:
        run_logger.log_app("warning", f"path {rng_stream} exploded at t={path.explosion_time:.6g}")
    else:
        path.y_net = extract_regulator(path, field)
    return path


def simulate_one_sided(field: CoefficientField, cfg: SimConfig, rng_stream: int, *,
                       x0: Optional[float] = None, noise: Optional[np.ndarray] = None) -> PathSample:
    """原点で反射される経路 Z = |X̃| (scheme=projected ならクランプ方式)"""
    if field.domain.kind != DomainKind.HALF_LINE:
        raise DomainError(f"one-sided simulation needs a half_line field, got {field.domain.kind.value}")
    require_valid(field)
    z0 = _start_state(field, cfg, rng_stream, x0)
    return _simulate(field, cfg, rng_stream, driver_mode(field, cfg.scheme), z0, noise=noise)


def simulate_two_sided(field: CoefficientField, cfg: SimConfig, rng_stream: int, *,
                       x0: Optional[float] = None, x_raw0: Optional[float] = None,
                       noise: Optional[np.ndarray] = None) -> PathSample:
    """
    [0, a] で反射される経路 U = g(X̂)

    ``x_raw0`` starts the driver at a given point of the circle [0, 2a); the
    reflected start is then g(x_raw0).
    """
    if field.domain.kind != DomainKind.INTERVAL:
        raise DomainError(f"two-sided simulation needs an interval field, got {field.domain.kind.value}")
    require_valid(field)
    mode = driver_mode(field, cfg.scheme)
    if x_raw0 is not None:
        if mode != kernels.MODE_FOLDED:
            raise ValueError("x_raw0 applies to the folded driver only")
        z0 = float(kernels.tent(field.domain.a, float(x_raw0)))
        return _simulate(field, cfg, rng_stream, mode, z0, x_raw0=x_raw0, noise=noise)
    z0 = _start_state(field, cfg, rng_stream, x0)
    return _simulate(field, cfg, rng_stream, mode, z0, noise=noise)


def simulate_full_line(field: CoefficientField, cfg: SimConfig, rng_stream: int, *,
                       x0: Optional[float] = None, noise: Optional[np.ndarray] = None) -> PathSample:
    """反射なしの ℝ 上の経路 (z = x_raw)"""
    if field.domain.kind != DomainKind.FULL_LINE:
        raise DomainError(f"full-line simulation needs a full_line field, got {field.domain.kind.value}")
    require_valid(field)
    z0 = _start_state(field, cfg, rng_stream, x0)
    return _simulate(field, cfg, rng_stream, kernels.MODE_RAW, z0, noise=noise)


def simulate_path(field: CoefficientField, cfg: SimConfig, rng_stream: int, *,
                  x0: Optional[float] = None) -> PathSample:
    kind = field.domain.kind
    if kind == DomainKind.HALF_LINE:
        return simulate_one_sided(field, cfg, rng_stream, x0=x0)
    if kind == DomainKind.INTERVAL:
        return simulate_two_sided(field, cfg, rng_stream, x0=x0)
    return simulate_full_line(field, cfg, rng_stream, x0=x0)


def extract_regulator(path: PathSample, field: CoefficientField) -> np.ndarray:
    """
    Y_n = z_n − z_0 − Σ σ(z_k)·s_k·dW_k − Σ b(z_k)·dt

    s_k is the driver's noise sign. For two boundaries the series is the net
    Y₀ − Y_a.
    """
    if path.exploded:
        raise ExplodedPathError(f"path {path.rng_stream} exploded at t={path.explosion_time}")
    zk = path.z[:-1]
    if zk.size == 0:
        return np.zeros(1)
    increments = np.diff(path.z) - path.noise_sign * field.sigma(zk) * path.dW - field.b(zk) * path.dt
    return np.concatenate(([0.0], np.cumsum(increments)))


def split_regulator(y_net: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """正味のレギュレータを (Y₀, Y_a) に分ける"""
    increments = np.diff(y_net)
    y0 = np.concatenate(([0.0], np.cumsum(np.maximum(increments, 0.0))))
    ya = np.concatenate(([0.0], np.cumsum(np.maximum(-increments, 0.0))))
    return y0, ya


def window_length(field: CoefficientField, level: float, epsilon: float) -> float:
    """|(level − ε, level + ε) ∩ 定義域|"""
    lo = max(level - epsilon, field.domain.lower)
    hi = min(level + epsilon, field.domain.upper)
    return max(hi - lo, 0.0)


def occupation_local_time(path: PathSample, field: CoefficientField, level: float, epsilon: float,
                          start: int = 0) -> float:
    """ステップ start 以降の占有時間から求めた level での局所時間"""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    measure = window_length(field, level, epsilon)
    if measure == 0.0:
        return 0.0
    dqv = np.diff(path.qv)
    return kernels.occupation(path.z, dqv, level, epsilon, start) / measure


class PathSummary(BaseModel):
    index: int
    z0: float
    z_end: float
    exploded: bool = False
    explosion_time: Optional[float] = None
    y_end: float = 0.0
    y0_window: float = 0.0
    ya_window: float = 0.0
    local_time_total: List[float] = Field(default_factory=list)
    local_time_window: List[float] = Field(default_factory=list)
    tanaka: List[float] = Field(default_factory=list)
    histogram: List[int] = Field(default_factory=list)


class EnsembleResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cfg: SimConfig
    levels: List[float]
    epsilon: Optional[float]
    window: Tuple[float, float]
    bins: Optional[List[float]] = None
    summaries: List[PathSummary]
    paths: List[PathSample] = Field(default_factory=list)

    @property
    def exploded_count(self) -> int:
        return sum(1 for s in self.summaries if s.exploded)

    @property
    def completed(self) -> List[PathSummary]:
        return [s for s in self.summaries if not s.exploded]

    @property
    def window_length(self) -> float:
        return self.window[1] - self.window[0]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.completed], dtype=float)

    def endpoints(self) -> np.ndarray:
        return self.column("z_end")

    def local_time_window(self, level_index: int) -> np.ndarray:
        return np.array([s.local_time_window[level_index] for s in self.completed])

    def local_time_total(self, level_index: int) -> np.ndarray:
        return np.array([s.local_time_total[level_index] for s in self.completed])

    def tanaka(self, level_index: int) -> np.ndarray:
        return np.array([s.tanaka[level_index] for s in self.completed])

    def histogram(self) -> np.ndarray:
        counts = np.zeros(len(self.bins) - 1 if self.bins else 0, dtype=np.int64)
        for s in self.completed:
            counts += np.asarray(s.histogram, dtype=np.int64)
        return counts


def _summarize(index: int, path: PathSample, field: CoefficientField, cfg: SimConfig,
               levels: Sequence[float], epsilon: Optional[float], window_start: int,
               burn_index: int, bins: Optional[np.ndarray]) -> PathSummary:
    summary = PathSummary(
        index=index,
        z0=float(path.z[0]),
        z_end=float(path.z[-1]),
        exploded=path.exploded,
        explosion_time=path.explosion_time,
    )
    if path.exploded:
        return summary

    y = path.y_net
    summary.y_end = float(y[-1])
    if field.domain.kind == DomainKind.INTERVAL:
        y0, ya = split_regulator(y)
        summary.y0_window = float(y0[-1] - y0[window_start])
        summary.ya_window = float(ya[-1] - ya[window_start])
    else:
        summary.y0_window = float(y[-1] - y[window_start])

    if epsilon is not None:
        for level in levels:
            total = occupation_local_time(path, field, level, epsilon)
            summary.local_time_total.append(total)
            summary.local_time_window.append(occupation_local_time(path, field, level, epsilon, window_start))
            if path.mode == kernels.MODE_RAW:
                summary.tanaka.append(float(kernels.tanaka_increment(path.x_raw, level)) - total)

    if bins is not None:
        counts, _ = np.histogram(path.z[burn_index:], bins=bins)
        summary.histogram = counts.tolist()
    return summary


async def _run_batches_async(batches: List[range], worker, workers: int, progress: bool):
    """バッチをスレッドプールで並列実行する (numba カーネルは GIL を解放する)"""
    loop = asyncio.get_running_loop()
    executor = ThreadPoolExecutor(max_workers=workers)

    async def process_batch(batch, pbar):
        result = await loop.run_in_executor(executor, worker, batch)
        pbar.update(len(batch))
        return result

    try:
        total = sum(len(batch) for batch in batches)
        with tqdm(total=total, desc="経路", unit="paths", disable=not progress) as pbar:
            results = await asyncio.gather(*(process_batch(batch, pbar) for batch in batches))
    finally:
        executor.shutdown(wait=True)
    return results


def run_ensemble(field: CoefficientField, cfg: SimConfig, *,
                 levels: Sequence[float] = (),
                 epsilon: Optional[float] = None,
                 bins: Optional[Sequence[float]] = None,
                 keep_paths: int = 0,
                 workers: Optional[int] = None,
                 progress: bool = False) -> EnsembleResult:
    """
    cfg.path_count 本の独立な経路を実行して要約を集める

    Every path draws from its own (seed, path index) streams, and summaries
    are merged in path order, so results do not depend on the worker count.
    ``levels``/``epsilon`` select the local-time windows recorded per path;
    ``bins`` collects a histogram of post-burn-in states; the first
    ``keep_paths`` full paths are returned as well.
    """
    require_valid(field)
    mode = driver_mode(field, cfg.scheme)
    n = cfg.path_count

    if cfg.x0 is not None:
        starts = np.full(n, cfg.x0)
    else:
        profile = AnalyticProfile(field)
        if profile.positive_recurrent:
            u = np.array([start_uniform(cfg.seed, i) for i in range(n)])
            starts = np.atleast_1d(profile.sample_stationary(u))
        else:
            starts = np.zeros(n)

    window = (max(cfg.burn_in, cfg.horizon - 1.0), cfg.horizon)
    window_start = cfg.step_index(window[0])
    burn_index = cfg.step_index(cfg.burn_in)
    edges = np.asarray(bins, dtype=float) if bins is not None else None
    levels = [float(level) for level in levels]

    def worker(batch: range):
        out = []
        for i in batch:
            path = _simulate(field, cfg, i, mode, float(starts[i]))
            summary = _summarize(i, path, field, cfg, levels, epsilon, window_start, burn_index, edges)
            out.append((summary, path if i < keep_paths else None))
        return out

    batches = [range(i, min(i + BATCH_SIZE, n)) for i in range(0, n, BATCH_SIZE)]
    workers = workers or get_worker_count()
    run_logger.log_app(
        "info", f"ensemble: {n} paths, {cfg.n_steps} steps, mode={mode}, workers={workers}")

    loop = asyncio.new_event_loop()
    try:
        results = loop.run_until_complete(_run_batches_async(batches, worker, workers, progress))
    finally:
        loop.close()

    summaries: List[PathSummary] = []
    kept: List[PathSample] = []
    for batch_result in results:
        for summary, path in batch_result:
            summaries.append(summary)
            if path is not None:
                kept.append(path)
    summaries.sort(key=lambda s: s.index)
    kept.sort(key=lambda p: p.rng_stream)

    result = EnsembleResult(
        cfg=cfg,
        levels=levels,
        epsilon=epsilon,
        window=window,
        bins=edges.tolist() if edges is not None else None,
        summaries=summaries,
        paths=kept,
    )
    run_logger.log_ensemble_status(len(summaries), n, result.exploded_count)
    return result
