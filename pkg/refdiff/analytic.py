"""
解析エンジン
Scale function, recurrence, stationary density and distribution, normalizing
constant, regulator expectations and hitting probabilities of a reflected
diffusion, evaluated in closed form per segment where possible.
"""
import math
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel
from scipy import integrate

from .coefficients import (
    CoefficientField,
    DomainError,
    DomainKind,
    FuncKind,
    InvalidFieldError,
    Segment,
    validate,
)
from .logger import run_logger

ArrayLike = Union[float, np.ndarray]

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-12
QUAD_LIMIT = 200

BISECTION_TOL = 1e-12
BISECTION_MAX_ITER = 200
BRACKET_MAX_ITER = 1100


class Recurrence(str, Enum):
    RECURRENT = "recurrent"
    TRANSIENT = "transient"


class NoStationaryDistributionError(RuntimeError):
    """定常測度 (または定常分布) が存在しない"""


class RegulatorExpectations(BaseModel):
    ey0: float
    eya: Optional[float] = None


class HittingProbabilities(BaseModel):
    p_c_first: float
    p_d_first: float


def _phi(c: float, t: ArrayLike):
    """∫_0^t exp(c s) ds (t may be ±inf)"""
    if c == 0.0:
        return np.asarray(t, dtype=float) * 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        return np.expm1(c * np.asarray(t, dtype=float)) / c


def _quad(f: Callable[[float], float], lo: float, hi: float, points: List[float]) -> float:
    if lo == hi:
        return 0.0
    sign = 1.0
    if hi < lo:
        lo, hi, sign = hi, lo, -1.0
    inner = sorted(p for p in points if lo < p < hi)
    value, _ = integrate.quad(f, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL,
                              limit=QUAD_LIMIT, points=inner or None)
    return sign * value


class _Piece:
    """一区間分の積分データ。anchor は有限な下端 (なければ上端)"""

    def __init__(self, seg: Segment):
        self.seg = seg
        self.lower = seg.lower
        self.upper = seg.upper
        self.anchor = seg.lower if math.isfinite(seg.lower) else seg.upper
        b, s = seg.b, seg.sigma
        self.beta_constant = b.is_constant and (s.is_constant or b.c0 == 0.0)
        self.sigma_constant = s.is_constant
        self.closed_beta = b.kind != FuncKind.TABLE and s.kind != FuncKind.TABLE
        self.beta0 = 2.0 * b.c0 / s.value(self.anchor) ** 2 if self.beta_constant else math.nan
        self.knots = b.knots + s.knots
        self.b_off = 0.0
        self.eta_off = 0.0
        self.mass_off = 0.0

    def beta(self, y: float) -> float:
        return 2.0 * self.seg.b.value(y) / self.seg.sigma.value(y) ** 2


class AnalyticProfile:
    """
    係数場から構築される解析プロファイル

    B(x) = ∫_0^x β, η(x) = ∫_0^x exp(-B) and the speed density
    h(x) = exp(B(x)) / σ²(x) are stored as per-segment antiderivatives anchored
    at each segment's finite endpoint plus cumulative offsets, so that B(0) = 0
    and η(0) = 0. On the full line B and η are signed for x < 0.
    """

    def __init__(self, field: CoefficientField):
        report = validate(field)
        if not report.ok:
            raise InvalidFieldError(report)
        self.field = field
        self.domain = field.domain
        self._pieces = [_Piece(seg) for seg in field.segments]
        self._lowers = field.lowers
        self._origin = field.segment_index(0.0)

        offsets = self._chain(self._local_B)
        for piece, off in zip(self._pieces, offsets):
            piece.b_off = off
        offsets = self._chain(self._local_eta)
        for piece, off in zip(self._pieces, offsets):
            piece.eta_off = off
        offsets = self._chain(self._local_mass)
        for piece, off in zip(self._pieces, offsets):
            piece.mass_off = off

        self.recurrence, self.positive_recurrent = self._classify()

        first, last = self._pieces[0], self._pieces[-1]
        if self.domain.kind == DomainKind.FULL_LINE:
            self._mass_lo = first.mass_off + float(self._local_mass(first, -math.inf))
        else:
            self._mass_lo = 0.0
        if self.domain.kind == DomainKind.INTERVAL:
            self._mass_hi = self._total(self._local_mass, "mass_off", self.domain.upper)
        else:
            self._mass_hi = last.mass_off + float(self._local_mass(last, math.inf))

        if self.recurrence == Recurrence.RECURRENT:
            self.C = self._mass_hi - self._mass_lo
        else:
            self.C = math.inf

        run_logger.log_app(
            "debug",
            f"profile built: domain={self.domain.kind.value} segments={len(self._pieces)} "
            f"recurrence={self.recurrence.value} C={self.C!r}",
        )

    # -- per-segment antiderivatives -------------------------------------------------

    def _local_B(self, p: _Piece, x: ArrayLike):
        """∫_anchor^x β"""
        seg = p.seg
        t = np.asarray(x, dtype=float) - p.anchor
        if p.beta_constant:
            if p.beta0 == 0.0:
                return np.zeros_like(t)
            return p.beta0 * t
        if p.closed_beta:
            bc0 = seg.b.c0
            bc1 = seg.b.c1 if seg.b.kind == FuncKind.AFFINE else 0.0
            s0 = seg.sigma.c0
            s1 = seg.sigma.c1 if seg.sigma.kind == FuncKind.AFFINE else 0.0
            x = np.asarray(x, dtype=float)
            if s1 == 0.0:
                return (2.0 / s0 ** 2) * (bc0 * t + 0.5 * bc1 * t * (x + p.anchor))
            # σ = u(y) = s0 + s1·y > 0 on the segment
            u_x = s0 + s1 * x
            u_p = s0 + s1 * p.anchor
            k = bc0 - bc1 * s0 / s1
            return (2.0 / s1) * (k * (1.0 / u_p - 1.0 / u_x) + (bc1 / s1) * np.log(u_x / u_p))
        return self._quad_each(p.beta, p, x)

    def _B_at(self, p: _Piece, y: float) -> float:
        return p.b_off + float(self._local_B(p, y))

    def _local_eta(self, p: _Piece, x: ArrayLike):
        """∫_anchor^x exp(-B)"""
        if p.beta_constant:
            t = np.asarray(x, dtype=float) - p.anchor
            return np.exp(-p.b_off) * _phi(-p.beta0, t)
        return self._quad_each(lambda y: float(np.exp(-self._B_at(p, y))), p, x)

    def _local_mass(self, p: _Piece, x: ArrayLike):
        """∫_anchor^x exp(B) / σ²"""
        if p.beta_constant and p.sigma_constant:
            t = np.asarray(x, dtype=float) - p.anchor
            return np.exp(p.b_off) / p.seg.sigma.c0 ** 2 * _phi(p.beta0, t)
        sigma = p.seg.sigma
        return self._quad_each(lambda y: float(np.exp(self._B_at(p, y))) / sigma.value(y) ** 2, p, x)

    @staticmethod
    def _quad_each(f: Callable[[float], float], p: _Piece, x: ArrayLike):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            return np.float64(_quad(f, p.anchor, float(x), p.knots))
        return np.array([_quad(f, p.anchor, float(v), p.knots) for v in x.ravel()]).reshape(x.shape)

    def _chain(self, local) -> np.ndarray:
        """F(0) = 0 となるよう各区間の anchor におけるオフセットを原点から外側へ積み上げる"""
        pieces = self._pieces
        n = len(pieces)
        off = np.zeros(n)
        k = self._origin
        off[k] = -float(local(pieces[k], 0.0))
        for i in range(k + 1, n):
            prev = pieces[i - 1]
            off[i] = off[i - 1] + float(local(prev, prev.upper))
        for i in range(k - 1, -1, -1):
            piece = pieces[i]
            if math.isfinite(piece.lower):
                off[i] = off[i + 1] - float(local(piece, piece.upper))
            else:
                off[i] = off[i + 1]
        return off

    def _total(self, local, attr: str, x: float) -> float:
        i = self.field.segment_index(x)
        p = self._pieces[i]
        return getattr(p, attr) + float(local(p, x))

    def _piecewise(self, local, attr: str, x: ArrayLike):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        out = np.empty(xs.shape)
        idx = np.clip(np.searchsorted(self._lowers, xs, side="right") - 1, 0, len(self._pieces) - 1)
        for i in np.unique(idx):
            mask = idx == i
            p = self._pieces[i]
            out[mask] = getattr(p, attr) + local(p, xs[mask])
        return float(out[0]) if scalar else out

    # -- recurrence ------------------------------------------------------------------------

    def _classify(self):
        kind = self.domain.kind
        if kind == DomainKind.INTERVAL:
            return Recurrence.RECURRENT, True
        beta_plus = self._pieces[-1].beta0
        if kind == DomainKind.HALF_LINE:
            recurrent = beta_plus <= 0.0
            positive = beta_plus < 0.0
        else:
            beta_minus = self._pieces[0].beta0
            recurrent = beta_plus <= 0.0 and beta_minus >= 0.0
            positive = beta_plus < 0.0 and beta_minus > 0.0
        return (Recurrence.RECURRENT if recurrent else Recurrence.TRANSIENT), positive

    def classify_recurrence(self) -> Recurrence:
        return self.recurrence

    @property
    def tail_betas(self):
        """(β₋, β₊): 左右の無限区間における β (存在しなければ None)"""
        first, last = self._pieces[0], self._pieces[-1]
        beta_minus = first.beta0 if not math.isfinite(first.lower) else None
        beta_plus = last.beta0 if not math.isfinite(last.upper) else None
        return beta_minus, beta_plus

    @property
    def eta_infinity(self) -> float:
        """η(∞) (区間上では η(a))"""
        last = self._pieces[-1]
        upper = self.domain.upper
        return last.eta_off + float(self._local_eta(last, upper))

    # -- queries -----------------------------------------------------------------------------

    def cumulative_beta(self, x: ArrayLike):
        """B(x) = ∫_0^x β(u) du"""
        self.field.require_domain(x)
        return self._piecewise(self._local_B, "b_off", x)

    def scale_function(self, x: ArrayLike, extend: bool = False):
        """
        η(x) = ∫_0^x exp(-B(y)) dy

        With ``extend=True`` a half-line profile is evaluated through its odd
        extension η(-x) = -η(x), the scale function of the symmetrized driver.
        """
        if extend and self.domain.kind == DomainKind.HALF_LINE:
            x = np.asarray(x, dtype=float)
            self.field.require_domain(np.abs(x))
            value = np.sign(x) * self._piecewise(self._local_eta, "eta_off", np.abs(x))
            return float(value) if np.ndim(value) == 0 else value
        self.field.require_domain(x)
        return self._piecewise(self._local_eta, "eta_off", x)

    def _require_recurrent(self):
        if self.recurrence != Recurrence.RECURRENT:
            raise NoStationaryDistributionError(
                f"{self.domain.kind.value} profile is transient: no stationary measure"
            )

    def _require_positive_recurrent(self):
        self._require_recurrent()
        if not self.positive_recurrent:
            raise NoStationaryDistributionError("C = inf: stationary measure is not normalizable")

    def stationary_density(self, x: ArrayLike):
        """非正規化密度 h(x) = exp(B(x)) / σ²(x)"""
        self._require_recurrent()
        B = self.cumulative_beta(x)
        return np.exp(B) / self.field.sigma(x) ** 2

    def normalizing_constant(self) -> float:
        self._require_recurrent()
        return self.C

    def stationary_cdf(self, x: ArrayLike):
        self._require_positive_recurrent()
        x = np.clip(np.asarray(x, dtype=float), self.domain.lower, self.domain.upper)
        mass = self._piecewise(self._local_mass, "mass_off", x)
        return np.clip((mass - self._mass_lo) / self.C, 0.0, 1.0)

    def _bracket(self, u: np.ndarray):
        lower, upper = self.domain.lower, self.domain.upper
        if math.isfinite(lower):
            lo = np.full(u.shape, lower)
        else:
            start = min(0.0, self._lowers[1] if len(self._lowers) > 1 else 0.0) - 1.0
            lo = np.full(u.shape, start)
            step = 1.0
            for _ in range(BRACKET_MAX_ITER):
                outside = self.stationary_cdf(lo) >= u
                if not np.any(outside):
                    break
                lo = np.where(outside, lo - step, lo)
                step *= 2.0
        if math.isfinite(upper):
            hi = np.full(u.shape, upper)
        else:
            finite = self._lowers[np.isfinite(self._lowers)]
            start = max(0.0, float(finite.max()) if finite.size else 0.0) + 1.0
            hi = np.full(u.shape, start)
            step = 1.0
            for _ in range(BRACKET_MAX_ITER):
                outside = self.stationary_cdf(hi) < u
                if not np.any(outside):
                    break
                hi = np.where(outside, hi + step, hi)
                step *= 2.0
        return lo, hi

    def sample_stationary(self, u: ArrayLike):
        """逆CDF法: stationary_cdf(x) = u となる x を二分法で求める"""
        self._require_positive_recurrent()
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        if not np.all((u > 0.0) & (u < 1.0)):
            raise ValueError("u must lie in (0, 1)")
        lo, hi = self._bracket(u)
        for _ in range(BISECTION_MAX_ITER):
            if np.all(hi - lo <= BISECTION_TOL):
                break
            mid = 0.5 * (lo + hi)
            if np.all((mid == lo) | (mid == hi)):
                break
            right = self.stationary_cdf(mid) < u
            lo = np.where(right, mid, lo)
            hi = np.where(right, hi, mid)
        return float(hi[0]) if scalar else hi

    def regulator_expectations(self) -> RegulatorExpectations:
        """E[Y₀(1)] = ½C⁻¹, E[Y_a(1)] = ½C⁻¹·exp(B(a))"""
        self._require_positive_recurrent()
        if self.domain.kind == DomainKind.FULL_LINE:
            raise DomainError("full-line profile has no reflecting boundary")
        ey0 = 0.5 / self.C
        if self.domain.kind == DomainKind.INTERVAL:
            return RegulatorExpectations(ey0=ey0, eya=ey0 * math.exp(self.cumulative_beta(self.domain.a)))
        return RegulatorExpectations(ey0=ey0)

    def hitting_probabilities(self, c: float, x: float, d: float) -> HittingProbabilities:
        """P_x[τ_c < τ_d] と P_x[τ_d < τ_c]"""
        if not c < x < d:
            raise ValueError(f"hitting probabilities need c < x < d, got c={c}, x={x}, d={d}")
        eta_c, eta_x, eta_d = (self.scale_function(v, extend=True) for v in (c, x, d))
        span = eta_d - eta_c
        return HittingProbabilities(p_c_first=(eta_d - eta_x) / span, p_d_first=(eta_x - eta_c) / span)
