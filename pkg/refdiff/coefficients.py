"""
係数モデル
Piecewise drift b(x) and deviation sigma(x) over a half-line, an interval
[0, a] or the full line, with validation and pointwise evaluation of b, sigma
and beta = 2b / sigma^2.
"""
import math
from enum import Enum
from functools import cached_property
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import kernels

ArrayLike = Union[float, np.ndarray]


class DomainError(ValueError):
    """定義域外の点での評価、または変換に対する定義域の種類の誤り"""


class DomainKind(str, Enum):
    HALF_LINE = "half_line"
    INTERVAL = "interval"
    FULL_LINE = "full_line"


class FuncKind(str, Enum):
    CONSTANT = "constant"
    AFFINE = "affine"
    TABLE = "table"


_KIND_CODES = {
    FuncKind.CONSTANT: kernels.SPEC_CONSTANT,
    FuncKind.AFFINE: kernels.SPEC_AFFINE,
    FuncKind.TABLE: kernels.SPEC_TABLE,
}


class DomainSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DomainKind
    a: Optional[float] = Field(default=None, description="interval width (interval only)")

    @property
    def lower(self) -> float:
        return -math.inf if self.kind == DomainKind.FULL_LINE else 0.0

    @property
    def upper(self) -> float:
        if self.kind == DomainKind.INTERVAL:
            return self.a if self.a is not None else math.nan
        return math.inf

    def contains(self, x: ArrayLike):
        x = np.asarray(x, dtype=float)
        return np.isfinite(x) & (x >= self.lower) & (x <= self.upper)


class FuncSpec(BaseModel):
    """Constant(c0), Affine(c0 + c1·x) or a linearly interpolated Table"""
    model_config = ConfigDict(frozen=True)

    kind: FuncKind
    c0: float = 0.0
    c1: float = 0.0
    points: List[Tuple[float, float]] = Field(default_factory=list)

    @classmethod
    def constant(cls, value: float) -> "FuncSpec":
        return cls(kind=FuncKind.CONSTANT, c0=value)

    @classmethod
    def affine(cls, c0: float, c1: float) -> "FuncSpec":
        return cls(kind=FuncKind.AFFINE, c0=c0, c1=c1)

    @classmethod
    def table(cls, points) -> "FuncSpec":
        return cls(kind=FuncKind.TABLE, points=[(float(x), float(v)) for x, v in points])

    @property
    def is_constant(self) -> bool:
        return self.kind == FuncKind.CONSTANT

    @property
    def knots(self) -> List[float]:
        return [x for x, _ in self.points]

    def value(self, x: float) -> float:
        if self.kind == FuncKind.CONSTANT:
            return self.c0
        if self.kind == FuncKind.AFFINE:
            return self.c0 + self.c1 * x
        xs, vs = zip(*self.points)
        return float(np.interp(x, xs, vs))

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == FuncKind.CONSTANT:
            return np.full(x.shape, self.c0)
        if self.kind == FuncKind.AFFINE:
            return self.c0 + self.c1 * x
        xs, vs = zip(*self.points)
        return np.interp(x, xs, vs)

    def minimum(self, lower: float, upper: float) -> float:
        """[lower, upper] 上の最小値"""
        if self.kind == FuncKind.CONSTANT:
            return self.c0
        if self.kind == FuncKind.AFFINE:
            if self.c1 == 0.0:
                return self.c0
            return min(self.c0 + self.c1 * lower, self.c0 + self.c1 * upper)
        probes = [lower, upper] + [x for x in self.knots if lower < x < upper]
        return float(np.min(self.values(np.array(probes))))

    def reflected(self, pivot: float, negate: bool = False) -> "FuncSpec":
        """x ↦ f(pivot − x) (negate=True なら −f(pivot − x))"""
        s = -1.0 if negate else 1.0
        if self.kind == FuncKind.CONSTANT:
            return FuncSpec.constant(s * self.c0)
        if self.kind == FuncKind.AFFINE:
            return FuncSpec.affine(s * (self.c0 + self.c1 * pivot), -s * self.c1)
        return FuncSpec.table([(pivot - x, s * v) for x, v in reversed(self.points)])


class Segment(BaseModel):
    """[lower, upper) 上の係数。upper / lower は "inf" / "-inf" を受け付ける"""
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="strings")

    lower: float
    upper: float
    b: FuncSpec
    sigma: FuncSpec

    @field_validator("lower", "upper", mode="before")
    @classmethod
    def _parse_extended_real(cls, v):
        if isinstance(v, str):
            try:
                return float(v)
            except ValueError:
                raise ValueError(f"not an extended real: {v!r}")
        return v

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)


class Violation(BaseModel):
    code: str
    message: str
    segment: Optional[int] = None


class ValidationReport(BaseModel):
    violations: List[Violation] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]


class InvalidFieldError(ValueError):
    """検証に失敗した係数場"""

    def __init__(self, report: ValidationReport):
        self.report = report
        super().__init__("invalid coefficient field: " + "; ".join(report.messages()))


class CoefficientField(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="strings")

    domain: DomainSpec
    segments: List[Segment]

    @classmethod
    def from_json(cls, text: str) -> "CoefficientField":
        return cls.model_validate_json(text)

    @classmethod
    def single(cls, kind: DomainKind, b: FuncSpec, sigma: FuncSpec, a: Optional[float] = None) -> "CoefficientField":
        """一区間だけの係数場"""
        domain = DomainSpec(kind=kind, a=a)
        return cls(domain=domain, segments=[Segment(lower=domain.lower, upper=domain.upper, b=b, sigma=sigma)])

    @cached_property
    def lowers(self) -> np.ndarray:
        return np.array([s.lower for s in self.segments], dtype=float)

    @cached_property
    def packed(self) -> tuple:
        """kernels 用のフラット配列表現"""
        n = len(self.segments)
        kinds = np.zeros((n, 2), dtype=np.int64)
        c0s = np.zeros((n, 2))
        c1s = np.zeros((n, 2))
        starts = np.zeros((n, 2), dtype=np.int64)
        stops = np.zeros((n, 2), dtype=np.int64)
        tx: List[float] = []
        tv: List[float] = []
        for i, seg in enumerate(self.segments):
            for col, spec in ((kernels.COL_B, seg.b), (kernels.COL_SIGMA, seg.sigma)):
                kinds[i, col] = _KIND_CODES[spec.kind]
                c0s[i, col] = spec.c0
                c1s[i, col] = spec.c1
                if spec.kind == FuncKind.TABLE:
                    starts[i, col] = len(tx)
                    tx.extend(x for x, _ in spec.points)
                    tv.extend(v for _, v in spec.points)
                    stops[i, col] = len(tx)
        return (self.lowers, kinds, c0s, c1s, starts, stops,
                np.array(tx, dtype=float), np.array(tv, dtype=float))

    def segment_index(self, x: float) -> int:
        # 右連続
        i = int(np.searchsorted(self.lowers, x, side="right")) - 1
        return max(i, 0)

    def require_domain(self, x: ArrayLike):
        if not np.all(self.domain.contains(x)):
            raise DomainError(f"x={x} is outside the {self.domain.kind.value} domain")

    def _evaluate(self, col: int, x: ArrayLike):
        self.require_domain(x)
        if np.ndim(x) == 0:
            seg = self.segments[self.segment_index(float(x))]
            spec = seg.b if col == kernels.COL_B else seg.sigma
            return spec.value(float(x))
        xs = np.ascontiguousarray(x, dtype=float)
        return kernels.evaluate(self.packed, col, xs.ravel()).reshape(xs.shape)

    def b(self, x: ArrayLike):
        return self._evaluate(kernels.COL_B, x)

    def sigma(self, x: ArrayLike):
        return self._evaluate(kernels.COL_SIGMA, x)

    def beta(self, x: ArrayLike):
        return 2.0 * self.b(x) / self.sigma(x) ** 2


def _check_spec(spec: FuncSpec, name: str, index: int) -> List[Violation]:
    violations = []
    if spec.kind == FuncKind.TABLE:
        if len(spec.points) < 2:
            violations.append(Violation(
                code="table_too_short",
                message=f"table needs at least two points ({name}, segment {index})",
                segment=index))
            return violations
        xs = np.array(spec.knots)
        if np.any(np.diff(xs) <= 0):
            violations.append(Violation(
                code="table_not_increasing",
                message=f"table points not increasing ({name}, segment {index})",
                segment=index))
        values = np.array([v for _, v in spec.points])
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(values))):
            violations.append(Violation(
                code="non_finite_coefficient",
                message=f"non-finite table entry ({name}, segment {index})",
                segment=index))
    elif not (math.isfinite(spec.c0) and math.isfinite(spec.c1)):
        violations.append(Violation(
            code="non_finite_coefficient",
            message=f"non-finite coefficient ({name}, segment {index})",
            segment=index))
    return violations


def validate(field: CoefficientField) -> ValidationReport:
    """
    係数場を検証する

    Violations are returned as data. An empty report means the segments tile
    the domain, every sigma has a strictly positive minimum on its segment,
    table points are increasing and unbounded tails are constant.
    """
    violations: List[Violation] = []
    domain = field.domain

    if domain.kind == DomainKind.INTERVAL:
        if domain.a is None or not (math.isfinite(domain.a) and domain.a > 0):
            violations.append(Violation(code="interval_width", message="interval width a must be positive"))
            return ValidationReport(violations=violations)

    if not field.segments:
        violations.append(Violation(code="no_segments", message="field has no segments"))
        return ValidationReport(violations=violations)

    for i, seg in enumerate(field.segments):
        if math.isnan(seg.lower) or math.isnan(seg.upper) or not seg.lower < seg.upper:
            violations.append(Violation(
                code="empty_segment",
                message=f"segment {i} is empty: [{seg.lower}, {seg.upper})",
                segment=i))
            continue

        spec_violations = _check_spec(seg.b, "b", i) + _check_spec(seg.sigma, "sigma", i)
        violations.extend(spec_violations)

        if not seg.bounded and not (seg.b.is_constant and seg.sigma.is_constant):
            violations.append(Violation(
                code="unbounded_tail_not_constant",
                message=f"unbounded tail not constant (segment {i})",
                segment=i))
            continue

        if not spec_violations and not seg.sigma.minimum(seg.lower, seg.upper) > 0:
            violations.append(Violation(
                code="sigma_not_positive",
                message=f"sigma not positive (segment {i})",
                segment=i))

    first, last = field.segments[0], field.segments[-1]
    if first.lower > domain.lower:
        violations.append(Violation(
            code="gap_in_domain_coverage",
            message=f"gap in domain coverage: [{domain.lower}, {first.lower})",
            segment=0))
    elif first.lower < domain.lower:
        violations.append(Violation(
            code="segment_outside_domain",
            message=f"segment 0 starts below the domain at {first.lower}",
            segment=0))

    for i in range(1, len(field.segments)):
        prev, seg = field.segments[i - 1], field.segments[i]
        if prev.upper < seg.lower:
            violations.append(Violation(
                code="gap_in_domain_coverage",
                message=f"gap in domain coverage: [{prev.upper}, {seg.lower})",
                segment=i))
        elif prev.upper > seg.lower:
            violations.append(Violation(
                code="overlap_in_domain_coverage",
                message=f"overlap in domain coverage: [{seg.lower}, {prev.upper})",
                segment=i))

    if last.upper < domain.upper:
        violations.append(Violation(
            code="gap_in_domain_coverage",
            message=f"gap in domain coverage: [{last.upper}, {domain.upper})",
            segment=len(field.segments) - 1))
    elif last.upper > domain.upper:
        violations.append(Violation(
            code="segment_outside_domain",
            message=f"segment {len(field.segments) - 1} extends beyond the domain to {last.upper}",
            segment=len(field.segments) - 1))

    return ValidationReport(violations=violations)


def require_valid(field: CoefficientField) -> CoefficientField:
    report = validate(field)
    if not report.ok:
        raise InvalidFieldError(report)
    return field


def eval_b(field: CoefficientField, x: ArrayLike):
    return field.b(x)


def eval_sigma(field: CoefficientField, x: ArrayLike):
    return field.sigma(x)


def eval_beta(field: CoefficientField, x: ArrayLike):
    """β(x) = 2 b(x) / σ(x)²"""
    return field.beta(x)
