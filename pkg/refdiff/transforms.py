"""
係数変換
Full-line driver coefficients for the reflection constructions: odd/even
symmetrization of a half-line field and the fold extension of an interval
field onto [0, 2a], plus the tent-shaped folding map g.
"""
import math
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import kernels
from .coefficients import (
    CoefficientField,
    DomainError,
    DomainKind,
    DomainSpec,
    FuncSpec,
    Segment,
    ValidationReport,
    Violation,
    require_valid,
)

ArrayLike = Union[float, np.ndarray]

# fold_extend の外側定数
OUTER_DRIFT_BELOW = 1.0
OUTER_DRIFT_ABOVE = -1.0
OUTER_SIGMA = 1.0


class ExtensionMode(str, Enum):
    SYMMETRIZED = "symmetrized"
    FOLD_EXTENDED = "fold_extended"


class ExtendedField(BaseModel):
    """
    ℝ 全体で評価できる駆動係数 (b̃, σ̃) または (b̂, σ̂)

    Symmetrized: σ̃(x) = σ(|x|), b̃(x) = sgn(x)·b(|x|) with sgn(0) = 0.
    FoldExtended: σ̂(x) = σ(g(x)), b̂(x) = sgn(a − x)·b(g(x)) on [0, 2a];
    b̂ = +1 below 0, b̂ = −1 above 2a and σ̂ = 1 outside [0, 2a].
    """
    model_config = ConfigDict(frozen=True)

    base: CoefficientField
    mode: ExtensionMode
    a: Optional[float] = None

    @property
    def kernel_mode(self) -> int:
        if self.mode == ExtensionMode.SYMMETRIZED:
            return kernels.MODE_SYMMETRIZED
        return kernels.MODE_FOLDED

    @property
    def width(self) -> float:
        return self.a if self.a is not None else 0.0

    def coefficients(self, x: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("extended coefficients need finite x")
        drift, vol = kernels.extended_coefficients(
            self.base.packed, self.kernel_mode, self.width, np.ascontiguousarray(x.ravel()))
        return drift.reshape(x.shape), vol.reshape(x.shape)

    def b(self, x: ArrayLike):
        drift, _ = self.coefficients(x)
        return float(drift) if drift.ndim == 0 else drift

    def sigma(self, x: ArrayLike):
        _, vol = self.coefficients(x)
        return float(vol) if vol.ndim == 0 else vol

    def beta(self, x: ArrayLike):
        drift, vol = self.coefficients(x)
        value = 2.0 * drift / vol ** 2
        return float(value) if value.ndim == 0 else value

    def table(self, grid: np.ndarray) -> List[Tuple[float, float, float]]:
        """(x, b, σ) の行"""
        grid = np.asarray(grid, dtype=float)
        drift, vol = self.coefficients(grid)
        return list(zip(grid.tolist(), drift.tolist(), vol.tolist()))

    def to_full_line(self) -> CoefficientField:
        """
        ℝ 上の CoefficientField として書き出す

        Mirrored segments are half-open on the right like every segment, so the
        field can differ from the driver at the mirror images of breakpoints
        (including 0 or a, where sgn vanishes).
        """
        segments: List[Segment] = []
        if self.mode == ExtensionMode.SYMMETRIZED:
            for seg in reversed(self.base.segments):
                segments.append(Segment(
                    lower=-seg.upper, upper=-seg.lower,
                    b=seg.b.reflected(0.0, negate=True),
                    sigma=seg.sigma.reflected(0.0)))
            segments.extend(self.base.segments)
        else:
            a = self.width
            segments.append(Segment(
                lower=-math.inf, upper=0.0,
                b=FuncSpec.constant(OUTER_DRIFT_BELOW), sigma=FuncSpec.constant(OUTER_SIGMA)))
            segments.extend(self.base.segments)
            for seg in reversed(self.base.segments):
                segments.append(Segment(
                    lower=2.0 * a - seg.upper, upper=2.0 * a - seg.lower,
                    b=seg.b.reflected(2.0 * a, negate=True),
                    sigma=seg.sigma.reflected(2.0 * a)))
            segments.append(Segment(
                lower=2.0 * a, upper=math.inf,
                b=FuncSpec.constant(OUTER_DRIFT_ABOVE), sigma=FuncSpec.constant(OUTER_SIGMA)))
        return CoefficientField(domain=DomainSpec(kind=DomainKind.FULL_LINE), segments=segments)


def symmetrize(field: CoefficientField) -> ExtendedField:
    if field.domain.kind != DomainKind.HALF_LINE:
        raise DomainError(f"symmetrize needs a half_line field, got {field.domain.kind.value}")
    require_valid(field)
    return ExtendedField(base=field, mode=ExtensionMode.SYMMETRIZED)


def fold_extend(field: CoefficientField) -> ExtendedField:
    if field.domain.kind != DomainKind.INTERVAL:
        raise DomainError(f"fold_extend needs an interval field, got {field.domain.kind.value}")
    require_valid(field)
    return ExtendedField(base=field, mode=ExtensionMode.FOLD_EXTENDED, a=field.domain.a)


def fold_map(a: float, x: ArrayLike):
    """g(x): [0,a] では x, (a,2a] では 2a − x, [0,2a] の外では 0"""
    if not a > 0:
        raise ValueError(f"fold width must be positive, got a={a}")
    x = np.asarray(x, dtype=float)
    g = np.where((x < 0.0) | (x > 2.0 * a), 0.0, np.where(x <= a, x, 2.0 * a - x))
    return float(g) if g.ndim == 0 else g


def extend(field: CoefficientField) -> ExtendedField:
    """定義域に応じた駆動係数 (half_line → symmetrize, interval → fold_extend)"""
    if field.domain.kind == DomainKind.HALF_LINE:
        return symmetrize(field)
    if field.domain.kind == DomainKind.INTERVAL:
        return fold_extend(field)
    raise DomainError("full_line fields are driven directly")


def check_extended(ext: ExtendedField, grid: ArrayLike) -> ValidationReport:
    """格子上で σ > 0 と係数の有限性を確認する"""
    grid = np.asarray(grid, dtype=float)
    drift, vol = ext.coefficients(grid)
    violations = []
    bad_sigma = grid[~(vol > 0.0)]
    if bad_sigma.size:
        violations.append(Violation(
            code="sigma_not_positive",
            message=f"sigma not positive at {bad_sigma.size} grid points (first x={bad_sigma[0]!r})"))
    bad_drift = grid[~np.isfinite(drift)]
    if bad_drift.size:
        violations.append(Violation(
            code="non_finite_coefficient",
            message=f"non-finite drift at {bad_drift.size} grid points (first x={bad_drift[0]!r})"))
    return ValidationReport(violations=violations)
