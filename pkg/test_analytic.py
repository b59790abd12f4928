#!/usr/bin/env python3
"""
解析エンジンのテスト
"""
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from refdiff.analytic import AnalyticProfile, NoStationaryDistributionError, Recurrence
from refdiff.coefficients import (
    CoefficientField,
    DomainError,
    DomainKind,
    DomainSpec,
    FuncSpec,
    InvalidFieldError,
    Segment,
    validate,
)


def constant_field(kind, b, sigma=1.0, a=None):
    return CoefficientField.single(kind, FuncSpec.constant(b), FuncSpec.constant(sigma), a=a)


def two_level():
    return CoefficientField(
        domain=DomainSpec(kind=DomainKind.HALF_LINE),
        segments=[
            Segment(lower=0.0, upper=1.0, b=FuncSpec.constant(-1.0), sigma=FuncSpec.constant(1.0)),
            Segment(lower=1.0, upper=math.inf, b=FuncSpec.constant(-2.0), sigma=FuncSpec.constant(1.0)),
        ],
    )


def full_line(beta_minus_b, beta_plus_b, sigma=1.0):
    return CoefficientField(
        domain=DomainSpec(kind=DomainKind.FULL_LINE),
        segments=[
            Segment(lower=-math.inf, upper=0.0, b=FuncSpec.constant(beta_minus_b), sigma=FuncSpec.constant(sigma)),
            Segment(lower=0.0, upper=math.inf, b=FuncSpec.constant(beta_plus_b), sigma=FuncSpec.constant(sigma)),
        ],
    )


EXP2 = AnalyticProfile(constant_field(DomainKind.HALF_LINE, -1.0))
UNIFORM2 = AnalyticProfile(constant_field(DomainKind.INTERVAL, 0.0, a=2.0))


# -- 演算ごとの例 ------------------------------------------------------------------

def test_cumulative_beta_examples():
    """B(x) = ∫β"""
    assert EXP2.cumulative_beta(1.5) == pytest.approx(-3.0, rel=1e-15)
    assert AnalyticProfile(two_level()).cumulative_beta(2.0) == pytest.approx(-6.0, rel=1e-15)
    assert EXP2.cumulative_beta(0.0) == 0.0
    assert AnalyticProfile(two_level()).cumulative_beta(0.0) == 0.0
    with pytest.raises(DomainError):
        EXP2.cumulative_beta(-0.5)


def test_scale_function_examples():
    """η(x) = ∫ exp(-B)"""
    assert EXP2.scale_function(1.0) == pytest.approx((math.e ** 2 - 1) / 2, rel=1e-14)
    assert EXP2.scale_function(0.0) == 0.0
    null = AnalyticProfile(constant_field(DomainKind.HALF_LINE, 0.0, sigma=2.0))
    assert null.scale_function(3.25) == pytest.approx(3.25, rel=1e-15)


def test_classify_recurrence_examples():
    assert EXP2.classify_recurrence() == Recurrence.RECURRENT
    transient = AnalyticProfile(constant_field(DomainKind.HALF_LINE, 1.0))
    assert transient.classify_recurrence() == Recurrence.TRANSIENT
    assert transient.eta_infinity == pytest.approx(0.5, rel=1e-14)
    interval = CoefficientField(
        domain=DomainSpec(kind=DomainKind.INTERVAL, a=3.0),
        segments=[
            Segment(lower=0.0, upper=1.0, b=FuncSpec.constant(5.0), sigma=FuncSpec.constant(0.5)),
            Segment(lower=1.0, upper=3.0, b=FuncSpec.affine(1.0, 2.0), sigma=FuncSpec.affine(1.0, 0.1)),
        ],
    )
    assert AnalyticProfile(interval).classify_recurrence() == Recurrence.RECURRENT


# (説明, 係数場, 再帰, 正再帰)
RECURRENCE_TABLE = [
    ("half b<0", constant_field(DomainKind.HALF_LINE, -1.0), True, True),
    ("half b=0", constant_field(DomainKind.HALF_LINE, 0.0), True, False),
    ("half b>0", constant_field(DomainKind.HALF_LINE, 1.0), False, False),
    ("half b<0 wide sigma", constant_field(DomainKind.HALF_LINE, -1.0, sigma=2.0), True, True),
    ("half b>0 narrow sigma", constant_field(DomainKind.HALF_LINE, 0.5, sigma=0.5), False, False),
    ("half b=0 sigma 3", constant_field(DomainKind.HALF_LINE, 0.0, sigma=3.0), True, False),
    ("full inward both", full_line(1.0, -1.0), True, True),
    ("full null both", full_line(0.0, 0.0), True, False),
    ("full left outward", full_line(-1.0, -1.0), False, False),
    ("full right outward", full_line(1.0, 1.0), False, False),
    ("full null left inward right", full_line(0.0, -1.0), True, False),
    ("full outward both", full_line(-1.0, 1.0), False, False),
]


@pytest.mark.parametrize("name,field,recurrent,positive", RECURRENCE_TABLE, ids=[r[0] for r in RECURRENCE_TABLE])
def test_recurrence_table(name, field, recurrent, positive):
    """裾の β の符号による再帰性の分類"""
    profile = AnalyticProfile(field)
    expected = Recurrence.RECURRENT if recurrent else Recurrence.TRANSIENT
    assert profile.classify_recurrence() == expected
    assert profile.positive_recurrent == positive
    assert math.isfinite(profile.C) == positive


def test_two_level_profile_with_nonconstant_head():
    """非定数区間の後ろに定数の裾があっても裾だけで分類する"""
    field = CoefficientField(
        domain=DomainSpec(kind=DomainKind.HALF_LINE),
        segments=[
            Segment(lower=0.0, upper=2.0, b=FuncSpec.affine(3.0, 1.0), sigma=FuncSpec.affine(1.0, 0.5)),
            Segment(lower=2.0, upper="inf", b=FuncSpec.constant(-0.1), sigma=FuncSpec.constant(1.0)),
        ],
    )
    profile = AnalyticProfile(field)
    assert profile.recurrence == Recurrence.RECURRENT
    assert profile.positive_recurrent


def test_stationary_density_examples():
    assert EXP2.stationary_density(1.0) == pytest.approx(math.exp(-2.0), rel=1e-14)
    wide = AnalyticProfile(constant_field(DomainKind.HALF_LINE, -1.0, sigma=2.0))
    assert wide.stationary_density(0.0) == pytest.approx(0.25, rel=1e-15)
    assert AnalyticProfile(two_level()).stationary_density(2.0) == pytest.approx(math.exp(-6.0), rel=1e-14)
    with pytest.raises(NoStationaryDistributionError):
        AnalyticProfile(constant_field(DomainKind.HALF_LINE, 1.0)).stationary_density(1.0)


def test_normalizing_constant_examples():
    assert EXP2.normalizing_constant() == pytest.approx(0.5, rel=1e-14)
    assert UNIFORM2.normalizing_constant() == pytest.approx(2.0, rel=1e-15)
    expected = (1 - math.exp(-2)) / 2 + math.exp(-2) / 4
    assert AnalyticProfile(two_level()).normalizing_constant() == pytest.approx(expected, rel=1e-13)
    assert expected == pytest.approx(0.466164, abs=5e-6)
    with pytest.raises(NoStationaryDistributionError):
        AnalyticProfile(constant_field(DomainKind.HALF_LINE, 1.0)).normalizing_constant()


def test_null_recurrent_constant_is_infinite():
    """C = ∞ は表現できるが分布としての演算は拒否する"""
    profile = AnalyticProfile(constant_field(DomainKind.HALF_LINE, 0.0))
    assert profile.normalizing_constant() == math.inf
    with pytest.raises(NoStationaryDistributionError):
        profile.stationary_cdf(1.0)
    with pytest.raises(NoStationaryDistributionError):
        profile.sample_stationary(0.5)
    with pytest.raises(NoStationaryDistributionError):
        profile.regulator_expectations()


def test_stationary_cdf_examples():
    assert EXP2.stationary_cdf(math.inf) == 1.0
    assert EXP2.stationary_cdf(math.log(2) / 2) == pytest.approx(0.5, rel=1e-14)
    assert UNIFORM2.stationary_cdf(0.5) == pytest.approx(0.25, rel=1e-15)
    assert UNIFORM2.stationary_cdf(2.0) == pytest.approx(1.0, rel=1e-15)


def test_sample_stationary_examples():
    assert EXP2.sample_stationary(0.5) == pytest.approx(math.log(2) / 2, abs=1e-11)
    assert UNIFORM2.sample_stationary(0.25) == pytest.approx(0.5, abs=1e-11)
    tiny = EXP2.sample_stationary(1e-15)
    assert 0.0 <= tiny <= 2e-12
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            EXP2.sample_stationary(bad)


def test_sample_stationary_vectorized_matches_scalar():
    u = np.array([0.01, 0.3, 0.5, 0.77, 0.999])
    xs = AnalyticProfile(two_level()).sample_stationary(u)
    profile = AnalyticProfile(two_level())
    for ui, xi in zip(u, xs):
        assert profile.sample_stationary(float(ui)) == pytest.approx(xi, abs=1e-11)
        assert profile.stationary_cdf(xi) == pytest.approx(ui, abs=1e-11)


def test_regulator_expectations_examples():
    assert EXP2.regulator_expectations().ey0 == pytest.approx(1.0, rel=1e-14)
    assert EXP2.regulator_expectations().eya is None

    flat = UNIFORM2.regulator_expectations()
    assert flat.ey0 == pytest.approx(0.25, rel=1e-15)
    assert flat.eya == pytest.approx(0.25, rel=1e-15)

    tilted = AnalyticProfile(constant_field(DomainKind.INTERVAL, -1.0, a=1.0))
    assert tilted.normalizing_constant() == pytest.approx((1 - math.exp(-2)) / 2, rel=1e-14)
    expectations = tilted.regulator_expectations()
    assert expectations.ey0 == pytest.approx(1.156518, abs=1e-6)
    assert expectations.eya == pytest.approx(0.156518, abs=1e-6)

    with pytest.raises(DomainError):
        AnalyticProfile(full_line(1.0, -1.0)).regulator_expectations()


def test_hitting_probabilities_examples():
    null = AnalyticProfile(constant_field(DomainKind.HALF_LINE, 0.0))
    p = null.hitting_probabilities(0.0, 0.3, 1.0)
    assert p.p_c_first == pytest.approx(0.7, rel=1e-14)
    assert p.p_d_first == pytest.approx(0.3, rel=1e-14)

    p = EXP2.hitting_probabilities(0.0, 1.0, 2.0)
    e2, e4 = math.exp(2), math.exp(4)
    assert p.p_c_first == pytest.approx((e4 - e2) / (e4 - 1), rel=1e-13)
    assert p.p_d_first == pytest.approx(0.119203, abs=1e-6)
    assert p.p_c_first + p.p_d_first == pytest.approx(1.0, abs=1e-15)

    # 対称化された駆動過程は原点について対称
    p = EXP2.hitting_probabilities(-1.0, 0.0, 1.0)
    assert p.p_c_first == pytest.approx(0.5, abs=1e-15)

    with pytest.raises(ValueError):
        EXP2.hitting_probabilities(1.0, 0.5, 2.0)


def test_scale_function_odd_extension():
    xs = np.linspace(0.0, 3.0, 31)
    assert np.array_equal(EXP2.scale_function(-xs, extend=True), -EXP2.scale_function(xs))
    with pytest.raises(DomainError):
        EXP2.scale_function(-1.0)


def test_invalid_field_is_rejected():
    with pytest.raises(InvalidFieldError):
        AnalyticProfile(constant_field(DomainKind.HALF_LINE, -1.0, sigma=0.0))


# -- 性質 -----------------------------------------------------------------------------

def mixed_field():
    return CoefficientField(
        domain=DomainSpec(kind=DomainKind.HALF_LINE),
        segments=[
            Segment(lower=0.0, upper=0.7, b=FuncSpec.affine(0.5, -1.0), sigma=FuncSpec.affine(0.8, 0.5)),
            Segment(lower=0.7, upper=1.8, b=FuncSpec.constant(0.4), sigma=FuncSpec.constant(1.3)),
            Segment(lower=1.8, upper=3.0, b=FuncSpec.affine(-1.0, -0.5), sigma=FuncSpec.constant(0.9)),
            Segment(lower=3.0, upper="inf", b=FuncSpec.constant(-1.5), sigma=FuncSpec.constant(1.1)),
        ],
    )


def test_eta_increasing_and_density_positive():
    profile = AnalyticProfile(mixed_field())
    xs = np.linspace(0.0, 8.0, 401)
    eta = profile.scale_function(xs)
    assert np.all(np.diff(eta) > 0)
    assert np.all(profile.stationary_density(xs) > 0)
    cdf = profile.stationary_cdf(xs)
    assert np.all(np.diff(cdf) >= 0)
    assert cdf[0] == 0.0
    assert profile.stationary_cdf(math.inf) == pytest.approx(1.0, abs=1e-15)


def test_restriction_to_half_line_matches_full_line():
    """同じ係数なら半直線と全直線の密度は [0,∞) で一致する"""
    half = mixed_field()
    full = CoefficientField(
        domain=DomainSpec(kind=DomainKind.FULL_LINE),
        segments=[Segment(lower=-math.inf, upper=0.0, b=FuncSpec.constant(2.0), sigma=FuncSpec.constant(0.7))]
        + list(half.segments),
    )
    xs = np.linspace(0.0, 6.0, 121)
    assert np.array_equal(AnalyticProfile(half).stationary_density(xs), AnalyticProfile(full).stationary_density(xs))


def test_scaling_invariance():
    """b と σ² を同じ定数倍しても β, η, h, C は変わらない"""
    field = mixed_field()
    k = 3.7
    scaled = CoefficientField(
        domain=field.domain,
        segments=[
            Segment(
                lower=s.lower, upper=s.upper,
                b=(FuncSpec.constant(k * s.b.c0) if s.b.is_constant else FuncSpec.affine(k * s.b.c0, k * s.b.c1)),
                sigma=(FuncSpec.constant(math.sqrt(k) * s.sigma.c0) if s.sigma.is_constant
                       else FuncSpec.affine(math.sqrt(k) * s.sigma.c0, math.sqrt(k) * s.sigma.c1)),
            )
            for s in field.segments
        ],
    )
    p, q = AnalyticProfile(field), AnalyticProfile(scaled)
    xs = np.linspace(0.0, 5.0, 51)
    np.testing.assert_allclose(scaled.beta(xs), field.beta(xs), rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(q.scale_function(xs), p.scale_function(xs), rtol=1e-10)
    np.testing.assert_allclose(q.stationary_density(xs) * k, p.stationary_density(xs), rtol=1e-10)
    assert q.normalizing_constant() * k == pytest.approx(p.normalizing_constant(), rel=1e-10)
    np.testing.assert_allclose(q.stationary_cdf(xs), p.stationary_cdf(xs), rtol=1e-10, atol=1e-14)


def test_probability_integral_transform():
    """stationary_cdf(sample_stationary(U)) は一様分布"""
    profile = AnalyticProfile(two_level())
    u = np.random.default_rng(2024).uniform(size=100_000)
    u = np.clip(u, 1e-300, None)
    transformed = profile.stationary_cdf(profile.sample_stationary(u))
    assert stats.kstest(transformed, "uniform").statistic <= 0.01


def test_full_line_profile():
    """b = -sgn(x): B = -2|x|, C = 1"""
    profile = AnalyticProfile(full_line(1.0, -1.0))
    assert profile.cumulative_beta(-1.5) == pytest.approx(-3.0, rel=1e-15)
    assert profile.cumulative_beta(1.5) == pytest.approx(-3.0, rel=1e-15)
    assert profile.scale_function(-1.0) == pytest.approx(-(math.e ** 2 - 1) / 2, rel=1e-14)
    assert profile.normalizing_constant() == pytest.approx(1.0, rel=1e-14)
    assert profile.stationary_cdf(0.0) == pytest.approx(0.5, rel=1e-14)
    assert profile.stationary_cdf(-math.inf) == 0.0
    assert profile.sample_stationary(0.5) == pytest.approx(0.0, abs=1e-11)
    assert profile.sample_stationary(0.25) == pytest.approx(-math.log(2) / 2, abs=1e-11)


# -- 台形則との照合 -------------------------------------------------------------------

STEP = 1e-5


def random_affine_or_constant(rng, lo, hi, value_range):
    if rng.random() < 0.4:
        return FuncSpec.constant(float(rng.uniform(*value_range)))
    v_lo, v_hi = rng.uniform(*value_range, size=2)
    c1 = (v_hi - v_lo) / (hi - lo)
    return FuncSpec.affine(float(v_lo - c1 * lo), float(c1))


def oracle_corpus():
    rng = np.random.default_rng(7)
    corpus = []
    for i in range(12):
        a = float(rng.uniform(1.0, 3.0))
        cuts = np.sort(rng.uniform(0.0, a, size=int(rng.integers(0, 3))))
        edges = [0.0] + cuts.tolist() + [a]
        segments = [
            Segment(lower=lo, upper=hi,
                    b=random_affine_or_constant(rng, lo, hi, (-2.0, 2.0)),
                    sigma=random_affine_or_constant(rng, lo, hi, (0.5, 2.0)))
            for lo, hi in zip(edges[:-1], edges[1:])
        ]
        corpus.append((CoefficientField(domain=DomainSpec(kind=DomainKind.INTERVAL, a=a), segments=segments), a))
    for i in range(10):
        last = float(rng.uniform(1.0, 2.0))
        cuts = np.sort(rng.uniform(0.0, last, size=int(rng.integers(0, 2))))
        edges = [0.0] + cuts.tolist() + [last]
        segments = [
            Segment(lower=lo, upper=hi,
                    b=random_affine_or_constant(rng, lo, hi, (-2.0, 2.0)),
                    sigma=random_affine_or_constant(rng, lo, hi, (0.5, 2.0)))
            for lo, hi in zip(edges[:-1], edges[1:])
        ]
        sigma_tail = float(rng.uniform(0.7, 1.5))
        beta_tail = float(rng.uniform(-8.0, -4.0))
        segments.append(Segment(lower=last, upper=math.inf,
                                b=FuncSpec.constant(beta_tail * sigma_tail ** 2 / 2),
                                sigma=FuncSpec.constant(sigma_tail)))
        # h が 1e-14 倍以下になるまで
        truncation = last + 34.0 / abs(beta_tail)
        corpus.append((CoefficientField(domain=DomainSpec(kind=DomainKind.HALF_LINE), segments=segments), truncation))
    return corpus


def trapezoid_oracle(field, x_max):
    """区間ごとの細かい格子での台形則 (区間の片側極限を使う)"""
    xs, Bs, etas, hs, masses = [], [], [], [], []
    B0 = eta0 = mass0 = 0.0
    for seg in field.segments:
        lo, hi = seg.lower, min(seg.upper, x_max)
        if hi <= lo:
            break
        x = np.linspace(lo, hi, int(math.ceil((hi - lo) / STEP)) + 1)
        sigma2 = seg.sigma.values(x) ** 2
        beta = 2.0 * seg.b.values(x) / sigma2
        B = B0 + cumulative_trapezoid(beta, x, initial=0.0)
        eta = eta0 + cumulative_trapezoid(np.exp(-B), x, initial=0.0)
        h = np.exp(B) / sigma2
        mass = mass0 + cumulative_trapezoid(h, x, initial=0.0)
        xs.append(x[:-1])
        Bs.append(B[:-1])
        etas.append(eta[:-1])
        hs.append(h[:-1])
        masses.append(mass[:-1])
        B0, eta0, mass0 = B[-1], eta[-1], mass[-1]
    return (np.concatenate(xs), np.concatenate(Bs), np.concatenate(etas),
            np.concatenate(hs), np.concatenate(masses), mass0)


def test_oracle_corpus_is_large_enough():
    corpus = oracle_corpus()
    assert len(corpus) >= 20
    assert all(validate(field).ok for field, _ in corpus)


@pytest.mark.parametrize("index", range(22))
def test_trapezoid_oracle(index):
    """閉形式・求積と独立な台形則が相対誤差 1e-6 以内で一致する"""
    field, x_max = oracle_corpus()[index]
    profile = AnalyticProfile(field)
    x, B, eta, h, mass, total = trapezoid_oracle(field, x_max)
    picks = np.linspace(0, x.size - 1, 40).astype(int)
    xp = x[picks]
    np.testing.assert_allclose(profile.cumulative_beta(xp), B[picks], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(profile.scale_function(xp), eta[picks], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(profile.stationary_density(xp), h[picks], rtol=1e-6, atol=1e-12)
    assert profile.normalizing_constant() == pytest.approx(total, rel=1e-6)


def test_table_segments_against_oracle():
    """テーブル区間は求積で計算される"""
    field = CoefficientField(
        domain=DomainSpec(kind=DomainKind.INTERVAL, a=2.0),
        segments=[
            Segment(lower=0.0, upper=1.2,
                    b=FuncSpec.table([(0.0, 0.5), (0.4, -1.0), (1.2, 0.3)]),
                    sigma=FuncSpec.table([(0.0, 1.0), (0.9, 1.6), (1.2, 1.1)])),
            Segment(lower=1.2, upper=2.0, b=FuncSpec.constant(-0.7), sigma=FuncSpec.affine(0.5, 0.4)),
        ],
    )
    profile = AnalyticProfile(field)
    x, B, eta, h, mass, total = trapezoid_oracle(field, 2.0)
    picks = np.linspace(0, x.size - 1, 15).astype(int)
    np.testing.assert_allclose(profile.cumulative_beta(x[picks]), B[picks], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(profile.scale_function(x[picks]), eta[picks], rtol=1e-6, atol=1e-9)
    assert profile.normalizing_constant() == pytest.approx(total, rel=1e-6)
