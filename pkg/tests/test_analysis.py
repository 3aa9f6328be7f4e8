import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from surftrap.analysis import (
    DEFAULT_SEED,
    AnalysisError,
    LifetimeSample,
    NoiseMeasurement,
    NonThermalError,
    SidebandPair,
    _binom_ll,
    _mixture_p,
    dark_lifetime_mixture_fit,
    electric_field_noise,
    heating_rate_fit,
    lifetime_fit_exponential,
    nbar_from_ratio,
    nbar_from_sidebands,
    read_lifetimes,
    read_sidebands,
    read_survival,
    scale_noise_1_over_f,
    seeded_rngs,
    thermometry,
)
from surftrap.constants import TWO_PI

# 4 m hbar w ndot / e^2 evaluated with scipy.constants and neutral-atom masses
MG_NOISE_1P6MHZ = 4.7980e-11  # V^2/m^2/Hz
SR_NOISE_540KHZ = 1.7905e-12


def test_nbar_closed_forms():
    assert nbar_from_sidebands(SidebandPair(0.0, 0.4)).value == 0.0
    assert nbar_from_sidebands(SidebandPair(0.2, 0.4)).value == pytest.approx(1.0, rel=1e-15)
    assert nbar_from_sidebands(SidebandPair(0.36, 0.4)).value == pytest.approx(9.0, rel=1e-12)


def test_nbar_non_thermal():
    with pytest.raises(NonThermalError) as info, pytest.warns(RuntimeWarning):
        nbar_from_sidebands(SidebandPair(0.5, 0.4))
    assert info.value.ratio == pytest.approx(1.25)
    with pytest.raises(AnalysisError):
        nbar_from_sidebands(SidebandPair(0.0, 0.0))


@given(st.floats(0.0, 0.999), st.floats(0.0, 0.999))
def test_nbar_increasing_in_ratio(a, b):
    if a < b:
        assert nbar_from_ratio(a) < nbar_from_ratio(b)


def test_nbar_binomial_uncertainty():
    r, b, n = 0.1, 0.4, 100
    nb = nbar_from_sidebands(SidebandPair(r, b, 0.0, n, n))
    # delta method on R / (1 - R) with independent binomial errors
    sR = math.hypot(math.sqrt(r * (1 - r) / n) / b, r * math.sqrt(b * (1 - b) / n) / b**2)
    assert nb.sigma == pytest.approx(sR / (1 - r / b) ** 2, rel=1e-12)


def test_lineshape_area_option():
    assert nbar_from_sidebands(SidebandPair(0.1, 0.4), lineshape_areas=(1.0, 2.0)).value == pytest.approx(1.0)


def test_heating_collinear_series():
    fit = heating_rate_fit([0.0, 2e-3, 4e-3], [0.10, 0.54, 0.98])
    assert fit.rate == pytest.approx(220.0, rel=1e-12)
    assert fit.intercept == pytest.approx(0.10, rel=1e-12)
    assert fit.rate_sigma == pytest.approx(0.0, abs=1e-9)


def test_heating_constant_series():
    assert heating_rate_fit([0.0, 2e-3, 4e-3], [0.3, 0.3, 0.3]).rate == pytest.approx(0.0, abs=1e-12)


def test_heating_needs_distinct_times():
    with pytest.raises(AnalysisError):
        heating_rate_fit([1e-3, 1e-3], [0.1, 0.2])


def test_heating_matches_polyfit_oracle():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 4e-3, 7)
    y = 0.2 + 900 * t + rng.normal(0, 0.05, 7)
    s = rng.uniform(0.02, 0.08, 7)
    fit = heating_rate_fit(t, y, s)
    (slope, icpt), cov = np.polyfit(t, y, 1, w=1 / s, cov="unscaled")
    assert fit.rate == pytest.approx(slope, rel=1e-10)
    assert fit.intercept == pytest.approx(icpt, rel=1e-10)
    assert fit.rate_sigma == pytest.approx(math.sqrt(cov[0, 0]), rel=1e-10)


def test_heating_monte_carlo_small():
    t = np.array([0.0, 2e-3, 4e-3])
    hits = 0
    for g in seeded_rngs(DEFAULT_SEED, 200):
        f = heating_rate_fit(t, 0.1 + 7000 * t + g.normal(0, 0.05, 3), [0.05] * 3)
        hits += abs(f.rate - 7000) < 2 * f.rate_sigma
    assert hits >= 0.93 * 200


def test_noise_conversion_values(mg25, sr88):
    mg = electric_field_noise(7000, TWO_PI * 1.6e6, mg25)
    sr = electric_field_noise(220, TWO_PI * 0.54e6, sr88)
    assert mg == pytest.approx(MG_NOISE_1P6MHZ, rel=1e-3)
    assert sr == pytest.approx(SR_NOISE_540KHZ, rel=1e-3)
    assert scale_noise_1_over_f(mg, 1.6e6, 1e6) == pytest.approx(7.7e-11, rel=0.01)
    assert scale_noise_1_over_f(sr, 0.54e6, 1e6) == pytest.approx(9.7e-13, rel=0.01)


def test_noise_zero_and_scalings(mg25):
    assert electric_field_noise(0.0, 1e7, mg25) == 0.0
    base = electric_field_noise(100.0, 1e7, mg25)
    assert electric_field_noise(300.0, 1e7, mg25) == pytest.approx(3 * base, rel=1e-12)
    assert electric_field_noise(100.0, 2e7, mg25) == pytest.approx(2 * base, rel=1e-12)
    assert scale_noise_1_over_f(base, 1e6, 1e6) == base
    with pytest.raises(AnalysisError):
        electric_field_noise(-1.0, 1e7, mg25)


def test_noise_one_over_f_invariance(mg25):
    # synthetic 1/f law: S_E(f) = A / f implies ndot proportional to 1 / f^2
    A = 8e-5
    refs = []
    for f in (0.5e6, 1.6e6, 3e6):
        ndot = (A / f) * mg25.q**2 / (4 * mg25.mass * 1.054571817e-34 * TWO_PI * f)
        refs.append(NoiseMeasurement(ndot, 0.0, f, mg25).s_e_reference)
    np.testing.assert_allclose(refs, A / 1e6, rtol=1e-12)


def test_lifetime_closed_forms():
    assert lifetime_fit_exponential([LifetimeSample(56.0)] * 10).tau == pytest.approx(56.0)
    fit = lifetime_fit_exponential([LifetimeSample(90.0), LifetimeSample(90.0, censored=True)])
    assert fit.tau == 180.0 and fit.sigma == 180.0
    with pytest.raises(AnalysisError):
        lifetime_fit_exponential([LifetimeSample(5.0, censored=True)])


def test_lifetime_scale_equivariance():
    rng = np.random.default_rng(5)
    s = [LifetimeSample(float(d), bool(c)) for d, c in zip(rng.exponential(30, 20), rng.random(20) < 0.2)]
    s2 = [LifetimeSample(3.5 * x.duration, x.censored) for x in s]
    assert lifetime_fit_exponential(s2).tau == pytest.approx(3.5 * lifetime_fit_exponential(s).tau, rel=1e-14)


def test_lifetime_59_samples():
    g = seeded_rngs(DEFAULT_SEED + 1, 1)[0]
    fit = lifetime_fit_exponential([LifetimeSample(float(d)) for d in g.exponential(56.0, 59)])
    assert abs(fit.tau - 56.0) < 2 * fit.sigma


TT = np.array([1, 2, 5, 8, 12, 15, 20, 30.0])


def test_mixture_pure_exponential():
    t = np.array([2.0, 5.0, 10.0, 20.0, 40.0])
    n = np.full(5, 100000)
    k = np.round(n * np.exp(-t / 30.0))
    fit = dark_lifetime_mixture_fit(t, k, n)
    assert fit.exp_tau == pytest.approx(30.0, rel=1e-3)
    assert fit.preferred == "exponential"
    assert fit.cutoff > t.max() or fit.p > 0.999


def test_mixture_pure_step():
    t = np.array([1.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    n = np.full(6, 100)
    k = np.where(t < 5.0, 100, 0)
    fit = dark_lifetime_mixture_fit(t, k, n)
    assert fit.preferred == "step"
    assert 4.0 < fit.step_cutoff < 6.0


def test_mixture_50_50_in_profile_region():
    g = seeded_rngs(DEFAULT_SEED + 2, 1)[0]
    n = np.full(len(TT), 100)
    k = g.binomial(n, _mixture_p(TT, 0.5, 30.0, 10.0))
    fit = dark_lifetime_mixture_fit(TT, k, n)
    assert fit.preferred == "mixture" and fit.lr_vs_exponential > 0 and fit.lr_vs_step > 0
    # truth inside the 95% likelihood region for the three parameters
    assert 2 * (fit.loglike - _binom_ll(_mixture_p(TT, 0.5, 30.0, 10.0), k, n)) < stats.chi2.ppf(0.95, 3)
    assert 8.0 < fit.cutoff < 12.0


def test_mixture_degenerate():
    with pytest.raises(AnalysisError):
        dark_lifetime_mixture_fit([1, 2, 3], [10, 10, 10], [10, 10, 10])
    with pytest.raises(AnalysisError):
        dark_lifetime_mixture_fit([1, 1, 2], [1, 2, 3], [10, 10, 10])


def test_seeded_rngs_reproducible():
    a = [g.random() for g in seeded_rngs(1, 3)]
    assert a == [g.random() for g in seeded_rngs(1, 3)]
    assert len(set(a)) == 3


def test_csv_readers():
    pairs = read_sidebands("t_s,red_p,blue_p,red_n,blue_n\n0,0.05,0.5,100,100\n0.002,0.1,0.4,,\n")
    assert pairs[0].red_shots == 100 and pairs[1].red_shots is None and pairs[1].t == 0.002
    life = read_lifetimes("duration_s,censored\n10,0\n20,true\n")
    assert [x.censored for x in life] == [False, True]
    t, k, n = read_survival("dark_time_s,kept,total\n1,9,10\n2,8,10\n")
    assert list(k) == [9, 8]
    with pytest.raises(AnalysisError, match="missing columns"):
        read_lifetimes("duration,censored\n1,0\n")
    with pytest.raises(AnalysisError):
        read_lifetimes("duration_s,censored\n1,maybe\n")


def test_thermometry_pipeline():
    # blue fixed at 0.5, red chosen so n-bar = 0.10, 0.54, 0.98
    pairs = [SidebandPair(0.5 * n / (1 + n), 0.5, t) for t, n in ((0.0, 0.10), (2e-3, 0.54), (4e-3, 0.98))]
    nb, fit = thermometry(pairs)
    np.testing.assert_allclose([x.value for x in nb], [0.10, 0.54, 0.98], rtol=1e-12)
    assert fit.rate == pytest.approx(220.0, rel=1e-9)
