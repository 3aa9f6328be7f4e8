"""Sideband thermometry, heating rates, field-noise conversion and lifetimes."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from .constants import HBAR, TWO_PI
from .pseudo import IonSpecies

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20080101


class AnalysisError(ValueError):
    pass


class NonThermalError(AnalysisError):
    """Red/blue ratio R >= 1, so no thermal n-bar exists."""

    def __init__(self, ratio: float):
        super().__init__(f"sideband ratio R = {ratio:.4g} >= 1 is not thermal")
        self.ratio = ratio


# ---------------------------------------------------------------- thermometry


@dataclass(frozen=True)
class SidebandPair:
    red: float
    blue: float
    t: float = 0.0
    red_shots: int | None = None
    blue_shots: int | None = None

    def __post_init__(self):
        for p in (self.red, self.blue):
            if not 0.0 <= p <= 1.0:
                raise AnalysisError(f"excitation probability {p} outside [0, 1]")
        if self.red > self.blue:
            warnings.warn(f"red sideband {self.red} exceeds blue {self.blue}", RuntimeWarning, stacklevel=2)


@dataclass(frozen=True)
class Nbar:
    value: float
    sigma: float
    ratio: float


def nbar_from_ratio(ratio: float) -> float:
    if ratio >= 1.0:
        raise NonThermalError(ratio)
    return ratio / (1.0 - ratio)


def nbar_from_sidebands(pair: SidebandPair, lineshape_areas: tuple[float, float] | None = None) -> Nbar:
    """n-bar = R / (1 - R) with R the red/blue sideband ratio.

    By default R uses the peak excitation probabilities. Passing
    ``lineshape_areas = (red_area, blue_area)`` uses fitted lineshape areas
    instead. Binomial errors sqrt(p(1-p)/N) are propagated when shot counts
    are given.
    """
    red, blue = (pair.red, pair.blue) if lineshape_areas is None else lineshape_areas
    if not blue > 0:
        raise AnalysisError("blue sideband must be positive")
    R = red / blue
    n = nbar_from_ratio(R)
    sigma = 0.0
    if lineshape_areas is None and pair.red_shots and pair.blue_shots:
        sr2 = pair.red * (1 - pair.red) / pair.red_shots
        sb2 = pair.blue * (1 - pair.blue) / pair.blue_shots
        sR = math.sqrt(sr2 / blue**2 + sb2 * red**2 / blue**4)
        sigma = sR / (1.0 - R) ** 2
    return Nbar(n, sigma, R)


@dataclass(frozen=True)
class HeatingFit:
    rate: float  # quanta/s
    rate_sigma: float
    intercept: float
    intercept_sigma: float


def heating_rate_fit(times, nbar, sigma=None) -> HeatingFit:
    """Weighted least-squares line n-bar(t) = n0 + rate * t.

    With ``sigma`` absent, equal weights are used and the uncertainties come
    from the residual scatter. With ``sigma`` given, they are absolute.
    """
    t = np.asarray(times, float)
    y = np.asarray(nbar, float)
    if len(np.unique(t)) < 2:
        raise AnalysisError("need at least two distinct wait times")
    absolute = sigma is not None
    s = np.ones_like(y) if sigma is None else np.asarray(sigma, float)
    w = 1.0 / s**2
    W, Wt, Wtt = w.sum(), (w * t).sum(), (w * t * t).sum()
    Wy, Wty = (w * y).sum(), (w * t * y).sum()
    det = W * Wtt - Wt**2
    slope = (W * Wty - Wt * Wy) / det
    icpt = (Wtt * Wy - Wt * Wty) / det
    cov = np.array([[Wtt, -Wt], [-Wt, W]]) / det
    if not absolute:
        dof = len(t) - 2
        chi2 = float((w * (y - icpt - slope * t) ** 2).sum())
        cov = cov * (chi2 / dof if dof > 0 else 0.0)
    return HeatingFit(float(slope), float(math.sqrt(cov[1, 1])), float(icpt), float(math.sqrt(cov[0, 0])))


# ---------------------------------------------------------------- field noise


@dataclass(frozen=True)
class NoiseMeasurement:
    heating_rate: float
    heating_sigma: float
    frequency: float  # Hz
    species: IonSpecies
    reference_frequency: float = 1e6
    exponent: float = 1.0

    def __post_init__(self):
        if self.heating_rate < 0:
            raise AnalysisError("heating rate must be non-negative")

    @property
    def s_e(self) -> float:
        return electric_field_noise(self.heating_rate, TWO_PI * self.frequency, self.species)

    @property
    def s_e_sigma(self) -> float:
        return electric_field_noise(self.heating_sigma, TWO_PI * self.frequency, self.species)

    @property
    def s_e_reference(self) -> float:
        return scale_noise_1_over_f(self.s_e, self.frequency, self.reference_frequency, self.exponent)

    @property
    def s_e_reference_sigma(self) -> float:
        return scale_noise_1_over_f(self.s_e_sigma, self.frequency, self.reference_frequency, self.exponent)


def electric_field_noise(ndot: float, omega: float, species: IonSpecies) -> float:
    """S_E(w) = 4 m hbar w ndot / q^2 in V^2/m^2/Hz (``omega`` in rad/s)."""
    if ndot < 0 or omega <= 0:
        raise AnalysisError("need ndot >= 0 and omega > 0")
    return 4.0 * species.mass * HBAR * omega * ndot / species.q**2


def scale_noise_1_over_f(s_e: float, f1: float, f2: float, exponent: float = 1.0) -> float:
    """S_E(f2) = S_E(f1) (f1 / f2)^exponent."""
    if f1 <= 0 or f2 <= 0:
        raise AnalysisError("frequencies must be positive")
    return s_e * (f1 / f2) ** exponent


# ---------------------------------------------------------------- lifetimes


@dataclass(frozen=True)
class LifetimeSample:
    duration: float
    censored: bool = False
    tag: str = "cooled"

    def __post_init__(self):
        if not self.duration > 0:
            raise AnalysisError("lifetime durations must be positive")


@dataclass(frozen=True)
class LifetimeFit:
    tau: float
    sigma: float
    n_uncensored: int
    n_total: int


def lifetime_fit_exponential(samples: Sequence[LifetimeSample]) -> LifetimeFit:
    """Right-censored exponential MLE, tau = sum(durations) / uncensored count."""
    total = math.fsum(s.duration for s in samples)
    k = sum(1 for s in samples if not s.censored)
    if k == 0:
        raise AnalysisError("all lifetime samples are censored")
    tau = total / k
    return LifetimeFit(tau, tau / math.sqrt(k), k, len(samples))


@dataclass(frozen=True)
class MixtureFit:
    """P(t) = p exp(-t/tau) + (1 - p) H(T - t), fitted by maximum likelihood.

    ``preferred`` is "mixture", "exponential" or "step" by BIC among the three
    nested models; ``lr_*`` are likelihood-ratio statistics 2 (lnL_mix - lnL_null).
    """

    p: float
    tau: float
    cutoff: float
    loglike: float
    exp_tau: float
    exp_loglike: float
    step_cutoff: float
    step_loglike: float
    lr_vs_exponential: float
    lr_vs_step: float
    bic: dict
    preferred: str

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


_PFLOOR = 1e-9


def _binom_ll(P, kept, total):
    P = np.clip(P, _PFLOOR, 1 - _PFLOOR)
    return float(np.sum(kept * np.log(P) + (total - kept) * np.log1p(-P)))


def _mixture_p(t, p, tau, T):
    return p * np.exp(-t / tau) + (1 - p) * (t < T)


def _cutoff_candidates(t: np.ndarray) -> np.ndarray:
    ts = np.unique(t)
    mids = 0.5 * (ts[1:] + ts[:-1])
    return np.concatenate([[0.5 * ts[0]], mids, [2.0 * ts[-1]]])


def dark_lifetime_mixture_fit(dark_times, kept, total) -> MixtureFit:
    """Exponential-plus-step survival model against single-component nulls.

    The likelihood is binomial in the kept counts. The step cutoff T only
    matters between sampled dark times, so it is profiled over the midpoints
    (plus one value beyond the last time). For each T, (p, tau) are found on a
    grid and refined with a bounded local optimizer.
    """
    t = np.asarray(dark_times, float)
    k = np.asarray(kept, float)
    n = np.asarray(total, float)
    if len(np.unique(t)) < 3:
        raise AnalysisError("need at least three distinct dark times")
    if np.all(k == n) or np.all(k == 0):
        raise AnalysisError("degenerate survival data (all kept or none kept)")
    tmax = t.max()
    lt_grid = np.linspace(np.log(tmax) - 5, np.log(tmax) + 5, 81)

    def fit_exp(p_fixed=None, T=np.inf):
        best = (-np.inf, None, None)
        ps = [p_fixed] if p_fixed is not None else np.linspace(0.02, 0.98, 25)
        for p in ps:
            for lt in lt_grid:
                ll = _binom_ll(_mixture_p(t, p, math.exp(lt), T), k, n)
                if ll > best[0]:
                    best = (ll, p, lt)
        _, p0, lt0 = best
        if p_fixed is None:
            f = lambda x: -_binom_ll(_mixture_p(t, x[0], math.exp(x[1]), T), k, n)
            r = optimize.minimize(f, [p0, lt0], method="L-BFGS-B", bounds=[(1e-6, 1 - 1e-6), (lt_grid[0], lt_grid[-1])])
            return -float(r.fun), float(r.x[0]), float(math.exp(r.x[1]))
        f = lambda x: -_binom_ll(_mixture_p(t, p_fixed, math.exp(x[0]), T), k, n)
        r = optimize.minimize(f, [lt0], method="L-BFGS-B", bounds=[(lt_grid[0], lt_grid[-1])])
        return -float(r.fun), p_fixed, float(math.exp(r.x[0]))

    ll_e, _, tau_e = fit_exp(p_fixed=1.0)
    cands = _cutoff_candidates(t)
    step = [(_binom_ll(_mixture_p(t, 0.0, 1.0, T), k, n), T) for T in cands]
    ll_s, T_s = max(step, key=lambda x: x[0])
    best = (-np.inf, 1.0, tau_e, np.inf)
    for T in cands:
        ll, p, tau = fit_exp(T=T)
        if ll > best[0]:
            best = (ll, p, tau, T)
    ll_m, p_m, tau_m, T_m = best
    if ll_e >= ll_m:
        ll_m, p_m, tau_m, T_m = ll_e, 1.0, tau_e, float(cands[-1])
    lnn = math.log(n.sum())  # each trial is one Bernoulli observation
    bic = {"mixture": 3 * lnn - 2 * ll_m, "exponential": lnn - 2 * ll_e, "step": lnn - 2 * ll_s}
    preferred = min(sorted(bic), key=lambda m: bic[m])
    return MixtureFit(
        p_m, tau_m, float(T_m), ll_m, tau_e, ll_e, float(T_s), ll_s,
        2 * (ll_m - ll_e), 2 * (ll_m - ll_s), bic, preferred,
    )  # fmt: skip


def seeded_rngs(root_seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-replication generators spawned from one root seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(root_seed).spawn(n)]


# ---------------------------------------------------------------- csv inputs


SIDEBAND_HEADER = ["t_s", "red_p", "blue_p", "red_n", "blue_n"]
LIFETIME_HEADER = ["duration_s", "censored"]
SURVIVAL_HEADER = ["dark_time_s", "kept", "total"]


def _rows(text_or_path, header: list[str]) -> list[dict]:
    text = text_or_path
    if "\n" not in str(text_or_path):
        with open(text_or_path, newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    missing = [h for h in header if h not in (reader.fieldnames or [])]
    if missing:
        raise AnalysisError(f"CSV is missing columns {missing}; expected {','.join(header)}")
    return list(reader)


def _flag(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n", ""):
        return False
    raise AnalysisError(f"cannot read censoring flag {s!r}")


def read_sidebands(src) -> list[SidebandPair]:
    out = []
    for r in _rows(src, SIDEBAND_HEADER):
        rn = int(r["red_n"]) if r["red_n"].strip() else None
        bn = int(r["blue_n"]) if r["blue_n"].strip() else None
        out.append(SidebandPair(float(r["red_p"]), float(r["blue_p"]), float(r["t_s"]), rn, bn))
    return out


def read_lifetimes(src) -> list[LifetimeSample]:
    return [LifetimeSample(float(r["duration_s"]), _flag(r["censored"])) for r in _rows(src, LIFETIME_HEADER)]


def read_survival(src) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = _rows(src, SURVIVAL_HEADER)
    return tuple(np.array([float(r[h]) for r in rows]) for h in SURVIVAL_HEADER)


def thermometry(pairs: Iterable[SidebandPair]) -> tuple[list[Nbar], HeatingFit]:
    """n-bar per wait time and the heating-rate line through them."""
    pairs = list(pairs)
    nb = [nbar_from_sidebands(p) for p in pairs]
    sig = [x.sigma for x in nb]
    use_sigma = all(s > 0 for s in sig)
    fit = heating_rate_fit([p.t for p in pairs], [x.value for x in nb], sig if use_sigma else None)
    return nb, fit
