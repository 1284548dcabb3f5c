"""Statistical verification harness.

Empirical Laplace transforms with jackknife errors, one- and two-sample
Kolmogorov-Smirnov tests, quadrature CDF tables for the closed-form
densities, and small machine-readable report records used by the CLI.

CDF tables are built in the variable u = sqrt(x), where every density in
the family is smooth and bounded, and are completed by an analytic tail
from the asymptotic series (the chi-family tails decay like x^{-3/2}, so
no finite table can reach 1e-6 accuracy without the analytic piece).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special as sc
from scipy.stats import ks_2samp

from . import specialfn as sf
from .specialfn import _PSI_COEF, _SERIES_SWITCH  # series shared with specialfn

__all__ = [
    "EstimatorReport",
    "GoFReport",
    "CdfTable",
    "empirical_laplace",
    "mean_report",
    "ks_test",
    "ks_two_sample",
    "ks_with_retries",
    "cdf_from_density",
    "suite_report_json",
]

KS_P_THRESHOLD = 0.01
KS_RETRIES = 3


@dataclass(frozen=True)
class EstimatorReport:
    """Monte Carlo estimate with a jackknife standard error."""

    estimate: float
    stderr: float
    n: int
    seed: int
    bias_notes: tuple = ()

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two samples")
        if not (self.stderr >= 0.0):
            raise ValueError("stderr must be nonnegative")

    def within(self, target, k=3.0, budget=0.0):
        """|estimate - target| <= k*stderr + budget (+ declared bias bounds)."""
        slack = k * self.stderr + budget + sum(b for _, b in self.bias_notes)
        return abs(self.estimate - target) <= slack

    def to_dict(self):
        return {
            "estimate": self.estimate, "stderr": self.stderr, "n": self.n,
            "seed": self.seed, "bias_notes": list(self.bias_notes),
        }


@dataclass(frozen=True)
class GoFReport:
    """Kolmogorov-Smirnov statistic with its asymptotic p-value."""

    statistic: float
    n: int
    p_value: float
    target: str
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.statistic <= 1.0):
            raise ValueError("KS statistic out of range")

    def to_dict(self):
        return {
            "statistic": self.statistic, "n": self.n, "p_value": self.p_value,
            "target": self.target, "seed": self.seed,
        }


def empirical_laplace(samples, lam, seed=0, bias_notes=()):
    """Mean of exp(-lam*s) over the samples, jackknife standard error."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need a flat array of at least two samples")
    vals = np.exp(-lam * x) if lam > 0 else np.ones_like(x)
    return mean_report(vals, seed=seed, bias_notes=bias_notes)


def mean_report(values, seed=0, bias_notes=()):
    """EstimatorReport for a plain mean (jackknife error of the mean)."""
    v = np.asarray(values, dtype=float)
    n = v.size
    total = v.sum()
    loo = (total - v) / (n - 1)           # leave-one-out means
    center = loo.mean()
    var_jack = (n - 1) / n * np.sum((loo - center) ** 2)
    return EstimatorReport(estimate=float(v.mean()),
                           stderr=float(math.sqrt(var_jack)),
                           n=int(n), seed=int(seed),
                           bias_notes=tuple(bias_notes))


# ------------------------------------------------------------------- KS

def _as_cdf_callable(cdf):
    if callable(cdf):
        return cdf
    x, f = cdf  # (grid, values) table
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(np.diff(x) <= 0) or np.any(np.diff(f) < 0):
        raise ValueError("cdf table must be strictly-x, nondecreasing-F")
    return lambda q: np.interp(q, x, f)


def ks_test(samples, cdf, target="", seed=0):
    """One-sample KS against a cdf callable or (grid, values) table.

    p-value from the asymptotic Kolmogorov distribution; the caller should
    keep n >= 50 for that approximation to be meaningful.
    """
    x = np.sort(np.ravel(np.asarray(samples, dtype=float)))
    n = x.size
    f = np.asarray(_as_cdf_callable(cdf)(x), dtype=float)
    if np.any(np.diff(f) < -1e-12):
        raise ValueError("cdf is not monotone on the sample range")
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1) / n)
    d = max(d_plus, d_minus)
    p = float(sc.kolmogorov(math.sqrt(n) * d))
    return GoFReport(statistic=float(d), n=int(n), p_value=p,
                     target=target, seed=int(seed))


def ks_two_sample(a, b, target="two-sample", seed=0):
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    res = ks_2samp(a, b, method="asymp")
    return GoFReport(statistic=float(res.statistic),
                     n=int(min(a.size, b.size)),
                     p_value=float(res.pvalue), target=target, seed=int(seed))


def ks_with_retries(draw, cdf=None, other=None, target="", threshold=KS_P_THRESHOLD,
                    retries=KS_RETRIES):
    """Run a KS check with up to `retries` fresh sample streams.

    `draw(attempt)` returns a sample array (or a pair of arrays when
    comparing two samplers with `other=True`).  A law passes on the first
    attempt whose p-value clears the threshold; the false-failure rate is
    threshold**retries per law.  Returns (passed, reports).
    """
    reports = []
    for attempt in range(retries):
        got = draw(attempt)
        if other:
            rep = ks_two_sample(got[0], got[1], target=target, seed=attempt)
        else:
            rep = ks_test(got, cdf, target=target, seed=attempt)
        reports.append(rep)
        if rep.p_value > threshold:
            return True, reports
    return False, reports


# ------------------------------------------------------- CDF tables

def _psi_tail_mass(x):
    """integral_x^inf psi(s) ds via term-wise integration of the series."""
    # psi(s) = (1/sqrt(pi*s)) sum e_m s^-m  => terms e_m s^{-m-1/2}/sqrt(pi)
    acc = 0.0
    for i, c in enumerate(_PSI_COEF):
        m = 2 + i
        acc += c * x ** (0.5 - m) / (m - 0.5)
    return acc / math.sqrt(math.pi)


def _chi3_tail_mass(x):
    """integral_x^inf s*psi(s) ds, valid for x >= _SERIES_SWITCH."""
    acc = 0.0
    for i, c in enumerate(_PSI_COEF):
        m = 2 + i
        acc += c * x ** (1.5 - m) / (m - 1.5)
    return acc / math.sqrt(math.pi)


def _wlaw_tail_mass(x):
    """integral_x^inf sqrt(pi*s)*psi(s) ds (the height-law base density)."""
    acc = 0.0
    for i, c in enumerate(_PSI_COEF):
        m = 2 + i
        acc += c * x ** (1.0 - m) / (m - 1.0)
    return acc


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def _cumulative_table(g, u_hi, n_nodes=4000):
    """Cumulative integral of g over [0, u_hi] on a refined-near-zero grid."""
    # grid denser near 0 via quadratic spacing mixed with uniform
    t = np.linspace(0.0, 1.0, n_nodes)
    u = u_hi * (0.35 * t + 0.65 * t * t)
    mid = 0.5 * (u[1:] + u[:-1])
    half = 0.5 * (u[1:] - u[:-1])
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = g(nodes.ravel()).reshape(nodes.shape)
    seg = (vals * _GL_WEIGHTS[None, :]).sum(axis=1) * half
    return u, np.concatenate(([0.0], np.cumsum(seg)))


class CdfTable:
    """Monotone CDF with a quadrature body and an analytic series tail.

    Evaluates F(x) = body-interpolation for x < x_switch and
    1 - tail_mass(x)/mass for x >= x_switch.  Callable on arrays.
    """

    def __init__(self, law, u_grid, f_grid, mass, tail_mass_fn, x_switch,
                 x_of_u=lambda u: u * u, u_of_x=np.sqrt):
        f = f_grid / mass
        if np.any(np.diff(f) < -1e-13):
            raise ValueError("non-monotone cdf table")
        self.law = law
        self._u = u_grid
        self._f = np.minimum.accumulate(np.minimum(f, 1.0)[::-1])[::-1]
        self._f = np.maximum.accumulate(self._f)
        self.mass = mass
        self._tail = tail_mass_fn
        self._switch = x_switch
        self._u_of_x = u_of_x

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        out = np.empty_like(x)
        lo = x < self._switch
        if np.any(lo):
            out[lo] = np.interp(self._u_of_x(np.maximum(x[lo], 0.0)),
                                self._u, self._f)
        if np.any(~lo):
            xt = x[~lo]
            out[~lo] = 1.0 - np.array([self._tail(v) for v in xt]) / self.mass
        out = np.clip(out, 0.0, 1.0)
        return float(out[0]) if scalar else out


def _psi_base_table(weight, tail_fn, mass, law):
    """Table for densities weight(w)*psi(w) in the variable u = sqrt(w)."""
    def g(u):
        w = np.maximum(u * u, 1e-300)
        # 2u * weight(w) * psi(w); psi's 1/sqrt(w) singularity cancels
        return 2.0 * u * weight(w) * sf.psi(w)

    u, cum = _cumulative_table(g, math.sqrt(_SERIES_SWITCH))
    return CdfTable(law, u, cum, mass, tail_fn, _SERIES_SWITCH)


def cdf_from_density(law, param):
    """CDF table for one of the closed-form laws.

    law = "h":    exit-measure density h_a normalized by its mass 3/(2a^2);
                  param = a.
    law = "chi3": the size-biased law z*h_t(z) (equals a scaled chi_3);
                  param = t.
    law = "p":    the height density p_z; param = z.
    law = "k":    the hull boundary-size density k_r; param = r.
    """
    param = float(param)
    if param <= 0.0:
        raise ValueError("law parameter must be positive")
    if law == "h":
        a = param
        base = _psi_base_table(lambda w: 1.0, _psi_tail_mass, 1.0, "psi")
        scale = 2.0 * a * a / 3.0
        return _Rescaled(base, scale, f"h_{a:g}")
    if law == "chi3":
        t = param
        base = _psi_base_table(lambda w: w, _chi3_tail_mass, 1.0, "chi3")
        scale = 2.0 * t * t / 3.0
        return _Rescaled(base, scale, f"zh_{t:g}")
    if law == "p":
        z = param
        base = _psi_base_table(lambda w: math.sqrt(math.pi) * np.sqrt(w),
                               _wlaw_tail_mass, 1.0, "wlaw")
        return _HeightCdf(base, z)
    if law == "k":
        r = param
        scale = 2.0 * r * r / 3.0

        def g(u):
            x = u * u
            return 2.0 * u * math.sqrt(27.0 / (2.0 * math.pi)) \
                * np.sqrt(x) * np.exp(-1.5 * x)

        u, cum = _cumulative_table(g, math.sqrt(60.0))
        base = CdfTable("k1", u, cum, 1.0, lambda x: 0.0, 60.0)
        return _Rescaled(base, scale * 1.5, f"k_{r:g}")
    raise ValueError(f"unknown law id: {law}")


class _Rescaled:
    """CDF of scale*X when X has the base CDF."""

    def __init__(self, base, scale, law):
        self.base = base
        self.scale = scale
        self.law = law

    def __call__(self, x):
        return self.base(np.asarray(x, dtype=float) / self.scale)


class _HeightCdf:
    """P(A <= a) = P(W >= 3z/(2a^2)): the height law via its universal
    w-representation with density sqrt(pi*w)*psi(w)."""

    def __init__(self, base, z):
        self.base = base
        self.z = z
        self.law = f"p_{z:g}"

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        scalar = a.ndim == 0
        a = np.atleast_1d(a)
        out = np.zeros_like(a)
        pos = a > 0
        out[pos] = 1.0 - self.base(1.5 * self.z / (a[pos] * a[pos]))
        out = np.clip(out, 0.0, 1.0)
        return float(out[0]) if scalar else out


# --------------------------------------------------------- reporting

def suite_report_json(suite, entries):
    """Deterministic JSON for a list of law-check entries.

    Each entry: dict with keys law, params, n, seed, statistic, tolerance,
    pass.  Byte-identical output for identical inputs.
    """
    doc = {"suite": suite, "laws": entries,
           "passed": all(e.get("pass") for e in entries)}
    return json.dumps(doc, sort_keys=True, indent=1)
