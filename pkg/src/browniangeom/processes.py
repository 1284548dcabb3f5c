"""Grid samplers for the one-dimensional driving processes.

Everything here returns values that are *exact in law at the grid times*
wherever a closed-form transition exists: Brownian paths and bridges use
Gaussian increments, radial processes are norms of multidimensional
Brownian motion, and the critical branching flow uses its explicit
Poisson cluster decomposition (no Euler step anywhere in it).  The one
exception is the negative-dimension comparison process, which has no
tractable transition and is integrated by Euler-Maruyama with local step
halving near its absorbing point.

The scalar law samplers at the bottom are exact:

* ``sample_psi`` draws from the density psi by rejection against twice
  the chi_1 density (the difference 2*chi_1 - psi is the nonnegative
  density chi_2, so the envelope is exact and accepts half the time);
* a chi_1 draw is E^2/(2 N^2) with E exponential and N standard normal
  (an exponential mixture of scaled first-hitting times), and chi_3 is a
  sum of three of those;
* the reciprocal-chi-squared(3) draw is literally 1/chisquare(3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import specialfn as sf

__all__ = [
    "HorizonError",
    "RngStream",
    "PathSample",
    "sample_bm",
    "sample_bridge",
    "sample_bessel",
    "last_passage",
    "sample_bessel_neg5",
    "csbp_transition",
    "csbp_up_path",
    "sample_psi",
    "sample_chi3",
    "sample_inv_chisq3",
]


class HorizonError(RuntimeError):
    """Raised when a path ends too close to a level for a safe last-passage
    read; callers should extend the path and retry."""


@dataclass(frozen=True, eq=True)
class RngStream:
    """Reproducible random source keyed by (seed, stream index).

    Distinct stream indices under the same seed give statistically
    independent generators; the same pair always reproduces the same
    draws bit-for-bit.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=(self.stream,))
        object.__setattr__(self, "_gen", np.random.default_rng(ss))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen


def _gen(rng):
    """Accept either an RngStream or a raw numpy Generator."""
    return rng.gen if isinstance(rng, RngStream) else rng


@dataclass(frozen=True)
class PathSample:
    """A path recorded on a uniform grid.

    ``values[k]`` is the state at time ``origin + k*step``.  A path that
    was stopped by hitting a level ends *exactly* at that level (the
    final value is snapped), and carries the level in ``hit_level``.
    """

    step: float
    values: np.ndarray
    origin: float = 0.0
    stopped_at_hit: bool = False
    truncated_at_horizon: bool = False
    hit_level: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if not (self.step > 0.0):
            raise ValueError("grid step must be positive")
        if v.ndim != 1 or v.size < 1:
            raise ValueError("values must be a nonempty 1-d array")
        if not np.all(np.isfinite(v)):
            raise ValueError("path contains non-finite values")
        if self.stopped_at_hit:
            if self.hit_level is None or v[-1] != self.hit_level:
                raise ValueError("a stopped path must end exactly at its "
                                 "hit level")

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def duration(self) -> float:
        return (self.values.size - 1) * self.step

    @property
    def times(self) -> np.ndarray:
        return self.origin + self.step * np.arange(self.values.size)

    def reversed(self) -> "PathSample":
        return PathSample(self.step, self.values[::-1].copy(),
                          origin=self.origin)


def _steps(horizon, step):
    if horizon <= 0 or step <= 0:
        raise ValueError("horizon and step must be positive")
    return max(1, int(math.ceil(horizon / step - 1e-9)))


def sample_bm(start, horizon, step, rng, stop_level=None):
    """Brownian path from `start`, optionally stopped at a level.

    With ``stop_level`` set, the path is cut at the first grid crossing
    and its final value snapped to the level exactly; if the level is
    not reached within the horizon the full path is returned with the
    ``truncated_at_horizon`` flag.
    """
    g = _gen(rng)
    n = _steps(horizon, step)
    v = np.empty(n + 1)
    v[0] = start
    v[1:] = start + np.cumsum(g.normal(0.0, math.sqrt(step), size=n))
    if stop_level is None:
        return PathSample(step, v)
    if stop_level == start:
        raise ValueError("stop level equal to the start is degenerate")
    crossed = v <= stop_level if stop_level < start else v >= stop_level
    if not crossed.any():
        return PathSample(step, v, truncated_at_horizon=True)
    i = int(np.argmax(crossed))
    v = v[: i + 1].copy()
    v[-1] = stop_level
    return PathSample(step, v, stopped_at_hit=True, hit_level=stop_level)


def sample_bridge(z, step, rng):
    """Brownian bridge of duration z, pinned to 0 at both ends.

    The requested step is shrunk to divide z exactly, so the grid is
    uniform; endpoints are exactly zero.
    """
    if z <= 0:
        raise ValueError("bridge duration must be positive")
    n = _steps(z, step)
    h = z / n
    g = _gen(rng)
    w = np.cumsum(g.normal(0.0, math.sqrt(h), size=n))
    t = np.arange(1, n + 1) * (h / z)
    v = np.empty(n + 1)
    v[0] = 0.0
    v[1:] = w - t * w[-1]
    v[-1] = 0.0
    return PathSample(h, v)


def sample_bessel(dim, horizon, step, rng, start=0.0):
    """Radial part of a dim-dimensional Brownian motion (dim 3 or 9).

    Computed as the norm of the driving Brownian motion, so the values
    are exact in law at the grid times.
    """
    if dim not in (3, 9):
        raise ValueError("dim must be 3 or 9")
    if start < 0:
        raise ValueError("start must be nonnegative")
    g = _gen(rng)
    n = _steps(horizon, step)
    inc = g.normal(0.0, math.sqrt(step), size=(n, dim))
    pos = np.cumsum(inc, axis=0)
    pos[:, 0] += start
    v = np.empty(n + 1)
    v[0] = start
    np.sqrt(np.einsum("ij,ij->i", pos, pos), out=v[1:])
    return PathSample(step, v)


def last_passage(path, level):
    """Last time the path crosses `level`, linearly interpolated.

    The read is only trusted when the path ends well clear of the level:
    the final value must be at least two levels above it and the last
    tenth of the grid must stay above it, otherwise HorizonError asks
    the caller for a longer path.  A path that never touches the level
    has last passage at its origin.
    """
    v = path.values
    if not math.isfinite(level):
        raise ValueError("level must be finite")
    below = v <= level
    if not below.any():
        return float(path.origin)
    if below[-1]:
        raise HorizonError("path ends at or below the level")
    if v[-1] < level + 2.0 * abs(level):
        raise HorizonError("path ends too close to the level")
    tail = max(1, v.size // 10)
    if np.any(v[-tail:] <= level):
        raise HorizonError("path re-approaches the level near its end")
    j = int(np.nonzero(below)[0][-1])
    frac = 0.0 if v[j + 1] == v[j] else (level - v[j]) / (v[j + 1] - v[j])
    return float(path.origin + path.step * (j + frac))


def sample_bessel_neg5(start, stop_level, step, rng, max_time=None):
    """Dimension -5 radial comparison process, absorbed at `stop_level`.

    Euler-Maruyama on dX = dW - (3/X) dt with local step halving so the
    sub-step h always satisfies 10*sqrt(h) <= X - stop_level; absorption
    is recorded on the next master grid point with the value snapped.
    """
    if not (start > stop_level >= 0.0):
        raise ValueError("need start > stop_level >= 0")
    g = _gen(rng)
    h_floor = step * 2.0 ** -24
    x = float(start)
    vals = [x]
    absorbed = False
    t_cap = math.inf if max_time is None else max_time
    while not absorbed and (len(vals) - 1) * step < t_cap:
        remaining = step
        while remaining > 0.0:
            gap = x - stop_level
            if gap <= 0.0:
                absorbed = True
                break
            h = min(remaining, step, (gap / 10.0) ** 2)
            if h < h_floor:
                absorbed = True
                break
            x += -3.0 / x * h + math.sqrt(h) * g.normal()
            remaining -= h
        vals.append(stop_level if absorbed else x)
    if absorbed:
        return PathSample(step, np.array(vals), stopped_at_hit=True,
                          hit_level=stop_level)
    return PathSample(step, np.array(vals), truncated_at_horizon=True)


# ------------------------------------------------- branching flow

def sample_psi(rng, size=None):
    """Exact draws from the density psi (rejection against 2*chi_1)."""
    g = _gen(rng)
    n = 1 if size is None else int(size)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(int((n - filled) * 2.2) + 16, 32)
        w = _chi1_draws(g, m)
        ratio = sf.psi(w) / (2.0 * sf.chi(1, w))
        acc = g.uniform(size=m) < ratio
        got = w[acc]
        k = min(got.size, n - filled)
        out[filled:filled + k] = got[:k]
        filled += k
    return float(out[0]) if size is None else out


def _chi1_draws(g, m):
    e = g.exponential(size=m)
    z = np.abs(g.normal(size=m))
    z = np.maximum(z, 1e-150)
    return np.minimum(e * e / (2.0 * z * z), 1e250)


def sample_chi3(rng, size=None):
    """Exact draws from chi_3 = chi_1 * chi_1 * chi_1 (three-fold sum)."""
    g = _gen(rng)
    n = 1 if size is None else int(size)
    e = g.exponential(size=(3, n))
    z = np.maximum(np.abs(g.normal(size=(3, n))), 1e-150)
    out = np.sum(e * e / (2.0 * z * z), axis=0)
    return float(out[0]) if size is None else out


def sample_inv_chisq3(rng, size=None):
    """Draws with density (2 pi x^5)^{-1/2} exp(-1/(2x))."""
    g = _gen(rng)
    if size is None:
        return float(1.0 / g.chisquare(3))
    return 1.0 / g.chisquare(3, size=int(size))


def csbp_transition(x, s, rng):
    """One exact step of the critical branching flow over duration s.

    The transition from mass x is compound Poisson: N ~ Poisson(3x/(2s^2))
    clusters, each of size (2s^2/3) times a psi draw.  Accepts a scalar
    or an array of masses; the zero state is absorbing.
    """
    if s <= 0:
        raise ValueError("duration must be positive")
    g = _gen(rng)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xs < 0):
        raise ValueError("mass must be nonnegative")
    counts = g.poisson(xs * 1.5 / (s * s))
    scale = 2.0 * s * s / 3.0
    out = np.zeros(xs.size)
    # The masses can be heavy-tailed, so one path may ask for an enormous
    # cluster count; generate in bounded blocks instead of one allocation.
    block = 1 << 22
    start = 0
    while start < xs.size:
        end = start
        tot = 0
        while end < xs.size and tot + counts[end] <= block:
            tot += int(counts[end])
            end += 1
        if end == start:  # a single path larger than the block
            left = int(counts[start])
            acc = 0.0
            while left > 0:
                k = min(left, block)
                acc += float(np.sum(sample_psi(g, k)))
                left -= k
            out[start] = acc * scale
            start += 1
            continue
        if tot:
            clusters = sample_psi(g, tot) * scale
            idx = np.repeat(np.arange(start, end) - start, counts[start:end])
            out[start:end] = np.bincount(idx, weights=clusters,
                                         minlength=end - start)
        start = end
    return float(out[0]) if np.isscalar(x) or np.ndim(x) == 0 else out


def csbp_up_path(times, rng, n=1):
    """Ascending-conditioned branching flow from zero on a time grid.

    Exact via the size-biased cluster representation: the first marginal
    is a scaled chi_3 draw, and each subsequent step is an ordinary
    transition plus one extra size-biased cluster (again scaled chi_3).
    Returns shape (len(times),) for n == 1, else (n, len(times)).
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size < 1 or t[0] <= 0 or np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing and positive")
    g = _gen(rng)
    out = np.empty((n, t.size))
    out[:, 0] = sample_chi3(g, n) * (2.0 * t[0] * t[0] / 3.0)
    for k in range(1, t.size):
        s = t[k] - t[k - 1]
        ordinary = csbp_transition(out[:, k - 1], s, g)
        biased = sample_chi3(g, n) * (2.0 * s * s / 3.0)
        out[:, k] = ordinary + biased
    return out[0] if n == 1 else out
