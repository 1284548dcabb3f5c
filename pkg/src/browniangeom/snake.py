"""Tree-indexed Brownian paths on a uniform exploration grid.

A trajectory records, per grid time, the lifetime (distance from the
tree root to the current vertex) and the tip label (the spatial value
at that vertex).  The discrete tree is the one coded by the lifetime
array through running minima; tip labels are drawn exactly from the
Gaussian tree structure of that discrete tree, so the structural
invariants (snake property on exact ties, endpoint pinning) hold
exactly in float arithmetic while continuum identities hold up to grid
resolution.

Sampling under the conditioned excursion measure is in three exact
stages: the ratio m = delta/sqrt(duration) has density
sqrt(2/pi) * q(m) with q the excursion-maximum tail, which fixes the
duration; given the duration the lifetime is a 3-d Bessel bridge (norm
of three scalar bridges, exact at grid times), redrawn until its
maximum clears delta; tips follow by the ancestral-stack walk.  The
importance weight 1/(2*delta) converts conditioned averages back to
excursion-measure integrals.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from ._kernels import tip_walk, truncate_sweep
from .processes import RngStream

__all__ = [
    "SnakeTrajectory",
    "AncestralStack",
    "sample_snake_conditioned",
    "sample_snake_positive",
    "tree_distance",
    "reroot",
    "truncate",
    "wstar",
    "hit_probability",
    "exit_measure_estimate",
    "scale_theta",
    "time_reverse",
    "dump_csv",
    "load_csv",
]

# clamp on the far tail of the conditioned duration law: the ratio draw
# is floored so that duration <= 1e6 * delta^2 (and never more than
# _MAX_CELLS grid cells); the clamped mass is about sqrt(2/pi) * 1e-3
# ~ 8e-4 of all draws and must be carried in the bias notes of any
# estimator sensitive to extreme durations.
_RATIO_FLOOR = 1e-3
_MAX_CELLS = 40_000_000


@dataclass(frozen=True)
class SnakeTrajectory:
    """Lifetime and tip-label arrays on a uniform exploration grid."""

    x: float
    step: float
    zeta: np.ndarray
    tip: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=float)
        w = np.asarray(self.tip, dtype=float)
        object.__setattr__(self, "zeta", z)
        object.__setattr__(self, "tip", w)
        if not (self.step > 0.0):
            raise ValueError("step must be positive")
        if z.shape != w.shape or z.ndim != 1 or z.size < 2:
            raise ValueError("lifetime and tip must be equal-length 1-d "
                             "arrays with at least two samples")

    @property
    def n(self) -> int:
        return int(self.zeta.size)

    @property
    def sigma(self) -> float:
        """Total exploration duration."""
        return (self.zeta.size - 1) * self.step

    def validate(self):
        """Check the structural invariants; raises ValueError on failure."""
        z, w = self.zeta, self.tip
        if z[0] != 0.0 or z[-1] != 0.0:
            raise ValueError("lifetime must start and end at exactly 0")
        if np.any(z < 0.0):
            raise ValueError("lifetime must be nonnegative")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite values")
        if w[0] != self.x or w[-1] != self.x:
            raise ValueError("tip must start and end at exactly the root "
                             "label")
        # no teleporting: upward lifetime moves stay on the step scale.
        # (Downward moves can be large after truncation, where whole cut
        # stretches collapse into a single grid transition.)
        if z.size > 1:
            max_rise = float(np.max(np.diff(z)))
            bound = 16.0 * math.sqrt(self.step * max(1.0, math.log(z.size)))
            if max_rise > bound:
                raise ValueError("lifetime rise exceeds the step scale")
        # snake property on exact ties: if two times share the exact
        # running minimum between them, their tips must agree exactly
        order = np.argsort(z, kind="stable")
        zs = z[order]
        run_start = 0
        for k in range(1, z.size + 1):
            if k == z.size or zs[k] != zs[run_start]:
                if k - run_start > 1:
                    idx = np.sort(order[run_start:k])
                    for a, b in zip(idx[:-1], idx[1:]):
                        if z[a] == z[b] == np.min(z[a:b + 1]):
                            if w[a] != w[b]:
                                raise ValueError(
                                    "snake property violated at exact tie")
                run_start = k
        return self


class AncestralStack:
    """The (tree height, label) pairs coding the root-to-tip path.

    Heights are strictly increasing and the top entry is the current
    exploration position, so reading the top gives (zeta, tip) at every
    step of a walk.  This is the pure-Python reference for the compiled
    tip walk; `advance` consumes exactly two normals per grid step, in
    the same order, so the two constructions compare bitwise.
    """

    def __init__(self, root_label):
        self.heights = [0.0]
        self.labels = [float(root_label)]

    @property
    def top(self):
        return self.heights[-1], self.labels[-1]

    def advance(self, z_new, n_bridge, n_fresh):
        """One grid step to lifetime z_new; returns the new tip label."""
        z_old, w_old = self.top
        b = min(z_old, z_new)
        h_hi, w_hi = z_old, w_old
        while self.heights[-1] > b:
            h_hi, w_hi = self.heights[-1], self.labels[-1]
            self.heights.pop()
            self.labels.pop()
        h_lo, w_lo = self.heights[-1], self.labels[-1]
        if b > h_lo:
            frac = (b - h_lo) / (h_hi - h_lo)
            mean = w_lo + frac * (w_hi - w_lo)
            var = (b - h_lo) * (h_hi - b) / (h_hi - h_lo)
            w_b = mean + math.sqrt(var) * n_bridge
            self.heights.append(b)
            self.labels.append(w_b)
        else:
            w_b = w_lo
        if z_new > self.heights[-1]:
            tip = w_b + math.sqrt(z_new - b) * n_fresh
            self.heights.append(z_new)
            self.labels.append(tip)
        else:
            # exact tie with the entry at b: the tip IS that label
            tip = self.labels[-1]
        return tip


# ------------------------------------------------ excursion machinery

_MSTAR_GRID = None
_MSTAR_CDF = None


def excursion_max_tail(m):
    """P(max of a normalized excursion > m), by its theta series."""
    m = float(m)
    if m <= 0.0:
        return 1.0
    if m < 0.5:
        # dual series, fast for small m
        s = 0.0
        for k in range(1, 40):
            t = k * k * math.exp(-math.pi ** 2 * k * k / (2.0 * m * m))
            s += t
            if t < 1e-18 * max(s, 1e-300):
                break
        return 1.0 - math.sqrt(2.0 * math.pi ** 5) / m ** 3 * s
    s = 0.0
    for k in range(1, 200):
        e = math.exp(-2.0 * k * k * m * m)
        s += (4.0 * k * k * m * m - 1.0) * e
        if e < 1e-20:
            break
    return 2.0 * s


def _mstar_table():
    """Cached inversion table for the ratio density sqrt(2/pi)*tail(m)."""
    global _MSTAR_GRID, _MSTAR_CDF
    if _MSTAR_GRID is None:
        grid = np.linspace(0.0, 4.0, 6001)
        dens = math.sqrt(2.0 / math.pi) * np.array(
            [excursion_max_tail(m) for m in grid])
        cdf = np.concatenate(
            ([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))))
        _MSTAR_GRID = grid
        _MSTAR_CDF = cdf / cdf[-1]
    return _MSTAR_GRID, _MSTAR_CDF


def _gen(rng):
    return rng.gen if isinstance(rng, RngStream) else rng


def _bessel3_bridge(duration, n, g):
    """Norm of three scalar bridges: exact excursion grid marginals."""
    h = duration / n
    inc = g.normal(0.0, math.sqrt(h), size=(n, 3))
    w = np.cumsum(inc, axis=0)
    t = (np.arange(1, n + 1) * (h / duration))[:, None]
    b = w - t * w[-1]
    out = np.empty(n + 1)
    out[0] = 0.0
    np.sqrt(np.einsum("ij,ij->i", b, b), out=out[1:])
    out[-1] = 0.0
    return out, h


def sample_snake_conditioned(x, delta, step, rng, max_duration=None):
    """Draw a trajectory given that the lifetime maximum exceeds delta.

    Returns (snake, weight) with weight = 1/(2*delta), the conditioning
    mass, so that weight * f(snake) averaged over draws estimates the
    excursion-measure integral of any f supported on
    {max lifetime > delta}.

    The far tail of the duration law is clamped: by default at
    1e6*delta^2 (see _RATIO_FLOOR), or at max_duration when given.
    Durations above the clamp are drawn at the clamp instead; the
    affected mass is about 0.8*delta/sqrt(clamp) of all draws and must
    be budgeted by estimators sensitive to extreme durations.
    """
    if delta <= 0 or step <= 0:
        raise ValueError("delta and step must be positive")
    g = _gen(rng)
    grid, cdf = _mstar_table()
    m = max(float(np.interp(g.uniform(), cdf, grid)), _RATIO_FLOOR)
    duration = min((delta / m) ** 2, _MAX_CELLS * step)
    if max_duration is not None:
        duration = min(duration, float(max_duration))
    n = max(2, int(math.ceil(duration / step)))
    while True:
        zeta, h = _bessel3_bridge(duration, n, g)
        if zeta.max() > delta:
            break
    normals = g.normal(size=(n, 2))
    tips = tip_walk(zeta, normals, float(x))
    snake = SnakeTrajectory(x=float(x), step=h, zeta=zeta, tip=tips)
    return snake, 1.0 / (2.0 * delta)


def sample_snake_positive(x, delta, step, rng, max_tries=100_000):
    """Conditioned draw kept only when every label stays positive.

    Plain rejection on the minimum label; the retained mass within
    {max lifetime > delta} is 1/(2*delta) - 3/(2x^2) up to excursions
    too shallow to reach 0, so small x with small delta is slow.
    Raises RuntimeError carrying the implied acceptance bound when the
    budget is exhausted.
    """
    if x <= 0:
        raise ValueError("root label must be positive to condition on "
                         "positivity")
    for _ in range(max_tries):
        snake, _ = sample_snake_conditioned(x, delta, step, rng)
        if wstar(snake) > 0.0:
            return snake
    raise RuntimeError(
        f"positivity rejection budget exhausted after {max_tries} tries "
        f"(acceptance rate below ~{1.0 / max_tries:.2g}) at x={x}, "
        f"delta={delta}")


# ------------------------------------------------------- operations

def tree_distance(omega, s, sp):
    """Distance in the coded tree between the vertices at grid times."""
    z = omega.zeta
    if not (0 <= s < z.size and 0 <= sp < z.size):
        raise IndexError("grid index out of range")
    lo, hi = (s, sp) if s <= sp else (sp, s)
    return float(z[s] + z[sp] - 2.0 * np.min(z[lo:hi + 1]))


def reroot(omega, r):
    """Re-root the trajectory at the vertex visited at grid index r.

    The new lifetime at shift s is the tree distance from the new root
    to the vertex at time r+s (cyclically, identifying time 0 with the
    end); labels are carried over unchanged, so the new root label is
    the old tip at r.  reroot(reroot(omega, r), n-r) recovers omega for
    a trajectory with n grid cells.
    """
    z, w = omega.zeta, omega.tip
    n = z.size - 1  # cells; times 0 and n identified
    if not (0 <= r <= n):
        raise IndexError("grid index out of range")
    if r == 0 or r == n:
        return omega
    fwd = np.minimum.accumulate(z[r:])                   # min over [r, r+s]
    bwd = np.minimum.accumulate(z[: r + 1][::-1])[::-1]  # min over [j, r]
    mins = np.concatenate([fwd, bwd[1:r + 1]])
    idx = np.concatenate([np.arange(r, n + 1), np.arange(1, r + 1)])
    new_z = z[r] + z[idx] - 2.0 * mins
    new_z[0] = 0.0
    new_z[-1] = 0.0
    new_w = w[idx].copy()
    new_w[-1] = new_w[0]
    return SnakeTrajectory(x=float(w[r]), step=omega.step,
                           zeta=new_z, tip=new_w)


def truncate(omega, y):
    """Remove every part of the tree beyond the first label passage at y.

    Subtrees whose ancestral label line crosses y are cut at the
    crossing; each cut contributes one boundary sample whose label is
    exactly y (detectable downstream by equality, no tolerance needed).
    Requires y strictly below the root label.
    """
    if y >= omega.x:
        raise ValueError("truncation level must be below the root label")
    out_z, out_w, count = truncate_sweep(omega.zeta, omega.tip,
                                         float(omega.x), float(y))
    return SnakeTrajectory(x=omega.x, step=omega.step,
                           zeta=out_z[:count].copy(),
                           tip=out_w[:count].copy())


def wstar(omega):
    """Minimum tip label over the whole trajectory."""
    return float(np.min(omega.tip))


def hit_probability(omega, y):
    """P(some label of the coded continuum tree is <= y | this skeleton).

    The grid minimum alone misses sub-cell dips of the label field; the
    label path across one grid cell is a Brownian bridge over the
    lifetime gap given its endpoint tips, whose level-crossing
    probability is the classical exp(-2ab/h).  Multiplying the per-cell
    survival terms gives the exact conditional crossing probability of
    the skeleton's worm — a strictly sharper estimate of the event
    {labels reach y} than the grid indicator (sub-cell subtrees remain
    unseen, so a small bias of the same sign remains).
    """
    w = omega.tip
    if float(np.min(w)) <= y:
        return 1.0
    dh = np.abs(np.diff(omega.zeta))
    pos = dh > 0.0
    a = (w[:-1] - y)[pos]
    b = (w[1:] - y)[pos]
    log_surv = np.log1p(-np.exp(-2.0 * a * b / dh[pos]))
    return float(-np.expm1(log_surv.sum()))


def exit_measure_estimate(omega, y, eps=None):
    """Grid estimate of the exit-measure mass at level y.

    Counts truncated-trajectory tips in the open band (y, y+eps),
    scaled by step/eps^2; the continuum occupation of the band is
    exactly eps^2 per unit exit mass, which makes the estimator
    unbiased up to grid effects (first order in eps, reported by
    callers).  Boundary samples snapped to exactly y carry zero
    continuum occupation and are excluded — counting them would add a
    step-dependent artifact.  Default eps is
    max(5*sqrt(step), 0.02*(x - y)).
    """
    if y >= omega.x:
        raise ValueError("exit level must be below the root label")
    if eps is None:
        eps = max(5.0 * math.sqrt(omega.step), 0.02 * (omega.x - y))
    if eps <= 0:
        raise ValueError("band width must be positive")
    tr = truncate(omega, y)
    count = int(np.sum((tr.tip > y) & (tr.tip < y + eps)))
    return omega.step * count / (eps * eps)


def scale_theta(omega, lam):
    """Rescale: labels by sqrt(lam), lifetimes by lam, time by lam^2."""
    if lam <= 0:
        raise ValueError("scale factor must be positive")
    return SnakeTrajectory(x=omega.x * math.sqrt(lam),
                           step=omega.step * lam * lam,
                           zeta=omega.zeta * lam,
                           tip=omega.tip * math.sqrt(lam))


def time_reverse(omega):
    """Run the exploration backwards; the law is invariant."""
    return SnakeTrajectory(x=omega.x, step=omega.step,
                           zeta=omega.zeta[::-1].copy(),
                           tip=omega.tip[::-1].copy())


# ------------------------------------------------------------- CSV

def dump_csv(omega, path):
    """Write a trajectory with a 3-line header; %.17g round-trips
    doubles bit-exactly."""
    with open(path, "w") as fh:
        fh.write(f"# x {omega.x:.17g}\n")
        fh.write(f"# step {omega.step:.17g}\n")
        fh.write(f"# n {omega.n}\n")
        for z, w in zip(omega.zeta, omega.tip):
            fh.write(f"{z:.17g},{w:.17g}\n")


def load_csv(path):
    with open(path) as fh:
        x = float(fh.readline().split()[-1])
        step = float(fh.readline().split()[-1])
        n = int(fh.readline().split()[-1])
        data = np.loadtxt(io.StringIO(fh.read()), delimiter=",", ndmin=2)
    if data.shape != (n, 2):
        raise ValueError("row count does not match the declared length")
    return SnakeTrajectory(x=x, step=step, zeta=data[:, 0].copy(),
                           tip=data[:, 1].copy())
