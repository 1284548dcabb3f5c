"""Two-point label pseudo-metric on explored trees.

The cactus-type two-point functional delta0 compares labels against the
minimum over the two exploration intervals joining the points; its
largest triangle-inequality minorant delta is the shortest-path closure
over the sampled point set.  Interval minima come from a sparse table
(O(1) per query), and the closure is computed by min-plus matrix
squaring, row-blocked, iterated to an exact fixpoint so the triangle
inequality holds in floating point as an identity rather than within a
tolerance.  Both matrices are floored at the |label difference| lower
bound — a mathematical no-op that pins that bound exactly in floating
point as well.

Simple geodesics follow the first-crossing switching rule: walk forward
in exploration time to the first point achieving each target label, and
fall back to the earliest crossing before the start when the forward
side never descends that far.  Their endpoints land on exact boundary
labels, so the telescoped length equals the starting label exactly.

Infinite explorations are horizon-truncated windows; boundary_ball
enforces the per-sample validity radius (window-edge label minus the
observed ball diameter) before trusting that the removed part cannot
shortcut into the ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coding import KIND_FINITE, KIND_INFINITE, ROOT_MARK, TreeSample

__all__ = [
    "MetricSample",
    "MinTable",
    "sample_points",
    "delta0",
    "delta0_matrix",
    "metric_sample",
    "delta_closure",
    "simple_geodesic",
    "boundary_ball",
    "export_csv",
]

_CLOSURE_ROWS = 64          # row block for the min-plus products


class MinTable:
    """Sparse table for range-minimum queries over the label sequence."""

    def __init__(self, values):
        v = np.asarray(values, dtype=float)
        levels = [v]
        size, span = v.size, 1
        while 2 * span <= size:
            prev = levels[-1]
            levels.append(np.minimum(prev[:size - 2 * span + 1],
                                     prev[span:size - span + 1]))
            span *= 2
        self._levels = levels
        self.size = size

    def query(self, lo, hi):
        """Minimum over the inclusive index range [lo, hi]; vectorized."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if np.any(lo > hi) or np.any(lo < 0) or np.any(hi >= self.size):
            raise ValueError("bad range-minimum query")
        length = hi - lo + 1
        k = np.frexp(length.astype(float))[1] - 1    # floor(log2(length))
        out = np.empty(lo.shape, dtype=float)
        for kk in np.unique(k):
            mask = k == kk
            tab = self._levels[int(kk)]
            span = 1 << int(kk)
            out[mask] = np.minimum(tab[lo[mask]], tab[hi[mask] - span + 1])
        return out if out.ndim else float(out)


@dataclass
class MetricSample:
    """Point set on one exploration with its delta0 / delta matrices.

    ``points`` are sorted exploration indices; ``delta0`` may hold +inf
    off the Brownian-plane variant; ``delta`` is None until
    `delta_closure` fills it, after which every array is frozen.
    """

    points: np.ndarray
    labels: np.ndarray
    delta0: np.ndarray
    delta: np.ndarray | None = None

    def __post_init__(self):
        n = self.points.size
        if self.labels.shape != (n,) or self.delta0.shape != (n, n):
            raise ValueError("inconsistent metric sample shapes")

    @property
    def n(self):
        return self.points.size


def _tree_tables(tree):
    lab = tree.labels
    table = MinTable(lab)
    # exclusive running minima: prefix_excl[i] = min(lab[:i]), empty = +inf
    prefix_excl = np.concatenate(([np.inf], np.minimum.accumulate(lab)[:-1]))
    suffix_excl = np.concatenate(
        (np.minimum.accumulate(lab[::-1])[-2::-1], [np.inf]))
    return table, prefix_excl, suffix_excl


def _pair_minima(tree, pts, tables=None):
    """Open-interval (direct, wrap) label minima for all sorted pairs.

    Interval minima are taken over the samples strictly between the two
    endpoints (falling back to the smaller endpoint label when nothing
    lies between): for interior pairs this converges to the same
    continuum infimum as the closed interval, while at an exact-zero
    endpoint it is the grid form of extending the functional
    continuously to the boundary instead of reading the zero itself as
    an interior value — the interval's approach to the endpoint, here
    its innermost sample, is what enters.  The direct interval of an
    ordered pair runs between the two indices; the wrap interval leaves
    through the window end and re-enters at the start — the cyclic
    complement for a finite exploration, the two horizon tails standing
    in for the passage through infinity on a truncated infinite one.
    """
    table, prefix_excl, suffix_excl = tables if tables else _tree_tables(tree)
    lab = tree.labels
    n = pts.size
    lo = np.minimum(pts[:, None], pts[None, :])
    hi = np.maximum(pts[:, None], pts[None, :])
    adjacent = hi - lo < 2
    qlo = np.where(adjacent, hi, lo + 1)
    qhi = np.where(adjacent, hi, hi - 1)
    direct = table.query(qlo.ravel(), qhi.ravel()).reshape(n, n)
    endpoint = np.minimum(lab[lo], lab[hi])
    direct[adjacent] = endpoint[adjacent]
    wrap = np.minimum(prefix_excl[lo], suffix_excl[hi])
    wrap = np.where(np.isinf(wrap), endpoint, wrap)
    return direct, wrap


def delta0(tree, u, v):
    """Two-point label functional between exploration indices u and v.

    labels(u) + labels(v) - 2*max(direct interval min, wrap interval
    min) when that max is positive, +inf otherwise; the infinite-window
    no-cut variant (the plane, whose only zero label is the root) uses
    the finite formula unconditionally.  Interval minima follow the
    open-interval convention of `_pair_minima`, under which two exact
    boundary samples bounding one positive label excursion come out at
    distance zero (their gluing) while boundary samples separated by
    further zeros stay at +inf, and the whole matrix is floored at
    |labels(u) - labels(v)| — a bound the continuum formula dominates,
    so flooring only removes grid undershoot, and it pins
    distance-to-boundary = label exactly.
    """
    if u == v:
        return 0.0
    lab = tree.labels
    a, b = (u, v) if u <= v else (v, u)
    endpoint = min(float(lab[a]), float(lab[b]))
    direct = float(np.min(lab[a + 1:b])) if b - a >= 2 else endpoint
    left = float(np.min(lab[:a])) if a > 0 else math.inf
    right = float(np.min(lab[b + 1:])) if b + 1 < lab.size else math.inf
    wrap = min(left, right)
    if math.isinf(wrap):
        wrap = endpoint
    m = max(direct, wrap)
    unconditional = tree.kind == KIND_INFINITE and tree.cut_level is None
    if m <= 0.0 and not unconditional:
        return math.inf
    return max(lab[u] + lab[v] - 2.0 * m, abs(lab[u] - lab[v]))


def delta0_matrix(tree, pts, tables=None):
    """delta0 on all pairs of sorted exploration indices."""
    lab = tree.labels[pts]
    direct, wrap = _pair_minima(tree, pts, tables)
    m = np.maximum(direct, wrap)
    out = lab[:, None] + lab[None, :] - 2.0 * m
    if not (tree.kind == KIND_INFINITE and tree.cut_level is None):
        out[m <= 0.0] = np.inf
    np.maximum(out, np.abs(lab[:, None] - lab[None, :]), out=out)
    np.fill_diagonal(out, 0.0)
    return out


def sample_points(tree, n, rng, boundary_cap=None):
    """Point set: volume-uniform draws plus the boundary-flagged rows.

    Uniform in exploration time is uniform in volume.  All boundary
    rows ride along by default so boundary distances are observable;
    `boundary_cap` keeps an evenly spaced subset instead when a sample
    flags more boundary cells than the matrix budget can carry.
    """
    g = rng.gen if hasattr(rng, "gen") else rng
    s = tree.s
    draws = g.uniform(s[0], s[-1], size=n)
    idx = np.searchsorted(s, draws).clip(0, s.size - 1)
    flagged = np.nonzero(tree.boundary)[0]
    if boundary_cap is not None and flagged.size > boundary_cap:
        keep = np.linspace(0, flagged.size - 1, boundary_cap).astype(np.int64)
        flagged = flagged[keep]
    return np.unique(np.concatenate([idx, flagged]))


def metric_sample(tree, n, rng, boundary_cap=None):
    """Draw a point set and fill its delta0 matrix (delta left open)."""
    pts = sample_points(tree, n, rng, boundary_cap=boundary_cap)
    return MetricSample(points=pts, labels=tree.labels[pts].copy(),
                        delta0=delta0_matrix(tree, pts))


def _minplus_square(d):
    out = d.copy()
    n = d.shape[0]
    for lo in range(0, n, _CLOSURE_ROWS):
        hi = min(lo + _CLOSURE_ROWS, n)
        block = d[lo:hi, :, None] + d[None, :, :]
        np.minimum(out[lo:hi], block.min(axis=1), out=out[lo:hi])
    return out


def delta_closure(sample, max_rounds=64):
    """Shortest-path closure of delta0 over the sampled points.

    Min-plus squaring doubles the admissible path length each round, so
    the true closure needs ceil(log2(n)) rounds; the loop then keeps
    squaring (and re-flooring at the label-difference bound) until the
    matrix stops changing, making `d <= minplus(d, d)` and
    `d >= |label gap|` exact floating-point identities of the result.
    Returns a new MetricSample with every array frozen.
    """
    d = sample.delta0.copy()
    floor = np.abs(sample.labels[:, None] - sample.labels[None, :])
    for _ in range(max_rounds):
        nxt = np.maximum(_minplus_square(d), floor)
        if np.array_equal(nxt, d):
            break
        d = nxt
    else:  # pragma: no cover - would need an adversarial rounding cycle
        raise RuntimeError("metric closure did not reach a fixpoint")
    out = MetricSample(points=sample.points.copy(),
                       labels=sample.labels.copy(),
                       delta0=sample.delta0.copy(), delta=d)
    for arr in (out.points, out.labels, out.delta0, out.delta):
        arr.setflags(write=False)
    return out


def _boundary_floor(tree):
    return 0.0 if tree.cut_level is None else float(tree.cut_level)


def simple_geodesic(tree, start, n_steps=64):
    """Discrete simple geodesic from the exploration index `start`.

    Targets descend from the starting label to the boundary floor in
    `n_steps` equal label decrements.  Each target is resolved to the
    first index at or after `start` whose label has crossed it, or —
    when the labels after `start` never descend that far — to the
    earliest crossing before `start`.  Both resolvers are monotone in
    the target, so a two-pointer sweep finds the whole polyline in one
    pass per side.  The final target is the boundary floor itself,
    where flagged rows carry the exact label, so the endpoint is a
    snapped boundary point and the telescoped decrement sum is exactly
    the starting label minus the floor.
    """
    lab = tree.labels
    floor = _boundary_floor(tree)
    lab0 = float(lab[start])
    if lab0 <= floor:
        raise ValueError("geodesic start must have an interior label")
    targets = lab0 - (lab0 - floor) * np.arange(1, n_steps + 1) / n_steps
    targets[-1] = floor
    min_after = float(np.min(lab[start:]))
    min_before = float(np.min(lab[:start + 1]))
    path = [int(start)]
    fwd, back = start, 0
    for tgt in targets:
        if min_after <= tgt:
            while lab[fwd] > tgt:
                fwd += 1
            path.append(int(fwd))
        elif min_before <= tgt:
            while lab[back] > tgt:
                back += 1
            path.append(int(back))
        else:
            raise ValueError("no boundary reachable in the sampled window")
    return np.array(path, dtype=np.int64)


def _row_widths(tree):
    """Exploration-time width of each row (its atom's grid step).

    Rows of one atom advance the clock uniformly, so the width is the
    within-block s-increment; marker rows carry no volume.
    """
    widths = np.zeros(tree.s.size)
    ids = tree.atom_id
    real = ids != ROOT_MARK
    if not np.any(real):
        return widths
    d = np.abs(np.diff(tree.s))
    same = (ids[:-1] == ids[1:]) & real[:-1]
    widths[:-1][same] = d[same]
    # last row of each block inherits its neighbor's width
    starts = np.nonzero(real & (widths == 0.0))[0]
    for i in starts:
        j = i - 1 if i > 0 and ids[i - 1] == ids[i] else i + 1
        if 0 <= j < widths.size and ids[j] == ids[i]:
            widths[i] = widths[j]
    return widths


def boundary_ball(tree, h):
    """Sub-sample of the tubular neighborhood {label <= h} of the
    boundary, for samples whose distance-to-boundary is the label.

    For a horizon-truncated infinite exploration the unseen part could
    in principle shortcut back, so h must clear the per-sample validity
    radius: h plus the observed delta-diameter of the ball must stay
    below the smaller window-edge label (the removed part starts
    there).  Finite explorations have no removed part.
    """
    if h <= 0.0:
        raise ValueError("ball height must be positive")
    keep = np.nonzero(tree.labels <= h)[0]
    if keep.size == 0:
        raise ValueError("no sampled point within the ball height")
    if tree.kind == KIND_INFINITE:
        edge = min(float(tree.labels[0]), float(tree.labels[-1]))
        closed = delta_closure(MetricSample(
            points=keep, labels=tree.labels[keep].copy(),
            delta0=delta0_matrix(tree, keep)))
        finite = closed.delta[np.isfinite(closed.delta)]
        diam = float(finite.max()) if finite.size else 0.0
        if h + diam > edge:
            raise ValueError("validity radius exceeded: h + ball diameter "
                             f"{h + diam:.6g} > window edge label {edge:.6g}")
    widths = _row_widths(tree)
    return TreeSample(s=tree.s[keep], labels=tree.labels[keep],
                      atom_id=tree.atom_id[keep],
                      atom_index=tree.atom_index[keep],
                      boundary=tree.boundary[keep],
                      volume=float(widths[keep].sum()),
                      kind=tree.kind, cut_level=tree.cut_level)


def export_csv(tree, sample, path):
    """Point table and delta matrix; %.17g round-trips.

    One row per point (exploration index, atom id, atom index, label),
    a blank line, then the closed delta matrix row by row in the same
    point order.
    """
    if sample.delta is None:
        raise ValueError("export needs a closed sample")
    with open(path, "w") as fh:
        fh.write("point,atom_id,atom_index,label\n")
        for k, p in enumerate(sample.points):
            fh.write(f"{p},{tree.atom_id[p]},{tree.atom_index[p]},"
                     f"{sample.labels[k]:.17g}\n")
        fh.write("\n")
        for row in sample.delta:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
