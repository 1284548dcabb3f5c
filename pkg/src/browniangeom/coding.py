"""Coding triples: spine-plus-grafted-snakes data for the non-compact
geometries, and everything built directly on them.

A coding triple is a labeled spine path together with two ordered
families of snake trajectories grafted on its left and right sides.
The four constructions sampled here are: the plane (Bessel(9) spine,
positive snakes), the half-plane (Bessel(3) spine up to its last
passage, truncated snakes), the infinite-volume disk of perimeter z
(the part of the plane beyond the last passage at a level, rescaled by
its own boundary size), and the disk of fixed height (the same after a
rejection step and a restriction).

Exploration conventions.  The clockwise exploration of the coded tree
orders, for an infinite spine, the left atoms by increasing graft time
on s > 0 and the right atoms by *decreasing* graft time on s < 0, each
atom traversed forward; for a finite spine the grid is cyclic: left
atoms by increasing graft time first, then right atoms by decreasing
graft time, with the spine's bottom point at both ends of the grid.
Volume is carried by the atoms alone (the spine is Lebesgue-null).

Boundary sizes are never estimated from atom geometry.  The skeleton
sampler draws the exit-measure contributions exactly: hits form a
Poisson process along the spine whose per-cell intensity integrals are
closed-form under linear interpolation, each hit's mass is an exact
draw from the one-parameter exit family, and the positivity
conditioning is a pointwise thinning with the closed-form survival
factor.  Extraction operations that also need the hit atoms' geometry
draw the mark first and then a snake conditioned on the hit by
rejection; the drawn exit value is deliberately not imposed on the
snake (mark-first coupling).  Cells whose endpoints touch the level
are skipped; each skipped cell omits about 4*dt of expected boundary
mass, which is the documented grid bias of every total returned here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .processes import (HorizonError, PathSample, _gen, last_passage,
                        sample_bessel, sample_bessel_neg5, sample_bm,
                        sample_bridge, sample_psi)
from .snake import (SnakeTrajectory, sample_snake_conditioned, truncate,
                    wstar)
from . import mc, specialfn

__all__ = [
    "CodingTriple",
    "TreeSample",
    "KIND_FINITE",
    "KIND_INFINITE",
    "explore",
    "omega_of",
    "tr_triple",
    "sigma_scale",
    "restrict",
    "sample_plane_triple",
    "sample_halfplane_triple",
    "sample_bm_triple",
    "boundary_skeleton",
    "descent_pieces",
    "sample_theta",
    "sample_theta_height",
    "hull_extract",
    "horohull_extract",
    "campbell_estimate",
    "bridge_height_sampler",
    "volume_below",
    "dump_tree_csv",
    "load_tree_csv",
    "dump_skeleton_json",
]

KIND_FINITE = "finite"
KIND_INFINITE = "horizon-truncated-infinite"

# provenance id of non-atom samples (root markers) in a TreeSample
ROOT_MARK = -1


# ------------------------------------------------------------ types

@dataclass
class CodingTriple:
    """Spine labels plus ordered left/right atom lists.

    ``left`` and ``right`` hold (graft-time, SnakeTrajectory) pairs with
    strictly increasing times inside each list; each atom's root label
    is the spine label at its graft time (set by interpolation at
    construction, checked to interpolation tolerance by `validate`).
    ``cut_level`` records the label at which the triple was truncated,
    so boundary points are detectable downstream by exact equality;
    ``boundary`` carries the triple's boundary size when one exists
    (the skeleton total, or exactly z after the self-normalized
    rescaling).
    """

    spine: PathSample
    left: list
    right: list
    kind: str
    cut_level: float | None = None
    boundary: float | None = None

    def __post_init__(self):
        if self.kind not in (KIND_FINITE, KIND_INFINITE):
            raise ValueError(f"unknown spine kind: {self.kind!r}")
        self.left = list(self.left)
        self.right = list(self.right)

    def validate(self):
        """Structural invariants; raises ValueError on failure."""
        dur = self.spine.duration
        for name, atoms in (("left", self.left), ("right", self.right)):
            last = -math.inf
            for t, omega in atoms:
                if not (0.0 <= t <= dur):
                    raise ValueError(
                        f"{name} graft time {t} outside [0, {dur}]")
                if t <= last:
                    raise ValueError(f"{name} graft times not strictly "
                                     "increasing")
                last = t
                want = _spine_label(self.spine, t)
                if not math.isclose(omega.x, want,
                                    rel_tol=1e-9, abs_tol=1e-12):
                    raise ValueError(
                        f"atom root label {omega.x} != spine label {want} "
                        f"at graft time {t}")
        return self

    @property
    def atoms(self):
        """All (graft-time, side, atom) triples, side -1 left / +1 right."""
        out = [(t, -1, om) for t, om in self.left]
        out += [(t, +1, om) for t, om in self.right]
        out.sort(key=lambda rec: rec[0])
        return out


@dataclass
class TreeSample:
    """Clockwise-exploration label sequence with provenance.

    ``s`` is the exploration clock: signed around 0 for an infinite
    spine, cyclic on [0, volume] for a finite one.  ``atom_id`` indexes
    the combined atom enumeration (left list first, then right list);
    ROOT_MARK rows are the root/junction markers carrying no volume.
    ``atom_index`` is the sample's index inside its own atom grid.
    ``boundary`` flags labels exactly at the truncation level.
    """

    s: np.ndarray
    labels: np.ndarray
    atom_id: np.ndarray
    atom_index: np.ndarray
    boundary: np.ndarray
    volume: float
    kind: str
    cut_level: float | None = None


def _spine_label(spine, t):
    return float(np.interp(t, spine.times, spine.values))


# ------------------------------------------------------ exploration

def explore(triple):
    """Clockwise exploration of the coded labeled tree.

    Left atoms are traversed by increasing graft time and right atoms by
    decreasing graft time, on the positive/negative half-axes around the
    root for an infinite spine and cyclically (root at both ends) for a
    finite one.  Every atom contributes its full closed label range, so
    consecutive atoms share the clock value where one ends and the next
    begins (the label returns to the spine there, which is the
    documented discontinuity).  Negative clock values are accumulated
    backward from the root, so the root marker sits at exactly 0.
    """
    left = list(triple.left)
    right = list(triple.right)
    n_l = len(left)
    cut = triple.cut_level
    root_label = float(triple.spine.values[0])

    pos = [(i, om) for i, (_t, om) in enumerate(left)]
    neg = [(n_l + j, om) for j, (_t, om) in enumerate(right)][::-1]

    s_parts, lab_parts, id_parts, idx_parts = [], [], [], []

    def emit_atom(aid, om, s):
        s_parts.append(s)
        lab_parts.append(om.tip)
        id_parts.append(np.full(om.n, aid, dtype=np.int64))
        idx_parts.append(np.arange(om.n, dtype=np.int64))

    def marker(s_val):
        s_parts.append(np.array([s_val]))
        lab_parts.append(np.array([root_label]))
        id_parts.append(np.array([ROOT_MARK], dtype=np.int64))
        idx_parts.append(np.array([ROOT_MARK], dtype=np.int64))

    def forward(block, s0):
        for aid, om in block:
            emit_atom(aid, om, s0 + om.step * np.arange(om.n))
            s0 += om.sigma
        return s0

    def backward(block):
        cums, cum = [], 0.0
        for _aid, om in reversed(block):      # nearest the root first
            cums.append(cum)
            cum += om.sigma
        cums.reverse()
        for (aid, om), c in zip(block, cums):
            emit_atom(aid, om, -(c + om.step * np.arange(om.n)[::-1]))
        return cum

    if triple.kind == KIND_INFINITE:
        vol_neg = backward(neg)
        marker(0.0)
        volume = vol_neg + forward(pos, 0.0)
    else:
        marker(0.0)
        mid = forward(pos, 0.0)
        volume = forward(neg, mid)
        marker(volume)

    s = np.concatenate(s_parts)
    labels = np.concatenate(lab_parts)
    ids = np.concatenate(id_parts)
    idx = np.concatenate(idx_parts)
    if cut is None:
        flags = np.zeros(labels.size, dtype=bool)
    else:
        flags = labels == cut
    return TreeSample(s=s, labels=labels, atom_id=ids, atom_index=idx,
                      boundary=flags, volume=float(volume),
                      kind=triple.kind, cut_level=cut)


def omega_of(triple):
    """Fold a finite-spine triple into a single snake trajectory.

    The exploration's lifetime is the tree distance from the triple's
    root: inside an atom grafted at time t it is t plus the atom's own
    lifetime; between atoms it ramps monotonically along the spine.
    Ramp cells advance the lifetime by at most sqrt(step) each, with
    tips read off the spine by interpolation, so the structural
    validator's rise bound holds; ramps occupy exploration time that
    the continuum exploration does not (at most
    (2*spine-range/sqrt(step) + #atoms + 2) extra cells), which is the
    documented overhead of sigma over the tree volume.  The recorded
    grid step is the average cell width, making sigma exact by
    construction.
    """
    if triple.kind != KIND_FINITE:
        raise ValueError("omega_of needs a finite spine")
    spine = triple.spine
    x0 = float(spine.values[0])
    atoms_left = list(triple.left)
    atoms_right = list(triple.right)

    if spine.n == 1 and len(atoms_left) + len(atoms_right) == 1:
        t, om = (atoms_left + atoms_right)[0]
        if t == 0.0:
            return om

    rise = math.sqrt(spine.step)
    zs, ws = [np.array([0.0])], [np.array([x0])]
    time_spent = [0.0]

    def ramp(z_from, z_to):
        gap = abs(z_to - z_from)
        if gap == 0.0:
            return
        n_r = max(1, int(math.ceil(gap / rise)))
        z = np.linspace(z_from, z_to, n_r + 1)[1:]
        zs.append(z)
        ws.append(np.interp(z, spine.times, spine.values))
        time_spent[0] += n_r * spine.step

    def atom(t, om):
        ws[-1][-1] = om.x          # junction tip is the atom's own root
        zs.append(t + om.zeta[1:])
        ws.append(om.tip[1:])
        time_spent[0] += om.sigma

    pos = 0.0
    for t, om in atoms_left:
        ramp(pos, t)
        if pos == t:               # graft exactly at the current height
            zs.append(np.array([t]))
            ws.append(np.array([om.x]))
        atom(t, om)
        pos = t
    top = spine.duration
    ramp(pos, top)
    pos = top
    for t, om in atoms_right[::-1]:
        ramp(pos, t)
        if pos == t:
            zs.append(np.array([t]))
            ws.append(np.array([om.x]))
        atom(t, om)
        pos = t
    ramp(pos, 0.0)
    if pos == 0.0 and (zs[-1].size == 0 or zs[-1][-1] != 0.0):
        zs.append(np.array([0.0]))
        ws.append(np.array([x0]))

    zeta = np.concatenate(zs)
    tip = np.concatenate(ws)
    tip[-1] = x0
    n = zeta.size
    step = time_spent[0] / max(n - 1, 1)
    if step <= 0.0:
        step = spine.step
    return SnakeTrajectory(x=x0, step=step, zeta=zeta, tip=tip)


# ------------------------------------------- elementary operations

def tr_triple(triple):
    """Top-bottom reversal of a finite-spine triple.

    The spine label path runs backwards, the two atom lists swap sides
    with graft times reflected at the spine length; the atoms
    themselves are untouched.  An involution up to float reflection of
    the times (the label arrays come back bitwise).
    """
    if triple.kind != KIND_FINITE:
        raise ValueError("time reversal needs a finite spine")
    dur = triple.spine.duration
    new_left = [(dur - t, om) for t, om in reversed(triple.right)]
    new_right = [(dur - t, om) for t, om in reversed(triple.left)]
    return CodingTriple(spine=triple.spine.reversed(),
                        left=new_left, right=new_right,
                        kind=KIND_FINITE, cut_level=triple.cut_level,
                        boundary=triple.boundary)


def sigma_scale(triple, lam):
    """Spatial rescaling: labels by sqrt(lam), spine time and graft
    times by lam, atom clocks by lam^2, boundary size by lam."""
    if lam <= 0.0:
        raise ValueError("scale factor must be positive")
    root = math.sqrt(lam)
    sp = triple.spine
    spine = PathSample(step=sp.step * lam, values=sp.values * root,
                       origin=sp.origin * lam,
                       stopped_at_hit=sp.stopped_at_hit,
                       truncated_at_horizon=sp.truncated_at_horizon,
                       hit_level=(None if sp.hit_level is None
                                  else sp.hit_level * root))

    def atom(om):
        return SnakeTrajectory(x=om.x * root, step=om.step * lam * lam,
                               zeta=om.zeta * lam, tip=om.tip * root)

    return CodingTriple(
        spine=spine,
        left=[(t * lam, atom(om)) for t, om in triple.left],
        right=[(t * lam, atom(om)) for t, om in triple.right],
        kind=triple.kind,
        cut_level=(None if triple.cut_level is None
                   else triple.cut_level * root),
        boundary=(None if triple.boundary is None
                  else triple.boundary * lam))


def _cut_index(spine, a):
    """Grid index of the spine's last visit at or below label a.

    Uses the last-passage margin rule to refuse spines that might still
    return below a beyond the recorded horizon.
    """
    last_passage(spine, a)          # margin check only
    below = np.nonzero(spine.values <= a)[0]
    if below.size == 0:
        raise HorizonError(f"spine never reaches label {a}")
    return int(below[-1])


def restrict(triple, a):
    """Keep the part of the triple up to the spine's last passage at a.

    The spine is cut at its last grid visit <= a with the end value
    snapped to exactly a; atoms grafted beyond the cut are dropped.
    Spine labels of the removed part all exceed a (exactly, on the
    grid).  The result is a finite-spine triple.
    """
    k = _cut_index(triple.spine, a)
    if k < 1:
        raise HorizonError("last passage too close to the spine origin")
    vals = triple.spine.values[:k + 1].copy()
    vals[k] = a
    spine = PathSample(step=triple.spine.step, values=vals,
                       origin=triple.spine.origin)
    t_cut = k * triple.spine.step
    return CodingTriple(
        spine=spine,
        left=[(t, om) for t, om in triple.left if t <= t_cut],
        right=[(t, om) for t, om in triple.right if t <= t_cut],
        kind=KIND_FINITE, cut_level=triple.cut_level,
        boundary=triple.boundary)


# --------------------------------------------------- atom ensembles

def _far_atom_params(gap, scale, step, max_duration):
    """Grid coarsening and duration cap for atoms far above a level.

    Beyond two scale units the atom grid coarsens like the squared
    distance (consistent with the spatial rescaling, so constructions
    at different levels draw far atoms identically) and the duration is
    capped at 8*gap^2, beyond which the atom could not plausibly return
    to the level anyway (clamped mass ~0.8*delta/(2.8*gap) per draw).
    """
    if scale is None or gap <= 2.0 * scale:
        return step, max_duration
    cap = 8.0 * gap * gap
    if max_duration is not None:
        cap = min(cap, max_duration)
    return step * (gap / (2.0 * scale)) ** 2, cap


def _side_atoms(spine, delta, step, rng, keep_above=None, truncate_at=None,
                far_level=None, far_scale=None, max_duration=None,
                counters=None):
    """One side's graft times and snakes at rate 1/delta per unit time.

    Height-delta conditioning realizes the sigma-finite intensity
    2 dt N_x restricted to lifetimes above delta; `keep_above` thins to
    snakes whose labels stay strictly above that level, `truncate_at`
    replaces crossing snakes by their truncation.  A `counters` dict
    collects proposed/kept tallies for rate checks.  `delta=None` means
    no atoms at all (spine-only and boundary-anchored-only uses).
    """
    if delta is None:
        return []
    g = _gen(rng)
    dur = spine.duration
    count = g.poisson(dur / delta)
    times = np.sort(g.uniform(0.0, dur, size=count))
    if counters is not None:
        counters["proposed"] = counters.get("proposed", 0) + int(count)
    out = []
    for t in times:
        x = _spine_label(spine, float(t))
        if truncate_at is not None and x <= truncate_at:
            continue
        gap = x - far_level if far_level is not None else 0.0
        step_a, cap = _far_atom_params(gap, far_scale, step, max_duration)
        snake, _ = sample_snake_conditioned(x, delta, step_a, rng,
                                            max_duration=cap)
        if keep_above is not None and wstar(snake) <= keep_above:
            continue
        if truncate_at is not None and wstar(snake) <= truncate_at:
            snake = truncate(snake, truncate_at)
        out.append((float(t), snake))
    if counters is not None:
        counters["kept"] = counters.get("kept", 0) + len(out)
    return out


def sample_plane_triple(horizon, delta, step, rng, max_duration=None,
                        far_ref=None, counters=None):
    """Plane coding triple: Bessel(9) spine, positive snakes both sides.

    `horizon` is the spine's time horizon and must leave last-passage
    margins for any level read downstream.  Atoms arrive per side at
    rate 1/delta (the height-delta truncation of the intensity) and are
    kept only when their labels stay positive (`delta=None` skips atoms
    for spine-only uses).  `far_ref=(level, scale)` enables the
    far-atom grid coarsening used by the hull extraction cross-checks;
    `counters` collects the pre-rejection proposal tally for rate
    checks.
    """
    spine = sample_bessel(9, horizon, step, rng)
    if delta is None:
        return CodingTriple(spine=spine, left=[], right=[],
                            kind=KIND_INFINITE)
    f_level, f_scale = far_ref if far_ref is not None else (None, None)
    left = _side_atoms(spine, delta, step, rng, keep_above=0.0,
                       far_level=f_level, far_scale=f_scale,
                       max_duration=max_duration, counters=counters)
    right = _side_atoms(spine, delta, step, rng, keep_above=0.0,
                        far_level=f_level, far_scale=f_scale,
                        max_duration=max_duration, counters=counters)
    return CodingTriple(spine=spine, left=left, right=right,
                        kind=KIND_INFINITE)


_SEG_CELLS = 2_000_000      # per-segment allocation cap for doubling draws


def _bm_first_hit(start, stop_level, step, rng, max_time=None,
                  require_hit=True):
    """Brownian path from `start` run to its first hit of `stop_level`,
    assembled from doubling segments so the cost tracks the hitting
    time rather than a worst-case horizon.

    Segment sizes double up to a fixed allocation cap and grow linearly
    after it (first-passage times are heavy-tailed).  With
    ``require_hit=False`` a path that exhausts `max_time` comes back
    truncated instead of raising; callers of that mode accept the
    (exponentially small) weight such paths carry.
    """
    pieces = []
    x = float(start)
    seg = max(2.0 * (start - stop_level) ** 2, 100.0 * step)
    total = 0.0
    for _ in range(100_000):
        seg = min(seg, _SEG_CELLS * step)
        if max_time is not None:
            seg = min(seg, max_time - total)
            if seg < step:
                break
        p = sample_bm(x, seg, step, rng, stop_level=stop_level)
        pieces.append(p.values if not pieces else p.values[1:])
        total += p.duration
        if p.stopped_at_hit:
            return PathSample(step=step, values=np.concatenate(pieces),
                              stopped_at_hit=True, hit_level=stop_level)
        x = float(p.values[-1])
        seg *= 2.0
    else:
        raise HorizonError("first-hit segment budget exhausted")
    if require_hit:
        raise HorizonError(
            f"no hit of {stop_level} from {start} within time {total:g}")
    if not pieces:
        pieces = [np.array([float(start)])]
    return PathSample(step=step, values=np.concatenate(pieces),
                      truncated_at_horizon=True)


def sample_halfplane_triple(r, delta, step, rng, max_duration=None,
                            max_time=None):
    """Half-plane coding triple up to the spine's last passage at r.

    The Bessel(3) spine run to its last passage at r is drawn exactly
    as a reversed Brownian path from r stopped at 0; atoms are
    unconditioned and truncated at label 0, so boundary points carry
    label exactly 0 on both sides of the root.  First-passage times are
    heavy-tailed, so batch callers should put a `max_time` on the spine
    and treat the resulting HorizonError as a censored draw; rescaling
    by lam maps a draw censored at T onto one censored at lam*T, so
    paired scaling checks can match the censoring exactly.
    """
    if r <= 0.0:
        raise ValueError("spine horizon level must be positive")
    spine = _bm_first_hit(r, 0.0, step, rng, max_time=max_time).reversed()
    left = _side_atoms(spine, delta, step, rng, truncate_at=0.0,
                       max_duration=max_duration)
    right = _side_atoms(spine, delta, step, rng, truncate_at=0.0,
                        max_duration=max_duration)
    return CodingTriple(spine=spine, left=left, right=right,
                        kind=KIND_INFINITE, cut_level=0.0)


def sample_bm_triple(stop_level, delta, step, rng, max_duration=None,
                     max_time=None):
    """Brownian-spine triple stopped at its first hit of `stop_level`,
    with unconditioned (untruncated) atoms on both sides; `delta=None`
    skips the atoms entirely for boundary-only uses."""
    if stop_level >= 0.0:
        raise ValueError("stop level must be negative")
    spine = _bm_first_hit(0.0, stop_level, step, rng, max_time=max_time)
    if delta is None:
        left, right = [], []
    else:
        left = _side_atoms(spine, delta, step, rng,
                           max_duration=max_duration)
        right = _side_atoms(spine, delta, step, rng,
                            max_duration=max_duration)
    return CodingTriple(spine=spine, left=left, right=right,
                        kind=KIND_INFINITE)


# ------------------------------------------------ boundary skeleton

def _skeleton_cells(v0, v1, dt, level, tilt_scale, g):
    """Exact hit times and masses over one batch of spine cells.

    Hits arrive with intensity 6/(x_t - level)^2 whose per-cell
    integral is 6*dt/(y0*y1) exactly under linear interpolation; the
    within-cell time is placed by the exact inverse-CDF (harmonic
    interpolation of y), and each mass is (2/3)*a^2*W with W an exact
    draw from the normalized exit family.  With `tilt_scale` = d > 0
    the positivity conditioning at distance d below the level is the
    pointwise thinning with survival exp(-(a/d)^2 * W), which also
    reweights the kept masses to the tilted family, exactly.

    Returns (times, masses, skipped_mask) where skipped_mask marks the
    cells whose endpoints touch the level.
    """
    y0 = v0 - level
    y1 = v1 - level
    ok = (y0 > 0.0) & (y1 > 0.0)
    skipped = ~ok
    rate = np.zeros_like(y0)
    rate[ok] = 6.0 * dt[ok] / (y0[ok] * y1[ok])
    counts = g.poisson(rate)
    total_hits = int(counts.sum())
    if total_hits == 0:
        return (np.empty(0), np.empty(0), skipped)
    cell = np.repeat(np.arange(y0.size), counts)
    u = g.uniform(size=total_hits)
    a0, a1 = y0[cell], y1[cell]
    a_hit = 1.0 / ((1.0 - u) / a0 + u / a1)
    same = a0 == a1
    frac = np.where(same, u,
                    (a_hit - a0) / np.where(same, 1.0, a1 - a0))
    t_hit = np.cumsum(np.concatenate([[0.0], dt]))[cell] + frac * dt[cell]
    w = sample_psi(g, size=total_hits)
    if tilt_scale is not None:
        keep = g.uniform(size=total_hits) < np.exp(
            -(a_hit / tilt_scale) ** 2 * w)
        t_hit, a_hit, w = t_hit[keep], a_hit[keep], w[keep]
    z = (2.0 / 3.0) * a_hit * a_hit * w
    order = np.argsort(t_hit)
    return t_hit[order], z[order], skipped


def boundary_skeleton(spine, level, conditioned_positive, rng):
    """Exact exit-measure skeleton of a spine at a level.

    Accepts a single PathSample or a sequence of abutting pieces (the
    graded descent of `descent_pieces`).  Returns (hits, total) where
    hits is the list of (spine-time, mass) pairs and total their sum.
    Cells touching the level are allowed only as a contiguous prefix or
    suffix (the snapped end of a stopped or last-passage spine); a
    crossing in the interior raises.  With the conditioned flag the
    level must be positive and the masses carry the positivity tilt at
    distance `level` below it.
    """
    if conditioned_positive and level <= 0.0:
        raise ValueError("positivity conditioning needs a positive level")
    g = _gen(rng)
    pieces = [spine] if hasattr(spine, "values") else list(spine)
    tilt = level if conditioned_positive else None
    times, masses, skip_flags = [], [], []
    offset = 0.0
    for p in pieces:
        v = p.values
        dt = np.full(v.size - 1, p.step)
        t, z, skipped = _skeleton_cells(v[:-1], v[1:], dt, level, tilt, g)
        times.append(t + offset)
        masses.append(z)
        skip_flags.append(skipped)
        offset += p.duration
    skipped = np.concatenate(skip_flags)
    inner = np.nonzero(~skipped)[0]
    if inner.size and np.any(skipped[inner[0]:inner[-1] + 1]):
        raise ValueError("spine crosses the level away from its ends")
    t = np.concatenate(times)
    z = np.concatenate(masses)
    hits = list(zip(t.tolist(), z.tolist()))
    return hits, float(z.sum())


def descent_pieces(level, top, step, rng, graded=False, ratio=4.0,
                   grade_coef=0.0025):
    """Spine of the region beyond the last passage at `level`, built
    upward from the level to `top`.

    Each piece is a reversed first-passage descent between consecutive
    geometric levels, which by the time-reversal identity for the
    Bessel(9) spine is exactly the law of the post-last-passage piece;
    the strong Markov property glues the pieces.  `graded=True`
    coarsens the grid of each piece proportionally to its squared
    distance from the level (the rates it feeds scale the same way),
    which is what makes totals to top/level ~ 500 affordable.
    """
    if not (top > level > 0.0):
        raise ValueError("need top > level > 0")
    levels = [top]
    cur = level * ratio
    ladder = []
    while cur < top / 1.5:
        ladder.append(cur)
        cur *= ratio
    levels += sorted(ladder, reverse=True) + [level]
    down = []
    for hi, lo in zip(levels[:-1], levels[1:]):
        h = max(step, grade_coef * (lo - level) ** 2) if graded else step
        p = sample_bessel_neg5(hi, lo, h, rng)
        if not p.stopped_at_hit:
            raise HorizonError(f"descent from {hi} failed to reach {lo}")
        down.append(p)
    return [p.reversed() for p in reversed(down)]


# ------------------------------------------- extraction and rescaling

def _shift_snake(om, offset):
    return SnakeTrajectory(x=om.x + offset, step=om.step,
                           zeta=om.zeta, tip=om.tip + offset)


_HIT_CAP = 32.0     # hit-atom duration cap in units of gap^4


def _hit_atom(x, level, step, rng, max_tries=100_000):
    """Snake from x conditioned to reach `level`, drawn by rejection.

    The conditioning lifetime floor 0.2*(x-level)^2 keeps the
    acceptance rate bounded away from 0 uniformly in the gap, and the
    grid coarsens with the squared relative distance as for far atoms
    (the whole family is one rescaling orbit).  The duration cap must
    live in atom-clock units, which scale like gap^4 — a gap^2 cap
    would clip constructions at different levels by different relative
    amounts — so it is _HIT_CAP * gap^4, clipping a scale-free ~8% of
    the conditioned draws in their far upper tail.  Drawn independently
    of any skeleton mass (mark-first coupling).
    """
    gap = x - level
    if gap <= 0.0:
        raise ValueError("hit atoms must start above the level")
    delta_hit = 0.2 * gap * gap
    step_a = step * max(1.0, gap / (2.0 * level)) ** 2
    cap = _HIT_CAP * gap ** 4
    for _ in range(max_tries):
        snake, _ = sample_snake_conditioned(x, delta_hit, step_a, rng,
                                            max_duration=cap)
        if wstar(snake) <= level:
            return snake
    raise RuntimeError(f"hit-atom rejection budget exhausted at x={x}, "
                       f"level={level}")


def _hit_atom_lists(spine, hits, level, step, rng):
    """Truncated snakes for the skeleton hits, assigned to sides."""
    g = _gen(rng)
    left, right = [], []
    for t, _z in hits:
        x = _spine_label(spine, t)
        if x <= level:              # interpolation rounding at the ends
            continue
        snake = truncate(_hit_atom(x, level, step, rng), level)
        (left if g.uniform() < 0.5 else right).append((t, snake))
    return left, right


def _merge_sides(a, b):
    return sorted(a + b, key=lambda rec: rec[0])


def _exterior_triple(spine_abs, keep_left, keep_right, level, step, rng):
    """Common body of sample_theta and hull_extract: skeleton at
    `level` over the absolute-label spine, hit atoms re-drawn by
    rejection, everything shifted down by `level`."""
    hits, total = boundary_skeleton(spine_abs, level, True, rng)
    h_left, h_right = _hit_atom_lists(spine_abs, hits, level, step, rng)
    shift = -level
    spine = PathSample(step=spine_abs.step,
                       values=spine_abs.values + shift,
                       truncated_at_horizon=True)
    left = [(t, _shift_snake(om, shift))
            for t, om in _merge_sides(keep_left, h_left)]
    right = [(t, _shift_snake(om, shift))
             for t, om in _merge_sides(keep_right, h_right)]
    triple = CodingTriple(spine=spine, left=left, right=right,
                          kind=KIND_INFINITE, cut_level=0.0,
                          boundary=total)
    return triple, hits, total


def sample_theta(z, r, horizon, delta, step, rng, max_duration=None):
    """Infinite-volume disk triple of perimeter exactly z.

    Builds the part of the plane beyond the spine's last passage at r
    (reversed first-passage descent from `horizon`), draws its boundary
    size by the exact skeleton, grafts non-hit atoms (labels staying
    above r) and hit atoms (mark-first rejection draws, truncated at
    r), shifts labels down by r and rescales by z over the realized
    boundary size.  The returned triple's boundary field is exactly z.
    The rescaling is self-normalized, so boundary and geometry stay
    coupled.  A draw whose grid skeleton is empty (probability about
    (step/r^2)^(6/7)) is redrawn.  `delta=None` keeps only the
    boundary-anchored part (skeleton hit atoms, no free atoms).
    """
    if z <= 0.0 or r <= 0.0 or horizon <= r:
        raise ValueError("need z > 0 and horizon > r > 0")
    for _ in range(8):
        spine_abs = sample_bessel_neg5(horizon, r, step, rng).reversed()
        keep_l = _side_atoms(spine_abs, delta, step, rng, keep_above=r,
                             far_level=r, far_scale=r,
                             max_duration=max_duration)
        keep_r = _side_atoms(spine_abs, delta, step, rng, keep_above=r,
                             far_level=r, far_scale=r,
                             max_duration=max_duration)
        triple, _hits, total = _exterior_triple(
            spine_abs, keep_l, keep_r, r, step, rng)
        if total > 0.0:
            break
    else:
        raise RuntimeError("skeleton repeatedly empty; step too coarse "
                           f"for r={r}")
    out = sigma_scale(triple, z / total)
    out.boundary = z
    return out


def sample_theta_height(z, a, delta, step, rng, horizon=None,
                        max_tries=64, max_duration=None):
    """Disk of perimeter z and height a: rejection plus restriction.

    Draws perimeter-z disks at reference level r = a, accepts when no
    atom grafted beyond the spine's last passage at label a reaches
    label 0 (those are exactly the skeleton-hit atoms, detectable by
    their exact-0 boundary labels), then restricts at a.  Raises
    RuntimeError when the rejection budget is exhausted — at the
    closed-form acceptance rate, max_tries=64 fails with probability
    (1-p)^64.
    """
    if a <= 0.0:
        raise ValueError("height must be positive")
    r = a
    if horizon is None:
        horizon = max(4.0 * a, r + 12.0 * a * a / math.sqrt(z))
    for _ in range(max_tries):
        cand = sample_theta(z, r, horizon, delta, step, rng,
                            max_duration=max_duration)
        k = _cut_index(cand.spine, a)
        t_cut = k * cand.spine.step
        bad = any(t > t_cut and float(np.min(om.tip)) == 0.0
                  for t, om in cand.left + cand.right)
        if not bad:
            return restrict(cand, a)
    raise RuntimeError(
        f"height rejection budget exhausted after {max_tries} tries at "
        f"z={z}, a={a}")


def hull_extract(triple, r, rng, step=None):
    """Exterior of the hull of radius r of a plane triple.

    Cuts the spine at its last passage at r (margin-checked), keeps the
    input atoms beyond the cut whose labels stay above r, re-draws the
    atoms that reach r by the mark-first rejection route, and shifts
    labels by -r.  The returned boundary size is the skeleton total —
    the triple's boundary field carries the same scalar.
    """
    if r <= 0.0:
        raise ValueError("hull radius must be positive")
    if step is None:
        step = triple.spine.step
    k = _cut_index(triple.spine, r)
    vals = triple.spine.values[k:].copy()
    vals[0] = r
    spine_abs = PathSample(step=triple.spine.step, values=vals,
                           truncated_at_horizon=True)
    t_cut = k * triple.spine.step

    def kept(atoms):
        return [(t - t_cut, om) for t, om in atoms
                if t > t_cut and wstar(om) > r]

    out, _hits, total = _exterior_triple(
        spine_abs, kept(triple.left), kept(triple.right), r, step, rng)
    return out, total


def horohull_extract(triple, r, rng):
    """Boundary size and volume of the horohull of radius r.

    The input is a Brownian-spine triple; the spine is cut at its first
    passage at -r (exact if it was sampled stopped there).  Boundary
    size comes from the unconditioned skeleton at level -r; volume sums
    the retained atoms' durations after truncation at -r.
    """
    if r <= 0.0:
        raise ValueError("horohull radius must be positive")
    spine = triple.spine
    level = -r
    if spine.stopped_at_hit and spine.hit_level == level:
        stopped = spine
        j = spine.n - 1
    else:
        hit = np.nonzero(spine.values <= level)[0]
        if hit.size == 0:
            raise HorizonError(f"spine never reaches {level}")
        j = int(hit[0])
        vals = spine.values[:j + 1].copy()
        vals[j] = level
        stopped = PathSample(step=spine.step, values=vals,
                             stopped_at_hit=True, hit_level=level)
    _hits, total = boundary_skeleton(stopped, level, False, rng)
    t_stop = j * spine.step
    volume = 0.0
    for t, om in triple.left + triple.right:
        if t >= t_stop or om.x <= level:
            continue
        if wstar(om) > level:
            volume += om.sigma
        else:
            volume += truncate(om, level).sigma
    return total, volume


# ----------------------------------------------- scalar estimators

def _phi_grid(lam, mu, b):
    """Vectorized twin of specialfn.campbell_phi, defined at b=0 by its
    limit (= lam)."""
    c = 2.0 / 3.0 + (lam / 3.0) * math.sqrt(2.0 / mu)
    rc = math.sqrt(c)
    th = np.tanh((2.0 * mu) ** 0.25 * b)
    t_val = (rc + th) / (1.0 + rc * th)
    return math.sqrt(mu / 2.0) * (3.0 * t_val * t_val - 2.0)


def campbell_estimate(lam, mu, r, n, step, rng):
    """Monte Carlo for the joint boundary/volume transform of horohulls.

    Averages exp(-4 * integral of phi(B_t + r) up to the first hit of
    -r) over Brownian paths from 0: the factor 4 is two sides times the
    intensity constant 2, and phi is the per-unit-time exponent whose
    closed form the quadrature tests pin.  The time integral is the
    trapezoid on the path grid (first-order bias in sqrt(step),
    reported in the bias notes); paths are generated in doubling
    segments and abandoned once the accumulated exponent exceeds 60
    (absolute truncation error below 1e-26).
    """
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    if n < 2:
        raise ValueError("need at least two replicates")
    vals = np.empty(n)
    for i in range(n):
        acc = 0.0
        x = 0.0
        seg = max(2.0 * r * r, 100.0 * step)
        for _ in range(100_000):
            seg = min(seg, _SEG_CELLS * step)
            p = sample_bm(x, seg, step, rng, stop_level=-r)
            phi = _phi_grid(lam, mu, p.values + r)
            # two spine sides times the intensity constant 2
            inc = 4.0 * 0.5 * (phi[:-1] + phi[1:]) * step
            cum = acc + np.cumsum(inc)
            if p.stopped_at_hit:
                acc = float(cum[-1])
                break
            if cum[-1] > 60.0:
                acc = float(cum[-1])
                break
            acc = float(cum[-1])
            x = float(p.values[-1])
            seg *= 2.0
        vals[i] = math.exp(-min(acc, 700.0))
    # grid first-passage detection shifts the barrier by ~0.5826*sqrt(step)
    # (Euler overshoot constant); quantify through the closed form's slope,
    # plus one end cell of trapezoid overshoot.
    shift = 0.5826 * math.sqrt(step)
    grid_bias = abs(specialfn.horohull_laplace(lam, mu, r + shift)
                    - specialfn.horohull_laplace(lam, mu, r))
    return mc.mean_report(
        vals, seed=0,
        bias_notes=(("first-passage grid bias", grid_bias),
                    ("end-cell trapezoid overshoot", lam * step)))


def bridge_height_sampler(z, step, rng):
    """Exact draw (up to bridge discretization) of the distance from
    the distinguished point to the boundary, perimeter z.

    Samples the boundary label bridge, shifts it so its minimum is
    exactly 0, and inverts the conditional survival
    S(m) = exp(-3 * integral dt / (m + b_t)^2) at a uniform variate by
    bisection to absolute 1e-10; the integral uses the exact per-cell
    antiderivative dt/((m+b0)(m+b1)) under linear interpolation.  The
    returned height is the bisection variable itself, nonnegative by
    construction.
    """
    if z <= 0.0:
        raise ValueError("perimeter must be positive")
    g = _gen(rng)
    path = sample_bridge(z, step, rng)
    b = math.sqrt(3.0) * path.values
    b = b - b.min()
    b0, b1 = b[:-1], b[1:]
    dt = path.step

    def exponent(m):
        with np.errstate(divide="ignore"):
            return 3.0 * float(np.sum(dt / ((m + b0) * (m + b1))))

    u = g.uniform()
    while u <= 0.0:
        u = g.uniform()
    target = -math.log(u)
    lo = 0.0
    hi = max(math.sqrt(z), 10.0 * step)
    for _ in range(200):
        if exponent(hi) < target:
            break
        hi *= 2.0
    else:
        raise ArithmeticError("survival bracket failed to close")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if exponent(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------- measurements

def volume_below(triple, level):
    """Grid volume of the region with labels strictly below `level`
    (atom cells counted at their own grid widths)."""
    vol = 0.0
    for _t, om in triple.left + triple.right:
        vol += om.step * float(np.sum(om.tip < level))
    return vol


# ------------------------------------------------------------- dumps

_TREE_SCHEMA = "tree-sample/1"
_SKELETON_SCHEMA = "skeleton/1"


def dump_tree_csv(tree, path):
    """Exploration sequence with provenance; %.17g round-trips."""
    with open(path, "w") as fh:
        fh.write(f"# schema {_TREE_SCHEMA}\n")
        fh.write(f"# kind {tree.kind}\n")
        cut = "nan" if tree.cut_level is None else f"{tree.cut_level:.17g}"
        fh.write(f"# cut_level {cut}\n")
        fh.write(f"# volume {tree.volume:.17g}\n")
        fh.write("s,label,atom_id,atom_index,boundary\n")
        for k in range(tree.s.size):
            fh.write(f"{tree.s[k]:.17g},{tree.labels[k]:.17g},"
                     f"{tree.atom_id[k]},{tree.atom_index[k]},"
                     f"{int(tree.boundary[k])}\n")


def load_tree_csv(path):
    with open(path) as fh:
        header = [fh.readline() for _ in range(4)]
        if not header[0].startswith(f"# schema {_TREE_SCHEMA}"):
            raise ValueError("unknown tree dump schema")
        kind = header[1].split()[-1]
        cut_tok = header[2].split()[-1]
        cut = None if cut_tok == "nan" else float(cut_tok)
        volume = float(header[3].split()[-1])
        fh.readline()                      # column header
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    return TreeSample(s=rows[:, 0], labels=rows[:, 1],
                      atom_id=rows[:, 2].astype(np.int64),
                      atom_index=rows[:, 3].astype(np.int64),
                      boundary=rows[:, 4] != 0.0,
                      volume=volume, kind=kind, cut_level=cut)


def dump_skeleton_json(hits, total, level, conditioned, path):
    doc = {"schema": _SKELETON_SCHEMA, "level": level,
           "conditioned_positive": bool(conditioned),
           "total": total, "hits": [[t, z] for t, z in hits]}
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return doc
