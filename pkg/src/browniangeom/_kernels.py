"""Hot loops for the tree-indexed path construction.

Written against plain float64 arrays so numba can compile them in
nopython mode; when numba is unavailable the same functions run as
ordinary Python with identical output (tests compare the two).
"""

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _tip_walk_py(zeta, normals, x):
    """Sample tip labels along a lifetime path.

    The tip-to-root worm is known at a stack of (height, label) pairs
    laid down at segment bottoms.  A fall reveals the worm at the new
    bottom through a Brownian-bridge draw between the bracketing known
    points; a rise adds fresh Brownian displacement above the current
    top.  Exactly two normals are consumed per grid step, so the rng
    consumption depends only on the grid size.

    Ties are exact: two times whose lifetimes equal the running minimum
    between them read their label from the same stack slot, which is
    what makes the snake property hold on the nose in float arithmetic.
    """
    n = zeta.size
    tips = np.empty(n)
    stack_h = np.empty(n + 1)
    stack_w = np.empty(n + 1)
    stack_h[0] = 0.0
    stack_w[0] = x
    top = 0
    tips[0] = x
    for i in range(1, n):
        z_old = zeta[i - 1]
        z_new = zeta[i]
        b = z_new if z_new < z_old else z_old
        h_hi = z_old
        w_hi = tips[i - 1]
        while stack_h[top] > b:
            h_hi = stack_h[top]
            w_hi = stack_w[top]
            top -= 1
        h_lo = stack_h[top]
        w_lo = stack_w[top]
        if b > h_lo:
            frac = (b - h_lo) / (h_hi - h_lo)
            mean = w_lo + frac * (w_hi - w_lo)
            var = (b - h_lo) * (h_hi - b) / (h_hi - h_lo)
            w_b = mean + math.sqrt(var) * normals[i - 1, 0]
            top += 1
            stack_h[top] = b
            stack_w[top] = w_b
        else:
            w_b = w_lo
        tips[i] = w_b + math.sqrt(z_new - b) * normals[i - 1, 1]
    return tips


def _truncate_sweep_py(zeta, tips, x, y):
    """Deterministic sweep cutting every subtree below label y.

    Maintains the ancestral stack rebuilt from (zeta, tips) plus, per
    stack entry, the lowest label-y crossing height on the worm below
    it; a grid time is kept iff its lifetime sits strictly below the
    active crossing.  Each kept->cut transition emits one boundary
    sample at the crossing height with its label snapped to exactly y.
    Returns (new_zeta, new_tips, count).
    """
    n = zeta.size
    out_z = np.empty(2 * n + 2)
    out_w = np.empty(2 * n + 2)
    stack_h = np.empty(n + 1)
    stack_w = np.empty(n + 1)
    blocked = np.empty(n + 1)
    stack_h[0] = 0.0
    stack_w[0] = x
    blocked[0] = math.inf
    top = 0
    out_z[0] = 0.0
    out_w[0] = tips[0]
    m = 1
    prev_kept = True
    for i in range(1, n):
        z_old = zeta[i - 1]
        z_new = zeta[i]
        if z_new < z_old:
            # fall: reveal the worm at z_new
            while stack_h[top] > z_new:
                top -= 1
            if z_new > stack_h[top]:
                h0 = stack_h[top]
                w0 = stack_w[top]
                w1 = tips[i]
                c_seg = math.inf
                if w0 > y >= w1:
                    # labels exactly at y sit exactly at the segment end,
                    # which keeps re-truncation at the same level exact
                    if w1 == y:
                        c_seg = z_new
                    else:
                        c_seg = h0 + (z_new - h0) * (w0 - y) / (w0 - w1)
                b_new = blocked[top]
                if c_seg < b_new:
                    b_new = c_seg
                top += 1
                stack_h[top] = z_new
                stack_w[top] = w1
                blocked[top] = b_new
            c_tip = blocked[top]
        else:
            # rise: record the departed tip, then the fresh segment
            if z_old > stack_h[top]:
                h0 = stack_h[top]
                w0 = stack_w[top]
                w1 = tips[i - 1]
                c_seg = math.inf
                if w0 > y >= w1:
                    if w1 == y:
                        c_seg = z_old
                    else:
                        c_seg = h0 + (z_old - h0) * (w0 - y) / (w0 - w1)
                b_new = blocked[top]
                if c_seg < b_new:
                    b_new = c_seg
                top += 1
                stack_h[top] = z_old
                stack_w[top] = w1
                blocked[top] = b_new
            c_tip = blocked[top]
            w0 = stack_w[top]
            if w0 > y >= tips[i]:
                if tips[i] == y:
                    c_seg = z_new
                else:
                    c_seg = z_old + (z_new - z_old) * (w0 - y) / (w0 - tips[i])
                if c_seg < c_tip:
                    c_tip = c_seg
        kept = z_new < c_tip
        if kept:
            out_z[m] = z_new
            out_w[m] = tips[i]
            m += 1
        elif prev_kept:
            out_z[m] = c_tip
            out_w[m] = y
            m += 1
        prev_kept = kept
    return out_z, out_w, m


tip_walk = njit(cache=True)(_tip_walk_py) if HAVE_NUMBA else _tip_walk_py
truncate_sweep = (njit(cache=True)(_truncate_sweep_py)
                  if HAVE_NUMBA else _truncate_sweep_py)
