"""Monte Carlo construction and verification of non-compact Brownian geometries.

Subpackages build up from closed-form special functions (specialfn) through
one-dimensional driving processes (processes), discretized label snakes
(snake), spine-and-atoms coding triples with the plane / half-plane /
infinite-disk / fixed-height-disk samplers (coding), the two-point label
pseudo-metric (metric), and a statistical verification harness (mc) wired
into a command-line interface (cli).
"""

__version__ = "0.1.0"
