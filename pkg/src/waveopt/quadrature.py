"""Quadrature rules on reference simplices (triangles and tetrahedra).

All rules are returned as barycentric points with weights that sum to one,
so that ``integral over tau ~= vol(tau) * sum(w * f(x_q))``.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

__all__ = [
    "grundmann_moeller",
    "midpoint_rule",
    "degree2_rule",
    "subdivided_rule",
    "rule_for_class",
]


def _compositions(total, parts):
    """All tuples of `parts` non-negative integers summing to `total`."""
    for dividers in combinations_with_replacement(range(total + 1), parts - 1):
        comp = []
        prev = 0
        for d in dividers:
            comp.append(d - prev)
            prev = d
        comp.append(total - prev)
        yield tuple(comp)


@lru_cache(maxsize=None)
def grundmann_moeller(n, s):
    """Grundmann-Moeller rule of index s (degree 2s+1) on the n-simplex.

    Returns (points, weights): points (m, n+1) barycentric, weights sum to 1.
    Weights of the inner groups are negative for s >= 1; the rule is exact for
    polynomials of total degree <= 2s+1.
    """
    d = 2 * s + 1
    pts = []
    wts = []
    for i in range(s + 1):
        denom = d + n - 2 * i
        w = ((-1) ** i) * 2.0 ** (-2 * s) * denom**d / (factorial(i) * factorial(d + n - i))
        for beta in _compositions(s - i, n + 1):
            pts.append([(2 * b + 1) / denom for b in beta])
            wts.append(w)
    points = np.array(pts, dtype=float)
    weights = np.array(wts, dtype=float) * factorial(n)
    return points, weights


@lru_cache(maxsize=None)
def midpoint_rule(n):
    """One-point centroid rule (degree 1)."""
    return np.full((1, n + 1), 1.0 / (n + 1)), np.array([1.0])


@lru_cache(maxsize=None)
def degree2_rule(n):
    """Positive-weight degree-2 rule: edge midpoints (n=2), 4-point Keast (n=3)."""
    if n == 2:
        points = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        weights = np.full(3, 1.0 / 3.0)
    elif n == 3:
        a = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
        b = (5.0 - np.sqrt(5.0)) / 20.0
        points = np.full((4, 4), b)
        np.fill_diagonal(points, a)
        weights = np.full(4, 0.25)
    else:
        raise ValueError(f"no degree-2 rule for simplex dimension {n}")
    return points, weights


def _red_children_bary(n):
    """Vertex barycentrics of the red children of the reference n-simplex."""
    e = np.eye(n + 1)
    if n == 2:
        m = {(i, j): (e[i] + e[j]) / 2 for i in range(3) for j in range(i + 1, 3)}
        return [
            np.array([e[0], m[0, 1], m[0, 2]]),
            np.array([m[0, 1], e[1], m[1, 2]]),
            np.array([m[0, 2], m[1, 2], e[2]]),
            np.array([m[0, 1], m[1, 2], m[0, 2]]),
        ]
    if n == 3:
        m = {(i, j): (e[i] + e[j]) / 2 for i in range(4) for j in range(i + 1, 4)}
        # four corner children plus the octahedron cut along the (02)-(13) diagonal
        return [
            np.array([e[0], m[0, 1], m[0, 2], m[0, 3]]),
            np.array([m[0, 1], e[1], m[1, 2], m[1, 3]]),
            np.array([m[0, 2], m[1, 2], e[2], m[2, 3]]),
            np.array([m[0, 3], m[1, 3], m[2, 3], e[3]]),
            np.array([m[0, 1], m[0, 2], m[0, 3], m[1, 3]]),
            np.array([m[0, 1], m[0, 2], m[1, 2], m[1, 3]]),
            np.array([m[0, 2], m[0, 3], m[1, 3], m[2, 3]]),
            np.array([m[0, 2], m[1, 2], m[1, 3], m[2, 3]]),
        ]
    raise ValueError(f"no red subdivision for simplex dimension {n}")


@lru_cache(maxsize=None)
def subdivided_rule(n, levels, base="degree2"):
    """Apply a base rule on every cell of a `levels`-deep red subdivision.

    All children of a red split have equal volume, so the composite rule keeps
    uniform weight scaling.
    """
    if base == "degree2":
        pts, wts = degree2_rule(n)
    elif base == "midpoint":
        pts, wts = midpoint_rule(n)
    else:
        raise ValueError(f"unknown base rule {base!r}")
    cells = [np.eye(n + 1)]
    for _ in range(levels):
        nxt = []
        for c in cells:
            for child in _red_children_bary(n):
                nxt.append(child @ c)
        cells = nxt
    points = np.vstack([pts @ c for c in cells])
    weights = np.tile(wts / len(cells), len(cells))
    return points, weights


def rule_for_class(smoothness, n):
    """Quadrature policy per target smoothness class.

    Smooth integrands get a degree-5 rule; kinked (piecewise multilinear)
    targets a degree-2 rule on a 2-level subdivision; discontinuous targets a
    midpoint rule on a 3-level subdivision.
    """
    if smoothness == "smooth":
        return grundmann_moeller(n, 2)
    if smoothness == "kinked":
        return subdivided_rule(n, 2, "degree2")
    if smoothness == "discontinuous":
        return subdivided_rule(n, 3, "midpoint")
    raise ValueError(f"unknown smoothness class {smoothness!r}")
