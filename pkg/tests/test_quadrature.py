import numpy as np
import pytest
from math import factorial

from waveopt.quadrature import (
    degree2_rule,
    grundmann_moeller,
    midpoint_rule,
    rule_for_class,
    subdivided_rule,
)


def simplex_monomial_integral(alpha):
    """Exact integral of prod(lambda_i^alpha_i) over the unit simplex,
    normalized by the simplex volume: n! * prod(a_i!) / (|a| + n)!."""
    n = len(alpha) - 1
    num = factorial(n)
    for a in alpha:
        num *= factorial(a)
    return num / factorial(sum(alpha) + n)


def rule_error(points, weights, alpha):
    vals = np.prod(points ** np.asarray(alpha), axis=1)
    return abs(weights @ vals - simplex_monomial_integral(alpha))


def monomials_up_to(n, degree):
    if n == 2:
        combos = [(i, j, k) for i in range(degree + 1)
                  for j in range(degree + 1) for k in range(degree + 1)
                  if i + j + k <= degree]
    else:
        combos = [(i, j, k, l) for i in range(degree + 1)
                  for j in range(degree + 1) for k in range(degree + 1)
                  for l in range(degree + 1) if i + j + k + l <= degree]
    return combos


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("s", [0, 1, 2, 3])
def test_grundmann_moeller_degree(n, s):
    pts, w = grundmann_moeller(n, s)
    assert abs(w.sum() - 1.0) < 1e-13
    for alpha in monomials_up_to(n, 2 * s + 1):
        assert rule_error(pts, w, alpha) < 1e-12


@pytest.mark.parametrize("n", [2, 3])
def test_degree2_rule(n):
    pts, w = degree2_rule(n)
    assert (w > 0).all()
    for alpha in monomials_up_to(n, 2):
        assert rule_error(pts, w, alpha) < 1e-14


@pytest.mark.parametrize("n", [2, 3])
def test_midpoint_rule(n):
    pts, w = midpoint_rule(n)
    for alpha in monomials_up_to(n, 1):
        assert rule_error(pts, w, alpha) < 1e-15


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("levels", [1, 2, 3])
def test_subdivided_rule_consistency(n, levels):
    # composite rules keep the base rule's exactness degree
    pts, w = subdivided_rule(n, levels, "degree2")
    assert abs(w.sum() - 1.0) < 1e-12
    assert pts.shape[0] == (4 if n == 2 else 8) ** levels * (3 if n == 2 else 4)
    for alpha in monomials_up_to(n, 2):
        assert rule_error(pts, w, alpha) < 1e-12
    pts, w = subdivided_rule(n, levels, "midpoint")
    for alpha in monomials_up_to(n, 1):
        assert rule_error(pts, w, alpha) < 1e-12


def test_subdivision_resolves_kinks():
    # |2x-0.5|-type kink integrated much better with subdivision
    pts1, w1 = degree2_rule(2)
    pts3, w3 = subdivided_rule(2, 3, "degree2")

    def f(p):
        return np.abs(p[:, 0] - 0.25)

    exact = 0.0901875  # 5-digit reference from a 6-level subdivision
    pts6, w6 = subdivided_rule(2, 6, "degree2")
    exact = w6 @ f(pts6)
    assert abs(w3 @ f(pts3) - exact) < abs(w1 @ f(pts1) - exact) / 10


def test_rule_for_class():
    assert rule_for_class("smooth", 3)[0].shape[0] == 15
    assert rule_for_class("kinked", 2)[0].shape[0] == 3 * 16
    assert rule_for_class("discontinuous", 2)[0].shape[0] == 64
    with pytest.raises(ValueError):
        rule_for_class("bogus", 2)
