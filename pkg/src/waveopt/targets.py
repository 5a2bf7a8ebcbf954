"""Benchmark target fields on the unit space-time cylinder.

Each target carries the smoothness class that selects the quadrature policy
for load assembly and error integration, plus an analytic space-time gradient
where one exists (used by the H1-seminorm diagnostics of the rho sweep).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["TargetField", "make_target", "TARGET_NAMES"]

TARGET_NAMES = (
    "smooth",
    "continuous",
    "discontinuous",
    "appendix1",
    "appendix2",
    "appendix3",
)


@dataclass(frozen=True)
class TargetField:
    name: str
    dim_d: int
    smoothness_class: str  # 'smooth' | 'kinked' | 'discontinuous'
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, points):
        return self.eval(points)


def _hat(s):
    """Piecewise-linear bump: 1 at 0.5, supported on [0.25, 0.75]."""
    return np.maximum(0.0, 1.0 - 4.0 * np.abs(s - 0.5))


def _smooth(d):
    def f(p):
        out = p[..., d] ** 2
        for i in range(d):
            out = out * np.sin(np.pi * p[..., i])
        return out

    def g(p):
        t = p[..., d]
        sins = [np.sin(np.pi * p[..., i]) for i in range(d)]
        prod = np.prod(sins, axis=0)
        grads = []
        for i in range(d):
            gi = t**2 * np.pi * np.cos(np.pi * p[..., i])
            for j in range(d):
                if j != i:
                    gi = gi * sins[j]
            grads.append(gi)
        grads.append(2.0 * t * prod)
        return np.stack(grads, axis=-1)

    return f, g


def _continuous(d):
    def f(p):
        out = _hat(p[..., d])
        for i in range(d):
            out = out * _hat(p[..., i])
        return out

    return f


def _discontinuous(d):
    def f(p):
        inside = np.ones(p.shape[:-1], dtype=bool)
        for i in range(d + 1):
            inside &= (p[..., i] > 0.25) & (p[..., i] < 0.75)
        return inside.astype(float)

    return f


def _appendix1():
    # cubic bump traveling along the characteristic x = 2t, zero outside
    # {x <= 2t} cut with {6t - 3x <= 2}
    def parts(p):
        x, t = p[..., 0], p[..., 1]
        a = 6.0 * t - 3.0 * x - 2.0
        b = 3.0 * x - 6.0 * t
        # support: x <= 2t and 6t - 3x <= 2  <=>  b <= 0 and a <= 0
        on = (b <= 0.0) & (a <= 0.0)
        return x, t, a, b, on

    def f(p):
        x, t, a, b, on = parts(p)
        val = 0.5 * (a * b) ** 3 * np.sin(np.pi * x)
        return np.where(on, val, 0.0)

    def g(p):
        x, t, a, b, on = parts(p)
        ab = a * b
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        dab_dx = -3.0 * b + 3.0 * a
        dab_dt = 6.0 * b - 6.0 * a
        gx = 1.5 * ab**2 * dab_dx * s + 0.5 * ab**3 * np.pi * c
        gt = 1.5 * ab**2 * dab_dt * s
        zero = np.zeros_like(gx)
        return np.stack([np.where(on, gx, zero), np.where(on, gt, zero)], axis=-1)

    return f, g


def _appendix2():
    def f(p):
        return np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1])

    def g(p):
        x, t = p[..., 0], p[..., 1]
        return np.stack(
            [
                np.pi * np.cos(np.pi * x) * np.sin(np.pi * t),
                np.pi * np.sin(np.pi * x) * np.cos(np.pi * t),
            ],
            axis=-1,
        )

    return f, g


def make_target(name, d):
    """Build one of the benchmark targets for spatial dimension d."""
    if name == "smooth":
        f, g = _smooth(d)
        return TargetField("smooth", d, "smooth", f, g)
    if name == "continuous":
        return TargetField("continuous", d, "kinked", _continuous(d))
    if name == "discontinuous":
        return TargetField("discontinuous", d, "discontinuous", _discontinuous(d))
    if name in ("appendix1", "appendix2", "appendix3"):
        if d != 1:
            raise ValueError(f"target {name!r} is defined for d=1 only")
        if name == "appendix1":
            f, g = _appendix1()
        elif name == "appendix2":
            f, g = _appendix2()
        else:
            f, g = _smooth(1)  # t^2 sin(pi x)
        return TargetField(name, 1, "smooth", f, g)
    raise ValueError(f"unknown target {name!r}; expected one of {TARGET_NAMES}")
