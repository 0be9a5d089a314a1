r"""Constant-curvature kernels in the :math:`\kappa`-stereographic chart, anchored at the origin.

For curvature ``k`` and ``s = sqrt(|k|)``:

* ``exp0(v) = tan_k(s |v|) / (s |v|) * v`` with ``tan_k = tanh`` for ``k < 0``
  and ``tan`` for ``k > 0``; the identity for ``k = 0``.
* ``log0`` is its exact inverse and ``dist0(p) = |log0(p)|``.

Small arguments switch to Taylor expansions so the ``k -> 0`` limit is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op

_TAYLOR_CUTOFF = 1e-4
# a clamped row can land a few ulp above the radius; leave it alone so clamping is idempotent
_CLAMP_SLACK = 1.0 + 1e-12


class DomainError(ValueError):
    """A point or tangent vector lies outside the chart of the manifold."""


@dataclass(frozen=True)
class Manifold:
    curvature: float
    eps: float = 1e-7

    @property
    def sqrt_abs(self) -> float:
        return float(np.sqrt(abs(self.curvature)))

    @property
    def radius(self) -> float:
        """Ball radius for k < 0, ``inf`` otherwise."""
        return 1.0 / self.sqrt_abs if self.curvature < 0 else np.inf

    def __str__(self) -> str:
        return f"Manifold(k={self.curvature:g})"


def _as_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _tan_ratio(x: np.ndarray, sign: float) -> tuple[np.ndarray, np.ndarray]:
    """``f(x) = tan_k(x)/x`` and ``f'(x)``; sign -1 selects tanh, +1 selects tan."""
    small = x < _TAYLOR_CUTOFF
    xs = np.where(small, 1.0, x)
    t = np.tanh(xs) if sign < 0 else np.tan(xs)
    dt = 1.0 - t * t if sign < 0 else 1.0 + t * t
    f = np.where(small, 1.0 + sign * x * x / 3.0, t / xs)
    df = np.where(small, 2.0 * sign * x / 3.0, (dt * xs - t) / (xs * xs))
    return f, df


def _artan_ratio(y: np.ndarray, sign: float) -> tuple[np.ndarray, np.ndarray]:
    """``h(y) = artan_k(y)/y`` and ``h'(y)``; sign -1 selects artanh, +1 selects arctan."""
    small = y < _TAYLOR_CUTOFF
    ys = np.where(small, 1.0 if sign > 0 else 0.5, y)
    a = np.arctanh(ys) if sign < 0 else np.arctan(ys)
    da = 1.0 / (1.0 - ys * ys) if sign < 0 else 1.0 / (1.0 + ys * ys)
    h = np.where(small, 1.0 - sign * y * y / 3.0, a / ys)
    dh = np.where(small, -2.0 * sign * y / 3.0, (da * ys - a) / (ys * ys))
    return h, dh


def _exp0_parts(m: Manifold, v: np.ndarray):
    r = np.sqrt((v * v).sum(axis=1, keepdims=True))
    s = m.sqrt_abs
    sign = np.sign(m.curvature)
    if m.curvature > 0 and (s * r >= np.pi / 2 - m.eps).any():
        raise DomainError(f"{m}: tangent norm beyond the chart boundary pi/(2 sqrt(k))")
    f, df = _tan_ratio(s * r, sign)
    return r, f, s * df  # d f(s r)/dr = s f'(s r)


def _log0_parts(m: Manifold, p: np.ndarray):
    rho = np.sqrt((p * p).sum(axis=1, keepdims=True))
    s = m.sqrt_abs
    sign = np.sign(m.curvature)
    if m.curvature < 0 and (s * rho >= 1.0).any():
        raise DomainError(f"{m}: point on or outside the ball of radius {m.radius:g}")
    h, dh = _artan_ratio(s * rho, sign)
    return rho, h, s * dh


def exp0(m: Manifold, v) -> np.ndarray:
    v = _as_rows(v)
    if m.curvature == 0:
        return v.copy()
    _, f, _ = _exp0_parts(m, v)
    return f * v


def log0(m: Manifold, p) -> np.ndarray:
    p = _as_rows(p)
    if m.curvature == 0:
        return p.copy()
    _, h, _ = _log0_parts(m, p)
    return h * p


def dist0(m: Manifold, p) -> np.ndarray:
    """Geodesic distance of each row from the origin."""
    return np.sqrt((log0(m, p) ** 2).sum(axis=1))


def project(m: Manifold, p) -> np.ndarray:
    """Radially clamp points of a hyperbolic ball to radius ``(1 - eps) / sqrt(|k|)``."""
    p = _as_rows(p)
    if m.curvature >= 0:
        return p.copy()
    rmax = (1.0 - m.eps) * m.radius
    norm = np.sqrt((p * p).sum(axis=1, keepdims=True))
    factor = np.where(norm > rmax * _CLAMP_SLACK, rmax / np.maximum(norm, 1e-300), 1.0)
    return p * factor


def tangent_aggregate(m: Manifold, points, weights) -> np.ndarray:
    """``exp0(sum_i w_i log0(p_i))`` for a convex weight vector."""
    pts = _as_rows(points)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != pts.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("aggregation weights must be non-negative and sum to 1")
    return exp0(m, w @ log0(m, pts))


# --------------------------------------------------------- differentiable versions

def exp0_t(m: Manifold, v: Tensor) -> Tensor:
    if m.curvature == 0:
        return v
    r, f, df = _exp0_parts(m, v.data)
    vd = v.data

    def backward(g):
        # J = f I + f'(r)/r v v^T
        coef = np.where(r > 0, df / np.maximum(r, 1e-300), 0.0)
        return (f * g + coef * (g * vd).sum(axis=1, keepdims=True) * vd,)

    return custom_op(f * vd, (v,), backward)


def log0_t(m: Manifold, p: Tensor) -> Tensor:
    if m.curvature == 0:
        return p
    rho, h, dh = _log0_parts(m, p.data)
    pd = p.data

    def backward(g):
        coef = np.where(rho > 0, dh / np.maximum(rho, 1e-300), 0.0)
        return (h * g + coef * (g * pd).sum(axis=1, keepdims=True) * pd,)

    return custom_op(h * pd, (p,), backward)


def project_t(m: Manifold, p: Tensor) -> Tensor:
    if m.curvature >= 0:
        return p
    return _radial_clip(p, (1.0 - m.eps) * m.radius)


def clip_tangent_t(m: Manifold, v: Tensor, margin: float = 1e-3) -> Tensor:
    """Keep tangent norms inside the k > 0 chart (``s |v| <= pi/2 - margin``)."""
    if m.curvature <= 0:
        return v
    return _radial_clip(v, (np.pi / 2 - margin) / m.sqrt_abs)


def _radial_clip(x: Tensor, rmax: float) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    over = norm > rmax * _CLAMP_SLACK
    if not over.any():
        return x
    safe = np.maximum(norm, 1e-300)
    out = np.where(over, xd * (rmax / safe), xd)

    def backward(g):
        u = xd / safe
        clipped = (rmax / safe) * (g - u * (g * u).sum(axis=1, keepdims=True))
        return (np.where(over, clipped, g),)

    return custom_op(out, (x,), backward)
