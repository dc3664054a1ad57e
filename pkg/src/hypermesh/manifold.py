"""Poincaré-ball primitives.

All formulas are written with ``kappa = -c > 0``; the ball is the set of points
with ``kappa * |x|^2 < 1``. Every function operates on the last axis and
broadcasts over leading axes, so a ``(B, n, d)`` batch of point sets works the
same way as a single ``(d,)`` point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import torch

DTYPE = torch.float64

# radial clamp factor for points, and the cap on artanh arguments
BALL_EPS = 1e-5
ATANH_EPS = 1e-7
_MIN_SQNORM = 1e-30


class DomainError(ValueError):
    """Input lies on or outside the boundary of the ball it was meant for."""


class CurvatureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Curvature:
    """Constant negative curvature ``c`` of the ball (``c < 0``)."""

    c: float = -1.0

    def __post_init__(self):
        if not self.c < 0:
            raise ValueError(f"curvature must be strictly negative, got c={self.c}")

    @property
    def kappa(self) -> float:
        return -self.c

    @property
    def radius(self) -> float:
        return 1.0 / self.kappa ** 0.5


DEFAULT_CURVATURE = Curvature(-1.0)

CurvatureLike = Union[Curvature, float, None]


@dataclass(frozen=True)
class BallTensor:
    """A batch of points inside the ball of ``curvature``.

    Build these with :func:`project_to_ball`; the constructor only checks.
    """

    data: torch.Tensor
    curvature: Curvature = DEFAULT_CURVATURE

    def __post_init__(self):
        if not torch.isfinite(self.data).all():
            raise ValueError("BallTensor data contains NaN/Inf")
        limit = (1 - BALL_EPS) ** 2 * (1 + 1e-12)
        if (self.curvature.kappa * _sqnorm(self.data) > limit).any():
            raise DomainError("BallTensor rows must lie inside the clamped ball")

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class TangentTensor:
    data: torch.Tensor
    base: torch.Tensor | None = None  # None means the origin


PointLike = Union[torch.Tensor, BallTensor]


def as_curvature(curv: CurvatureLike) -> Curvature:
    if curv is None:
        return DEFAULT_CURVATURE
    if isinstance(curv, Curvature):
        return curv
    return Curvature(float(curv))


def _unpack(curv: CurvatureLike, *points) -> tuple[float, list[torch.Tensor]]:
    """Resolve a common curvature for ``points`` and return raw tensors.

    BallTensor arguments carry their own curvature; mixing two different ones,
    or disagreeing with an explicit ``curv``, is an error.
    """
    found = None if curv is None else as_curvature(curv)
    out = []
    for p in points:
        if isinstance(p, BallTensor):
            if found is not None and p.curvature != found:
                raise CurvatureMismatch(f"curvature {p.curvature.c} != {found.c}")
            found = p.curvature
            out.append(p.data)
        else:
            out.append(torch.as_tensor(p, dtype=DTYPE))
    return (found or DEFAULT_CURVATURE).kappa, out


def _sqnorm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(dim=-1, keepdim=True)


def _norm(x: torch.Tensor) -> torch.Tensor:
    # clamped so the gradient at the zero vector is 0 instead of NaN
    return _sqnorm(x).clamp_min(_MIN_SQNORM).sqrt()


def artanh(x: torch.Tensor) -> torch.Tensor:
    # via log1p: torch.atanh's vectorised and scalar-tail kernels can disagree in
    # the last bit, which would make results depend on a row's position in memory
    x = x.clamp(-1 + ATANH_EPS, 1 - ATANH_EPS)
    return 0.5 * torch.log1p(2 * x / (1 - x))


def clamp_to_ball(x: torch.Tensor, kappa: float) -> torch.Tensor:
    """Radially rescale rows whose scaled norm reaches ``1 - BALL_EPS``."""
    return x * _ball_scale(_norm(x), kappa)


def _ball_scale(norm: torch.Tensor, kappa: float) -> torch.Tensor:
    """Row factor bringing a vector of the given norm back inside the clamp radius."""
    maxnorm = (1 - BALL_EPS) / kappa ** 0.5
    return torch.where(norm >= maxnorm, maxnorm / norm, torch.ones_like(norm))


def project_to_ball(x, curv: CurvatureLike = None) -> BallTensor:
    curv = as_curvature(curv)
    x = torch.as_tensor(x, dtype=DTYPE)
    bad = ~torch.isfinite(x)
    if bad.any():
        rows = bad.reshape(-1, x.shape[-1]).any(dim=-1).nonzero().flatten()
        raise ValueError(f"non-finite input in row {int(rows[0])}")
    return BallTensor(clamp_to_ball(x, curv.kappa), curv)


def _check_inside(x: torch.Tensor, kappa: float, what: str = "point") -> None:
    if (kappa * _sqnorm(x.detach()) >= 1).any():
        raise DomainError(f"{what} on or outside the ball boundary")


def conformal_factor(x: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    """lambda_x = 2 / (1 - kappa |x|^2), shape ``(..., 1)``."""
    kappa, (x,) = _unpack(curv, x)
    _check_inside(x, kappa)
    return 2.0 / (1.0 - kappa * _sqnorm(x))


def mobius_add(x: PointLike, y: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (x, y) = _unpack(curv, x, y)
    return _mobius_add(x, y, kappa)


def _mobius_add(x, y, kappa):
    xy = (x * y).sum(dim=-1, keepdim=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    den = (1 + 2 * kappa * xy + kappa ** 2 * x2 * y2).clamp_min(_MIN_SQNORM)
    a = (1 + 2 * kappa * xy + kappa * y2) / den
    b = (1 - kappa * x2) / den
    # the result's norm follows from the coefficients, so clamping stays per row
    norm = (a * a * x2 + 2 * a * b * xy + b * b * y2).clamp_min(_MIN_SQNORM).sqrt()
    scale = _ball_scale(norm, kappa)
    return (a * scale) * x + (b * scale) * y


def expmap0(v, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (v,) = _unpack(curv, v)
    return _expmap0(v, kappa)


def _expmap0(v, kappa):
    sk = kappa ** 0.5
    n = _norm(v)
    r = torch.tanh(sk * n) / sk
    return v * (r * _ball_scale(r, kappa) / n)


def logmap0(y: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (y,) = _unpack(curv, y)
    return _logmap0(y, kappa)


def _logmap0(y, kappa):
    sk = kappa ** 0.5
    n = _norm(y)
    return y * (artanh(sk * n) / (sk * n))


def exp_map(base: PointLike, v, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (x, v) = _unpack(curv, base, v)
    sk = kappa ** 0.5
    lam = 2.0 / (1.0 - kappa * _sqnorm(x))
    n = _norm(v)
    step = torch.tanh(sk * lam * n / 2) * v / (sk * n)
    return _mobius_add(x, step, kappa)


def log_map(base: PointLike, y: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (x, y) = _unpack(curv, base, y)
    _check_inside(y, kappa)
    sk = kappa ** 0.5
    u = _mobius_add(-x, y, kappa)
    lam = 2.0 / (1.0 - kappa * _sqnorm(x))
    n = _norm(u)
    return (2.0 / (sk * lam)) * artanh(sk * n) * u / n


def geodesic_distance(x: PointLike, y: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    """Distance along the ball, shape ``broadcast(x, y).shape[:-1]``."""
    kappa, (x, y) = _unpack(curv, x, y)
    sk = kappa ** 0.5
    u = _mobius_add(-x, y, kappa)
    return (2.0 / sk) * artanh(sk * _norm(u)).squeeze(-1)


def mobius_matvec(M, x: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    """Möbius matrix action ``M ⊗ x`` for ``M`` of shape ``(d_out, d_in)``."""
    kappa, (x,) = _unpack(curv, x)
    M = torch.as_tensor(M, dtype=DTYPE)
    if M.dim() != 2 or M.shape[1] != x.shape[-1]:
        raise ValueError(f"matrix {tuple(M.shape)} does not act on dimension {x.shape[-1]}")
    return _mobius_matvec(M, x, kappa)


def _mobius_matvec(M, x, kappa):
    sk = kappa ** 0.5
    mx = x @ M.transpose(0, 1)
    xn = _norm(x)
    mxn = _norm(mx)
    # norms are clamped away from zero, so M x = 0 gives an exact zero row
    r = torch.tanh(mxn / xn * artanh(sk * xn)) / sk
    return mx * (r * _ball_scale(r, kappa) / mxn)


def to_klein(x: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (x,) = _unpack(curv, x)
    _check_inside(x, kappa)
    return 2 * x / (1 + kappa * _sqnorm(x))


def from_klein(k, curv: CurvatureLike = None) -> torch.Tensor:
    kappa, (k,) = _unpack(curv, k)
    _check_inside(k, kappa, "Klein point")
    return _from_klein(k, kappa)


def _from_klein(k, kappa):
    k2 = _sqnorm(k)
    root = (1 - kappa * k2).clamp_min(0).sqrt()
    r = k2.clamp_min(_MIN_SQNORM).sqrt() / (1 + root)
    return k * (_ball_scale(r, kappa) / (1 + root))


def einstein_midpoint(points: PointLike, curv: CurvatureLike = None) -> torch.Tensor:
    """Lorentz-weighted Klein mean over axis -2: ``(..., m, d) -> (..., d)``."""
    kappa, (x,) = _unpack(curv, points)
    if x.dim() < 2 or x.shape[-2] == 0:
        raise ValueError("einstein_midpoint needs at least one point")
    return _einstein_midpoint(x, kappa)


def _einstein_midpoint(x, kappa):
    k = 2 * x / (1 + kappa * _sqnorm(x))
    gamma = 1 / (1 - kappa * _sqnorm(k)).clamp_min(_MIN_SQNORM).sqrt()
    mid = (gamma * k).sum(dim=-2) / gamma.sum(dim=-2)
    return _from_klein(mid, kappa)


def hyperbolic_activation(
    x: PointLike,
    curv: CurvatureLike = None,
    nonlinearity: Callable[[torch.Tensor], torch.Tensor] = torch.relu,
) -> torch.Tensor:
    kappa, (x,) = _unpack(curv, x)
    return _expmap0(nonlinearity(_logmap0(x, kappa)), kappa)
