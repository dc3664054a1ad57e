"""Adam for Euclidean parameters and Riemannian Adam for ball-resident ones."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .manifold import CurvatureLike, _sqnorm, as_curvature, clamp_to_ball, exp_map


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: torch.Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), **hyper)


def _check_grad(grad: torch.Tensor, name: str = "parameter") -> None:
    if not torch.isfinite(grad).all():
        raise FloatingPointError(f"non-finite gradient for {name}")


def _adam_direction(grad: torch.Tensor, state: AdamState) -> torch.Tensor:
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return m_hat / (v_hat.sqrt() + state.eps)


def adam_step(param: torch.Tensor, grad: torch.Tensor, state: AdamState) -> torch.Tensor:
    """Bias-corrected Adam; returns the new parameter and updates ``state`` in place."""
    _check_grad(grad)
    with torch.no_grad():
        return param - state.lr * _adam_direction(grad, state)


def riemannian_grad(param: torch.Tensor, egrad: torch.Tensor, curv: CurvatureLike = None) -> torch.Tensor:
    """Euclidean gradient rescaled by the inverse metric, (1 - kappa|b|^2)^2 / 4."""
    kappa = as_curvature(curv).kappa
    return egrad * (1 - kappa * _sqnorm(param)) ** 2 / 4


def riemannian_adam_step(
    param: torch.Tensor, egrad: torch.Tensor, state: AdamState, curv: CurvatureLike = None
) -> torch.Tensor:
    """Adam on the Riemannian gradient, retracted with the exponential map at ``param``.

    Moments are kept as plain arrays (no parallel transport).
    """
    _check_grad(egrad)
    curv = as_curvature(curv)
    with torch.no_grad():
        rgrad = riemannian_grad(param, egrad, curv)
        direction = _adam_direction(rgrad, state)
        return clamp_to_ball(exp_map(param, -state.lr * direction, curv), curv.kappa)


class Optimizer:
    """Steps a flat ``{name: tensor}`` parameter dict; names in ``ball`` use Riemannian Adam."""

    def __init__(self, params: dict[str, torch.Tensor], ball: set[str] = frozenset(), curv: CurvatureLike = None,
                 lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.curvature = as_curvature(curv)
        self.ball = set(ball)
        hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states = {name: AdamState.zeros_like(p, **hyper) for name, p in params.items()}

    @property
    def lr(self) -> float:
        return next(iter(self.states.values())).lr

    @lr.setter
    def lr(self, value: float) -> None:
        for s in self.states.values():
            s.lr = value

    @property
    def step_count(self) -> int:
        return next(iter(self.states.values())).step if self.states else 0

    def step(self, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        for name, g in grads.items():
            _check_grad(g, name)
        out = {}
        for name, p in params.items():
            if name in self.ball:
                out[name] = riemannian_adam_step(p, grads[name], self.states[name], self.curvature)
            else:
                out[name] = adam_step(p, grads[name], self.states[name])
        return out

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"opt.step": torch.tensor(float(self.step_count), dtype=torch.float64)}
        for name, s in self.states.items():
            out[f"opt.m.{name}"] = s.m
            out[f"opt.v.{name}"] = s.v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        step = int(tensors["opt.step"])
        for name, s in self.states.items():
            s.m = tensors[f"opt.m.{name}"].clone()
            s.v = tensors[f"opt.v.{name}"].clone()
            s.step = step
