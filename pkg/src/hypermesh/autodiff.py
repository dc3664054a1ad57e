"""Reverse-mode gradients and their finite-difference check.

Recording is delegated to torch autograd: a :class:`Tape` owns named leaf
tensors, every kernel in this package is written in differentiable torch
ops, and :func:`backward` pulls gradients for all leaves at once.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .manifold import DTYPE


class DetachedError(RuntimeError):
    pass


class Tape:
    """Leaf registry for one recorded computation."""

    def __init__(self):
        self.leaves: dict[str, torch.Tensor] = {}

    def watch(self, name: str, value) -> torch.Tensor:
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already on tape")
        leaf = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self.leaves[name] = leaf
        return leaf

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.leaves[name]

    def __len__(self):
        return len(self.leaves)


def backward(tape: Tape, output: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of scalar ``output`` with respect to every leaf of ``tape``.

    Unused leaves get zeros. The graph is retained so repeated calls agree.
    """
    if output.numel() != 1:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if not output.requires_grad:
        raise DetachedError("output is not connected to any recorded leaf")
    names = list(tape.leaves)
    leaves = [tape.leaves[n] for n in names]
    grads = torch.autograd.grad(output.reshape(()), leaves, allow_unused=True, retain_graph=True)
    return {n: (torch.zeros_like(l) if g is None else g) for n, l, g in zip(names, leaves, grads)}


# -- kink monitoring ---------------------------------------------------------
# Piecewise ops (ReLU, k-NN selection, nearest-point matching) report the
# discrete decision they took. The checker rejects a sample when a finite
# difference step changes any decision, since the difference quotient then
# straddles a switch point.

_decisions: list[torch.Tensor] | None = None


def monitoring() -> bool:
    return _decisions is not None


def note_branch(decision: torch.Tensor) -> None:
    if _decisions is not None:
        _decisions.append(decision.detach().clone())


@contextlib.contextmanager
def kink_monitor() -> Iterator[list[torch.Tensor]]:
    global _decisions
    prev, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = prev


def _same_branch(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


# -- finite differences ------------------------------------------------------

@dataclass
class GradCase:
    """A differentiable op reduced to a scalar, plus a seeded input sampler."""

    name: str
    fn: Callable[..., torch.Tensor]
    sample: Callable[[np.random.Generator], Sequence[torch.Tensor]]
    tol: float = 1e-4
    max_coords: int | None = None  # check a random subset of coordinates on large inputs
    n_samples: int = 32


@dataclass
class GradReport:
    op: str
    max_rel_err: float
    passed: bool
    samples: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op:<28} max_rel_err={self.max_rel_err:.3e}  samples={self.samples}  {status}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(1e-8, np.linalg.norm(numeric)))


def finite_diff_check(op, seed: int = 0, tol: float | None = None, n_samples: int | None = None) -> GradReport:
    """Compare tape gradients of ``op`` with central differences.

    ``op`` is a :class:`GradCase` or the name of a registered one. The step is
    ``1e-5 * max(1, |input|)`` per input tensor.
    """
    case = op if isinstance(op, GradCase) else lookup(op)
    tol = case.tol if tol is None else tol
    n_samples = case.n_samples if n_samples is None else n_samples
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    attempts = 0
    while done < n_samples:
        attempts += 1
        if attempts > 20 * n_samples:
            raise RuntimeError(f"{case.name}: could not draw inputs away from kinks")
        inputs = [torch.as_tensor(t, dtype=DTYPE) for t in case.sample(rng)]
        steps = [1e-5 * max(1.0, float(t.norm())) for t in inputs]
        err = _check_once(case, inputs, steps, rng)
        if err is None:
            continue
        worst = max(worst, err)
        done += 1
    return GradReport(case.name, worst, worst < tol, done)


def _check_once(case: GradCase, inputs, steps, rng) -> float | None:
    """Relative error at one sample, or None when a step crosses a kink."""
    tape = Tape()
    leaves = [tape.watch(f"in{i}", t) for i, t in enumerate(inputs)]
    grads = backward(tape, case.fn(*leaves))
    analytic = np.concatenate([grads[f"in{i}"].numpy().ravel() for i in range(len(inputs))])

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.numel())]
    if case.max_coords is not None and len(coords) > case.max_coords:
        keep = np.sort(rng.choice(len(coords), size=case.max_coords, replace=False))
        coords = [coords[c] for c in keep]
        offsets = np.cumsum([0] + [t.numel() for t in inputs])
        analytic = np.array([analytic[offsets[i] + j] for i, j in coords])

    with kink_monitor() as base, torch.no_grad():
        case.fn(*inputs)
    numeric = np.empty(len(coords))
    with torch.no_grad():
        for c, (i, j) in enumerate(coords):
            h = steps[i]
            vals = []
            for sign in (1.0, -1.0):
                bumped = [t.clone() for t in inputs]
                bumped[i].view(-1)[j] += sign * h
                with kink_monitor() as seen:
                    vals.append(float(case.fn(*bumped)))
                if not _same_branch(base, seen):
                    return None
            numeric[c] = (vals[0] - vals[1]) / (2 * h)
    return relative_error(analytic, numeric)


_REGISTRY: dict[str, GradCase] = {}


def register(case: GradCase) -> GradCase:
    _REGISTRY[case.name] = case
    return case


def registry() -> dict[str, GradCase]:
    from . import gradcases  # noqa: F401  (populates the registry)

    return dict(_REGISTRY)


def lookup(name: str) -> GradCase:
    reg = registry()
    if name not in reg:
        raise KeyError(f"op {name!r} is not registered; known: {', '.join(sorted(reg))}")
    return reg[name]
