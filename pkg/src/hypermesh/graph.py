"""Exact brute-force k-NN under the geodesic metric, and the graph builders on top."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from . import autodiff
from .manifold import CurvatureLike, CurvatureMismatch, _unpack, artanh, BallTensor

SOURCES = ("mesh", "shallow", "deep_hand", "deep_object")


@dataclass
class NeighborGraph:
    """``indices[..., i, j]`` is the j-th closest element of the referenced set to node i."""

    indices: torch.Tensor
    distances: torch.Tensor
    source: str = "mesh"

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def rank_keys(queries: torch.Tensor, refs: torch.Tensor, kappa: float | None, per_query: bool = True) -> torch.Tensor:
    """All-pairs keys ``(..., n, m)`` strictly increasing in the distance.

    Hyperbolic: delta / (a b) with delta = |x - y|^2, a = 1 - kappa|x|^2,
    b = 1 - kappa|y|^2. Euclidean (``kappa=None``): delta. With
    ``per_query=False`` the factor 1/a, constant along each row, is left out;
    the order within a row is unchanged.
    """
    q2 = (queries * queries).sum(-1)
    r2 = (refs * refs).sum(-1)
    delta = torch.baddbmm(
        (q2.unsqueeze(-1) + r2.unsqueeze(-2)).reshape(-1, q2.shape[-1], r2.shape[-1]),
        queries.reshape(-1, *queries.shape[-2:]),
        refs.reshape(-1, *refs.shape[-2:]).transpose(-1, -2),
        alpha=-2,
    ).reshape(*q2.shape, r2.shape[-1]).clamp_min_(0)
    if kappa is None:
        return delta
    delta /= (1 - kappa * r2).unsqueeze(-2)
    if per_query:
        delta /= (1 - kappa * q2).unsqueeze(-1)
    return delta


def key_to_distance(key: torch.Tensor, kappa: float | None) -> torch.Tensor:
    """d = (2/sqrt(kappa)) artanh(sqrt(kappa t / (kappa t + 1))) for key t; sqrt(t) when flat."""
    if kappa is None:
        return key.sqrt()
    sk = kappa ** 0.5
    return (2 / sk) * artanh((kappa * key / (kappa * key + 1)).sqrt())


def pairwise_distance(queries: torch.Tensor, refs: torch.Tensor, kappa: float | None) -> torch.Tensor:
    """All-pairs distances ``(..., n, m)``; ``kappa=None`` means Euclidean.

    The closed form equals the Möbius-addition form of the geodesic distance.
    """
    return key_to_distance(rank_keys(queries, refs, kappa), kappa)


def hyperbolic_knn(
    queries,
    refs,
    k: int,
    include_self: bool = True,
    curv: CurvatureLike = None,
    metric: str = "hyperbolic",
    source: str = "mesh",
) -> NeighborGraph:
    """k nearest ``refs`` for every query, ties broken by ascending index.

    With ``include_self=False`` the queries must be the reference set itself and
    each node's own index is skipped.
    """
    kappa, (q, r) = _unpack(curv, queries, refs)
    m = r.shape[-2]
    limit = m if include_self else m - 1
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range for {m} reference points (self {'in' if include_self else 'ex'}cluded)")
    if not include_self and q.shape[-2] != m:
        raise ValueError("self exclusion requires queries to be the reference set")
    kk = kappa if metric == "hyperbolic" else None
    with torch.no_grad():
        q, r = q.detach(), r.detach()
        keys = rank_keys(q, r, kk, per_query=False)
        if not include_self:
            keys.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
        order, picked = _select_k(keys, k)
        row = 1.0 if kk is None else (1 - kk * (q * q).sum(-1, keepdim=True))
        dist = key_to_distance(picked / row, kk)
    if autodiff.monitoring():
        # rank order matters too: cross-modal attention pairs neighbours by rank
        autodiff.note_branch(order)
    return NeighborGraph(order, dist, source)


def _select_k(dist: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """k smallest per row ordered by (distance, index).

    topk is not tie-stable, so rows are re-sorted by index then stably by value;
    a tie straddling the k-th place falls back to a full stable sort.
    """
    values, idx = torch.topk(dist, k, dim=-1, largest=False, sorted=True)
    idx = torch.sort(idx, dim=-1).values
    values = torch.gather(dist, -1, idx)
    values, perm = torch.sort(values, dim=-1, stable=True)
    idx = torch.gather(idx, -1, perm)
    tied = (dist <= values[..., -1:]).sum(-1) > k
    if bool(tied.any()):
        rows = dist[tied]
        fix = torch.sort(rows, dim=-1, stable=True).indices[..., :k]
        idx[tied] = fix
        values[tied] = torch.gather(rows, -1, fix)
    return idx, values


def build_dynamic_graph(features, k: int, curv: CurvatureLike = None, metric: str = "hyperbolic") -> NeighborGraph:
    """Self-excluded k-NN graph over the current feature set."""
    kappa, (x,) = _unpack(curv, features)
    if x.shape[-2] <= k:
        raise ValueError(f"need more than k={k} nodes, got {x.shape[-2]}")
    return hyperbolic_knn(x, x, k, include_self=False, curv=-kappa, metric=metric)


class CrossModalNeighborhoods(NamedTuple):
    f1: NeighborGraph
    f2: NeighborGraph
    Q: NeighborGraph
    K: NeighborGraph


def build_cross_modal_neighborhoods(
    mesh, shallow, deep_hand, deep_obj, k: int, curv: CurvatureLike = None, metric: str = "hyperbolic"
) -> CrossModalNeighborhoods:
    """Four k-neighbourhoods of each mesh feature: among mesh (self excluded),
    shallow, deep-hand and deep-object features."""
    curvs = {p.curvature for p in (mesh, shallow, deep_hand, deep_obj) if isinstance(p, BallTensor)}
    if len(curvs) > 1:
        raise CurvatureMismatch("feature sets live in balls of different curvature")
    kappa, (m, s, h, o) = _unpack(curv, mesh, shallow, deep_hand, deep_obj)
    dims = {t.shape[-1] for t in (m, s, h, o)}
    if len(dims) != 1:
        raise ValueError(f"feature dimensions differ: {sorted(dims)}")
    c = -kappa
    return CrossModalNeighborhoods(
        hyperbolic_knn(m, m, k, include_self=False, curv=c, metric=metric, source="mesh"),
        hyperbolic_knn(m, s, k, curv=c, metric=metric, source="shallow"),
        hyperbolic_knn(m, h, k, curv=c, metric=metric, source="deep_hand"),
        hyperbolic_knn(m, o, k, curv=c, metric=metric, source="deep_object"),
    )


def gather_neighbors(values: torch.Tensor, graph: NeighborGraph) -> torch.Tensor:
    """``values (..., m, d)`` indexed by ``graph`` -> ``(..., n, k, d)``."""
    idx = graph.indices
    lead = idx.shape[:-2]
    n, k = idx.shape[-2:]
    flat = idx.reshape(*lead, n * k, 1).expand(*lead, n * k, values.shape[-1])
    return torch.gather(values, -2, flat).reshape(*lead, n, k, values.shape[-1])
