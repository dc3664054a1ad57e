"""Learnable layers: Möbius linear, DHGC, image unification, IHGC and the refinement head.

Every forward takes a ``space`` so the same code runs hyperbolic or, for the
ablation, as the plain Euclidean dynamic-graph network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Iterator, NamedTuple

import numpy as np
import torch

from . import autodiff
from .graph import build_cross_modal_neighborhoods, build_dynamic_graph, gather_neighbors
from .manifold import (
    DTYPE,
    CurvatureLike,
    BALL_EPS,
    _einstein_midpoint,
    _expmap0,
    _from_klein,
    _logmap0,
    _mobius_add,
    _mobius_matvec,
    _sqnorm,
    artanh,
    as_curvature,
)


# -- spaces ------------------------------------------------------------------

class Hyperbolic:
    name = "hyperbolic"
    metric = "hyperbolic"

    def __init__(self, curv: CurvatureLike = None):
        self.curvature = as_curvature(curv)
        self.kappa = self.curvature.kappa

    def to_ball(self, v):
        return _expmap0(v, self.kappa)

    def to_tangent(self, x):
        return _logmap0(x, self.kappa)

    def linear(self, p: "MobiusLinearParams", x):
        return _mobius_add(_mobius_matvec(p.W, x, self.kappa), p.b, self.kappa)

    def midpoint(self, points):
        return _einstein_midpoint(points, self.kappa)

    def aggregate(self, h, graph):
        """Einstein midpoint of each node's neighbours; the Klein terms are per node,
        so they are formed before the gather."""
        kl = 2 * h / (1 + self.kappa * _sqnorm(h))
        gamma = 1 / (1 - self.kappa * _sqnorm(kl)).clamp_min(1e-30).sqrt()
        num = gather_neighbors(gamma * kl, graph).sum(dim=-2)
        den = gather_neighbors(gamma, graph).sum(dim=-2)
        return _from_klein(num / den, self.kappa)

    def activation(self, x):
        z = _logmap0(x, self.kappa)
        if autodiff.monitoring():
            autodiff.note_branch(z > 0)
        return _expmap0(torch.relu(z), self.kappa)

    def concat(self, a, b):
        return _expmap0(torch.cat([_logmap0(a, self.kappa), _logmap0(b, self.kappa)], dim=-1), self.kappa)


class Euclidean:
    """exp/log become identities, Möbius ops affine maps, midpoints arithmetic means."""

    name = "euclidean"
    metric = "euclidean"
    curvature = None
    kappa = None

    def to_ball(self, v):
        return v

    def to_tangent(self, x):
        return x

    def linear(self, p: "MobiusLinearParams", x):
        return x @ p.W.transpose(0, 1) + p.b

    def midpoint(self, points):
        return points.mean(dim=-2)

    def aggregate(self, h, graph):
        return gather_neighbors(h, graph).mean(dim=-2)

    def activation(self, x):
        if autodiff.monitoring():
            autodiff.note_branch(x > 0)
        return torch.relu(x)

    def concat(self, a, b):
        return torch.cat([a, b], dim=-1)


def make_space(name: str = "hyperbolic", curv: CurvatureLike = None):
    if name == "hyperbolic":
        return Hyperbolic(curv)
    if name == "euclidean":
        return Euclidean()
    raise ValueError(f"unknown space {name!r}; expected 'hyperbolic' or 'euclidean'")


# -- parameters --------------------------------------------------------------

def _ball_field():
    return field(metadata={"manifold": True})


@dataclass
class Affine:
    W: torch.Tensor
    b: torch.Tensor


@dataclass
class MobiusLinearParams:
    W: torch.Tensor
    b: torch.Tensor = _ball_field()


@dataclass
class DhgcParams:
    layers: list[MobiusLinearParams]


@dataclass
class IhgcParams:
    shallow: Affine
    deep_hand: Affine
    deep_obj: Affine
    V: MobiusLinearParams
    out: Affine

    @property
    def dim(self) -> int:
        return self.V.W.shape[0]


@dataclass
class PoseHeadParams:
    hidden: Affine
    T: Affine
    S: Affine


@dataclass
class HeadParams:
    hidden: Affine
    offset: Affine
    pose: PoseHeadParams | None = None


@dataclass
class BranchParams:
    dhgc: DhgcParams
    ihgc: IhgcParams
    head: HeadParams


@dataclass
class ModelParams:
    hand: BranchParams
    obj: BranchParams


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, torch.Tensor, bool]]:
    """Yield ``(name, tensor, is_ball)`` for every tensor in a parameter tree."""
    if isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from iter_tensors(item, f"{prefix}{i}.")
        return
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            continue
        if isinstance(value, torch.Tensor):
            yield prefix + f.name, value, bool(f.metadata.get("manifold"))
        else:
            yield from iter_tensors(value, f"{prefix}{f.name}.")


def flatten(obj) -> dict[str, torch.Tensor]:
    return {name: t for name, t, _ in iter_tensors(obj)}


def ball_names(obj) -> set[str]:
    return {name for name, _, ball in iter_tensors(obj) if ball}


def unflatten(template, tensors: dict[str, torch.Tensor], prefix: str = ""):
    """Rebuild ``template`` with tensors looked up by name."""
    if isinstance(template, list):
        return [unflatten(item, tensors, f"{prefix}{i}.") for i, item in enumerate(template)]
    updates = {}
    for f in fields(template):
        value = getattr(template, f.name)
        if value is None:
            continue
        if isinstance(value, torch.Tensor):
            name = prefix + f.name
            if name not in tensors:
                raise KeyError(f"missing tensor {name!r}")
            t = tensors[name]
            if tuple(t.shape) != tuple(value.shape):
                raise ValueError(f"{name}: shape {tuple(t.shape)} != expected {tuple(value.shape)}")
            updates[f.name] = t
        elif is_dataclass(value) or isinstance(value, list):
            updates[f.name] = unflatten(value, tensors, f"{prefix}{f.name}.")
    return replace(template, **updates)


# -- initialisation ----------------------------------------------------------

def _uniform(rng: np.random.Generator, d_out: int, d_in: int) -> torch.Tensor:
    bound = 1 / math.sqrt(d_in)
    return torch.as_tensor(rng.uniform(-bound, bound, size=(d_out, d_in)), dtype=DTYPE)


def init_affine(rng, d_in, d_out, zero=False) -> Affine:
    if zero:
        return Affine(torch.zeros(d_out, d_in, dtype=DTYPE), torch.zeros(d_out, dtype=DTYPE))
    return Affine(_uniform(rng, d_out, d_in), torch.as_tensor(rng.uniform(-1, 1, d_out) / math.sqrt(d_in), dtype=DTYPE))


def init_mobius(rng, d_in, d_out) -> MobiusLinearParams:
    # bias starts at the origin: the layer begins as a pure Möbius matrix action
    return MobiusLinearParams(_uniform(rng, d_out, d_in), torch.zeros(d_out, dtype=DTYPE))


@dataclass(frozen=True)
class Architecture:
    dhgc_dims: tuple[int, ...] = (3, 64, 64)
    out_dim: int = 32
    shallow_dim: int = 32
    deep_dim: int = 64
    global_dim: int = 64
    head_hidden: int = 64

    @property
    def feat_dim(self) -> int:
        return self.dhgc_dims[-1]

    @property
    def head_in(self) -> int:
        return 2 * self.out_dim + self.global_dim + 3


def init_branch(rng, arch: Architecture, with_pose: bool) -> BranchParams:
    d = arch.feat_dim
    dims = arch.dhgc_dims
    dhgc = DhgcParams([init_mobius(rng, a, b) for a, b in zip(dims[:-1], dims[1:])])
    ihgc = IhgcParams(
        shallow=init_affine(rng, arch.shallow_dim, d),
        deep_hand=init_affine(rng, arch.deep_dim, d),
        deep_obj=init_affine(rng, arch.deep_dim, d),
        V=init_mobius(rng, 2 * d, d),
        out=init_affine(rng, d, arch.out_dim),
    )
    pose = None
    if with_pose:
        pose_in = arch.out_dim + arch.global_dim
        pose = PoseHeadParams(
            hidden=init_affine(rng, pose_in, arch.head_hidden),
            T=init_affine(rng, arch.head_hidden, 3),
            S=init_affine(rng, arch.head_hidden, 1),
        )
    head = HeadParams(
        hidden=init_affine(rng, arch.head_in, arch.head_hidden),
        offset=init_affine(rng, arch.head_hidden, 3, zero=True),
        pose=pose,
    )
    return BranchParams(dhgc, ihgc, head)


def init_model(rng: np.random.Generator, arch: Architecture = Architecture()) -> ModelParams:
    hand = init_branch(rng, arch, with_pose=False)
    obj = init_branch(rng, arch, with_pose=True)
    return ModelParams(hand, obj)


# -- forward ops -------------------------------------------------------------

def affine(p: Affine, x: torch.Tensor) -> torch.Tensor:
    return x @ p.W.transpose(0, 1) + p.b


def mobius_linear(params: MobiusLinearParams, x, curv: CurvatureLike = None, space=None) -> torch.Tensor:
    """``x ⊗ W ⊕ b``."""
    space = space or Hyperbolic(curv)
    x = torch.as_tensor(x, dtype=DTYPE)
    if params.W.shape[1] != x.shape[-1] or params.b.shape[-1] != params.W.shape[0]:
        raise ValueError(
            f"Möbius layer {tuple(params.W.shape)} with bias {tuple(params.b.shape)} "
            f"cannot take inputs of dimension {x.shape[-1]}"
        )
    return space.linear(params, x)


def dhgc_layer(features_in, params: MobiusLinearParams, k: int, space=None):
    """One dynamic hyperbolic graph convolution.

    Returns ``(euclidean_out, ball_out)``: the ball features after activation and
    their log at the origin, which is the next layer's input.
    """
    space = space or Hyperbolic()
    x = space.to_ball(torch.as_tensor(features_in, dtype=DTYPE))
    h = mobius_linear(params, x, space=space)
    graph = build_dynamic_graph(x, k, curv=space.curvature, metric=space.metric)
    agg = space.aggregate(h, graph)
    out = space.activation(agg)
    return space.to_tangent(out), out


def dhgc_stack(vertices, params: DhgcParams, k: int, space=None) -> torch.Tensor:
    """Stacked DHGC layers on raw vertex coordinates; returns the last ball features."""
    feats = torch.as_tensor(vertices, dtype=DTYPE)
    ball = None
    for layer in params.layers:
        feats, ball = dhgc_layer(feats, layer, k, space)
    return ball


class ImageFeatures(NamedTuple):
    shallow: torch.Tensor
    deep_hand: torch.Tensor
    deep_obj: torch.Tensor


def unify_image_features(raw: ImageFeatures, params: IhgcParams, space=None) -> ImageFeatures:
    """Affine maps to the common width, then projection into the ball."""
    space = space or Hyperbolic()
    out = []
    for x, p in zip(raw, (params.shallow, params.deep_hand, params.deep_obj)):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != p.W.shape[1]:
            raise ValueError(f"image features of width {x.shape[-1]}, expected {p.W.shape[1]}")
        out.append(space.to_ball(affine(p, x)))
    return ImageFeatures(*out)


def scaled_log_attention(Q, K, V, d: int, space=None) -> torch.Tensor:
    """softmax(Log(Q) Log(K)^T / sqrt(d)) Log(V) over the last two axes."""
    space = space or Hyperbolic()
    if Q.shape[-2] == 0:
        raise ValueError("attention over an empty neighbourhood")
    if not (Q.shape[-2] == K.shape[-2] == V.shape[-2]) or Q.shape[-1] != K.shape[-1]:
        raise ValueError("Q, K, V neighbourhood sizes or widths disagree")
    lq, lk, lv = space.to_tangent(Q), space.to_tangent(K), space.to_tangent(V)
    scores = lq @ lk.transpose(-1, -2) / math.sqrt(d)
    return torch.softmax(scores, dim=-1) @ lv


def ihgc_forward(mesh_feats, raw: ImageFeatures, params: IhgcParams, k: int, space=None, swap_roles: bool = False):
    """Image-attention graph convolution, ``(..., n, d) -> (..., n, out_dim)``.

    ``swap_roles`` makes the deep object features the queries, for the object branch.
    """
    space = space or Hyperbolic()
    mesh_feats = torch.as_tensor(mesh_feats, dtype=DTYPE)
    shallow, deep_h, deep_o = unify_image_features(raw, params, space)
    q_set, k_set = (deep_o, deep_h) if swap_roles else (deep_h, deep_o)
    nb = build_cross_modal_neighborhoods(mesh_feats, shallow, q_set, k_set, k, curv=space.curvature, metric=space.metric)
    attended = _attend_mean(space, mesh_feats, shallow, q_set, k_set, nb, params.V, params.dim)
    return affine(params.out, attended)


def _gather_pairs(table: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """``table[..., rows, cols]`` for index tensors sharing table's leading dims."""
    m = table.shape[-1]
    flat = table.reshape(*table.shape[:-2], -1)
    idx = rows * m + cols
    lead = idx.shape[: flat.dim() - 1]
    out = torch.gather(flat, -1, idx.reshape(*lead, -1))
    return out.reshape(idx.shape)


def _weighted_gather_sum(values, indices, weights):
    """sum_s weights[..., i, s] * values[..., indices[..., i, s], :]"""
    n, k = indices.shape[-2:]
    lead = indices.shape[:-2]
    flat = indices.reshape(*lead, n * k, 1).expand(*lead, n * k, values.shape[-1])
    picked = torch.gather(values, -2, flat).reshape(*lead, n, k, values.shape[-1])
    return (weights.unsqueeze(-1) * picked).sum(dim=-2)


def _attend_mean(space, mesh, shallow, q_set, k_set, nb, Vp: MobiusLinearParams, d: int):
    """Mean over each vertex's k attention rows of softmax(Log Q Log K^T / sqrt d) Log V,
    with V = Möbius(Cat(f1, f2)).

    Computed without materialising per-neighbour vectors: every Möbius step on
    V reduces to scalar coefficients on w = M1 u1[j] + M2 u2[l] and on the bias,
    where u1, u2 are the tangent images of the mesh and shallow features.
    """
    j, l = nb.f1.indices, nb.f2.indices
    D = mesh.shape[-1]
    M1, M2 = Vp.W[:, :D], Vp.W[:, D:]
    u1, u2 = space.to_tangent(mesh), space.to_tangent(shallow)
    P = u1 @ M1.transpose(0, 1)
    R = u2 @ M2.transpose(0, 1)
    b = Vp.b

    lq, lk = space.to_tangent(q_set), space.to_tangent(k_set)
    scores = _gather_pairs(lq @ lk.transpose(-1, -2), nb.Q.indices.unsqueeze(-1), nb.K.indices.unsqueeze(-2))
    omega = torch.softmax(scores / math.sqrt(d), dim=-1).mean(dim=-2)  # (..., n, k)

    if space.kappa is None:
        out = _weighted_gather_sum(P, j, omega) + _weighted_gather_sum(R, l, omega)
        return out + omega.sum(-1, keepdim=True) * b

    kappa = space.kappa
    sk = kappa ** 0.5
    maxnorm = (1 - BALL_EPS) / sk
    g = lambda v, idx: torch.gather(v.expand(*idx.shape[:-2], -1), -1, idx.flatten(-2)).reshape(idx.shape)  # noqa: E731
    n1 = g((u1 * u1).sum(-1), j)
    n2 = g((u2 * u2).sum(-1), l)
    pw = g((P * P).sum(-1), j)
    rw = g((R * R).sum(-1), l)
    cross = _gather_pairs(P @ R.transpose(-1, -2), j, l)
    wb = g(P @ b, j) + g(R @ b, l)
    b2 = (b * b).sum()

    # concatenation in the tangent space, then exp at the origin (with ball clamp)
    un = (n1 + n2).clamp_min(1e-30).sqrt()
    sigma = torch.tanh(sk * un) / (sk * un)
    xn = sigma * un
    xn_c = torch.where(xn >= maxnorm, torch.full_like(xn, maxnorm), xn)
    # Möbius matrix action: M x = (xn_c / un) w
    wn = (pw + rw + 2 * cross).clamp_min(1e-30).sqrt()
    c = torch.tanh(wn / un * artanh(sk * xn_c)) / (wn * sk)
    yn = c * wn
    c = torch.where(yn >= maxnorm, maxnorm / wn, c)
    # Möbius bias addition y ⊕ b with y = c w
    xy = c * wb
    y2 = (c * wn) ** 2
    den = 1 + 2 * kappa * xy + kappa ** 2 * y2 * b2
    a = (1 + 2 * kappa * xy + kappa * b2) * c / den
    beta = (1 - kappa * y2) / den
    vn = (a * a * wn * wn + 2 * a * beta * wb + beta * beta * b2).clamp_min(1e-30).sqrt()
    scale = torch.where(vn >= maxnorm, maxnorm / vn, torch.ones_like(vn))
    a, beta, vn = a * scale, beta * scale, torch.minimum(vn, torch.full_like(vn, maxnorm))
    rho = artanh(sk * vn) / (sk * vn)
    coef = omega * rho
    out = _weighted_gather_sum(P, j, coef * a) + _weighted_gather_sum(R, l, coef * a)
    return out + (coef * beta).sum(-1, keepdim=True) * b


def _relu(x: torch.Tensor) -> torch.Tensor:
    if autodiff.monitoring():
        autodiff.note_branch(x > 0)
    return torch.relu(x)


class HeadOutput(NamedTuple):
    offsets: torch.Tensor
    T: torch.Tensor | None
    S: torch.Tensor | None


def refinement_head(mesh_feats32, global_feat, params: HeadParams, vertices) -> HeadOutput:
    """Per-vertex offsets, plus object translation and scale when the branch has a pose head.

    Each vertex sees its own features, the mean-pooled mesh features, the global
    image feature and its initial coordinates.
    """
    f = torch.as_tensor(mesh_feats32, dtype=DTYPE)
    v = torch.as_tensor(vertices, dtype=DTYPE)
    g = torch.as_tensor(global_feat, dtype=DTYPE)
    if f.shape[:-1] != v.shape[:-1]:
        raise ValueError("mesh features and vertices disagree on vertex count")
    pooled = f.mean(dim=-2)
    n = f.shape[-2]
    per_vertex = torch.cat(
        [f, pooled.unsqueeze(-2).expand_as(f), g.unsqueeze(-2).expand(*f.shape[:-1], g.shape[-1]), v], dim=-1
    )
    if per_vertex.shape[-1] != params.hidden.W.shape[1]:
        raise ValueError(f"head expects {params.hidden.W.shape[1]} inputs per vertex, got {per_vertex.shape[-1]}")
    offsets = affine(params.offset, _relu(affine(params.hidden, per_vertex)))
    T = S = None
    if params.pose is not None:
        hidden = _relu(affine(params.pose.hidden, torch.cat([pooled, g], dim=-1)))
        T = affine(params.pose.T, hidden)
        S = affine(params.pose.S, hidden).squeeze(-1)
    assert offsets.shape[-2] == n
    return HeadOutput(offsets, T, S)


class BranchOutput(NamedTuple):
    vertices: torch.Tensor
    T: torch.Tensor | None
    S: torch.Tensor | None


def branch_forward(
    params: BranchParams,
    init_vertices,
    raw: ImageFeatures,
    global_feat,
    k: int,
    space=None,
    swap_roles=False,
    coord_scale: float = 1.0,
) -> BranchOutput:
    """DHGC stack -> IHGC -> head; refined vertices are the initial ones plus offsets.

    Coordinates enter the network multiplied by ``coord_scale`` and offsets,
    translation and scale leave it divided by the same factor.
    """
    init_vertices = torch.as_tensor(init_vertices, dtype=DTYPE)
    scaled = init_vertices * coord_scale
    mesh = dhgc_stack(scaled, params.dhgc, k, space)
    feats = ihgc_forward(mesh, raw, params.ihgc, k, space, swap_roles=swap_roles)
    out = refinement_head(feats, global_feat, params.head, scaled)
    T = None if out.T is None else out.T / coord_scale
    S = None if out.S is None else out.S / coord_scale
    return BranchOutput(init_vertices + out.offsets / coord_scale, T, S)


class ModelOutput(NamedTuple):
    hand: torch.Tensor
    obj: torch.Tensor
    T: torch.Tensor
    S: torch.Tensor


def model_forward(
    params: ModelParams, init_hand, init_obj, raw: ImageFeatures, global_feat, k: int, space=None, coord_scale=1.0
):
    hand = branch_forward(params.hand, init_hand, raw, global_feat, k, space, coord_scale=coord_scale)
    obj = branch_forward(params.obj, init_obj, raw, global_feat, k, space, swap_roles=True, coord_scale=coord_scale)
    return ModelOutput(hand.vertices, obj.vertices, obj.T, obj.S)
