"""Registered gradient-check cases: each op reduced to a scalar with a seeded sampler.

Scalars are formed with a fixed pseudo-random projection so every output
coordinate contributes to the gradient.
"""
from __future__ import annotations

import functools

import numpy as np
import torch

from . import manifold as mf
from .autodiff import GradCase, register
from .graph import hyperbolic_knn
from .layers import (
    Affine,
    Architecture,
    DhgcParams,
    Hyperbolic,
    ImageFeatures,
    MobiusLinearParams,
    dhgc_layer,
    dhgc_stack,
    flatten,
    ihgc_forward,
    init_branch,
    init_model,
    mobius_linear,
    model_forward,
    refinement_head,
    scaled_log_attention,
    unflatten,
    unify_image_features,
)
from .manifold import DTYPE
from .objectives import chamfer_distance, keypoint_loss, l2_vertex_loss, pose_losses, total_loss

COMPOSITION_TOL = 1e-3


def project(out: torch.Tensor) -> torch.Tensor:
    w = torch.sin(torch.arange(1, out.numel() + 1, dtype=DTYPE) * 0.7).reshape(out.shape)
    return (out * w).sum()


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


def ball_points(rng, shape, max_radius=0.8, dim=None):
    """Points with norm uniform in [0, max_radius) (unit curvature)."""
    d = dim or shape[-1]
    x = rng.normal(size=(*shape[:-1], d))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    return _t(x * rng.uniform(0, max_radius, size=(*shape[:-1], 1)))


def tangent_vectors(rng, shape, scale=1.0):
    return _t(rng.normal(size=shape) * scale)


def _case(name, fn, sample, **kw):
    register(GradCase(name, fn, sample, **kw))


# -- manifold ----------------------------------------------------------------

_case("mobius_add", lambda x, y: project(mf.mobius_add(x, y)), lambda r: [ball_points(r, (4, 3)), ball_points(r, (4, 3))])
_case("expmap0", lambda v: project(mf.expmap0(v)), lambda r: [tangent_vectors(r, (4, 3))])
_case("logmap0", lambda y: project(mf.logmap0(y)), lambda r: [ball_points(r, (4, 3))])
_case("exp_map", lambda b, v: project(mf.exp_map(b, v)), lambda r: [ball_points(r, (4, 3), 0.6), tangent_vectors(r, (4, 3), 0.5)])
_case("log_map", lambda b, y: project(mf.log_map(b, y)), lambda r: [ball_points(r, (4, 3), 0.6), ball_points(r, (4, 3), 0.6)])
_case(
    "geodesic_distance",
    lambda x, y: project(mf.geodesic_distance(x, y)),
    lambda r: [ball_points(r, (4, 3)), ball_points(r, (4, 3))],
)
_case(
    "mobius_matvec",
    lambda M, x: project(mf.mobius_matvec(M, x)),
    lambda r: [tangent_vectors(r, (5, 3), 0.5), ball_points(r, (4, 3), 0.7)],
)
_case("to_klein", lambda x: project(mf.to_klein(x)), lambda r: [ball_points(r, (4, 3))])
_case("from_klein", lambda k: project(mf.from_klein(k)), lambda r: [ball_points(r, (4, 3), 0.9)])
_case("einstein_midpoint", lambda p: project(mf.einstein_midpoint(p)), lambda r: [ball_points(r, (8, 3))])
_case("hyperbolic_activation", lambda x: project(mf.hyperbolic_activation(x)), lambda r: [ball_points(r, (6, 4))])
_case("conformal_factor", lambda x: project(mf.conformal_factor(x)), lambda r: [ball_points(r, (4, 3))])
_case("project_to_ball", lambda x: project(mf.project_to_ball(x).data), lambda r: [ball_points(r, (4, 3))])


# -- graph and layers ----------------------------------------------------------

def _knn_values(q, refs):
    g = hyperbolic_knn(q, refs, 3)
    return project(mf.geodesic_distance(q.unsqueeze(-2), refs[g.indices]))


_case("hyperbolic_knn_gather", _knn_values, lambda r: [ball_points(r, (5, 3), 0.5), ball_points(r, (12, 3), 0.5)])


def _mobius_linear(W, b, x):
    return project(mobius_linear(MobiusLinearParams(W, b), x))


_case(
    "mobius_linear",
    _mobius_linear,
    lambda r: [tangent_vectors(r, (5, 3), 0.5), ball_points(r, (1, 5), 0.3)[0], ball_points(r, (6, 3), 0.7)],
)


def _dhgc(x, W, b):
    return project(dhgc_layer(x, MobiusLinearParams(W, b), 3)[0])


_case(
    "dhgc_layer",
    _dhgc,
    lambda r: [tangent_vectors(r, (12, 3), 0.3), tangent_vectors(r, (6, 3), 0.6), ball_points(r, (1, 6), 0.2)[0]],
    tol=COMPOSITION_TOL,
    max_coords=32,
)


def _dhgc_stack(x, W1, b1, W2, b2):
    return project(dhgc_stack(x, DhgcParams([MobiusLinearParams(W1, b1), MobiusLinearParams(W2, b2)]), 3))


_case(
    "dhgc_stack",
    _dhgc_stack,
    lambda r: [
        tangent_vectors(r, (12, 3), 0.3),
        tangent_vectors(r, (6, 3), 0.6),
        ball_points(r, (1, 6), 0.2)[0],
        tangent_vectors(r, (5, 6), 0.4),
        ball_points(r, (1, 5), 0.2)[0],
    ],
    tol=COMPOSITION_TOL,
    max_coords=24,
)


_SMALL = Architecture(dhgc_dims=(3, 6), out_dim=4, shallow_dim=5, deep_dim=7, global_dim=4, head_hidden=8)


def _small_ihgc(rng):
    p = init_branch(rng, _SMALL, with_pose=False).ihgc
    p.V.b = ball_points(rng, (1, p.V.b.shape[0]), 0.2)[0]
    return p


def _raw_features(rng, n_shallow=10, n_deep=6, scale=1.0):
    return [
        tangent_vectors(rng, (n_shallow, _SMALL.shallow_dim), scale),
        tangent_vectors(rng, (n_deep, _SMALL.deep_dim), scale),
        tangent_vectors(rng, (n_deep, _SMALL.deep_dim), scale),
    ]


@functools.lru_cache(maxsize=None)
def _ihgc_template():
    return _small_ihgc(np.random.default_rng(0))


def _unify(s, dh, do, W):
    template = _ihgc_template()
    params = type(template)(
        shallow=Affine(W, template.shallow.b),
        deep_hand=template.deep_hand,
        deep_obj=template.deep_obj,
        V=template.V,
        out=template.out,
    )
    return sum(project(t) for t in unify_image_features(ImageFeatures(s, dh, do), params))


_case(
    "unify_image_features",
    _unify,
    lambda r: _raw_features(r) + [tangent_vectors(r, (6, _SMALL.shallow_dim), 0.3)],
    max_coords=32,
)


def _attention(Q, K, V):
    return project(scaled_log_attention(Q, K, V, Q.shape[-1], Hyperbolic()))


_case(
    "scaled_log_attention",
    _attention,
    lambda r: [ball_points(r, (3, 4, 5), 0.6), ball_points(r, (3, 4, 5), 0.6), ball_points(r, (3, 4, 5), 0.6)],
)


def _ihgc_sample(rng):
    p = _small_ihgc(rng)
    named = flatten(p)
    return [ball_points(rng, (12, 6), 0.6)] + _raw_features(rng) + list(named.values())


def _ihgc(mesh, s, dh, do, *flat, swap=False):
    template = _ihgc_template()
    params = unflatten(template, dict(zip(flatten(template), flat)))
    return project(ihgc_forward(mesh, ImageFeatures(s, dh, do), params, 3, swap_roles=swap))


_case("ihgc_forward", _ihgc, _ihgc_sample, tol=COMPOSITION_TOL, max_coords=24)
_case(
    "ihgc_forward_swapped",
    lambda *a: _ihgc(*a, swap=True),
    _ihgc_sample,
    tol=COMPOSITION_TOL,
    max_coords=24,
)


def _head_template(rng):
    return init_branch(rng, _SMALL, with_pose=True).head


def _head_sample(rng):
    head = _head_template(rng)
    head.offset = Affine(tangent_vectors(rng, head.offset.W.shape, 0.3), tangent_vectors(rng, head.offset.b.shape, 0.1))
    return [
        tangent_vectors(rng, (10, _SMALL.out_dim)),
        tangent_vectors(rng, (_SMALL.global_dim,)),
        tangent_vectors(rng, (10, 3), 0.05),
    ] + list(flatten(head).values())


@functools.lru_cache(maxsize=None)
def _head_shape():
    return _head_template(np.random.default_rng(0))


def _head(f, g, v, *flat):
    template = _head_shape()
    params = unflatten(template, dict(zip(flatten(template), flat)))
    out = refinement_head(f, g, params, v)
    return project(out.offsets) + project(out.T) + project(out.S)


_case("refinement_head", _head, _head_sample, max_coords=32)


# -- losses ------------------------------------------------------------------

_case("l2_vertex_loss", lambda a, b: l2_vertex_loss(a, b), lambda r: [tangent_vectors(r, (10, 3)), tangent_vectors(r, (10, 3))])
_case(
    "keypoint_loss",
    lambda a, b: keypoint_loss(a, b, [0, 3, 7]),
    lambda r: [tangent_vectors(r, (10, 3)), tangent_vectors(r, (10, 3))],
)
_case("chamfer_distance", lambda a, b: chamfer_distance(a, b), lambda r: [tangent_vectors(r, (9, 3)), tangent_vectors(r, (11, 3))])


def _pose(T, S, Tg, Sg):
    L_T, L_S = pose_losses(T, S, Tg, Sg)
    return L_T + L_S


_case("pose_losses", _pose, lambda r: [tangent_vectors(r, (3,)), tangent_vectors(r, ()), tangent_vectors(r, (3,)), tangent_vectors(r, ())])
_case(
    "total_loss",
    lambda a, b, c, d, e: total_loss(a, b, c, d, e).sum(),
    lambda r: [tangent_vectors(r, (2,)) for _ in range(5)],
)


# -- full forward pass ---------------------------------------------------------

_FIXTURE_N = 12
_TINY = Architecture(dhgc_dims=(3, 6, 6), out_dim=4, shallow_dim=5, deep_dim=7, global_dim=4, head_hidden=8)


def _model_template(rng):
    params = init_model(rng, _TINY)
    for branch in (params.hand, params.obj):
        branch.head.offset = Affine(
            tangent_vectors(rng, branch.head.offset.W.shape, 0.3), tangent_vectors(rng, branch.head.offset.b.shape, 0.05)
        )
    return params


def _forward_sample(rng):
    params = _model_template(rng)
    return [
        tangent_vectors(rng, (_FIXTURE_N, 3), 0.05),
        tangent_vectors(rng, (_FIXTURE_N, 3), 0.05) + 0.1,
        tangent_vectors(rng, (_FIXTURE_N, 3), 0.05),
        tangent_vectors(rng, (_FIXTURE_N, 3), 0.05) + 0.1,
    ] + _raw_features(rng, 8, 5, 0.5) + [tangent_vectors(rng, (_TINY.global_dim,))] + list(flatten(params).values())


@functools.lru_cache(maxsize=None)
def _model_shape():
    return _model_template(np.random.default_rng(0))


def _full_forward(init_h, init_o, gt_h, gt_o, s, dh, do, glob, *flat):
    template = _model_shape()
    params = unflatten(template, dict(zip(flatten(template), flat)))
    out = model_forward(params, init_h, init_o, ImageFeatures(s, dh, do), glob, 3)
    L_T, L_S = pose_losses(out.T, out.S, gt_o.mean(0), torch.tensor(0.05, dtype=DTYPE))
    return total_loss(
        l2_vertex_loss(out.hand, gt_h),
        keypoint_loss(out.hand, gt_h, [0, 5, 10]),
        chamfer_distance(out.obj, gt_o),
        L_T,
        L_S,
    )


_case("model_forward_loss", _full_forward, _forward_sample, tol=COMPOSITION_TOL, max_coords=8)
