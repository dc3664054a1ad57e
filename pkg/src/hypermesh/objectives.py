"""Training losses and evaluation metrics.

Losses are torch functions and differentiate through the tape. The contact
metrics (penetration, intersection volume) are evaluation-only and run in numpy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import autodiff
from .manifold import DTYPE
from .mesh import Mesh, contains, point_triangle_distance

VOXEL_SIZE = 0.005  # metres


def _t(x) -> torch.Tensor:
    if isinstance(x, Mesh):
        x = x.vertices
    return torch.as_tensor(x, dtype=DTYPE)


def l2_vertex_loss(pred, gt) -> torch.Tensor:
    """Mean over vertices of the squared Euclidean distance."""
    pred, gt = _t(pred), _t(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).sum(-1).mean(-1)


def keypoint_loss(pred, gt, keypoints=None) -> torch.Tensor:
    """:func:`l2_vertex_loss` restricted to the keypoint rows."""
    if keypoints is None:
        keypoints = gt.keypoints if isinstance(gt, Mesh) else None
    if not keypoints:
        raise ValueError("keypoint loss needs a keypoint index list")
    idx = torch.as_tensor(list(keypoints), dtype=torch.long)
    return l2_vertex_loss(_t(pred).index_select(-2, idx), _t(gt).index_select(-2, idx))


def chamfer_distance(a, b) -> torch.Tensor:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2.

    Nearest neighbours are found on detached values; the squared distances of
    the matched pairs are then recomputed exactly and carry the gradient.
    """
    a, b = _t(a), _t(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer distance of an empty point set")
    with torch.no_grad():
        ad, bd = a.detach(), b.detach()
        approx = (ad * ad).sum(-1).unsqueeze(-1) + (bd * bd).sum(-1).unsqueeze(-2) - 2 * ad @ bd.transpose(-1, -2)
        nn_ab = approx.argmin(dim=-1)
        nn_ba = approx.argmin(dim=-2)
        if autodiff.monitoring():
            autodiff.note_branch(nn_ab)
            autodiff.note_branch(nn_ba)
    ab = ((a - _take(b, nn_ab)) ** 2).sum(-1)
    ba = ((b - _take(a, nn_ba)) ** 2).sum(-1)
    return ab.mean(-1) + ba.mean(-1)


def _take(points: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``points[..., idx[..., i], :]`` with matching leading dims."""
    return torch.gather(points, -2, idx.unsqueeze(-1).expand(*idx.shape, points.shape[-1]))


def pose_losses(T, S, T_gt, S_gt) -> tuple[torch.Tensor, torch.Tensor]:
    """Squared errors of translation and scale."""
    L_T = ((_t(T) - _t(T_gt)) ** 2).sum(-1)
    L_S = (_t(S) - _t(S_gt)) ** 2
    return L_T, L_S


def total_loss(hand_vert, hand_joint, obj_chamfer, L_T, L_S):
    """Unit-weight sum of the hand and object terms."""
    return (hand_vert + hand_joint) + (obj_chamfer + L_T + L_S)


# -- evaluation metrics ------------------------------------------------------

@dataclass
class MetricsReport:
    hand_joint_err: float
    hand_vert_err: float
    object_chamfer: float
    max_penetration: float
    intersection_volume: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def mean_vertex_error(pred, gt) -> float:
    """Mean end-point error in metres."""
    return float(np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1).mean())


def _boxes_overlap(a: Mesh, b: Mesh) -> bool:
    amin, amax = a.bbox()
    bmin, bmax = b.bbox()
    return bool(np.all(amin <= bmax) and np.all(bmin <= amax))


def inside_depths(points, mesh: Mesh) -> np.ndarray:
    """Per point: distance to the closest triangle if inside ``mesh``, else 0."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    depth = np.zeros(len(points))
    inside = contains(points, mesh)
    if inside.any():
        depth[inside] = point_triangle_distance(points[inside], mesh)
    return depth


def point_mesh_inside_depth(p, mesh: Mesh) -> float:
    return float(inside_depths(np.asarray(p, dtype=np.float64)[None], mesh)[0])


def max_penetration(hand: Mesh, obj: Mesh) -> float:
    """Deepest hand vertex inside the object, 0 when none is."""
    if not _boxes_overlap(hand, obj):
        return 0.0
    return float(inside_depths(hand.vertices, obj).max(initial=0.0))


def intersection_volume(hand: Mesh, obj: Mesh, voxel: float = VOXEL_SIZE) -> float:
    """Volume in cm^3 of voxels whose centres lie inside both meshes.

    The grid is anchored at the min corner of the joint bounding box.
    """
    if not _boxes_overlap(hand, obj):
        return 0.0
    hmin, hmax = hand.bbox()
    omin, omax = obj.bbox()
    lo = np.minimum(hmin, omin)
    hi = np.maximum(hmax, omax)
    counts = np.ceil((hi - lo) / voxel).astype(int)
    axes = [lo[i] + (np.arange(counts[i]) + 0.5) * voxel for i in range(3)]
    # only centres inside the overlap box can be inside both meshes
    olo, ohi = np.maximum(hmin, omin), np.minimum(hmax, omax)
    axes = [a[(a >= olo[i]) & (a <= ohi[i])] for i, a in enumerate(axes)]
    if any(len(a) == 0 for a in axes):
        return 0.0
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = contains(centres, hand)
    if inside.any():
        inside[inside] = contains(centres[inside], obj)
    return float(inside.sum() * voxel ** 3 * 1e6)
