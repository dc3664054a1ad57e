"""Training and evaluation of the two-branch refinement model on toy scenes."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .autodiff import Tape, backward
from .config import Config
from .layers import (
    ModelOutput,
    ModelParams,
    ball_names,
    dhgc_layer,
    flatten,
    ihgc_forward,
    init_model,
    make_space,
    model_forward,
    refinement_head,
    unflatten,
)
from .mesh import Mesh
from .objectives import (
    MetricsReport,
    chamfer_distance,
    intersection_volume,
    keypoint_loss,
    l2_vertex_loss,
    max_penetration,
    mean_vertex_error,
    pose_losses,
    total_loss,
)
from .optim import Optimizer
from .synthetic import INIT, SceneBatch, generate_scene, stack_scenes, stream

log = logging.getLogger(__name__)

SHUFFLE = 5  # stream purpose for minibatch order
LOG_FIELDS = ("epoch", "total_loss", "hand_vert_err", "chamfer")


class NonFiniteLoss(FloatingPointError):
    pass


def configure_threads() -> int:
    n = int(os.environ.get("HYPERMESH_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)
    return torch.get_num_threads()


def build_scenes(cfg: Config, seeds) -> SceneBatch:
    return stack_scenes([generate_scene(s, cfg.scene) for s in seeds])


def forward(params: ModelParams, batch: SceneBatch, cfg: Config) -> ModelOutput:
    space = make_space(cfg.space, cfg.curvature)
    return model_forward(
        params, batch.init_hand, batch.init_obj, batch.features, batch.global_feat, cfg.k, space, cfg.coord_scale
    )


def loss_terms(out: ModelOutput, batch: SceneBatch) -> dict[str, torch.Tensor]:
    """Per-scene loss components, each of shape ``(B,)``."""
    L_T, L_S = pose_losses(out.T, out.S, batch.T, batch.S)
    return {
        "hand_vert": l2_vertex_loss(out.hand, batch.gt_hand),
        "hand_joint": keypoint_loss(out.hand, batch.gt_hand, batch.keypoints),
        "obj_chamfer": chamfer_distance(out.obj, batch.gt_obj),
        "T": L_T,
        "S": L_S,
    }


def batch_loss(terms: dict[str, torch.Tensor]) -> torch.Tensor:
    return total_loss(terms["hand_vert"], terms["hand_joint"], terms["obj_chamfer"], terms["T"], terms["S"]).mean()


def diagnose_nonfinite(params: ModelParams, batch: SceneBatch, cfg: Config) -> str:
    """Re-run the forward stage by stage and name the first one producing NaN/Inf."""
    space = make_space(cfg.space, cfg.curvature)
    with torch.no_grad():
        for branch_name, branch, verts, swap in (
            ("hand", params.hand, batch.init_hand, False),
            ("obj", params.obj, batch.init_obj, True),
        ):
            feats = verts * cfg.coord_scale
            ball = None
            for i, layer in enumerate(branch.dhgc.layers):
                feats, ball = dhgc_layer(feats, layer, cfg.k, space)
                if not torch.isfinite(ball).all():
                    return f"{branch_name}.dhgc_layer[{i}]"
            f32 = ihgc_forward(ball, batch.features, branch.ihgc, cfg.k, space, swap_roles=swap)
            if not torch.isfinite(f32).all():
                return f"{branch_name}.ihgc_forward"
            head = refinement_head(f32, batch.global_feat, branch.head, verts * cfg.coord_scale)
            if not all(torch.isfinite(t).all() for t in head if t is not None):
                return f"{branch_name}.refinement_head"
        terms = loss_terms(forward(params, batch, cfg), batch)
        for name, value in terms.items():
            if not torch.isfinite(value).all():
                return f"loss.{name}"
    return "unknown"


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: Optimizer
    log_rows: list[dict]


def train(cfg: Config, progress=None) -> TrainResult:
    params = init_model(stream(cfg.seed, INIT), cfg.architecture)
    names_ball = ball_names(params) if cfg.space == "hyperbolic" else set()
    flat = flatten(params)
    opt = Optimizer(flat, names_ball, cfg.curvature, lr=cfg.lr)
    rows: list[dict] = []
    if cfg.epochs == 0:
        return TrainResult(params, opt, rows)

    data = build_scenes(cfg, cfg.train_seeds)
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed * 100003 + epoch, SHUFFLE).permutation(n)
        sums = {"total_loss": 0.0, "hand_vert_err": 0.0, "chamfer": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = data.select(order[start:start + cfg.batch_size])
            tape = Tape()
            leaves = {name: tape.watch(name, t) for name, t in flat.items()}
            live = unflatten(params, leaves)
            out = forward(live, batch, cfg)
            terms = loss_terms(out, batch)
            loss = batch_loss(terms)
            if not torch.isfinite(loss):
                where = diagnose_nonfinite(live, batch, cfg)
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}; first non-finite op: {where}")
            grads = backward(tape, loss)
            flat = opt.step(flat, grads)
            params = unflatten(params, flat)
            b = len(batch)
            with torch.no_grad():
                sums["total_loss"] += float(loss) * b
                sums["hand_vert_err"] += float(torch.linalg.norm(out.hand - batch.gt_hand, dim=-1).mean(-1).sum())
                sums["chamfer"] += float(terms["obj_chamfer"].sum())
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        rows.append(row)
        if progress:
            progress(row)
        if cfg.lr_decay_epoch and epoch == cfg.lr_decay_epoch:
            opt.lr = opt.lr * cfg.lr_decay_factor
    return TrainResult(params, opt, rows)


def checkpoint_tensors(params: ModelParams, opt: Optimizer) -> dict[str, torch.Tensor]:
    return {**flatten(params), **opt.state_tensors()}


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for r in rows:
        writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def run_training(cfg: Config, progress=None) -> Path:
    """Train and write ``checkpoint.txt``, ``log.csv`` and ``config.txt`` into ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    result = train(cfg, progress)
    checkpoint.save(out / "checkpoint.txt", checkpoint_tensors(result.params, result.optimizer))
    (out / "log.csv").write_text(format_log(result.log_rows))
    return out / "checkpoint.txt"


def load_params(path, cfg: Config) -> ModelParams:
    tensors = checkpoint.load(path)
    template = init_model(stream(cfg.seed, INIT), cfg.architecture)
    return unflatten(template, tensors)


def scene_metrics(pred_hand: np.ndarray, pred_obj: np.ndarray, scene) -> MetricsReport:
    kp = list(scene.gt_hand.keypoints)
    hand = scene.gt_hand.with_vertices(pred_hand)
    obj = scene.gt_object.with_vertices(pred_obj)
    return MetricsReport(
        hand_joint_err=mean_vertex_error(pred_hand[kp], scene.gt_hand.vertices[kp]),
        hand_vert_err=mean_vertex_error(pred_hand, scene.gt_hand.vertices),
        object_chamfer=float(chamfer_distance(scene.gt_object.vertices, pred_obj)),
        max_penetration=max_penetration(hand, obj),
        intersection_volume=intersection_volume(hand, obj),
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    keys = MetricsReport.__dataclass_fields__
    return MetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def evaluate(cfg: Config, params: ModelParams | None, oracle: bool = False) -> MetricsReport:
    """Mean metrics over the eval seeds; ``params=None`` with ``oracle`` passes ground truth through."""
    scenes = [generate_scene(s, cfg.scene) for s in cfg.eval_seeds]
    if oracle:
        return mean_report([scene_metrics(s.gt_hand.vertices, s.gt_object.vertices, s) for s in scenes])
    batch = stack_scenes(scenes)
    reports = []
    with torch.no_grad():
        for start in range(0, len(scenes), cfg.batch_size):
            sub = batch.select(range(start, min(start + cfg.batch_size, len(scenes))))
            out = forward(params, sub, cfg)
            for i, scene in enumerate(scenes[start:start + len(sub)]):
                reports.append(scene_metrics(out.hand[i].numpy(), out.obj[i].numpy(), scene))
    return mean_report(reports)


def initial_metrics(cfg: Config) -> MetricsReport:
    """Metrics of the perturbed initial meshes themselves."""
    scenes = [generate_scene(s, cfg.scene) for s in cfg.eval_seeds]
    return mean_report([scene_metrics(s.init_hand.vertices, s.init_object.vertices, s) for s in scenes])


def scene_mesh_pair(params: ModelParams, scene, cfg: Config) -> tuple[Mesh, Mesh]:
    batch = stack_scenes([scene])
    with torch.no_grad():
        out = forward(params, batch, cfg)
    return scene.gt_hand.with_vertices(out.hand[0].numpy()), scene.gt_object.with_vertices(out.obj[0].numpy())
