"""Deterministic toy hand-object scenes.

Random streams come from numpy's Philox counter-based generator. Each stream is
keyed by ``SeedSequence([seed, purpose])`` with the purpose ids below, so any
scene can be regenerated in isolation and the same seed gives the same scene on
every platform.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .layers import ImageFeatures
from .manifold import DTYPE
from .mesh import Mesh, icosphere, triangle_areas

# stream purposes
GEOMETRY, FEATURES, PERTURB, INIT, ENCODER = 0, 1, 2, 3, 4
ENCODER_SEED = 20230817  # the frozen "image encoder" is one fixed draw for all scenes

HAND_KEYPOINTS = tuple(range(0, 161, 8))  # 21 fixed template vertices

TRAIN_SEEDS = range(0, 256)
EVAL_SEEDS = range(256, 288)


def stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(purpose)])))


@dataclass(frozen=True)
class SceneConfig:
    subdivisions: int = 2
    hand_axes: tuple[float, float, float] = (0.08, 0.04, 0.03)
    object_radius: float = 0.04
    gap_range: float = 0.005
    noise_sigma: float = 0.005
    object_offset: float = 0.01
    shallow_count: int = 128
    deep_count: int = 64
    shallow_dim: int = 32
    deep_dim: int = 64
    global_dim: int = 64
    feature_noise: float = 0.01


@dataclass
class SceneSample:
    seed: int
    gt_hand: Mesh
    gt_object: Mesh
    init_hand: Mesh
    init_object: Mesh
    features: ImageFeatures  # numpy arrays: shallow, deep_hand, deep_obj
    global_feat: np.ndarray
    T: np.ndarray
    S: float
    gap: float = field(default=0.0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (
            self.gt_hand.vertices, self.gt_hand.faces, self.gt_object.vertices, self.gt_object.faces,
            self.init_hand.vertices, self.init_object.vertices, *self.features, self.global_feat, self.T,
            np.array([self.S, self.gap]),
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _unit(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def hand_template(cfg: SceneConfig = SceneConfig()) -> Mesh:
    v, f = icosphere(cfg.subdivisions)
    return Mesh(v * np.asarray(cfg.hand_axes), f, HAND_KEYPOINTS)


def place_object(cfg: SceneConfig, rng, gap: float | None = None) -> tuple[np.ndarray, float]:
    """Object centre on the outward normal of a random hand-surface point, at the given surface gap."""
    axes = np.asarray(cfg.hand_axes)
    u = _unit(rng)
    p = u / np.sqrt(((u / axes) ** 2).sum())
    n = p / axes ** 2
    n /= np.linalg.norm(n)
    drawn = rng.uniform(-cfg.gap_range, cfg.gap_range)
    gap = drawn if gap is None else gap
    return p + n * (cfg.object_radius + gap), gap


def sample_surface(mesh: Mesh, count: int, rng) -> np.ndarray:
    """Area-weighted uniform samples on the triangles."""
    areas = triangle_areas(mesh.vertices, mesh.faces)
    tri = mesh.triangles[rng.choice(len(areas), size=count, p=areas / areas.sum())]
    r1 = np.sqrt(rng.uniform(size=(count, 1)))
    r2 = rng.uniform(size=(count, 1))
    return (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]


@dataclass(frozen=True)
class Encoder:
    """Fixed affine maps standing in for the image encoders."""

    deep_W: np.ndarray  # (deep_dim, 3); the shallow map shares its first rows
    deep_b: np.ndarray
    global_W: np.ndarray  # (global_dim, 6)
    shallow_dim: int

    @property
    def shallow_W(self):
        return self.deep_W[: self.shallow_dim]

    @property
    def shallow_b(self):
        return self.deep_b[: self.shallow_dim]


def make_encoder(cfg: SceneConfig = SceneConfig()) -> Encoder:
    rng = stream(ENCODER_SEED, ENCODER)
    return Encoder(
        deep_W=rng.standard_normal((cfg.deep_dim, 3)),
        deep_b=0.1 * rng.standard_normal(cfg.deep_dim),
        global_W=rng.standard_normal((cfg.global_dim, 6)),
        shallow_dim=cfg.shallow_dim,
    )


def pseudo_image_features(
    gt_hand: Mesh, gt_object: Mesh, seed: int, cfg: SceneConfig = SceneConfig(), encoder: Encoder | None = None
) -> tuple[ImageFeatures, np.ndarray]:
    """Geometry-correlated feature sets: surface samples through fixed affines plus noise."""
    enc = encoder or make_encoder(cfg)
    rng = stream(seed, FEATURES)
    joint = Mesh(
        np.concatenate([gt_hand.vertices, gt_object.vertices]),
        np.concatenate([gt_hand.faces, gt_object.faces + len(gt_hand.vertices)]),
    )
    pts_s = sample_surface(joint, cfg.shallow_count, rng)
    pts_h = sample_surface(gt_hand, cfg.deep_count, rng)
    pts_o = sample_surface(gt_object, cfg.deep_count, rng)
    sigma = cfg.feature_noise
    shallow = pts_s @ enc.shallow_W.T + enc.shallow_b + sigma * rng.standard_normal((cfg.shallow_count, cfg.shallow_dim))
    deep_h = pts_h @ enc.deep_W.T + enc.deep_b + sigma * rng.standard_normal((cfg.deep_count, cfg.deep_dim))
    deep_o = pts_o @ enc.deep_W.T + enc.deep_b + sigma * rng.standard_normal((cfg.deep_count, cfg.deep_dim))
    pooled = np.concatenate([pts_h.mean(axis=0), pts_o.mean(axis=0)])
    global_feat = enc.global_W @ pooled + sigma * rng.standard_normal(cfg.global_dim)
    return ImageFeatures(shallow, deep_h, deep_o), global_feat


def perturb_initial(gt_hand: Mesh, gt_object: Mesh, seed: int, cfg: SceneConfig = SceneConfig()) -> tuple[Mesh, Mesh]:
    """Gaussian vertex noise on both meshes plus a rigid shift of the object."""
    rng = stream(seed, PERTURB)
    s = cfg.noise_sigma
    hand = gt_hand.vertices + s * rng.standard_normal(gt_hand.vertices.shape)
    obj = gt_object.vertices + s * rng.standard_normal(gt_object.vertices.shape)
    obj = obj + cfg.object_offset * _unit(rng)
    return gt_hand.with_vertices(hand), gt_object.with_vertices(obj)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(), gap: float | None = None) -> SceneSample:
    rng = stream(seed, GEOMETRY)
    hand = hand_template(cfg)
    centre, gap = place_object(cfg, rng, gap)
    v, f = icosphere(cfg.subdivisions)
    obj = Mesh(v * cfg.object_radius + centre, f)
    T = obj.vertices.mean(axis=0) - hand.vertices.mean(axis=0)
    S = float(np.linalg.norm(obj.vertices - obj.vertices.mean(axis=0), axis=1).max())
    feats, global_feat = pseudo_image_features(hand, obj, seed, cfg)
    init_hand, init_obj = perturb_initial(hand, obj, seed, cfg)
    return SceneSample(seed, hand, obj, init_hand, init_obj, feats, global_feat, T, S, gap)


@dataclass
class SceneBatch:
    """Scenes stacked along a leading axis as torch tensors."""

    seeds: list[int]
    gt_hand: torch.Tensor
    gt_obj: torch.Tensor
    init_hand: torch.Tensor
    init_obj: torch.Tensor
    features: ImageFeatures
    global_feat: torch.Tensor
    T: torch.Tensor
    S: torch.Tensor
    keypoints: tuple[int, ...]

    def __len__(self):
        return len(self.seeds)

    def select(self, idx) -> "SceneBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SceneBatch(
            [self.seeds[i] for i in idx.tolist()],
            self.gt_hand[idx], self.gt_obj[idx], self.init_hand[idx], self.init_obj[idx],
            ImageFeatures(*(f[idx] for f in self.features)),
            self.global_feat[idx], self.T[idx], self.S[idx], self.keypoints,
        )


def stack_scenes(scenes: list[SceneSample]) -> SceneBatch:
    t = lambda xs: torch.as_tensor(np.stack(xs), dtype=DTYPE)  # noqa: E731
    return SceneBatch(
        [s.seed for s in scenes],
        t([s.gt_hand.vertices for s in scenes]),
        t([s.gt_object.vertices for s in scenes]),
        t([s.init_hand.vertices for s in scenes]),
        t([s.init_object.vertices for s in scenes]),
        ImageFeatures(*(t([s.features[i] for s in scenes]) for i in range(3))),
        t([s.global_feat for s in scenes]),
        t([s.T for s in scenes]),
        torch.as_tensor([s.S for s in scenes], dtype=DTYPE),
        scenes[0].gt_hand.keypoints,
    )
