"""Joint reweighting: per-view joint scores and score-weighted parameter fusion.

Each camera gets a positive score per body joint (and per hand joint, or
per hand). Fused rotations are score-weighted means of the per-view
axis-angle estimates. The scorer is trained partly with a KL loss that
pulls the softmax of its logits over cameras towards a target built from
how far each joint is from each camera.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraParams, JointDistanceTable, camera_condition_vector
from .nn import Mlp, MlpSpec, Module

Q_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ViewFeature:
    """Per-view descriptors standing in for the encoder's task and hand tokens."""

    task_feature: np.ndarray
    hand_feature: np.ndarray

    def __post_init__(self):
        for name in ("task_feature", "hand_feature"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    body_scores: np.ndarray
    hand_scores: np.ndarray
    body_logits: np.ndarray
    hand_logits: np.ndarray


def hand_group_map(hands_per_side: int, mode: str = "joint") -> np.ndarray:
    """Score group of each hand joint: one per joint, or one per hand."""
    if mode == "joint":
        return np.arange(2 * hands_per_side)
    if mode == "hand":
        return np.repeat([0, 1], hands_per_side)
    raise ValueError(f"unknown hand score mode {mode!r}")


def rotation_group_map(joint_groups: np.ndarray) -> np.ndarray:
    """Expand a per-joint group map to the flattened (joint, xyz) parameter layout."""
    return np.repeat(np.asarray(joint_groups, dtype=np.int64), 3)


class Jrn(Module):
    """Two score heads: body (21 joints) and hand, each conditioned on the camera.

    Heads output raw logits; scores are ``softplus(logits)``. The final
    layers start at zero so an untrained network weights all views equally.
    """

    def __init__(self, task_dim: int = 32, hand_dim: int = 16, num_body: int = 21,
                 hands_per_side: int = 2, hidden: Sequence[int] = (64, 64), activation: str = "gelu",
                 hand_mode: str = "joint", cond_dim: int = 9, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.task_dim, self.hand_dim, self.cond_dim = task_dim, hand_dim, cond_dim
        self.hand_mode = hand_mode
        self.hand_groups = hand_group_map(hands_per_side, hand_mode)
        n_hand_out = int(self.hand_groups.max()) + 1
        self.body = Mlp(MlpSpec((task_dim + cond_dim, *hidden, num_body), activation), rng, zero_last=True)
        self.hand = Mlp(MlpSpec((hand_dim + cond_dim, *hidden, n_hand_out), activation), rng, zero_last=True)
        self.params = {**{f"body.{k}": v for k, v in self.body.params.items()},
                       **{f"hand.{k}": v for k, v in self.hand.params.items()}}

    def logits(self, task_features, hand_features, conditions) -> tuple[Tensor, Tensor]:
        """Rows are views; returns (body logits, hand logits)."""
        cond = ad.as_tensor(conditions)
        body_in = ad.concat([ad.as_tensor(task_features), cond], axis=-1)
        hand_in = ad.concat([ad.as_tensor(hand_features), cond], axis=-1)
        return self.body(body_in), self.hand(hand_in)


def jrn_scores(jrn: Jrn, features: Sequence[ViewFeature], cameras: Sequence[CameraParams]) -> ScoreMatrix:
    if len(features) == 0 or len(features) != len(cameras):
        raise ValueError("need one feature record per camera and at least one view")
    task = np.stack([f.task_feature for f in features])
    hand = np.stack([f.hand_feature for f in features])
    if task.shape[1] != jrn.task_dim or hand.shape[1] != jrn.hand_dim:
        raise ValueError(f"feature lengths {task.shape[1]}/{hand.shape[1]} do not match "
                         f"network inputs {jrn.task_dim}/{jrn.hand_dim}")
    cond = np.stack([camera_condition_vector(c) for c in cameras])
    with ad.no_grad():
        bl, hl = jrn.logits(task, hand, cond)
    return ScoreMatrix(np.logaddexp(0.0, bl.data), np.logaddexp(0.0, hl.data), bl.data, hl.data)


def fuse_weighted(param_stack, scores, group_map):
    """Score-weighted mean over views (axis -2) with per-parameter score groups.

    ``param_stack`` is (..., N, P), ``scores`` (..., N, G) and ``group_map``
    gives the score group of each of the P parameters. Accepts arrays or
    tensors and returns the same kind.
    """
    group_map = np.asarray(group_map, dtype=np.int64)
    score_data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    n_groups = score_data.shape[-1]
    if group_map.size and (group_map.min() < 0 or group_map.max() >= n_groups):
        raise ValueError(f"group index out of range for {n_groups} score groups")
    if np.any(score_data <= 0):
        raise ValueError("fusion scores must be strictly positive")
    stack_shape = param_stack.shape
    if stack_shape[-1] != group_map.size or stack_shape[-2] != score_data.shape[-2]:
        raise ValueError(f"param stack {stack_shape} does not match scores {score_data.shape} / "
                         f"group map of length {group_map.size}")
    if not isinstance(param_stack, Tensor) and not isinstance(scores, Tensor):
        w = score_data[..., group_map]
        return (np.asarray(param_stack, dtype=np.float64) * w).sum(-2) / w.sum(-2)
    w = ad.as_tensor(scores)[..., group_map]
    return (ad.as_tensor(param_stack) * w).sum(-2) / w.sum(-2)


def target_distribution(tables: Sequence[JointDistanceTable] | np.ndarray, temperature: float = 0.5) -> np.ndarray:
    """Per-joint softmax over cameras of ``-normalized_distance / temperature``.

    Accepts distance tables or an (N, K) array of normalised distances.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(tables, np.ndarray):
        d = tables
    else:
        d = np.stack([t.normalized for t in tables])
    z = -d / temperature
    z = z - z.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def jrn_loss(logits, target):
    """Mean over joints of KL(softmax_cameras(logits) || target).

    ``logits`` is (..., N, K) raw score logits (or a :class:`ScoreMatrix`,
    whose body logits are used); ``target`` has the same shape with columns
    summing to one. Zeros in the target are clamped to 1e-12.
    """
    if isinstance(logits, ScoreMatrix):
        logits = logits.body_logits
    q = np.maximum(np.asarray(target, dtype=np.float64), Q_FLOOR)
    if q.shape != logits.shape:
        raise ValueError(f"target shape {q.shape} != logits shape {logits.shape}")
    as_array = not isinstance(logits, Tensor)
    log_p = ad.log_softmax(ad.as_tensor(logits), axis=-2)
    kl = (ad.exp(log_p) * (log_p - np.log(q))).sum(-2)
    loss = kl.mean()
    return loss.item() if as_array else loss
