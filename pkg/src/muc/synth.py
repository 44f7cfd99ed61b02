"""Synthetic multi-view scenes standing in for a frozen single-view encoder.

Each scene has a ground-truth body, a ring of cameras around it and one
corrupted parameter estimate per camera. Rotation noise grows with the
joint's normalised depth in that camera, which is the self-occlusion proxy
the joint scorer is meant to pick up. Per-view feature vectors carry a
noisy linear embedding of those noise scales.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .body_model import BodyModelAsset, ParamSet, lbs_forward
from .camera import MIN_DEPTH, CameraParams, project_points
from .jrn import ViewFeature

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "muc-scenes"
DATASET_VERSION = 1


class SceneSamplingError(RuntimeError):
    pass


class DatasetError(IOError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    base_sigma_rot: float = 0.03
    distance_gain: float = 0.45
    sigma_shape: float = 2.0
    sigma_face: float = 2.0
    feature_informativeness: float = 0.9

    def __post_init__(self):
        vals = (self.base_sigma_rot, self.distance_gain, self.sigma_shape, self.sigma_face,
                self.feature_informativeness)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"noise settings must be finite and nonnegative: {self}")
        if self.base_sigma_rot + self.distance_gain > 0.5:
            raise ValueError("base_sigma_rot + distance_gain must not exceed 0.5 rad")
        if self.feature_informativeness > 1:
            raise ValueError("feature_informativeness must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneLayout:
    """Camera ring and ground-truth sampling ranges."""

    radius: tuple[float, float] = (2.0, 4.0)
    height: tuple[float, float] = (0.6, 1.8)
    angle_jitter: float = 0.3
    focal: tuple[float, float] = (450.0, 550.0)
    pose_range: float = 0.35
    root_range: float = 0.2
    task_dim: int = 32
    hand_dim: int = 16
    embedding_seed: int = 1234
    max_retries: int = 20


@dataclass(frozen=True, eq=False)
class SceneSample:
    scene_id: str
    gt_params: ParamSet
    cameras: list
    view_estimates: list
    view_features: list
    gt_joints2d: list
    split: str = "train"

    def __post_init__(self):
        n = len(self.cameras)
        if n < 1:
            raise ValueError("a scene needs at least one camera")
        if not (len(self.view_estimates) == len(self.view_features) == len(self.gt_joints2d) == n):
            raise ValueError("per-view lists must all have one entry per camera")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def equals(self, other: "SceneSample") -> bool:
        return (self.scene_id == other.scene_id and self.split == other.split
                and self.n_cameras == other.n_cameras
                and self.gt_params.equals(other.gt_params)
                and all(a.equals(b) for a, b in zip(self.cameras, other.cameras))
                and all(a.equals(b) for a, b in zip(self.view_estimates, other.view_estimates))
                and all(np.array_equal(a.task_feature, b.task_feature)
                        and np.array_equal(a.hand_feature, b.hand_feature)
                        for a, b in zip(self.view_features, other.view_features))
                and all(np.array_equal(a, b) for a, b in zip(self.gt_joints2d, other.gt_joints2d)))


def feature_embedding(layout: SceneLayout, num_body: int, num_hand: int):
    """Fixed affine maps from standardised noise scales to feature space."""
    rng = np.random.default_rng(layout.embedding_seed)
    A_task = rng.normal(size=(layout.task_dim, num_body)) / np.sqrt(num_body)
    b_task = rng.normal(size=layout.task_dim) * 0.1
    A_hand = rng.normal(size=(layout.hand_dim, num_hand)) / np.sqrt(num_hand)
    b_hand = rng.normal(size=layout.hand_dim) * 0.1
    return A_task, b_task, A_hand, b_hand


def _ring_cameras(rng: np.random.Generator, n: int, target: np.ndarray, layout: SceneLayout):
    phase = rng.uniform(0.0, 2 * np.pi)
    cams = []
    for c in range(n):
        ang = phase + 2 * np.pi * c / n + rng.uniform(-layout.angle_jitter, layout.angle_jitter)
        r = rng.uniform(*layout.radius)
        pos = np.array([r * np.cos(ang), r * np.sin(ang), rng.uniform(*layout.height)])
        f = rng.uniform(*layout.focal)
        aim = target + rng.normal(scale=0.05, size=3)
        cams.append(CameraParams.look_at(pos + target * np.array([1.0, 1.0, 0.0]), aim,
                                         focal=(f, f), principal=(256.0, 256.0)))
    return cams


def view_noise_scales(camera: CameraParams, joints: np.ndarray, asset: BodyModelAsset,
                      noise: NoiseConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """(body sigmas, hand sigmas, mean body-joint depth) for one view.

    Hand joints reuse the body table's minimum and range, clipped to [0, 1].
    """
    depth = camera.to_camera(joints)[:, 2]
    d_body = depth[asset.body_joint_ids]
    lo, span = d_body.min(), d_body.max() - d_body.min()
    if span > 0:
        nb = (d_body - lo) / span
        nh = np.clip((depth[asset.hand_joint_ids] - lo) / span, 0.0, 1.0)
    else:
        nb = np.zeros_like(d_body)
        nh = np.zeros(len(asset.hand_joint_ids))
    sig_b = noise.base_sigma_rot + noise.distance_gain * nb
    sig_h = noise.base_sigma_rot + noise.distance_gain * nh
    return sig_b, sig_h, float(d_body.mean())


def sample_scene(asset: BodyModelAsset, n_cameras: int, noise: NoiseConfig, seed: int,
                 scene_id: str | None = None, split: str = "train",
                 layout: SceneLayout = SceneLayout()) -> SceneSample:
    if not 1 <= n_cameras <= 8:
        raise ValueError(f"n_cameras must be in [1, 8], got {n_cameras}")
    rng = np.random.default_rng(seed)
    nb, nh = len(asset.body_joint_ids), len(asset.hand_joint_ids)
    n_shape, n_face = asset.shape_dirs.shape[2], asset.expr_dirs.shape[2]

    p_body = rng.uniform(-layout.pose_range, layout.pose_range, size=(nb, 3))
    p_body[0] = rng.uniform(-layout.root_range, layout.root_range, size=3)
    gt = ParamSet(p_body, rng.uniform(-layout.pose_range, layout.pose_range, size=(nh, 3)),
                  rng.normal(size=n_shape), rng.normal(size=n_face))
    body = lbs_forward(asset, gt)
    target = body.joints[asset.body_joint_ids].mean(0)

    for _ in range(layout.max_retries):
        cams = _ring_cameras(rng, n_cameras, target, layout)
        pts = np.concatenate([body.joints, body.vertices])
        if all(c.to_camera(pts)[:, 2].min() > MIN_DEPTH for c in cams):
            break
    else:
        raise SceneSamplingError(f"could not place {n_cameras} cameras in front of the body "
                                 f"after {layout.max_retries} attempts")

    A_t, b_t, A_h, b_h = feature_embedding(layout, nb, nh)
    alpha = noise.feature_informativeness
    span = noise.distance_gain if noise.distance_gain > 0 else 1.0
    estimates, features, joints2d = [], [], []
    for cam in cams:
        sig_b, sig_h, mean_depth = view_noise_scales(cam, body.joints, asset, noise)
        depth_gain = mean_depth / 3.0
        est = ParamSet(gt.p_body + rng.normal(size=(nb, 3)) * sig_b[:, None],
                       gt.p_hand + rng.normal(size=(nh, 3)) * sig_h[:, None],
                       gt.p_shape + rng.normal(size=n_shape) * noise.sigma_shape * depth_gain,
                       gt.p_face + rng.normal(size=n_face) * noise.sigma_face * depth_gain,
                       cam)
        # standardised noise scale in [-1, 1]
        z_b = 2.0 * (sig_b - noise.base_sigma_rot) / span - 1.0
        z_h = 2.0 * (sig_h - noise.base_sigma_rot) / span - 1.0
        task = alpha * (A_t @ z_b + b_t) + (1 - alpha) * rng.normal(size=layout.task_dim)
        hand = alpha * (A_h @ z_h + b_h) + (1 - alpha) * rng.normal(size=layout.hand_dim)
        estimates.append(est)
        features.append(ViewFeature(task, hand))
        joints2d.append(project_points(cam, body.joints))
    return SceneSample(scene_id if scene_id is not None else f"scene-{seed}",
                       gt.replace(p_camera=cams[0]), cams, estimates, features, joints2d, split)


def generate_dataset(asset: BodyModelAsset, count: int, n_cameras: int, noise: NoiseConfig, seed: int,
                     split: str = "train", layout: SceneLayout = SceneLayout()) -> list[SceneSample]:
    """Scenes with per-scene seeds ``seed + index``."""
    return [sample_scene(asset, n_cameras, noise, seed + i, f"{split}-{i:05d}", split, layout)
            for i in range(count)]


# ---------------------------------------------------------------------------
# Dataset files: a JSON header line, then one JSON record per scene
# ---------------------------------------------------------------------------
def _enc(arr) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "f64": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(obj) -> np.ndarray:
    raw = base64.b64decode(obj["f64"].encode("ascii"), validate=True)
    shape = tuple(obj["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise DatasetError("array payload does not match its shape")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _cam_to_json(c: CameraParams) -> dict:
    return {"rotation": _enc(c.rotation), "translation": _enc(c.translation), "focal": _enc(c.focal),
            "principal": _enc(c.principal), "image_size": list(c.image_size)}


def _cam_from_json(d) -> CameraParams:
    return CameraParams(_dec(d["rotation"]), _dec(d["translation"]), _dec(d["focal"]),
                        _dec(d["principal"]), tuple(d["image_size"]))


def _params_to_json(p: ParamSet) -> dict:
    return {"p_body": _enc(p.p_body), "p_hand": _enc(p.p_hand), "p_shape": _enc(p.p_shape),
            "p_face": _enc(p.p_face), "p_camera": None if p.p_camera is None else _cam_to_json(p.p_camera)}


def _params_from_json(d) -> ParamSet:
    cam = None if d["p_camera"] is None else _cam_from_json(d["p_camera"])
    return ParamSet(_dec(d["p_body"]), _dec(d["p_hand"]), _dec(d["p_shape"]), _dec(d["p_face"]), cam)


def scene_to_json(s: SceneSample) -> dict:
    return {
        "scene_id": s.scene_id, "split": s.split,
        "gt_params": _params_to_json(s.gt_params),
        "cameras": [_cam_to_json(c) for c in s.cameras],
        "view_estimates": [_params_to_json(p) for p in s.view_estimates],
        "view_features": [{"task": _enc(f.task_feature), "hand": _enc(f.hand_feature)} for f in s.view_features],
        "gt_joints2d": [_enc(j) for j in s.gt_joints2d],
    }


def scene_from_json(d) -> SceneSample:
    return SceneSample(d["scene_id"], _params_from_json(d["gt_params"]),
                       [_cam_from_json(c) for c in d["cameras"]],
                       [_params_from_json(p) for p in d["view_estimates"]],
                       [ViewFeature(_dec(f["task"]), _dec(f["hand"])) for f in d["view_features"]],
                       [_dec(j) for j in d["gt_joints2d"]], d["split"])


def save_dataset(samples: Sequence[SceneSample], path, asset: BodyModelAsset) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "asset_hash": asset.digest(), "count": len(samples)}
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            f.write(json.dumps(scene_to_json(s), sort_keys=True) + "\n")


def read_dataset_header(path) -> dict:
    with open(path) as f:
        line = f.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: unreadable header") from e
    if header.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported version {header.get('version')}")
    return header


def load_dataset(path, asset: BodyModelAsset | None = None, split: str | None = None) -> list[SceneSample]:
    """Read scenes back; checks the record count and, if given, the asset hash."""
    path = Path(path)
    header = read_dataset_header(path)
    if asset is not None and header["asset_hash"] != asset.digest():
        raise DatasetError(f"{path}: dataset was generated for a different body asset")
    lines = path.read_text().split("\n")[1:]
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) != header["count"]:
        raise DatasetError(f"{path}: expected {header['count']} records, found {len(lines)} (truncated?)")
    out = []
    for i, line in enumerate(lines):
        try:
            s = scene_from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise DatasetError(f"{path}: record {i} is malformed: {e}") from e
        if split is None or s.split == split:
            out.append(s)
    return out

