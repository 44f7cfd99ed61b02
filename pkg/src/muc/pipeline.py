"""End-to-end orchestration: training, fused inference, evaluation sweeps,
gradient checks and mesh export.

Scenes are turned into stacked arrays once (``prepare``) and processed in
batches. The training graph covers the two score networks, both fusions
and all four losses. Per-view meshes for the surface branch are decoded
with plain numpy from the detached fused pose, so rasterisation is a
constant input stage.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .body_model import BodyModelAsset, ParamSet, PosedBody, lbs_forward, make_toy_asset, write_obj
from .camera import MIN_DEPTH, BehindCameraError, camera_condition_vector, joint_distance_table
from .config import RunConfig
from .jrn import Jrn, fuse_weighted, jrn_loss, rotation_group_map, target_distribution
from .metrics import MetricReport, evaluate_body, mean_report
from .nn import (Adam, AdamState, CheckpointError, Conv, CrossAttention, Mlp, MlpSpec, UNet, UNetSpec,
                 check_gradients, load_checkpoint, save_checkpoint)
from .srn import Srn, crop_indices, fuse_normals, fuse_param_vectors, raster_plan, apply_plan
from .synth import SceneSample

FUSION_MODES = ("full", "jrn_only", "uniform")
EVAL_CHUNK = 64


class TrainingNumericError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite value in epoch {epoch}, batch {batch}: {detail}")


def make_asset(cfg: RunConfig) -> BodyModelAsset:
    a = cfg.asset
    return make_toy_asset(a.num_vertices, a.num_joints, a.seed)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------
class MucModel:
    """JRN + SRN bound to one body asset and run configuration."""

    def __init__(self, cfg: RunConfig, asset: BodyModelAsset):
        self.cfg, self.asset = cfg, asset
        n_coeffs = asset.shape_dirs.shape[2]
        if asset.expr_dirs.shape[2] != n_coeffs:
            raise ValueError("shape and expression bases must have the same size")
        j, s = cfg.jrn, cfg.srn
        self.jrn = Jrn(j.task_dim, j.hand_dim, len(asset.body_joint_ids), asset.hands_per_side, j.hidden,
                       j.activation, j.hand_mode, seed=cfg.seed)
        self.srn = Srn(s.shape_res, s.face_res, s.base_channels, s.attn_dim, s.reducer_hidden, s.activation,
                       n_coeffs, seed=cfg.seed)
        self.params = {**{f"jrn.{k}": v for k, v in self.jrn.params.items()},
                       **{f"srn.{k}": v for k, v in self.srn.params.items()}}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, adam: AdamState | None = None, extra: dict | None = None) -> None:
        # the run location is not part of the model; keeping it out makes the file relocatable
        config = {k: v for k, v in self.cfg.to_dict().items() if k != "out_dir"}
        meta = {"config": config, "asset_hash": self.asset.digest(), **(extra or {})}
        save_checkpoint(path, self.state(), adam, meta)

    @classmethod
    def load(cls, path, asset: BodyModelAsset | None = None) -> tuple["MucModel", dict]:
        arrays, _, meta = load_checkpoint(path)
        try:
            cfg = RunConfig.from_dict(meta["config"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: checkpoint carries no usable config ({e})") from e
        asset = asset if asset is not None else make_asset(cfg)
        if meta.get("asset_hash") != asset.digest():
            raise CheckpointError(f"{path}: checkpoint was trained for a different body asset")
        model = cls(cfg, asset)
        if set(arrays) != set(model.params):
            raise CheckpointError(f"{path}: parameter names do not match the configured networks")
        for k, p in model.params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {p.shape}")
            p.data = np.array(arrays[k])
        return model, meta


# ---------------------------------------------------------------------------
# Stacked scene arrays
# ---------------------------------------------------------------------------
@dataclass
class SceneArrays:
    scene_ids: list
    task: np.ndarray          # (S, N, Dt)
    hand_feat: np.ndarray     # (S, N, Dh)
    cond: np.ndarray          # (S, N, 9)
    body: np.ndarray          # (S, N, nb, 3)
    hand: np.ndarray          # (S, N, nh, 3)
    shape: np.ndarray         # (S, N, 10)
    face: np.ndarray          # (S, N, 10)
    rot: np.ndarray           # (S, N, 3, 3)
    trans: np.ndarray         # (S, N, 3)
    focal: np.ndarray         # (S, N, 2)
    principal: np.ndarray     # (S, N, 2)
    joints2d: np.ndarray      # (S, N, J, 2)
    q_body: np.ndarray        # (S, N, nb)
    q_hand: np.ndarray        # (S, N, nh)
    gt_params: list
    gt_bodies: list
    gt_shape_map: np.ndarray  # (S, 3, U, V)
    gt_shape_mask: np.ndarray
    gt_face_map: np.ndarray   # (S, 3, U', V')
    gt_face_mask: np.ndarray
    cameras: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scene_ids)

    @property
    def n_views(self) -> int:
        return self.task.shape[1]

    def gt_flat(self) -> np.ndarray:
        return np.stack([p.flat() for p in self.gt_params])

    def subset(self, idx) -> "SceneArrays":
        idx = np.asarray(idx)
        out = {}
        for name, val in self.__dict__.items():
            if isinstance(val, np.ndarray):
                out[name] = val[idx]
            else:
                out[name] = [val[i] for i in idx]
        return SceneArrays(**out)


def map_resolutions(cfg: RunConfig) -> tuple[tuple[int, int], tuple[int, int]]:
    return tuple(cfg.srn.shape_res), tuple(cfg.srn.face_res)


def normal_maps(asset: BodyModelAsset, bodies: Sequence[PosedBody], shape_res, face_res):
    """Rasterised shape maps and face crops for a list of posed bodies."""
    plan = raster_plan(asset, tuple(shape_res))
    ii, jj = crop_indices(asset, tuple(shape_res), tuple(face_res))
    maps = np.stack([apply_plan(plan, asset.faces, b.vertex_normals) for b in bodies])
    mask = np.broadcast_to(plan.mask, (len(bodies),) + plan.mask.shape)
    face = maps[:, :, ii, jj]
    face_mask = mask[:, ii, jj]
    return maps, np.array(mask), face, np.array(face_mask)


def _hand_targets(asset: BodyModelAsset, cams, joints, temperature: float) -> np.ndarray:
    nd = []
    for cam in cams:
        depth = cam.to_camera(joints)[:, 2]
        db = depth[asset.body_joint_ids]
        lo, span = db.min(), db.max() - db.min()
        dh = depth[asset.hand_joint_ids]
        nd.append(np.clip((dh - lo) / span, 0.0, 1.0) if span > 0 else np.zeros_like(dh))
    return target_distribution(np.stack(nd), temperature)


def prepare(scenes: Sequence[SceneSample], asset: BodyModelAsset, cfg: RunConfig,
            k: int | None = None) -> SceneArrays:
    """Stack the first ``k`` views of every scene (all views if ``k`` is None)."""
    if not scenes:
        raise ValueError("no scenes to prepare")
    n_min = min(s.n_cameras for s in scenes)
    k = n_min if k is None else k
    if not 1 <= k <= n_min:
        raise ValueError(f"k must be in [1, {n_min}], got {k}")
    shape_res, face_res = map_resolutions(cfg)
    gt_bodies = [lbs_forward(asset, s.gt_params) for s in scenes]
    gmaps, gmask, gface, gfmask = normal_maps(asset, gt_bodies, shape_res, face_res)
    cols = {n: [] for n in ("task", "hand_feat", "cond", "body", "hand", "shape", "face", "rot", "trans",
                            "focal", "principal", "joints2d", "q_body", "q_hand")}
    for s, gb in zip(scenes, gt_bodies):
        cams = s.cameras[:k]
        est = s.view_estimates[:k]
        cols["task"].append([f.task_feature for f in s.view_features[:k]])
        cols["hand_feat"].append([f.hand_feature for f in s.view_features[:k]])
        cols["cond"].append([camera_condition_vector(c) for c in cams])
        cols["body"].append([e.p_body for e in est])
        cols["hand"].append([e.p_hand for e in est])
        cols["shape"].append([e.p_shape for e in est])
        cols["face"].append([e.p_face for e in est])
        cols["rot"].append([c.rotation for c in cams])
        cols["trans"].append([c.translation for c in cams])
        cols["focal"].append([c.focal for c in cams])
        cols["principal"].append([c.principal for c in cams])
        cols["joints2d"].append(s.gt_joints2d[:k])
        tables = [joint_distance_table(c, gb.joints[asset.body_joint_ids]) for c in cams]
        cols["q_body"].append(target_distribution(tables, cfg.temperature))
        cols["q_hand"].append(_hand_targets(asset, cams, gb.joints, cfg.temperature))
    arrays = {n: np.array(v, dtype=np.float64) for n, v in cols.items()}
    return SceneArrays(scene_ids=[s.scene_id for s in scenes], gt_params=[s.gt_params for s in scenes],
                       gt_bodies=gt_bodies, gt_shape_map=gmaps, gt_shape_mask=gmask, gt_face_map=gface,
                       gt_face_mask=gfmask, cameras=[list(s.cameras[:k]) for s in scenes], **arrays)


# ---------------------------------------------------------------------------
# Differentiable kinematics for the 2D joint loss
# ---------------------------------------------------------------------------
def rodrigues_t(r: Tensor) -> Tensor:
    """Batched axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    th2 = (r * r).sum(-1, keepdims=True)
    small = th2.data < 1e-8
    th2_safe = ad.where(small, 1.0, th2)
    th = ad.sqrt(th2_safe)
    a = ad.where(small, 1.0 - th2 / 6.0, ad.sin(th) / th)
    b = ad.where(small, 0.5 - th2 / 24.0, (1.0 - ad.cos(th)) / th2_safe)
    x, y, z = r[..., 0:1], r[..., 1:2], r[..., 2:3]
    o = x * 0.0
    K = ad.concat([o, -z, y, z, o, -x, -y, x, o], axis=-1).reshape(*r.shape[:-1], 3, 3)
    a = a.reshape(*r.shape[:-1], 1, 1)
    b = b.reshape(*r.shape[:-1], 1, 1)
    return np.eye(3) + a * K + b * ad.matmul(K, K)


class KinematicJoints:
    """Posed joint positions as a differentiable function of fused parameters."""

    def __init__(self, asset: BodyModelAsset):
        self.asset = asset
        J = asset.num_joints
        reg = asset.joint_regressor
        self.rest0 = reg @ asset.template_vertices
        self.shape_basis = np.einsum("jv,vck->jck", reg, asset.shape_dirs).reshape(J * 3, -1)
        self.expr_basis = np.einsum("jv,vck->jck", reg, asset.expr_dirs).reshape(J * 3, -1)
        nb, nh = len(asset.body_joint_ids), len(asset.hand_joint_ids)
        slot = np.full(J, nb + nh, dtype=np.int64)   # unlisted joints read the zero block
        slot[asset.body_joint_ids] = np.arange(nb)
        slot[asset.hand_joint_ids] = nb + np.arange(nh)
        self.slot = slot

    def __call__(self, body, hand, shape, face) -> Tensor:
        """(S, nb*3), (S, nh*3), (S, 10), (S, 10) -> posed joints (S, J, 3)."""
        a = self.asset
        S, J = body.shape[0], a.num_joints
        rest = (ad.matmul(shape, self.shape_basis.T) + ad.matmul(face, self.expr_basis.T)).reshape(S, J, 3)
        rest = rest + self.rest0
        pose = ad.concat([body.reshape(S, -1, 3), hand.reshape(S, -1, 3), np.zeros((S, 1, 3))], axis=1)
        R = rodrigues_t(pose[:, self.slot])
        glob, pos = [R[:, 0]], [rest[:, 0]]
        for j in range(1, J):
            p = a.parent[j]
            bone = (rest[:, j] - rest[:, p]).reshape(S, 3, 1)
            pos.append(pos[p] + ad.matmul(glob[p], bone).reshape(S, 3))
            glob.append(ad.matmul(glob[p], R[:, j]))
        return ad.stack(pos, axis=1)


def project_t(joints: Tensor, arr: SceneArrays) -> Tensor:
    """(S, J, 3) world joints -> (S, N, J, 2) pixels in every view."""
    S = joints.shape[0]
    pc = ad.matmul(joints.reshape(S, 1, -1, 3), np.swapaxes(arr.rot, -1, -2)) + arr.trans[:, :, None, :]
    z = pc[..., 2:3]
    if np.any(z.data <= MIN_DEPTH):
        raise BehindCameraError(np.flatnonzero((z.data <= MIN_DEPTH).any(axis=(0, 1))))
    return pc[..., 0:2] / z * arr.focal[:, :, None, :] + arr.principal[:, :, None, :]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------
def _masked_l1(pred: Tensor, pred_mask, gt, gt_mask) -> Tensor:
    """Per-scene mean |pred - gt| over texels covered in both, averaged over scenes."""
    both = (pred_mask & gt_mask).astype(np.float64)                # (S, U, V)
    counts = 3.0 * both.sum(axis=(1, 2))
    per = (ad.tabs(pred - gt) * both[:, None]).sum((1, 2, 3))
    return (per / np.maximum(counts, 1.0)).mean()


@dataclass
class FusedBatch:
    body: Tensor
    hand: Tensor
    shape: Tensor
    face: Tensor
    body_logits: Tensor
    hand_logits: Tensor
    fused_shape_map: Tensor | None = None
    fused_shape_mask: np.ndarray | None = None
    fused_face_map: Tensor | None = None
    fused_face_mask: np.ndarray | None = None


def view_bodies(model: MucModel, arr: SceneArrays, body: np.ndarray, hand: np.ndarray) -> list:
    """Decode every view with the fused pose and that view's own shape and expression."""
    out = []
    for s in range(len(arr)):
        for v in range(arr.n_views):
            out.append(lbs_forward(model.asset, ParamSet(body[s], hand[s], arr.shape[s, v], arr.face[s, v])))
    return out


def fuse_batch(model: MucModel, arr: SceneArrays, mode: str = "full", frozen_maps: tuple | None = None) -> FusedBatch:
    """Score, fuse and (in full mode) run the surface branch; returns tensors.

    Rasterisation is not differentiated. ``frozen_maps`` (the tuple returned
    by :func:`normal_maps`) pins the per-view maps, so finite differences
    see the same graph that backward does.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    S, N = len(arr), arr.n_views
    nb, nh = arr.body.shape[2], arr.hand.shape[2]
    flat_body = arr.body.reshape(S, N, nb * 3)
    flat_hand = arr.hand.reshape(S, N, nh * 3)
    bl, hl = model.jrn.logits(arr.task.reshape(S * N, -1), arr.hand_feat.reshape(S * N, -1),
                              arr.cond.reshape(S * N, -1))
    bl, hl = bl.reshape(S, N, -1), hl.reshape(S, N, -1)
    if mode == "uniform":
        fb, fh = ad.as_tensor(flat_body.mean(1)), ad.as_tensor(flat_hand.mean(1))
    else:
        fb = fuse_weighted(flat_body, ad.softplus(bl), rotation_group_map(np.arange(nb)))
        fh = fuse_weighted(flat_hand, ad.softplus(hl), rotation_group_map(model.jrn.hand_groups))
    if mode != "full":
        return FusedBatch(fb, fh, ad.as_tensor(arr.shape.mean(1)), ad.as_tensor(arr.face.mean(1)), bl, hl)

    shape_res, face_res = map_resolutions(model.cfg)
    if frozen_maps is None:
        bodies = view_bodies(model, arr, fb.data.reshape(S, nb, 3), fh.data.reshape(S, nh, 3))
        frozen_maps = normal_maps(model.asset, bodies, shape_res, face_res)
    maps, masks, fmaps, fmasks = frozen_maps
    cond = arr.cond.reshape(S * N, -1)
    ws = model.srn.weight_maps(maps, masks, cond)
    wf = model.srn.weight_maps(fmaps, fmasks, cond)
    fused_s, fmask_s = fuse_normals(maps.reshape(S, N, *maps.shape[1:]), ws.reshape(S, N, *ws.shape[1:]),
                                    masks.reshape(S, N, *masks.shape[1:]))
    fused_f, fmask_f = fuse_normals(fmaps.reshape(S, N, *fmaps.shape[1:]), wf.reshape(S, N, *wf.shape[1:]),
                                    fmasks.reshape(S, N, *fmasks.shape[1:]))
    vs = model.srn.reduce(ws, "shape").reshape(S, N, -1)
    vf = model.srn.reduce(wf, "face").reshape(S, N, -1)
    return FusedBatch(fb, fh, fuse_param_vectors(arr.shape, vs), fuse_param_vectors(arr.face, vf), bl, hl,
                      fused_s, fmask_s, fused_f, fmask_f)


def batch_losses(model: MucModel, arr: SceneArrays, kin: KinematicJoints, cfg: RunConfig,
                 frozen_maps: tuple | None = None) -> dict:
    """All four training losses (tensors) for one batch, plus the weighted total."""
    fused = fuse_batch(model, arr, "full", frozen_maps)
    gt_flat = arr.gt_flat()
    pred_flat = ad.concat([fused.body, fused.hand, fused.shape, fused.face], axis=1)
    losses = {"smplx": ad.tabs(pred_flat - gt_flat).mean()}
    joints = kin(fused.body, fused.hand, fused.shape, fused.face)
    losses["joint2d"] = ad.tabs(project_t(joints, arr) - arr.joints2d).mean()
    l_jrn = jrn_loss(fused.body_logits, arr.q_body)
    if cfg.jrn.hand_kl and cfg.jrn.hand_mode == "joint":
        l_jrn = (l_jrn + jrn_loss(fused.hand_logits, arr.q_hand)) * 0.5
    losses["jrn"] = l_jrn
    l_shape = _masked_l1(fused.fused_shape_map, fused.fused_shape_mask, arr.gt_shape_map, arr.gt_shape_mask)
    l_face = _masked_l1(fused.fused_face_map, fused.fused_face_mask, arr.gt_face_map, arr.gt_face_mask)
    losses["surface"] = (l_shape + l_face) * 0.5
    w = cfg.loss_weights
    total = None
    for name, lam in (("smplx", w.smplx), ("joint2d", w.joint2d), ("jrn", w.jrn), ("surface", w.surface)):
        if lam != 0.0:
            term = losses[name] * lam
            total = term if total is None else total + term
    losses["total"] = total
    return losses


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------
def fuse_params(model: MucModel, arr: SceneArrays, mode: str = "full") -> list[ParamSet]:
    out = []
    nb, nh = arr.body.shape[2], arr.hand.shape[2]
    for start in range(0, len(arr), EVAL_CHUNK):
        chunk = arr.subset(np.arange(start, min(start + EVAL_CHUNK, len(arr))))
        with ad.no_grad():
            f = fuse_batch(model, chunk, mode)
        for i in range(len(chunk)):
            out.append(ParamSet(f.body.data[i].reshape(nb, 3), f.hand.data[i].reshape(nh, 3),
                                f.shape.data[i], f.face.data[i], chunk.cameras[i][0]))
    return out


def run_inference(model: MucModel, scene: SceneSample, k: int, mode: str = "full") -> tuple[ParamSet, PosedBody]:
    """Fuse the first ``k`` views of one scene and decode the result."""
    if not 1 <= k <= scene.n_cameras:
        raise ValueError(f"k must be in [1, {scene.n_cameras}], got {k}")
    arr = prepare([scene], model.asset, model.cfg, k)
    params = fuse_params(model, arr, mode)[0]
    return params, lbs_forward(model.asset, params)


def evaluate(model: MucModel, arr: SceneArrays, mode: str = "full") -> list[MetricReport]:
    fused = fuse_params(model, arr, mode)
    scale = model.cfg.procrustes_scale
    return [evaluate_body(lbs_forward(model.asset, p), gt, model.asset, sid, arr.n_views, scale)
            for p, gt, sid in zip(fused, arr.gt_bodies, arr.scene_ids)]


@dataclass
class SweepRow:
    n_cameras: int
    full: MetricReport
    uniform: MetricReport
    jrn_only: MetricReport


SWEEP_FIELDS = ["n_cameras", "mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe", "hand_pa_mpjpe", "hand_pa_mpvpe",
                "face_pa_mpvpe", "uniform_pa_mpjpe", "uniform_pa_mpvpe", "jrn_only_pa_mpjpe",
                "jrn_only_pa_mpvpe"]


def run_eval_sweep(model: MucModel, scenes: Sequence[SceneSample], k_list: Sequence[int],
                   per_scene: list | None = None) -> list[SweepRow]:
    """Mean metrics per camera count for the full model and both ablation baselines.

    If ``per_scene`` is a list, the full-model per-scene reports are appended to it.
    """
    rows = []
    for k in k_list:
        arr = prepare(scenes, model.asset, model.cfg, k)
        reports = {m: evaluate(model, arr, m) for m in FUSION_MODES}
        if per_scene is not None:
            per_scene.extend(reports["full"])
        means = {m: mean_report(reports[m], f"mean-{m}") for m in FUSION_MODES}
        rows.append(SweepRow(k, means["full"], means["uniform"], means["jrn_only"]))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            full = [getattr(r.full, k) for k in SWEEP_FIELDS[1:8]]
            extra = [r.uniform.pa_mpjpe, r.uniform.pa_mpvpe, r.jrn_only.pa_mpjpe, r.jrn_only.pa_mpvpe]
            w.writerow([r.n_cameras] + [repr(float(v)) for v in full + extra])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "n_cameras" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
LOG_FIELDS = ["epoch", "smplx", "joint2d", "jrn", "surface", "total", "val_pa_mpjpe", "seconds"]


@dataclass
class TrainResult:
    model: MucModel
    log: list
    checkpoint: Path
    best_val: float
    best_epoch: int


def validation_score(model: MucModel, arr: SceneArrays | None) -> float:
    if arr is None or len(arr) == 0:
        return float("nan")
    return float(np.mean([r.pa_mpjpe for r in evaluate(model, arr, "full")]))


def run_training(cfg: RunConfig, train: Sequence[SceneSample], val: Sequence[SceneSample],
                 asset: BodyModelAsset, out_dir, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train JRN and SRN jointly; writes ``loss_log.csv`` and ``checkpoint.mucw`` to ``out_dir``.

    The checkpoint holds the weights with the best validation PA-MPJPE seen
    after any epoch (the untrained weights count as epoch 0).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = MucModel(cfg, asset)
    kin = KinematicJoints(asset)
    train_arr = prepare(train, asset, cfg, cfg.data.n_cameras)
    val_arr = prepare(val, asset, cfg, cfg.data.n_cameras) if len(val) else None
    opt = Adam(model.params, lr=cfg.optimizer.lr)
    rng = np.random.default_rng(cfg.seed)
    ckpt = out / "checkpoint.mucw"

    best_val = validation_score(model, val_arr)
    best_epoch = 0
    model.save(ckpt, opt.state, {"epoch": 0, "val_pa_mpjpe": best_val})
    rows = []
    bs = cfg.optimizer.batch_size
    for epoch in range(1, cfg.optimizer.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_arr))
        sums = dict.fromkeys(LOG_FIELDS[1:6], 0.0)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), bs)):
            batch = train_arr.subset(order[start:start + bs])
            opt.zero_grad()
            try:
                losses = batch_losses(model, batch, kin, cfg)
                losses["total"].backward()
                for name, p in model.params.items():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(f"gradient of {name}")
            except (NonFiniteError, BehindCameraError) as e:
                raise TrainingNumericError(epoch, b, str(e)) from e
            opt.step()
            for k in sums:
                sums[k] += losses[k].item()
            n_batches += 1
        val_score = validation_score(model, val_arr)
        row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()},
               "val_pa_mpjpe": val_score, "seconds": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if val_arr is None or val_score < best_val:
            best_val, best_epoch = val_score, epoch
            model.save(ckpt, opt.state, {"epoch": epoch, "val_pa_mpjpe": val_score})

    with open(out / "loss_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS[:-1])
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:-1]])
    best, _ = MucModel.load(ckpt, asset)
    return TrainResult(best, rows, ckpt, best_val, best_epoch)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------
GRADCHECK_TOL = 1e-4


@dataclass
class GradcheckEntry:
    block: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < GRADCHECK_TOL)


def _block_error(loss_fn, params, rng, max_coords=12) -> float:
    errs = check_gradients(loss_fn, params, step=1e-5, max_coords=max_coords, rng=rng)
    return max(errs.values()) if errs else 0.0


def gradcheck_scene_config(cfg: RunConfig) -> RunConfig:
    """Tiny networks, 8x8 UV maps and two cameras for end-to-end checks."""
    return cfg.replace(srn={**cfg.srn.__dict__, "shape_res": (8, 8), "face_res": (4, 4), "base_channels": 4,
                            "attn_dim": 4, "reducer_hidden": (8,)},
                       jrn={**cfg.jrn.__dict__, "hidden": (16,)},
                       data={**cfg.data.__dict__, "n_cameras": 2})


def run_gradcheck(cfg: RunConfig, seed: int = 0) -> list[GradcheckEntry]:
    """Finite-difference checks for every block type and the end-to-end losses."""
    from .synth import sample_scene
    rng = np.random.default_rng(seed)
    x_vec = rng.normal(size=(3, 5))
    x_img = rng.normal(size=(2, 3, 8, 8))
    cond = rng.normal(size=(2, 9))
    entries = []

    for act in ("gelu", "relu"):
        mlp = Mlp(MlpSpec((5, 7, 4), act, "softplus"), rng)
        entries.append(GradcheckEntry(f"mlp[{act}]", _block_error(lambda: (mlp(x_vec) ** 2).sum(), mlp.params, rng)))
    conv = Conv(3, 4, 3, 2, rng)
    entries.append(GradcheckEntry("conv2d", _block_error(lambda: (conv(x_img) ** 2).sum(), conv.params, rng)))
    attn = CrossAttention(3, 9, 4, rng)
    entries.append(GradcheckEntry("cross_attention",
                                  _block_error(lambda: (attn(x_img, cond) ** 2).sum(), attn.params, rng)))
    unet = UNet(UNetSpec(3, 4, 3, 9, 4), rng)
    entries.append(GradcheckEntry("unet", _block_error(lambda: (unet(x_img, cond) ** 2).sum(), unet.params, rng)))

    small = gradcheck_scene_config(cfg)
    asset = make_asset(small)
    scene = sample_scene(asset, 2, small.noise, small.seed + 99, split="train")
    arr = prepare([scene], asset, small, 2)
    model = MucModel(small, asset)
    for p in model.params.values():       # move off the zero-initialised heads
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    kin = KinematicJoints(asset)
    jrn_params = {k: v for k, v in model.params.items() if k.startswith("jrn.")}
    srn_params = {k: v for k, v in model.params.items() if k.startswith("srn.")}

    with ad.no_grad():
        f0 = fuse_batch(model, arr, "full")
    S, N = len(arr), arr.n_views
    bodies = view_bodies(model, arr, f0.body.data.reshape(S, -1, 3), f0.hand.data.reshape(S, -1, 3))
    frozen = normal_maps(asset, bodies, *map_resolutions(small))

    def l_jrn():
        return batch_losses(model, arr, kin, small, frozen)["jrn"]

    def l_surface():
        return batch_losses(model, arr, kin, small, frozen)["surface"]

    def l_total():
        return batch_losses(model, arr, kin, small, frozen)["total"]

    entries.append(GradcheckEntry("end_to_end.L_JRN", _block_error(l_jrn, jrn_params, rng)))
    entries.append(GradcheckEntry("end_to_end.L_surface", _block_error(l_surface, srn_params, rng)))
    entries.append(GradcheckEntry("end_to_end.total", _block_error(l_total, model.params, rng, max_coords=4)))
    return entries


def write_gradcheck_csv(path, entries: Sequence[GradcheckEntry]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["block", "max_rel_error", "passed"])
        for e in entries:
            w.writerow([e.block, repr(e.max_rel_error), int(e.passed)])


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------
def export_obj(body: PosedBody, asset: BodyModelAsset, path) -> None:
    write_obj(body, asset.faces, path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
