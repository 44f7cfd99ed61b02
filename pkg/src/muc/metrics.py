"""Training losses, Procrustes alignment and position-error metrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .body_model import BodyModelAsset, ParamSet, PosedBody
from .camera import CameraParams, project_points
from .srn import NormalMap, RasterDiagnostics


class AlignmentDegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    smplx: float = 1.0
    joint2d: float = 1.0
    jrn: float = 1.0
    surface: float = 1.0

    def __post_init__(self):
        vals = [self.smplx, self.joint2d, self.jrn, self.surface]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and nonnegative: {self}")
        if not any(vals):
            raise ValueError("at least one loss weight must be nonzero")


# ---------------------------------------------------------------------------
# Losses (plain arrays; the training graph has tensor twins in pipeline.py)
# ---------------------------------------------------------------------------
def param_l1_loss(pred: ParamSet, gt: ParamSet) -> float:
    a, b = pred.flat(), gt.flat()
    if a.shape != b.shape or pred.p_body.shape != gt.p_body.shape:
        raise ValueError("parameter sets have different layouts")
    return float(np.abs(a - b).mean())


def joint2d_loss(pred_joints3d, gt_joints2d: Sequence, cameras: Sequence[CameraParams] | CameraParams) -> float:
    """Mean L1 over (u, v) between projected predictions and 2D targets, averaged over views."""
    if isinstance(cameras, CameraParams):
        cameras, gt_joints2d = [cameras], [gt_joints2d]
    if len(cameras) != len(gt_joints2d) or not cameras:
        raise ValueError("need one 2D target per camera")
    per_view = [np.abs(project_points(cam, pred_joints3d) - np.asarray(gt2d)).mean()
                for cam, gt2d in zip(cameras, gt_joints2d)]
    return float(np.mean(per_view))


def surface_loss(fused: NormalMap, gt: NormalMap, diagnostics: RasterDiagnostics | None = None) -> float:
    """Mean absolute difference over texels covered in both maps (0 when they do not overlap)."""
    if fused.data.shape != gt.data.shape:
        raise ValueError(f"map resolutions differ: {fused.data.shape} vs {gt.data.shape}")
    both = fused.mask & gt.mask
    if not both.any():
        if diagnostics is not None:
            diagnostics.empty_overlap += 1
        return 0.0
    return float(np.abs(fused.data[:, both] - gt.data[:, both]).mean())


def total_loss(components: dict, weights: LossWeights) -> tuple:
    """Weighted sum of the four loss terms; returns (total, per-term dict)."""
    w = asdict(weights)
    unknown = set(components) - set(w)
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    total = 0.0
    for name in ("smplx", "joint2d", "jrn", "surface"):
        if name in components and w[name] != 0.0:
            total = total + w[name] * components[name]
    return total, dict(components)


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------
def procrustes_align(pred, gt, scale: bool = True):
    """Least-squares alignment of ``pred`` onto ``gt``.

    Returns ``(aligned, s, R, t)`` with ``aligned = s * pred @ R.T + t``.
    With ``scale=False`` only a rotation and translation are fitted.
    """
    X = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(gt, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"point sets must both be Kx3, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise AlignmentDegenerateError("need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Yc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise AlignmentDegenerateError("ground-truth points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    spread = (Xc * Xc).sum()
    # coincident predictions: any scale fits equally, zero collapses them onto the gt centroid
    s = (float((S * np.diag(D)).sum() / spread) if spread > 0 else 0.0) if scale else 1.0
    t = my - s * (R @ mx)
    return s * X @ R.T + t, s, R, t


def mean_position_error(pred, gt) -> float:
    """Mean Euclidean distance in millimetres (inputs in metres)."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean() * 1000.0)


def pa_error(pred, gt, scale: bool = True) -> float:
    return mean_position_error(procrustes_align(pred, gt, scale)[0], gt)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    scene_id: str
    n_cameras: int
    mpjpe: float
    pa_mpjpe: float
    mpvpe: float
    pa_mpvpe: float
    hand_pa_mpjpe: float
    hand_pa_mpvpe: float
    face_pa_mpvpe: float


CSV_FIELDS = [f.name for f in fields(MetricReport)]


def evaluate_body(pred: PosedBody, gt: PosedBody, asset: BodyModelAsset, scene_id: str = "",
                  n_cameras: int = 0, scale: bool = True) -> MetricReport:
    """Whole-body, hand and face errors of one reconstruction.

    Hand joints are few and nearly collinear, so they are aligned with the
    transform fitted on the hand vertices.
    """
    body = asset.body_joint_ids
    hand_v = asset.hand_vertex_mask()
    face_v = asset.face_region_vertices
    _, s, R, t = procrustes_align(pred.vertices[hand_v], gt.vertices[hand_v], scale)
    hand_j = s * pred.joints[asset.hand_joint_ids] @ R.T + t
    return MetricReport(
        scene_id=scene_id, n_cameras=n_cameras,
        mpjpe=mean_position_error(pred.joints[body], gt.joints[body]),
        pa_mpjpe=pa_error(pred.joints[body], gt.joints[body], scale),
        mpvpe=mean_position_error(pred.vertices, gt.vertices),
        pa_mpvpe=pa_error(pred.vertices, gt.vertices, scale),
        hand_pa_mpjpe=mean_position_error(hand_j, gt.joints[asset.hand_joint_ids]),
        hand_pa_mpvpe=pa_error(pred.vertices[hand_v], gt.vertices[hand_v], scale),
        face_pa_mpvpe=pa_error(pred.vertices[face_v], gt.vertices[face_v], scale),
    )


def mean_report(reports: Sequence[MetricReport], scene_id: str = "mean") -> MetricReport:
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in CSV_FIELDS[2:]}
    return MetricReport(scene_id=scene_id, n_cameras=reports[0].n_cameras, **vals)


def write_reports_csv(path, reports: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow([r.scene_id, r.n_cameras] + [repr(float(getattr(r, k))) for k in CSV_FIELDS[2:]])


def read_reports_csv(path) -> list[MetricReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [MetricReport(r["scene_id"], int(r["n_cameras"]), *(float(r[k]) for k in CSV_FIELDS[2:]))
            for r in rows]
