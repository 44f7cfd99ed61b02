"""A small SMPL-X-style parametric body: blendshapes plus linear blend skinning.

The real SMPL-X asset is licensed, so :func:`make_toy_asset` builds a
tube-and-limbs humanoid with the same structure (template, shape and
expression bases, joint regressor, kinematic tree, skinning weights, UV
chart). Everything downstream only sees :class:`BodyModelAsset`, so a real
asset with the same fields would drop in.

Coordinates are metres, z up. Poses are per-joint axis-angle vectors.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .camera import CameraParams

NUM_BODY_JOINTS = 21
NUM_BETAS = 10
UP = np.array([0.0, 0.0, 1.0])


class AssetError(ValueError):
    """Base class for asset loading/validation failures."""


class AssetFormatError(AssetError):
    pass


class AssetVersionError(AssetError):
    pass


class AssetTruncatedError(AssetError):
    pass


class AssetInvariantError(AssetError):
    pass


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------
def rodrigues(rotvec) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta2 = (r * r).sum(-1)
    small = theta2 < 1e-12
    theta = np.sqrt(np.where(small, 1.0, theta2))
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = np.zeros(r.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -r[..., 2], r[..., 1]
    K[..., 1, 0], K[..., 1, 2] = r[..., 2], -r[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -r[..., 1], r[..., 0]
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_to_rotvec(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(np.array(R, dtype=np.float64)).as_rotvec()


def canonicalize_axis_angle(rotvec) -> np.ndarray:
    """Map axis-angle vectors to the equivalent rotation with angle in [0, pi]."""
    r = np.array(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2.0 * np.pi)
    flip = wrapped > np.pi
    new_theta = np.where(flip, 2.0 * np.pi - wrapped, wrapped)
    sign = np.where(flip, -1.0, 1.0)
    scale = np.divide(new_theta * sign, theta, out=np.ones_like(theta), where=theta > 0)
    return r * scale


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------
_FLOAT_FIELDS = ("template_vertices", "shape_dirs", "expr_dirs", "joint_regressor", "skin_weights", "uv_coords")
_INT_FIELDS = ("faces", "parent", "face_region_vertices", "body_joint_ids", "hand_joint_ids")


@dataclass(frozen=True, eq=False)
class BodyModelAsset:
    template_vertices: np.ndarray
    faces: np.ndarray
    shape_dirs: np.ndarray
    expr_dirs: np.ndarray
    joint_regressor: np.ndarray
    parent: np.ndarray
    skin_weights: np.ndarray
    uv_coords: np.ndarray
    face_region_vertices: np.ndarray
    body_joint_ids: np.ndarray
    hand_joint_ids: np.ndarray

    def __post_init__(self):
        for name in _FLOAT_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in _INT_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parent.shape[0]

    @property
    def hands_per_side(self) -> int:
        return len(self.hand_joint_ids) // 2

    def validate(self) -> None:
        V = self.template_vertices.shape[0]
        J = self.parent.shape[0]
        fail = AssetInvariantError
        if self.template_vertices.shape != (V, 3):
            raise fail(f"template_vertices must be Vx3, got {self.template_vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise fail(f"faces must be Fx3, got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise fail("face index out of range")
        for name in ("shape_dirs", "expr_dirs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (V, 3):
                raise fail(f"{name} must be Vx3xK, got {arr.shape}")
        if self.joint_regressor.shape != (J, V):
            raise fail(f"joint_regressor must be {J}x{V}, got {self.joint_regressor.shape}")
        if not np.allclose(self.joint_regressor.sum(1), 1.0, atol=1e-9, rtol=0):
            raise fail("joint_regressor rows must sum to 1")
        if self.skin_weights.shape != (V, J):
            raise fail(f"skin_weights must be {V}x{J}, got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or not np.allclose(self.skin_weights.sum(1), 1.0, atol=1e-9, rtol=0):
            raise fail("skin_weights rows must be nonnegative and sum to 1")
        if J == 0 or self.parent[0] != -1 or np.any(self.parent[1:] < 0) \
                or np.any(self.parent[1:] >= np.arange(1, J)):
            raise fail("parent must encode a tree rooted at joint 0 with parent[j] < j")
        if self.uv_coords.shape != (V, 2) or np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise fail("uv_coords must be Vx2 within [0, 1]")
        if self.face_region_vertices.size and (self.face_region_vertices.min() < 0
                                               or self.face_region_vertices.max() >= V):
            raise fail("face_region_vertices out of range")
        ids = np.concatenate([self.body_joint_ids, self.hand_joint_ids])
        if ids.size and (ids.min() < 0 or ids.max() >= J):
            raise fail("joint id out of range")
        if len(np.unique(ids)) != len(ids):
            raise fail("body and hand joint ids must be distinct")
        if len(self.hand_joint_ids) % 2:
            raise fail("hand_joint_ids must list both hands (even length)")
        for name in _FLOAT_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise fail(f"{name} contains non-finite values")

    def equals(self, other: "BodyModelAsset") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _FLOAT_FIELDS + _INT_FIELDS)

    def digest(self) -> str:
        """SHA-256 of the serialised asset, used to tie datasets and checkpoints to it."""
        return hashlib.sha256(asset_to_bytes(self)).hexdigest()

    def hand_vertex_mask(self) -> np.ndarray:
        """Vertices whose dominant skinning joint is a hand joint or a wrist."""
        H = self.hands_per_side
        wrists = {int(self.parent[self.hand_joint_ids[0]]), int(self.parent[self.hand_joint_ids[H]])} \
            if H else set()
        hand_set = set(self.hand_joint_ids.tolist())
        dom = self.skin_weights.argmax(1)
        return np.array([d in hand_set or d in wrists for d in dom])


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Body/hand axis-angle poses, shape and expression coefficients, camera."""

    p_body: np.ndarray
    p_hand: np.ndarray
    p_shape: np.ndarray
    p_face: np.ndarray
    p_camera: CameraParams | None = None

    def __post_init__(self):
        for name in ("p_body", "p_hand"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1, 3)
            object.__setattr__(self, name, arr)
        for name in ("p_shape", "p_face"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(-1))
        for name in ("p_body", "p_hand", "p_shape", "p_face"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)

    @classmethod
    def zeros(cls, asset: BodyModelAsset, camera: CameraParams | None = None) -> "ParamSet":
        return cls(np.zeros((len(asset.body_joint_ids), 3)), np.zeros((len(asset.hand_joint_ids), 3)),
                   np.zeros(asset.shape_dirs.shape[2]), np.zeros(asset.expr_dirs.shape[2]), camera)

    def flat(self) -> np.ndarray:
        """All pose/shape/expression entries concatenated; the camera is excluded."""
        return np.concatenate([self.p_body.ravel(), self.p_hand.ravel(), self.p_shape, self.p_face])

    def canonical(self) -> "ParamSet":
        return ParamSet(canonicalize_axis_angle(self.p_body), canonicalize_axis_angle(self.p_hand),
                        self.p_shape, self.p_face, self.p_camera)

    def replace(self, **changes) -> "ParamSet":
        fields = dict(p_body=self.p_body, p_hand=self.p_hand, p_shape=self.p_shape,
                      p_face=self.p_face, p_camera=self.p_camera)
        fields.update(changes)
        return ParamSet(**fields)

    def equals(self, other: "ParamSet") -> bool:
        same_cam = (self.p_camera is None and other.p_camera is None) or (
            self.p_camera is not None and other.p_camera is not None and self.p_camera.equals(other.p_camera))
        return same_cam and np.array_equal(self.flat(), other.flat()) \
            and self.p_body.shape == other.p_body.shape and self.p_hand.shape == other.p_hand.shape


@dataclass(frozen=True, eq=False)
class PosedBody:
    vertices: np.ndarray
    joints: np.ndarray
    vertex_normals: np.ndarray
    degenerate_normals: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------
def full_pose(asset: BodyModelAsset, params: ParamSet) -> np.ndarray:
    """Scatter body and hand rotations onto all J joints (unlisted joints stay at rest)."""
    if params.p_body.shape != (len(asset.body_joint_ids), 3):
        raise ValueError(f"p_body shape {params.p_body.shape} does not match asset "
                         f"({len(asset.body_joint_ids)}, 3)")
    if params.p_hand.shape != (len(asset.hand_joint_ids), 3):
        raise ValueError(f"p_hand shape {params.p_hand.shape} does not match asset "
                         f"({len(asset.hand_joint_ids)}, 3)")
    pose = np.zeros((asset.num_joints, 3))
    pose[asset.body_joint_ids] = params.p_body
    pose[asset.hand_joint_ids] = params.p_hand
    return pose


def shaped_vertices(asset: BodyModelAsset, p_shape, p_face) -> np.ndarray:
    p_shape = np.asarray(p_shape, dtype=np.float64)
    p_face = np.asarray(p_face, dtype=np.float64)
    if p_shape.shape != asset.shape_dirs.shape[2:] or p_face.shape != asset.expr_dirs.shape[2:]:
        raise ValueError(f"shape/expression lengths {p_shape.shape}/{p_face.shape} do not match asset")
    return asset.template_vertices + asset.shape_dirs @ p_shape + asset.expr_dirs @ p_face


def skin(asset: BodyModelAsset, pose, v_shaped) -> tuple[np.ndarray, np.ndarray]:
    """Pose shaped vertices with per-joint axis-angle ``pose`` (J, 3).

    Transforms are kept as (global rotation, joint displacement) pairs so
    that the rest pose reproduces the input bit-for-bit.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (asset.num_joints, 3):
        raise ValueError(f"pose must be ({asset.num_joints}, 3), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose contains non-finite values")
    rest_joints = asset.joint_regressor @ v_shaped
    local = rodrigues(pose)
    J = asset.num_joints
    glob = np.empty((J, 3, 3))
    delta = np.zeros((J, 3))
    glob[0] = local[0]
    eye = np.eye(3)
    for j in range(1, J):
        p = asset.parent[j]
        glob[j] = glob[p] @ local[j]
        delta[j] = delta[p] + (glob[p] - eye) @ (rest_joints[j] - rest_joints[p])
    # per-vertex offset: sum_j w_vj [(R_j - I)(v - J_j) + delta_j]
    A = glob - eye
    offset = delta - np.einsum("jab,jb->ja", A, rest_joints)
    W = asset.skin_weights
    blended = (W @ A.reshape(J, 9)).reshape(-1, 3, 3)
    vertices = v_shaped + np.einsum("vab,vb->va", blended, v_shaped) + W @ offset
    return vertices, rest_joints + delta


def lbs_forward(asset: BodyModelAsset, params: ParamSet) -> PosedBody:
    """Decode a parameter set into a posed mesh, joints and vertex normals."""
    pose = full_pose(asset, params)
    v_shaped = shaped_vertices(asset, params.p_shape, params.p_face)
    vertices, joints = skin(asset, pose, v_shaped)
    normals, degenerate = compute_vertex_normals(vertices, asset.faces)
    return PosedBody(vertices, joints, normals, degenerate)


def compute_vertex_normals(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals with counter-clockwise winding.

    Returns ``(normals, degenerate)``; vertices with no incident area get
    the global up vector and ``degenerate[v] = True``.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ValueError("face index out of range")
    acc = np.zeros_like(v)
    if f.size:
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for k in range(3):
            np.add.at(acc, f[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm < 1e-12
    safe = np.where(degenerate, 1.0, norm)
    normals = np.where(degenerate[:, None], UP, acc / safe[:, None])
    return normals, degenerate


# ---------------------------------------------------------------------------
# Toy humanoid
# ---------------------------------------------------------------------------
_BODY_SKELETON = [
    # name, parent, rest position
    ("pelvis", -1, (0.00, 0.00, 1.00)),
    ("l_hip", 0, (0.10, 0.00, 0.95)),
    ("r_hip", 0, (-0.10, 0.00, 0.95)),
    ("spine1", 0, (0.00, 0.00, 1.10)),
    ("l_knee", 1, (0.10, 0.00, 0.52)),
    ("r_knee", 2, (-0.10, 0.00, 0.52)),
    ("spine2", 3, (0.00, 0.00, 1.25)),
    ("l_ankle", 4, (0.10, 0.00, 0.10)),
    ("r_ankle", 5, (-0.10, 0.00, 0.10)),
    ("spine3", 6, (0.00, 0.00, 1.40)),
    ("neck", 9, (0.00, 0.00, 1.55)),
    ("l_collar", 9, (0.06, 0.00, 1.48)),
    ("r_collar", 9, (-0.06, 0.00, 1.48)),
    ("head", 10, (0.00, 0.00, 1.64)),
    ("l_shoulder", 11, (0.18, 0.00, 1.48)),
    ("r_shoulder", 12, (-0.18, 0.00, 1.48)),
    ("l_elbow", 14, (0.44, 0.00, 1.48)),
    ("r_elbow", 15, (-0.44, 0.00, 1.48)),
    ("l_wrist", 16, (0.68, 0.00, 1.48)),
    ("r_wrist", 17, (-0.68, 0.00, 1.48)),
    ("jaw", 13, (0.00, 0.04, 1.61)),
]
_HEAD, _NECK, _JAW = 13, 10, 20
_HAND_STEP = 0.035


def _toy_skeleton(hands: int, rng: np.random.Generator):
    names = [n for n, _, _ in _BODY_SKELETON]
    parent = [p for _, p, _ in _BODY_SKELETON]
    pos = [np.array(x, dtype=np.float64) for _, _, x in _BODY_SKELETON]
    for side, wrist, sgn in (("l", 18, 1.0), ("r", 19, -1.0)):
        prev = wrist
        for k in range(hands):
            names.append(f"{side}_hand{k}")
            parent.append(prev)
            pos.append(pos[wrist] + np.array([sgn * _HAND_STEP * (k + 1), 0.0, 0.0]))
            prev = len(names) - 1
    pos = np.array(pos)
    jitter = rng.normal(0.0, 0.004, size=pos.shape)
    return names, np.array(parent), pos + jitter


def _tube_defs(pos: np.ndarray, hands: int):
    """(name, polyline points, segment drivers, radius) for each limb tube."""
    J0 = NUM_BODY_JOINTS
    lh = [J0 + k for k in range(hands)]
    rh = [J0 + hands + k for k in range(hands)]
    top = pos[_HEAD] + np.array([0.0, 0.0, 0.16])
    toe_l = pos[7] + np.array([0.0, 0.13, -0.07])
    toe_r = pos[8] + np.array([0.0, 0.13, -0.07])
    tip_l = pos[18] + np.array([_HAND_STEP * (hands + 1), 0.0, 0.0])
    tip_r = pos[19] + np.array([-_HAND_STEP * (hands + 1), 0.0, 0.0])
    return [
        ("torso", [pos[0], pos[3], pos[6], pos[9], pos[_NECK]], [0, 3, 6, 9], 0.12),
        ("head", [pos[_NECK], pos[_HEAD], top], [_NECK, _HEAD], 0.08),
        ("l_leg", [pos[1], pos[4], pos[7], toe_l], [1, 4, 7], 0.06),
        ("r_leg", [pos[2], pos[5], pos[8], toe_r], [2, 5, 8], 0.06),
        ("l_arm", [pos[11], pos[14], pos[16], pos[18]], [11, 14, 16], 0.04),
        ("r_arm", [pos[12], pos[15], pos[17], pos[19]], [12, 15, 17], 0.04),
        ("l_hand", [pos[18]] + [pos[j] for j in lh] + [tip_l], [18] + lh, 0.025),
        ("r_hand", [pos[19]] + [pos[j] for j in rh] + [tip_r], [19] + rh, 0.025),
    ]


# UV atlas: 2 rows x 4 columns of rectangles; the head sits in the top-left cell
_ATLAS = {
    "head": (0, 0), "torso": (1, 0), "l_arm": (2, 0), "r_arm": (3, 0),
    "l_leg": (0, 1), "r_leg": (1, 1), "l_hand": (2, 1), "r_hand": (3, 1),
}
_ATLAS_PAD = 0.01
# cap slots in fill order: (tube, at_end)
_CAP_ORDER = [("head", True), ("l_hand", True), ("r_hand", True), ("l_leg", True), ("r_leg", True),
              ("torso", False), ("l_arm", False), ("r_arm", False), ("l_leg", False), ("r_leg", False),
              ("head", False), ("torso", True), ("l_arm", True), ("r_arm", True),
              ("l_hand", False), ("r_hand", False)]


def _polyline_point(points: np.ndarray, s: float):
    """Point, unit tangent, segment index and in-segment fraction at arc length ``s``."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
    frac = float(np.clip((s - cum[i]) / seg[i], 0.0, 1.0))
    tangent = (points[i + 1] - points[i]) / seg[i]
    return points[i] + frac * (points[i + 1] - points[i]), tangent, i, frac


def make_toy_asset(num_vertices: int = 200, num_joints: int = 25, seed: int = 0) -> BodyModelAsset:
    """Build a deterministic tube-and-limbs humanoid.

    ``num_joints`` must be ``21 + 2 * H`` with ``H >= 1`` joints per hand. The
    mesh is eight capped tubes (torso, head, legs, arms, hands), each with its
    own rectangle of the UV chart; the head tube is the face region.
    """
    extra = num_joints - NUM_BODY_JOINTS
    if extra < 2 or extra % 2:
        raise ValueError(f"num_joints must be 21 + 2*H with H >= 1 so body and hand ids are disjoint, "
                         f"got {num_joints}")
    hands = extra // 2
    cols = int(np.clip(round(np.sqrt(num_vertices / 12.0)), 3, 12))
    ring = cols + 1  # the seam column is duplicated so UVs do not wrap
    if num_vertices < 8 * 2 * ring:
        raise ValueError(f"the toy humanoid needs at least {8 * 2 * ring} vertices, got {num_vertices}")
    rng = np.random.default_rng(seed)
    _, parent, pos = _toy_skeleton(hands, rng)
    tubes = _tube_defs(pos, hands)
    radii = {name: r * (1.0 + rng.uniform(-0.1, 0.1)) for name, _, _, r in tubes}

    lengths = {name: float(np.linalg.norm(np.diff(np.array(pts), axis=0), axis=1).sum())
               for name, pts, _, _ in tubes}
    rings = {name: 2 for name, _, _, _ in tubes}
    total = 8 * 2 * ring
    while total + ring <= num_vertices:
        name = max(rings, key=lambda n: (lengths[n] / (rings[n] - 1), n))
        rings[name] += 1
        total += ring
    caps = set(_CAP_ORDER[: num_vertices - total])

    verts, uvs, faces, radial = [], [], [], []
    weights, owners, tube_rings = [], [], {}
    J = num_joints
    for name, pts, drivers, _ in tubes:
        pts = np.array(pts)
        R = rings[name]
        length = lengths[name]
        col, row = _ATLAS[name]
        u0, u1 = col / 4 + _ATLAS_PAD, (col + 1) / 4 - _ATLAS_PAD
        v0, v1 = row / 2 + _ATLAS_PAD, (row + 1) / 2 - _ATLAS_PAD
        has_start, has_end = (name, False) in caps, (name, True) in caps
        margin = 0.12 * (v1 - v0)
        rv0 = v0 + (margin if has_start else 0.0)
        rv1 = v1 - (margin if has_end else 0.0)
        _, t0, _, _ = _polyline_point(pts, 0.0)
        ref = np.array([1.0, 0.0, 0.0]) if abs(t0[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        ring_ids = []
        for i in range(R):
            s = length * i / (R - 1)
            center, tangent, seg, frac = _polyline_point(pts, s)
            n1 = ref - (ref @ tangent) * tangent
            n1 /= np.linalg.norm(n1)
            n2 = np.cross(tangent, n1)
            w = np.zeros(J)
            prev = drivers[seg - 1] if seg > 0 else parent[drivers[0]]
            nxt = drivers[seg + 1] if seg + 1 < len(drivers) else -1
            w_prev = 0.5 * max(0.0, 1.0 - frac / 0.25) if prev >= 0 else 0.0
            w_next = 0.5 * max(0.0, (frac - 0.75) / 0.25) if nxt >= 0 else 0.0
            w[drivers[seg]] += 1.0 - w_prev - w_next
            if prev >= 0:
                w[prev] += w_prev
            if nxt >= 0:
                w[nxt] += w_next
            ids = []
            for k in range(ring):
                phi = 2.0 * np.pi * k / cols
                d = np.cos(phi) * n1 + np.sin(phi) * n2
                ids.append(len(verts))
                verts.append(center + radii[name] * d)
                radial.append(d)
                uvs.append((u0 + (u1 - u0) * k / cols, rv0 + (rv1 - rv0) * i / (R - 1)))
                wv = w.copy()
                if name == "head" and d[1] > 0.3 and seg == 0:
                    wv[_JAW] += 0.5 * wv[_NECK]
                    wv[_NECK] *= 0.5
                weights.append(wv)
                owners.append(name)
            ring_ids.append(ids)
            if i > 0:
                a, b = ring_ids[i - 1], ids
                for k in range(cols):
                    faces.append((a[k], a[k + 1], b[k + 1]))
                    faces.append((a[k], b[k + 1], b[k]))
        tube_rings[name] = (ring_ids, pts, length)
        for at_end in (False, True):
            if (name, at_end) not in caps:
                continue
            ids = ring_ids[-1] if at_end else ring_ids[0]
            center, tangent, _, _ = _polyline_point(pts, length if at_end else 0.0)
            sgn = 1.0 if at_end else -1.0
            cap = len(verts)
            verts.append(center + sgn * 0.5 * radii[name] * tangent)
            radial.append(sgn * tangent)
            uvs.append((0.5 * (u0 + u1), v1 if at_end else v0))
            weights.append(weights[ids[0]].copy())
            owners.append(name)
            for k in range(cols):
                faces.append((ids[k], ids[k + 1], cap) if at_end else (ids[k], cap, ids[k + 1]))

    verts = np.array(verts)
    radial = np.array(radial)
    V = len(verts)
    assert V == num_vertices, (V, num_vertices)
    owners = np.array(owners)

    regressor = np.zeros((J, V))
    assigned = set()
    for name, pts, drivers, _ in tubes:
        ring_ids, pts_arr, length = tube_rings[name]
        R = len(ring_ids)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts_arr, axis=0), axis=1))])
        for idx, j in enumerate(drivers):
            if j in assigned:
                continue
            x = cum[idx] / length * (R - 1)
            lo = int(min(np.floor(x), R - 2))
            frac = x - lo
            for r_idx, wr in ((lo, 1.0 - frac), (lo + 1, frac)):
                uniq = ring_ids[r_idx][:cols]
                regressor[j, uniq] += wr / cols
            assigned.add(j)
    for j in sorted(set(range(J)) - assigned):  # joints off every tube axis (the jaw)
        d = np.linalg.norm(verts - pos[j], axis=1)
        near = np.argsort(d, kind="stable")[:4]
        w = 1.0 / (d[near] + 1e-3)
        regressor[j, near] = w / w.sum()
    regressor /= regressor.sum(1, keepdims=True)

    skin_weights = np.array(weights)
    skin_weights /= skin_weights.sum(1, keepdims=True)

    # shape basis: per-tube radial girth, global scaling about the pelvis, random smooth bumps
    shape_dirs = np.zeros((V, 3, NUM_BETAS))
    tube_names = [t[0] for t in tubes]
    centred = verts - pos[0]
    for k in range(NUM_BETAS):
        amp = {n: rng.normal(0.0, 0.015) for n in tube_names}
        girth = np.array([amp[o] for o in owners])
        scale = rng.normal(0.0, 0.02)
        lift = rng.normal(0.0, 0.01, size=3)
        shape_dirs[:, :, k] = girth[:, None] * radial + scale * centred + lift * (verts[:, 2:3] - 1.0)
    head_mask = owners == "head"
    expr_dirs = np.zeros((V, 3, NUM_BETAS))
    nh = int(head_mask.sum())
    for k in range(NUM_BETAS):
        amp = rng.normal(0.0, 0.01, size=nh)
        expr_dirs[head_mask, :, k] = amp[:, None] * radial[head_mask]

    body_ids = np.arange(NUM_BODY_JOINTS)
    hand_ids = np.arange(NUM_BODY_JOINTS, J)
    return BodyModelAsset(verts, np.array(faces), shape_dirs, expr_dirs, regressor, parent,
                          skin_weights, np.clip(np.array(uvs), 0.0, 1.0), np.flatnonzero(head_mask),
                          body_ids, hand_ids)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------
ASSET_MAGIC = b"MUCA"
ASSET_VERSION = 1


def asset_to_bytes(asset: BodyModelAsset) -> bytes:
    buf = io.BytesIO()
    buf.write(ASSET_MAGIC)
    buf.write(struct.pack("<I", ASSET_VERSION))
    buf.write(struct.pack("<4I", asset.num_vertices, asset.faces.shape[0], asset.num_joints,
                          asset.hands_per_side))
    buf.write(struct.pack("<2I", asset.shape_dirs.shape[2], asset.expr_dirs.shape[2]))
    for name in _FLOAT_FIELDS:
        buf.write(np.ascontiguousarray(getattr(asset, name), dtype="<f8").tobytes())
    for name in _INT_FIELDS:
        arr = np.ascontiguousarray(getattr(asset, name), dtype="<i8").ravel()
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes())
    return buf.getvalue()


def asset_from_bytes(raw: bytes) -> BodyModelAsset:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise AssetTruncatedError(f"asset file truncated at byte {pos} (needed {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != ASSET_MAGIC:
        raise AssetFormatError("not a MUCA asset file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != ASSET_VERSION:
        raise AssetVersionError(f"asset format version {version}, expected {ASSET_VERSION}")
    V, F, J, H = struct.unpack("<4I", take(16))
    nb, ne = struct.unpack("<2I", take(8))
    shapes = {
        "template_vertices": (V, 3), "shape_dirs": (V, 3, nb), "expr_dirs": (V, 3, ne),
        "joint_regressor": (J, V), "skin_weights": (V, J), "uv_coords": (V, 2),
    }
    fields = {}
    for name in _FLOAT_FIELDS:
        shape = shapes[name]
        n = int(np.prod(shape))
        fields[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    for name in _INT_FIELDS:
        (n,) = struct.unpack("<Q", take(8))
        fields[name] = np.frombuffer(take(8 * n), dtype="<i8").astype(np.int64)
    fields["faces"] = fields["faces"].reshape(-1, 3)
    if pos != len(view):
        raise AssetFormatError("trailing bytes after asset payload")
    if fields["faces"].shape[0] != F or len(fields["hand_joint_ids"]) != 2 * H or len(fields["parent"]) != J:
        raise AssetFormatError("asset header dimensions disagree with payload")
    return BodyModelAsset(**fields)


def save_asset(asset: BodyModelAsset, path) -> None:
    with open(path, "wb") as f:
        f.write(asset_to_bytes(asset))


def load_asset(path) -> BodyModelAsset:
    with open(path, "rb") as f:
        return asset_from_bytes(f.read())


def write_obj(body: PosedBody, faces, path) -> None:
    """Write ``v``, ``vn`` then ``f i//i j//j k//k`` lines (1-based indices)."""
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in body.vertices.tolist()]
    lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in body.vertex_normals.tolist()]
    lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in (faces + 1).tolist()]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (vertices, normals, faces) from an OBJ written by :func:`write_obj`."""
    v, vn, f = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                v.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                vn.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                f.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(v), np.array(vn), np.array(f, dtype=np.int64)
