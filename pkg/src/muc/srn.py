"""Surface reweighting in UV space.

Vertex normals of each view's mesh are rasterised into the asset's UV chart,
a camera-conditioned U-Net turns each normal map into a positive weight map,
and the weight maps drive (a) a weighted normalisation of the normal maps and
(b) small MLPs producing 10-d weights for fusing shape and expression
coefficients.

The UV chart is fixed per asset, so rasterisation is precomputed once per
resolution as a texel -> (face, barycentric) table; applying it to new
normals is a gather.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .body_model import BodyModelAsset, PosedBody
from .camera import CameraParams, camera_condition_vector
from .nn import Mlp, MlpSpec, Module, UNet, UNetSpec

KINDS = ("shape", "face", "weight")


@dataclass(frozen=True, eq=False)
class NormalMap:
    data: np.ndarray          # (3, U, V)
    mask: np.ndarray          # (U, V) bool
    kind: str = "shape"

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class RasterPlan:
    """Texel coverage of a UV chart: winning face per texel and its barycentrics."""

    face_index: np.ndarray    # (U, V) int, -1 where uncovered
    bary: np.ndarray          # (U, V, 3)
    skipped_faces: int        # zero-area UV triangles

    @property
    def mask(self) -> np.ndarray:
        return self.face_index >= 0


@dataclass
class RasterDiagnostics:
    skipped_faces: int = 0
    empty_overlap: int = 0
    notes: list[str] = field(default_factory=list)


def build_raster_plan(uv_coords, faces, resolution: tuple[int, int]) -> RasterPlan:
    """Rasterise every UV triangle at texel centres; later faces overwrite earlier ones."""
    U, V = int(resolution[0]), int(resolution[1])
    uv = np.asarray(uv_coords, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    face_index = np.full((U, V), -1, dtype=np.int64)
    bary = np.zeros((U, V, 3))
    skipped = 0
    for fi, (a, b, c) in enumerate(faces):
        pa, pb, pc = uv[a], uv[b], uv[c]
        det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
        if abs(det) < 1e-14:
            skipped += 1
            continue
        lo = np.minimum(np.minimum(pa, pb), pc)
        hi = np.maximum(np.maximum(pa, pb), pc)
        i0, i1 = max(int(np.floor(lo[0] * U - 0.5)), 0), min(int(np.ceil(hi[0] * U - 0.5)), U - 1)
        j0, j1 = max(int(np.floor(lo[1] * V - 0.5)), 0), min(int(np.ceil(hi[1] * V - 0.5)), V - 1)
        if i0 > i1 or j0 > j1:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        pu = (ii + 0.5) / U
        pv = (jj + 0.5) / V
        l1 = ((pb[0] - pu) * (pc[1] - pv) - (pc[0] - pu) * (pb[1] - pv)) / det
        l2 = ((pc[0] - pu) * (pa[1] - pv) - (pa[0] - pu) * (pc[1] - pv)) / det
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -1e-12) & (l2 >= -1e-12) & (l3 >= -1e-12)
        if not inside.any():
            continue
        ti, tj = ii[inside], jj[inside]
        face_index[ti, tj] = fi
        bary[ti, tj] = np.stack([l1[inside], l2[inside], l3[inside]], axis=-1)
    return RasterPlan(face_index, bary, skipped)


@lru_cache(maxsize=32)
def raster_plan(asset: BodyModelAsset, resolution: tuple[int, int]) -> RasterPlan:
    """Cached plan; assets are immutable and hash by identity."""
    return build_raster_plan(asset.uv_coords, asset.faces, tuple(int(r) for r in resolution))


def apply_plan(plan: RasterPlan, faces, vertex_normals) -> np.ndarray:
    """Interpolate per-vertex normals into a (3, U, V) map (zeros where uncovered)."""
    faces = np.asarray(faces, dtype=np.int64)
    n = np.asarray(vertex_normals, dtype=np.float64)
    mask = plan.mask
    out = np.zeros(plan.face_index.shape + (3,))
    tri = faces[plan.face_index[mask]]                      # (T, 3)
    w = plan.bary[mask]                                      # (T, 3)
    interp = np.einsum("tk,tkc->tc", w, n[tri])
    norm = np.linalg.norm(interp, axis=1)
    # opposite normals can cancel; fall back to the dominant corner
    weak = norm < 1e-12
    if weak.any():
        interp[weak] = n[tri[weak, np.argmax(w[weak], axis=1)]]
        norm[weak] = np.linalg.norm(interp[weak], axis=1)
    out[mask] = interp / norm[:, None]
    return out.transpose(2, 0, 1)


def rasterize_normals(body: PosedBody, asset: BodyModelAsset, resolution: tuple[int, int] = (32, 32),
                      diagnostics: RasterDiagnostics | None = None) -> NormalMap:
    U, V = resolution
    if U % 4 or V % 4:
        raise ValueError(f"UV resolution must be divisible by 4, got {resolution}")
    plan = raster_plan(asset, (int(U), int(V)))
    if diagnostics is not None:
        diagnostics.skipped_faces += plan.skipped_faces
    return NormalMap(apply_plan(plan, asset.faces, body.vertex_normals), plan.mask.copy(), "shape")


def face_crop_box(asset: BodyModelAsset) -> tuple[float, float, float, float]:
    if asset.face_region_vertices.size == 0:
        raise ValueError("asset has no face region vertices")
    uv = asset.uv_coords[asset.face_region_vertices]
    u0, v0 = uv.min(0)
    u1, v1 = uv.max(0)
    if u1 - u0 <= 0 or v1 - v0 <= 0:
        raise ValueError("face region has zero UV extent")
    return float(u0), float(u1), float(v0), float(v1)


def crop_indices(asset: BodyModelAsset, source: tuple[int, int], target: tuple[int, int]):
    """Nearest source texel (row, col) index grids for each crop texel."""
    U, V = source
    Uc, Vc = target
    u0, u1, v0, v1 = face_crop_box(asset)
    us = u0 + (np.arange(Uc) + 0.5) / Uc * (u1 - u0)
    vs = v0 + (np.arange(Vc) + 0.5) / Vc * (v1 - v0)
    ii = np.clip(np.floor(us * U).astype(np.int64), 0, U - 1)
    jj = np.clip(np.floor(vs * V).astype(np.int64), 0, V - 1)
    return np.meshgrid(ii, jj, indexing="ij")


def crop_face(shape_map: NormalMap, asset: BodyModelAsset, resolution: tuple[int, int] = (16, 16)) -> NormalMap:
    """Resample the face region's UV bounding box of a shape map to ``resolution``."""
    ii, jj = crop_indices(asset, shape_map.resolution, resolution)
    return NormalMap(shape_map.data[:, ii, jj], shape_map.mask[ii, jj], "face")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------
POOL = 4


class Srn(Module):
    """Shared conditional U-Net plus separate shape and face weight-vector reducers."""

    def __init__(self, shape_res: tuple[int, int] = (32, 32), face_res: tuple[int, int] = (16, 16),
                 base_channels: int = 16, attn_dim: int = 16, reducer_hidden: Sequence[int] = (64, 64),
                 activation: str = "gelu", num_coeffs: int = 10, seed: int = 0):
        for res in (shape_res, face_res):
            if res[0] % 4 or res[1] % 4:
                raise ValueError(f"UV resolutions must be divisible by 4, got {res}")
        rng = np.random.default_rng(seed + 1)
        self.shape_res, self.face_res = tuple(shape_res), tuple(face_res)
        self.unet = UNet(UNetSpec(3, base_channels, 3, 9, attn_dim), rng, zero_head=True)
        n_shape = 3 * (shape_res[0] // POOL) * (shape_res[1] // POOL)
        n_face = 3 * (face_res[0] // POOL) * (face_res[1] // POOL)
        self.reducer_shape = Mlp(MlpSpec((n_shape, *reducer_hidden, num_coeffs), activation, "softplus"),
                                 rng, zero_last=True)
        self.reducer_face = Mlp(MlpSpec((n_face, *reducer_hidden, num_coeffs), activation, "softplus"),
                                rng, zero_last=True)
        self.params = {**{f"unet.{k}": v for k, v in self.unet.params.items()},
                       **{f"reducer_shape.{k}": v for k, v in self.reducer_shape.params.items()},
                       **{f"reducer_face.{k}": v for k, v in self.reducer_face.params.items()}}

    def weight_maps(self, maps, masks, conditions) -> Tensor:
        """Batched (M, 3, U, V) normal maps -> positive (M, 3, U, V) weight maps."""
        x = ad.as_tensor(maps) * np.asarray(masks, dtype=np.float64)[:, None]
        return ad.softplus(self.unet(x, conditions))

    def reduce(self, wmaps, kind: str) -> Tensor:
        """(M, 3, U, V) weight maps -> (M, 10) positive weight vectors."""
        wmaps = ad.as_tensor(wmaps)
        expected = self.shape_res if kind == "shape" else self.face_res
        if wmaps.ndim != 4 or wmaps.shape[1] != 3 or tuple(wmaps.shape[2:]) != expected:
            raise ValueError(f"{kind} weight map must be (M, 3, {expected[0]}, {expected[1]}), got {wmaps.shape}")
        pooled = ad.avg_pool(wmaps, POOL).reshape(wmaps.shape[0], -1)
        reducer = self.reducer_shape if kind == "shape" else self.reducer_face
        return reducer(pooled)


def srn_weight_maps(srn: Srn, nmap: NormalMap, camera: CameraParams) -> np.ndarray:
    expected = srn.shape_res if nmap.kind == "shape" else srn.face_res
    if nmap.resolution != tuple(expected):
        raise ValueError(f"{nmap.kind} map resolution {nmap.resolution} != network resolution {expected}")
    cond = camera_condition_vector(camera)[None]
    with ad.no_grad():
        w = srn.weight_maps(nmap.data[None], nmap.mask[None], cond)
    return w.data[0]


def reduce_weight_vector(srn: Srn, wmap, kind: str = "shape") -> np.ndarray:
    with ad.no_grad():
        return srn.reduce(np.asarray(wmap)[None], kind).data[0]


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------
def fuse_normals(maps, weights, masks):
    """Weighted normalisation over views (axis -4) of (..., N, 3, U, V) maps.

    ``masks`` is the constant (..., N, U, V) coverage. Returns the fused
    (..., 3, U, V) map renormalised to unit length and the OR-ed mask.
    """
    m = np.asarray(masks, dtype=np.float64)
    fused_mask = m.max(axis=-3) > 0
    wm = ad.as_tensor(weights) * m[..., None, :, :]
    num = (ad.as_tensor(maps) * wm).sum(-4)
    den = wm.sum(-4) + (~fused_mask)[..., None, :, :].astype(np.float64)
    mixed = num / den
    norm = ad.sqrt((mixed * mixed).sum(-3, keepdims=True) + (~fused_mask)[..., None, :, :].astype(np.float64))
    return mixed / norm, fused_mask


def fuse_normal_maps(maps: Sequence[NormalMap], weights: Sequence) -> NormalMap:
    if len(maps) == 0 or len(maps) != len(weights):
        raise ValueError("need one weight map per normal map")
    shapes = {m.data.shape for m in maps} | {np.shape(w) for w in weights}
    if len(shapes) != 1:
        raise ValueError(f"normal/weight maps must share one resolution, got {shapes}")
    if any(np.any(np.asarray(w) <= 0) for w in weights):
        raise ValueError("weight maps must be strictly positive")
    data = np.stack([m.data for m in maps])
    masks = np.stack([m.mask for m in maps])
    with ad.no_grad():
        fused, mask = fuse_normals(data, np.stack([np.asarray(w, dtype=np.float64) for w in weights]), masks)
    return NormalMap(fused.data, mask, maps[0].kind)


def fuse_param_vectors(params, weights):
    """Elementwise weighted mean over views (axis -2); arrays or tensors."""
    wdata = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if np.any(wdata <= 0):
        raise ValueError("weights must be strictly positive")
    if np.shape(params) != wdata.shape:
        raise ValueError(f"params {np.shape(params)} and weights {wdata.shape} differ in shape")
    if not isinstance(params, Tensor) and not isinstance(weights, Tensor):
        p = np.asarray(params, dtype=np.float64)
        return (p * wdata).sum(-2) / wdata.sum(-2)
    w = ad.as_tensor(weights)
    return (ad.as_tensor(params) * w).sum(-2) / w.sum(-2)


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------
MAP_MAGIC = b"MUCM"
MAP_VERSION = 1


class MapFileError(IOError):
    pass


def save_map(path, data, mask=None, kind: str = "shape") -> None:
    """Write a (C, U, V) grid and its (U, V) mask as little-endian f64."""
    data = np.ascontiguousarray(data, dtype="<f8")
    C, U, V = data.shape
    mask = np.ones((U, V)) if mask is None else np.asarray(mask, dtype="<f8")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<5I", MAP_VERSION, C, U, V, KINDS.index(kind)))
        f.write(data.tobytes())
        f.write(np.ascontiguousarray(mask, dtype="<f8").tobytes())


def load_map(path) -> NormalMap:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAP_MAGIC:
        raise MapFileError(f"{path}: not a MUCM map file")
    if len(raw) < 24:
        raise MapFileError(f"{path}: truncated header")
    version, C, U, V, kind = struct.unpack("<5I", raw[4:24])
    if version != MAP_VERSION:
        raise MapFileError(f"{path}: map version {version}, expected {MAP_VERSION}")
    n = C * U * V
    if len(raw) != 24 + 8 * (n + U * V):
        raise MapFileError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=24).reshape(C, U, V).astype(np.float64)
    mask = np.frombuffer(raw, dtype="<f8", count=U * V, offset=24 + 8 * n).reshape(U, V) > 0.5
    return NormalMap(data, mask, KINDS[kind])
