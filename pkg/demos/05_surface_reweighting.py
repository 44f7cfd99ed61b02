# %% [markdown]
# Surface reweighting: normals rasterized into the UV chart, per-texel weights, weighted normalization.

# %%
import numpy as np

from muc.body_model import ParamSet, lbs_forward, make_toy_asset
from muc.camera import CameraParams
from muc.srn import Srn, crop_face, fuse_normal_maps, rasterize_normals, reduce_weight_vector, save_map, srn_weight_maps

asset = make_toy_asset()
rng = np.random.default_rng(0)
bodies = [lbs_forward(asset, ParamSet(rng.uniform(-.3, .3, (21, 3)), np.zeros((4, 3)), rng.normal(size=10),
                                      np.zeros(10))) for _ in range(2)]
maps = [rasterize_normals(b, asset, (32, 32)) for b in bodies]
print("UV coverage %.0f%%" % (100 * maps[0].mask.mean()))
print("face crop", crop_face(maps[0], asset, (16, 16)).data.shape)

# %%
# an untrained SRN weights every texel ln 2, so fusion is a plain normalized mean
srn = Srn()
cam = CameraParams.look_at([3, 0, 1.2], [0, 0, 1])
w = [srn_weight_maps(srn, m, cam) for m in maps]
print("weights", np.unique(w[0]).round(6), "-> ln2 = %.6f" % np.log(2))
fused = fuse_normal_maps(maps, w)
print("fused normals unit:", np.allclose(np.linalg.norm(fused.data[:, fused.mask], axis=0), 1))
print("shape weight vector", reduce_weight_vector(srn, w[0], "shape").round(4))

# %%
save_map("/tmp/fused.mucm", fused.data, fused.mask)
