# %% [markdown]
# Toy body model: build an asset, pose it, look at the normals, write an OBJ.

# %%
import numpy as np

from muc.body_model import ParamSet, lbs_forward, make_toy_asset, save_asset, load_asset, write_obj

asset = make_toy_asset(num_vertices=200, num_joints=25, seed=0)
print("vertices", asset.num_vertices, "faces", len(asset.faces), "joints", asset.num_joints)
print("body ids", asset.body_joint_ids[:5], "... hand ids", asset.hand_joint_ids)

# %%
# zero parameters give the template back, bit for bit
rest = lbs_forward(asset, ParamSet.zeros(asset))
print("template reproduced:", np.array_equal(rest.vertices, asset.template_vertices))

# %%
rng = np.random.default_rng(1)
p = ParamSet(rng.uniform(-0.4, 0.4, (21, 3)), rng.uniform(-0.4, 0.4, (4, 3)),
             rng.normal(size=10), rng.normal(size=10))
posed = lbs_forward(asset, p)
print("posed height %.3f m" % np.ptp(posed.vertices[:, 2]))
print("normal lengths in [%.6f, %.6f]" % tuple(np.percentile(np.linalg.norm(posed.vertex_normals, axis=1), [0, 100])))

# %%
save_asset(asset, "/tmp/toy.muca")
print("asset file round trip:", load_asset("/tmp/toy.muca").equals(asset))
write_obj(posed, asset.faces, "/tmp/posed.obj")
print(open("/tmp/posed.obj").read().splitlines()[0])
