# %% [markdown]
# Cameras, projection, and the per-camera joint depth table that drives the JRN target.

# %%
import numpy as np

from muc.body_model import ParamSet, lbs_forward, make_toy_asset
from muc.camera import CameraParams, camera_condition_vector, joint_distance_table, project_points

asset = make_toy_asset()
joints = lbs_forward(asset, ParamSet.zeros(asset)).joints[asset.body_joint_ids]

front = CameraParams.look_at([0.0, -3.0, 1.2], [0, 0, 1])
side = CameraParams.look_at([4.0, 0.0, 1.2], [0, 0, 1])

# %%
uv = project_points(front, joints)
print("pelvis pixel", uv[0].round(1), "head-ish pixel", uv[-1].round(1))

# %%
for name, cam in (("front", front), ("side", side)):
    t = joint_distance_table(cam, joints)
    depth = t.records[:, 2]
    print(name, "depth range %.3f..%.3f m" % (depth.min(), depth.max()),
          "normalized[:5]", t.normalized[:5].round(2))

# %%
# what the networks see of a camera: 6D rotation + translation
print(camera_condition_vector(side).round(3))
