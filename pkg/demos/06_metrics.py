# %% [markdown]
# Errors in millimetres, with and without Procrustes alignment.

# %%
import numpy as np
from scipy.spatial.transform import Rotation

from muc.metrics import mean_position_error, pa_error, procrustes_align

rng = np.random.default_rng(0)
gt = rng.normal(0, 0.3, (21, 3))

print("shifted by (3, 0, 4) mm -> %.1f mm" % mean_position_error(gt + [0.003, 0, 0.004], gt))

# %%
R = Rotation.from_euler("z", 30, degrees=True).as_matrix()
pred = 2 * gt @ R.T + [1, 2, 3] + rng.normal(0, 0.01, gt.shape)
aligned, s, R_hat, t = procrustes_align(pred, gt)
print("MPJPE %.1f mm, PA-MPJPE %.1f mm, recovered scale %.3f" % (mean_position_error(pred, gt), pa_error(pred, gt), s))
print("rigid only (no scale): %.1f mm" % pa_error(pred, gt, scale=False))
