# %% [markdown]
# Joint reweighting: score-weighted fusion of per-view rotations and the KL target built from joint depths.

# %%
import numpy as np

from muc.jrn import fuse_weighted, jrn_loss, rotation_group_map, target_distribution

# two views, one joint: the better view gets three times the score
stack = np.array([[1.0, 2.0], [3.0, 4.0]])
print(fuse_weighted(stack, np.array([[1.0], [3.0]]), [0, 0]))      # (2.5, 3.5)

# %%
# per-joint target over cameras: nearer joints get more mass
d = np.array([[0.0, 0.5, 1.0],
              [1.0, 0.5, 0.0]])                                       # 2 cameras x 3 joints
q = target_distribution(d, temperature=0.5)
print(q.round(3))

# %%
# KL(softmax(logits) || q); zero logits mean "no preference"
print("uniform scores vs q: %.4f" % jrn_loss(np.zeros_like(q), q))
print("matching scores:     %.2e" % jrn_loss(np.log(q), q))

# %%
# body layout: each axis-angle triple shares its joint's score
groups = rotation_group_map(np.arange(21))
print(groups[:9])
