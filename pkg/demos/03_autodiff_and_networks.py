# %% [markdown]
# The reverse-mode engine, checked against central differences, and the small networks on top of it.

# %%
import numpy as np

from muc import autodiff as ad
from muc.nn import Adam, CrossAttention, Mlp, MlpSpec, UNet, UNetSpec, check_gradients

x = ad.tensor([1.0, 2.0], requires_grad=True)
(x * x).sum().backward()
print("d/dx sum(x^2) at (1,2):", x.grad)

# %%
rng = np.random.default_rng(0)
net = UNet(UNetSpec(in_channels=3, base_channels=4, out_channels=3, cond_dim=9, attn_dim=4), rng)
img = rng.normal(size=(2, 3, 16, 16))
cond = rng.normal(size=(2, 9))
print("unet out", net(img, cond).shape)

errs = check_gradients(lambda: (net(img, cond) ** 2).mean(), net.params, max_coords=6)
print("worst relative gradient error: %.2e" % max(errs.values()))

# %%
# single condition token: the softmax over one key is identically 1
blk = CrossAttention(3, 9, 4, rng)
_, attn = blk.attend(img, cond)
print("attention weights unique values:", np.unique(attn.data))

# %%
# fit a tiny MLP to sin(x) with Adam
mlp = Mlp(MlpSpec((1, 32, 1), "gelu"), rng)
opt = Adam(mlp.params, lr=1e-2)
xs = np.linspace(-3, 3, 64)[:, None]
for step in range(500):
    opt.zero_grad()
    loss = ((mlp(xs) - np.sin(xs)) ** 2).mean()
    loss.backward()
    opt.step()
print("final MSE %.4f" % loss.item())
