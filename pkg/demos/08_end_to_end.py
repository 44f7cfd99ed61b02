# %% [markdown]
# End to end on a small run: train JRN + SRN, then sweep the camera count.
# The full benchmark (256/64/512 scenes, 8 epochs) is what the acceptance suite runs; this one takes under a minute.

# %%
from muc.config import RunConfig
from muc.pipeline import make_asset, run_eval_sweep, run_training
from muc.synth import generate_dataset

cfg = RunConfig().replace(optimizer={"epochs": 10}, srn={"shape_res": (16, 16), "face_res": (8, 8)})
asset = make_asset(cfg)
train = generate_dataset(asset, 128, 4, cfg.noise, 1000, "train")
val = generate_dataset(asset, 16, 4, cfg.noise, 101000, "val")
test = generate_dataset(asset, 64, 4, cfg.noise, 201000, "test")

res = run_training(cfg, train, val, asset, "/tmp/muc_demo", log=print)
print("best epoch", res.best_epoch)

# %%
for r in run_eval_sweep(res.model, test, [1, 2, 3, 4]):
    print("k=%d  PA-MPJPE %.1f (uniform %.1f)  PA-MPVPE %.1f (JRN only %.1f)"
          % (r.n_cameras, r.full.pa_mpjpe, r.uniform.pa_mpjpe, r.full.pa_mpvpe, r.jrn_only.pa_mpvpe))
