"""Small end-to-end run: generate data, train briefly, sample, score.

Uses a reduced model and dataset so the whole script finishes in about
a minute; the full desk-scale run lives behind the command-line tool
(`tryonlab train`) and the acceptance suite.
"""

import time
from pathlib import Path

import numpy as np
from PIL import Image

from tryonlab.data import GeneratorConfig, synth_sample
from tryonlab.diffusion import make_schedule
from tryonlab.model import ModelDims, TryOnModel, encode_sample, sample_tryon
from tryonlab.train import evaluate_split, moving_average, train_teacher

out_dir = Path("demo_outputs/training")
out_dir.mkdir(parents=True, exist_ok=True)

dims = ModelDims(channels=16, heads=2, head_dim=8, blocks=2, latent_channels=8)
gen_cfg = GeneratorConfig(frames=4, image_size=32, vae_factor=4)
model = TryOnModel.create(dims, seed=0, vae_factor=4)
schedule = make_schedule(1000)

print("encoding 48 training / 8 test samples ...")
train_enc = [encode_sample(synth_sample(100 + i, gen_cfg), model.vae, dims.channels) for i in range(48)]
test_enc = [encode_sample(synth_sample(900 + i, gen_cfg), model.vae, dims.channels) for i in range(8)]

before = evaluate_split(model, test_enc, schedule, steps=20, seed=7)
print(f"untrained:  garment_fidelity={before.garment_fidelity:.4f}  ssim={before.ssim:.4f}")

t0 = time.perf_counter()
records = train_teacher(model, train_enc, schedule, iterations=400, lr=6e-4, seed=1, batch_size=2)
losses = [r.loss for r in records]
ma = moving_average(losses, 50)
print(f"trained 400 iterations in {time.perf_counter() - t0:.0f}s; "
      f"loss {ma[49]:.3f} -> {ma[-1]:.3f}")

after = evaluate_split(model, test_enc, schedule, steps=20, seed=7)
print(f"trained:    garment_fidelity={after.garment_fidelity:.4f}  ssim={after.ssim:.4f}")
print(f"unpaired:   garment_fidelity="
      f"{evaluate_split(model, test_enc, schedule, steps=20, seed=8, unpaired=True).garment_fidelity:.4f}")

# render one try-on next to its ground truth
enc = test_enc[0]
_, video, nfe = sample_tryon(model, enc, steps=20, seed=42, schedule=schedule)
for f in range(gen_cfg.frames):
    pair = np.concatenate([enc.sample.person_video[f], video[f]], axis=1)
    img = np.clip(np.round(pair * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(out_dir / f"gt_vs_sample_f{f}.png")
print(f"\nwrote ground-truth vs sampled frames ({nfe} denoiser calls) to {out_dir}/")
