"""Train a small enhancement model on synthetic pairs, then enhance and score an image.

Runs in well under a minute:  python3 demos/quickstart.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from litnet import LitNet, ModelConfig, count_params, predict
from litnet.core import Tensor
from litnet.data import from_batch, save_image, synthetic_pairs, to_batch
from litnet.metrics import psnr, ssim_index, uiqm
from litnet.train import TrainConfig, dataset_psnr, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="litnet-demo-"))
out.mkdir(parents=True, exist_ok=True)

# A narrow model keeps the demo fast; ModelConfig() is the full-size default.
model_cfg = ModelConfig(base_width=8, fc_width=16)
print(f"model: {count_params(model_cfg):,} parameters (default config: {count_params(ModelConfig()):,})")

inputs, targets = synthetic_pairs(6, seed=0, h=32, w=32)
print(f"identity baseline: {np.mean([psnr(x, y) for x, y in zip(inputs, targets)]):.2f} dB")

cfg = TrainConfig(max_steps=60, batch_size=4, lr=1e-3, seed=0)
result = train(cfg, model_cfg, data=(inputs, targets), out_dir=out / "run",
               on_step=lambda step, t: step % 20 == 0 and print(f"  step {step:3d}  l_T {t['l_T']:.4f}"))
print(f"after {cfg.max_steps} steps: {dataset_psnr(result.model, inputs, targets):.2f} dB on the training pairs")
print(f"checkpoint: {result.checkpoint}")

# Inference on one image, the same path the CLI takes.
img = from_batch(inputs[:1])
enhanced = from_batch(predict(result.model, Tensor(to_batch(img))))
save_image(img, out / "degraded.png")
save_image(enhanced, out / "enhanced.png")
clean = from_batch(targets[:1])
print(f"degraded: PSNR {psnr(img, clean):.2f} dB  SSIM {ssim_index(img, clean):.3f}  UIQM {uiqm(img)[0]:.3f}")
print(f"enhanced: PSNR {psnr(enhanced, clean):.2f} dB  SSIM {ssim_index(enhanced, clean):.3f}  UIQM {uiqm(enhanced)[0]:.3f}")
print(f"images in {out}")

# A freshly built network is the identity: the residual head starts silent.
fresh = LitNet(model_cfg)
assert np.array_equal(fresh(Tensor(inputs[:2])).data, inputs[:2])
