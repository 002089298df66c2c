"""Super-resolution in three steps: the bicubic starting point, a short fit, and the CLI.

python3 demos/superres.py
"""

import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from litnet import LitNet, ModelConfig
from litnet.checkpoint import Checkpoint, save_checkpoint
from litnet.core import Tensor, ops
from litnet.data import save_image, synthetic_pairs
from litnet.train import TrainConfig, dataset_psnr, train

scale = 2
cfg = ModelConfig(base_width=8, fc_width=16, mode="superres", scale=scale)

# The prediction is pixel_shuffle(residual) + bicubic(input); untrained, the residual is zero.
lr_img = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
sr = LitNet(cfg)(Tensor(lr_img)).data
print("untrained output == bicubic:", np.array_equal(sr, ops.bicubic_upsample(Tensor(lr_img), scale).data))

lr, hr = synthetic_pairs(6, seed=3, h=32, w=32, scale=scale)
print(f"LR {lr.shape[2:]} -> HR {hr.shape[2:]}")
res = train(TrainConfig(max_steps=40, batch_size=4, lr=1e-3), cfg, data=(lr, hr))
print(f"training-set PSNR after 40 steps: {dataset_psnr(res.model, lr, hr):.2f} dB")

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    save_checkpoint(tmp / "sr.litn", Checkpoint.from_model(res.model))
    # any input size works; the CLI pads to a multiple of 8 and crops back
    save_image(np.random.default_rng(1).random((30, 45, 3)), tmp / "small.png")
    subprocess.run([sys.executable, "-m", "litnet", "superres", "--ckpt", str(tmp / "sr.litn"),
                    "--scale", str(scale), "--in", str(tmp / "small.png"), "--out", str(tmp / "big.png")], check=True)
    print("CLI output size:", Image.open(tmp / "big.png").size, "from", Image.open(tmp / "small.png").size)
