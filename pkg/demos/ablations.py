"""Parameter and FLOP budget of the default model and of each architectural ablation.

python3 demos/ablations.py
"""

from litnet import ModelConfig, count_flops, count_params

variants = {
    "full model": ModelConfig(),
    "no attention": ModelConfig(mran_attention=False, skip_attention=False),
    "fixed 3x3 kernels": ModelConfig(fixed_kernel=True),
    "no channel split": ModelConfig(channel_split=False),
    "x4 super-resolution": ModelConfig(mode="superres", scale=4),
}
print(f"{'variant':<22}{'params':>10}{'GFLOPs@256':>12}")
for name, cfg in variants.items():
    h = w = 64 if cfg.mode == "superres" else 256
    print(f"{name:<22}{count_params(cfg):>10,}{count_flops(cfg, h, w) / 1e9:>12.2f}")
print("(the super-resolution row is measured on a 64x64 input, i.e. a 256x256 output)")
print("The plain-L1 ablation changes only the loss: LossConfig(w_r=1, w_g=1, w_b=1).")
