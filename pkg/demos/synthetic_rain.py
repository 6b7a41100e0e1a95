"""
Synthetic multi-to-one rain
===========================

One clean background, three rain severities. Writes PNGs to demo_out/rain/.
"""

from pathlib import Path

import numpy as np

from manas.data import SEVERITIES, augment, make_background, make_pair, write_image
from manas.metrics import psnr, ssim

out = Path("demo_out/rain")
out.mkdir(parents=True, exist_ok=True)

gt = make_background(0, 64)
pair = make_pair(gt, seed=0, stem="demo")
write_image(out / "gt.png", gt)
for sev, img in zip(SEVERITIES, pair.rainy):
    write_image(out / f"{sev}.png", img)
    print(f"{sev:<7} mean rain {np.mean(img - gt):.4f}  PSNR {psnr(img, gt):.2f} dB  SSIM {ssim(img, gt).item():.3f}")

# augmentation crops and flips all four images together
crop = augment(pair, seed=3, patch=32)
print("cropped:", crop.rainy.shape, crop.gt.shape)
print("wrote", sorted(p.name for p in out.iterdir()))
