#!/usr/bin/env python3
"""Sample the shifting augmentation and render what it does to an image.

The pipeline crops a random box (half the time), resizes it by random
rates, and drops the patch at a random spot on a constant-grey canvas.
Identity-preserving, position-destroying: retrieval models stop relying on
the person always filling the frame. This script renders a handful of
previews as PPM files and then checks the sampling statistics over many
draws.

Run:  python3 demos/augmentation_preview.py
Output: demos/out/augmentation/*.ppm
"""

from pathlib import Path

import numpy as np

from stripenet.augment import RSAParams, apply_shift, sample_shift, write_ppm
from stripenet.data import make_synthetic_dataset

out_dir = Path(__file__).parent / "out" / "augmentation"
out_dir.mkdir(parents=True, exist_ok=True)

# Borrow one synthetic identity image as the subject.
dataset = make_synthetic_dataset(n_identities=3, seed=4)
img = dataset.images[0]
write_ppm(out_dir / "original.ppm", img)

params = RSAParams()  # crop half the time, ratios in [0.7, 1], rates in [0.5, 1]
rng = np.random.default_rng(21)

print(f"{'i':>2} {'cropped':>7} {'crop box':>16} {'resized':>9} {'placed at':>10}")
for i in range(8):
    t = sample_shift(params, *img.shape[:2], rng)
    write_ppm(out_dir / f"shift_{i}.ppm", apply_shift(img, t))
    if t is None:
        print(f"{i:>2} {'-':>7} {'untouched':>16}")
        continue
    print(f"{i:>2} {str(t.cropped):>7} {str(t.crop):>16} "
          f"{str(t.resize):>9} {str(t.offset):>10}")
print(f"\nwrote previews to {out_dir}")

# ---------------------------------------------------------------------------
# Sampling statistics: the knobs should do what they claim.
# ---------------------------------------------------------------------------

n = 20_000
rng = np.random.default_rng(0)
draws = [sample_shift(params, 48, 16, rng) for _ in range(n)]
cropped = sum(t.cropped for t in draws)
full_height = sum(t.resize[0] == 48 for t in draws)
r_cs = [t.r_c for t in draws if t.cropped]

print(f"\nover {n} draws:")
print(f"  cropped fraction      {cropped / n:.3f}  (p_c = {params.p_c})")
print(f"  min/max crop ratio    {min(r_cs):.3f} / {max(r_cs):.3f} "
      f"(bounds [{params.r_c_min}, 1.0])")
print(f"  patch spans full height in {full_height / n:.3f} of draws")

# Every placement must stay on the canvas; validate() would raise otherwise.
for t in draws:
    t.validate(48, 16)
print("  all placements inside the canvas")

# The fill is exactly mid-grey for 8-bit images.
blank = np.full((48, 16, 3), 255, dtype=np.uint8)
sample = apply_shift(blank, draws[0])
print(f"  uint8 fill value: {sample.min()} (patch pixels stay {sample.max()})")
