"""The differential-privacy layer: clip to bound sensitivity, then add
calibrated Gaussian noise.

The noise scale follows sigma = C * sqrt(2 ln(1.25/delta)) / epsilon, so
tightening epsilon or delta, or raising the clip norm C, always means
more noise.
"""

import numpy as np

from fedmesh import PrivacyBudget, calibrate_sigma, clip, privatize

# Clipping caps the L2 norm and reports what it did.
vector = np.array([3.0, 4.0])
clipped, applied, pre_norm = clip(vector, 1.0)
print(f"clip([3,4], C=1): {clipped} (applied={applied}, pre-norm={pre_norm})")

print("\ncalibration table (C=1, delta=1e-5):")
for eps in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0):
    sigma = calibrate_sigma(PrivacyBudget(epsilon=eps, delta=1e-5, clip_norm=1.0))
    print(f"  epsilon={eps:<5} sigma={sigma:.4f}")

# The released update composes clip -> noise; a disabled budget is the identity.
budget = PrivacyBudget(epsilon=1.0, delta=1e-5, clip_norm=0.5)
update = np.full(1000, 0.02)
released, receipt = privatize(update, budget, seed=7)
print(f"\nreceipt: mechanism={receipt.mechanism}, sigma={receipt.sigma:.4f}, "
      f"clip_applied={receipt.clip_applied}, pre_clip_norm={receipt.pre_clip_norm:.4f}")
print(f"empirical noise std over 1000 coords: {np.std(released - clip(update, 0.5)[0]):.4f}")

off = PrivacyBudget(enabled=False)
same, receipt = privatize(update, off, seed=7)
print(f"disabled budget returns the input object untouched: {same is update} (mechanism={receipt.mechanism})")
