"""How the in-batch negatives ranking loss responds to batch geometry."""

from __future__ import annotations

import math

import numpy as np

from kgembed import mnrl_loss

# %% boundary cases
print("one pair, no negatives:", mnrl_loss([[1.0, 0.0]], [[0.0, 1.0]]))
for b in (2, 4, 8):
    print(f"B={b}, every pair identical: {mnrl_loss(np.ones((b, 3)), np.ones((b, 3))):.6f}  ln B = {math.log(b):.6f}")
print(f"orthonormal pairs, scale 1: {mnrl_loss(np.eye(2), np.eye(2), scale=1.0):.6f}")

# %% pulling positives towards their anchors lowers the loss
rng = np.random.default_rng(0)
anchors = rng.normal(size=(8, 32))
noise = rng.normal(size=(8, 32))
for mix in (0.0, 0.25, 0.5, 0.75, 1.0):
    positives = mix * anchors + (1 - mix) * noise
    print(f"positive = {mix:.2f} anchor + {1 - mix:.2f} noise -> loss {mnrl_loss(anchors, positives):.4f}")
