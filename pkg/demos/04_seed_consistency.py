"""Warping a seed map by optical flow and measuring temporal consistency.

Run with ``python demos/04_seed_consistency.py``.
"""
import numpy as np

from pointmots.seed_consistency import temporal_consistency_loss, warp

# A blob in frame T-1 that moves 3 pixels right and 1 down by frame T.
ys, xs = np.mgrid[0:24, 0:32]
prev = np.exp(-((xs - 10) ** 2 + (ys - 12) ** 2) / 18.0)
cur = np.exp(-((xs - 13) ** 2 + (ys - 13) ** 2) / 18.0)
foreground = cur > 0.2

flow = np.zeros((24, 32, 2))
print("loss without warping:", round(temporal_consistency_loss(prev, cur, foreground), 6))
flow[..., 0], flow[..., 1] = 3.0, 1.0
print("loss with the true flow:", temporal_consistency_loss(warp(prev, flow), cur, foreground))
flow[..., 0] = 2.5  # half a pixel off: bilinear sampling blurs slightly
print("loss with a flow half a pixel off:", round(temporal_consistency_loss(warp(prev, flow), cur, foreground), 6))
