"""From an instance mask to point clouds, modalities and an embedding.

Run with ``python demos/02_point_clouds.py``.
"""
import numpy as np

from pointmots import embed_net
from pointmots.pointcloud import SamplerConfig, encode_modalities, sample_points
from pointmots.synth_world import WorldConfig, gen_sequence

seq = gen_sequence(WorldConfig(frames=2, rng_seed=4))
image, class_map = seq.images[0], seq.class_maps[0]
obs = [o for o in seq.instances if o.frame_index == 0][0]
print(f"instance of class {obs.class_id} covering {obs.mask.area} pixels")

# Foreground points come from the segment, environment points from the rest
# of the enlarged box around it. Both are drawn uniformly with replacement.
cfg = SamplerConfig(n_fg=1000, n_env=500)
pc = sample_points(image, class_map, obs, cfg, np.random.default_rng(0))
print("crop box:", pc.crop_box, "segment centre (u, v):", pc.center.round(2))
print("environment classes seen:", np.bincount(pc.env_class, minlength=4)[1:])

# Four modalities: offsets from the centre, colours, a one-hot class for the
# environment points, and a sinusoidal code of the box position.
mod = encode_modalities(pc, cfg.num_classes)
print("foreground features", mod.fg_features.shape, "environment features", mod.env_features.shape,
      "position code", mod.position.shape)

# An untrained network already produces a 32-d vector. The final layer of the
# weighting head starts at zero, so every foreground point weighs the same.
params = embed_net.init_params(0, cfg.num_classes)
out, trace = embed_net.forward(params, mod.fg_features, mod.env_features, mod.position)
print("embedding norm:", float(np.linalg.norm(out)))
print("point weights all equal:", bool(np.all(trace.point_weights() == 1 / cfg.n_fg)))
crit = embed_net.critical_env_indices(trace, 5)
print("most critical environment points (u, v):", pc.env_uv[crit].astype(int).tolist())
