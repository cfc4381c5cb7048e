"""Train a small embedding network on synthetic sequences and track with it.

This is a scaled-down version of the end-to-end acceptance run (fewer
sequences, fewer points, a few epochs), so it finishes in well under a
minute. Run with ``python demos/03_train_and_track.py``.
"""
import time

from pointmots import metric_learning
from pointmots.mots_eval import motsa
from pointmots.pipeline import Ablation, EmbeddingExtractor, evaluate_tracking
from pointmots.pointcloud import SamplerConfig
from pointmots.synth_world import WorldConfig, gen_sequence, sequence_config
from pointmots.tracker import TrackerConfig

world = WorldConfig(frames=40)
train = [gen_sequence(sequence_config(world, i), name=f"train{i}") for i in range(8)]
val = [gen_sequence(sequence_config(world, 100 + i), name=f"val{i}") for i in range(3)]
print("mean density:", sum(s.meta["density"] for s in train) / len(train), "instances/frame")

# Every ground-truth instance becomes a crop; a batch takes 3 crops from each
# of several tracks and the loss pulls same-track embeddings together.
sampler = SamplerConfig(n_fg=256, n_env=128)
db = metric_learning.build_crop_database([(s.name, s.frames()) for s in train], sampler.k)
cfg = metric_learning.TrainConfig(epochs=4, ids_per_batch=12)
t0 = time.perf_counter()
params, curve = metric_learning.train(
    db, cfg, sampler,
    on_epoch=lambda e, loss, _: print(f"epoch {e}: loss {loss:.4f} ({time.perf_counter() - t0:.0f} s)"))

# Track the validation sequences from their ground-truth masks (identities
# removed) and compare against a tracker that only sees mask overlap.
tracker = TrackerConfig()
for label, ablation in [("embeddings + IoU", Ablation()), ("IoU only", Ablation(embedding=True)),
                        ("no colour", Ablation(color=True))]:
    c = evaluate_tracking(val, EmbeddingExtractor(params, sampler, ablation=ablation), tracker)
    print(f"{label:>17}: MOTSA {motsa(c):.4f}  IDS {c.ids}")
