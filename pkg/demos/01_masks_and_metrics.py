"""Masks as run lengths, and scoring a tracker against ground truth.

Run with ``python demos/01_masks_and_metrics.py``.
"""
import numpy as np

from pointmots.mask_geometry import (InstanceObservation, enlarge_bbox, mask_iou, rle_decode,
                                     rle_encode, tight_bbox)
from pointmots.mots_eval import evaluate_sequence, motsa, smotsa

# A mask is stored column by column as alternating runs of 0s and 1s,
# always starting with a (possibly empty) run of 0s.
dense = np.zeros((4, 5), dtype=bool)
dense[1:3, 1:4] = True
mask = rle_encode(dense)
print("counts:", mask.format_counts(), "area:", mask.area)
assert np.array_equal(rle_decode(mask).astype(bool), dense)

# IoU is computed by walking the runs of both masks; no dense arrays needed.
other = np.zeros((4, 5), dtype=bool)
other[1:3, 2:5] = True
print("IoU:", mask_iou(mask, rle_encode(other)))  # 4 shared of 8 covered -> 0.5

# The tight box and its enlargement, which decides where environment points come from.
box = tight_bbox(mask)
print("tight box:", box, "enlarged by 0.2:", enlarge_bbox(box, 0.2, 5, 4))


# Now a short sequence: one object, tracked with a single identity switch.
def obj(frame, tid, x0):
    m = np.zeros((10, 30), dtype=bool)
    m[2:8, x0:x0 + 6] = True
    return InstanceObservation(frame, 2, rle_encode(m), tid)


gt = [obj(f, 1, 2 * f) for f in range(8)]
hyp = [obj(f, 7 if f < 4 else 8, 2 * f) for f in range(8)]  # the id changes at frame 4
c = evaluate_sequence(gt, hyp)
print(f"TP {c.tp} FP {c.fp} FN {c.fn} IDS {c.ids}")
print(f"MOTSA {motsa(c):.3f}  sMOTSA {smotsa(c):.3f}")
