"""
Receptive fields, parameter budgets and segment shapes
======================================================

Three variants share one layout: eight valid 3x3x3-style convolutions per
pathway, a context pathway on a 3x subsampled grid, and a 1x1x1 head.
Only the first filter differs between them.
"""

import numpy as np

from spinefrac.network import (
    NetworkConfig,
    count_parameters,
    forward,
    init_weights,
    make_segment,
    receptive_field,
    segment_spec,
)

for variant in ("1slice", "5slices", "3D"):
    cfg = NetworkConfig.for_variant(variant)
    normal, context = receptive_field(cfg)
    print(f"{variant:8s} rf {normal} context {context} params {count_parameters(cfg):,}")

# A 9^3 output patch needs a 25^3 input plus a 20^3 low-resolution window.
cfg = NetworkConfig.for_variant("3D")
spec = segment_spec(cfg, (9, 9, 9))
print("input", spec.input_segment_dims, "low-res input", spec.input_segment_dims_subsampled)

# One forward pass on noise: every voxel gets a 3-class distribution.
image = np.random.default_rng(0).normal(size=(40, 40, 40)).astype(np.float32)
seg = make_segment(image, (10, 10, 10), (9, 9, 9), cfg)
probs = forward(cfg, init_weights(cfg, 0), seg)
print("output", probs.shape, "sums to one:", np.allclose(probs.sum(-1), 1, atol=1e-5))
