"""
Synthetic spines and their label volumes
========================================

A phantom case is a soft-tissue cylinder holding a short stack of bright
ellipsoids. Fractured bodies are squashed along the head-foot axis. The
annotations carry only centroids and grades; the dense label volume is
rebuilt from them.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from spinefrac.labels import FRACTURE, NORMAL
from spinefrac.phantom import PhantomSpec, generate_case
from spinefrac.volume_io import preprocess

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)

# Force one fracture so both foreground classes show up.
spec = PhantomSpec(fracture_prevalence=0.5, vertebrae_per_case=(4, 4))
rng = np.random.default_rng(3)
image, annotations, labels = generate_case(spec, rng, "demo")

for a in annotations:
    print(f"{a.name:4s} {a.grade:9s} centroid (mm) {np.round(a.centroid, 1)}")

# The image is rendered at 1 x 1 x 1.5 mm; labels live on the 1 mm grid.
iso = preprocess(image)
print("native", image.shape, image.spacing, "-> resampled", iso.shape)
print("label voxels: normal", int((labels.data == NORMAL).sum()), "fracture", int((labels.data == FRACTURE).sum()))

# Mid-sagittal slice: intensity on the left, labels on the right.
x = iso.shape[0] // 2
fig, axes = plt.subplots(1, 2, figsize=(5, 5))
axes[0].imshow(iso.data[x].T, cmap="gray", origin="lower")
axes[1].imshow(labels.data[x].T, cmap="viridis", origin="lower", vmin=0, vmax=2)
for ax, title in zip(axes, ("image", "labels")):
    ax.set_title(title)
    ax.set_axis_off()
fig.savefig(out / "phantom_slice.png", dpi=100, bbox_inches="tight")
print("wrote", out / "phantom_slice.png")
