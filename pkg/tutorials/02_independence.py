"""
Measuring dependence with HSIC
==============================

HSIC compares the Gram matrix of an embedding (Gaussian kernel, median
bandwidth) with the Gram matrix of one-hot labels (linear kernel).  It is
near zero when the embedding carries no information about the labels.
"""

import numpy as np

from protoprop.independence import hsic_biased, hsic_normalized, independence_loss, median_heuristic, one_hot

rng = np.random.default_rng(1)
m = 64
colors = rng.integers(0, 4, m)
labels = one_hot(colors, 4)

# An embedding that ignores the labels ...
noise = rng.normal(size=(m, 8))
# ... and one that encodes them, plus a little noise.
leaky = np.hstack([labels * 3.0, rng.normal(scale=0.3, size=(m, 4))])

for name, z in [("independent", noise), ("label-encoding", leaky)]:
    raw = hsic_biased(z, labels).item()
    nrm = hsic_normalized(z, labels).item()
    print(f"{name:>15}: sigma {median_heuristic(z):.2f}  hsic {raw:.4f}  normalized {nrm:.3f}")

# The normalized value is a ratio of HSICs, so a constant embedding is
# flagged instead of dividing by zero.
flat = hsic_normalized(np.ones((m, 8)), labels)
print("constant embedding:", flat.item(), "degenerate =", flat.degenerate)

# The training loss averages both directions: attribute embeddings should
# not predict the object label and vice versa.
shapes = one_hot(rng.integers(0, 3, m), 3)
print("independence loss (lambda_h = 10):", independence_loss(noise, leaky, labels, shapes).item())
