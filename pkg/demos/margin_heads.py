"""
Angular-margin heads on a single batch
=======================================

"""

import numpy as np

from oodkit.losses import KINDS, adacos_scale, head_loss, make_head, sphere_psi
from oodkit.nn import Rng

rng = Rng(0)
z = rng.normal((8, 16))          # penultimate features for 8 samples
labels = rng.integers(0, 4, size=8)

# every head sees the same features; margins make the true-class logit harder to win
for kind in KINDS:
    head = make_head(kind, 16, 4, rng.split(1))
    print(f"{kind:14} s={head.s:7.3f} m={head.m:4} loss={head_loss(z, head, labels).loss:.4f}")

# the sphereface target function is monotone decreasing on [0, pi]
theta = np.linspace(0, np.pi, 7)
print("psi(theta, m=2):", np.round(sphere_psi(theta, 2), 3))

# AdaCos picks its scale from the class count alone
for C in (4, 10, 100):
    print(f"adacos scale for {C} classes: {adacos_scale(C):.3f}")
