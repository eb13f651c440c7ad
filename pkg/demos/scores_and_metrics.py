"""
Detection scores, AUROC/AUPR and the TPR-95 threshold
======================================================

"""

import numpy as np

from oodkit.evaluation import aupr, auroc, detect, threshold_at_tpr
from oodkit.scores import energy_score, fit_gaussian_stats, mahalanobis_score

rng = np.random.default_rng(0)

# two ID classes and a broad noise cloud
X = np.vstack([rng.normal([3, 0], 0.5, (200, 2)), rng.normal([-3, 0], 0.5, (200, 2))])
y = np.repeat([0, 1], 200)
noise = rng.normal(0, 4, (400, 2))

stats = fit_gaussian_stats(X, y)
s_id, s_ood = mahalanobis_score(X, stats), mahalanobis_score(noise, stats)
print("AUROC    ", round(auroc(s_id, s_ood), 4))
print("AUPR-In  ", round(aupr(s_id, s_ood, "ID"), 4))
print("AUPR-Out ", round(aupr(s_id, s_ood, "OOD"), 4))

# threshold that keeps 95% of (here, the same) ID scores; below it means OOD
tau = threshold_at_tpr(s_id, 0.95)
print("tau", round(tau, 3), "flagged noise:", np.mean(detect(s_ood, tau) == "OOD"))

# energy of a logit vector shifts exactly with a constant offset
logits = np.array([0.0, -1.5, -4.0])
print(energy_score(logits + 3.0), energy_score(logits) + 3.0)
