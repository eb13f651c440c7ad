"""
Outlier exposure on the default 4-class benchmark
==================================================

One seed, one head, with and without exposure to mixup outliers.
"""

import tempfile

from oodkit.config import ExperimentConfig
from oodkit.experiment import run_pipeline

cfg = ExperimentConfig().replace(**{"eval.scores": ("maxcos",)})
with tempfile.TemporaryDirectory() as out:
    reports = run_pipeline(cfg, out, kinds=("cosface",))

for rep in reports:
    for r in rep.records:
        tag = "OE  " if r.oe else "base"
        print(f"{tag} {r.ood_set:18} AUROC {r.auroc:.3f}  accuracy {r.closed_set_accuracy:.3f}")
