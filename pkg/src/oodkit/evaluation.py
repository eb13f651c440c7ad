"""Detection metrics, the TPR-95 threshold and decision rule, and closed-set accuracy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .losses import MetricHead, plain_logits
from .nn import Mlp

log = logging.getLogger(__name__)

ID, OOD = "ID", "OOD"
EXACT_AUPR_LIMIT = 4096


def _pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=float).ravel()
    b = np.asarray(ood_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score), ties worth one half (Mann-Whitney U)."""
    a, b = _pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2
    return float(u / (a.size * b.size))


def brute_force_auroc(id_scores, ood_scores) -> float:
    a, b = _pair(id_scores, ood_scores)
    wins = (a[:, None] > b[None, :]).sum() + 0.5 * (a[:, None] == b[None, :]).sum()
    return float(wins / (a.size * b.size))


def _step_pr(pos, neg):
    """Precision/recall at every distinct threshold, highest threshold first;
    a sample counts as predicted positive when its score >= threshold."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(is_pos)[last]
    fp = np.cumsum(1 - is_pos)[last]
    return tp, fp, scores[last]


def aupr(id_scores, ood_scores, positive: str = ID) -> float:
    """Area under the step-wise precision-recall curve:
    sum over thresholds of (recall gain) x precision."""
    a, b = _pair(id_scores, ood_scores)
    if positive == ID:
        pos, neg = a, b
    elif positive == OOD:
        pos, neg = -b, -a
    else:
        raise ValueError("positive must be 'ID' or 'OOD'")
    tp, fp, _ = _step_pr(pos, neg)
    dtp = np.diff(np.r_[0, tp])
    keep = dtp > 0
    dtp, tp, fp = dtp[keep], tp[keep], fp[keep]
    if tp.size <= EXACT_AUPR_LIMIT:
        # rational sum, so the result is the correctly rounded area
        total = sum((Fraction(int(d) * int(t), int(t + f)) for d, t, f in zip(dtp, tp, fp)), Fraction(0))
        return float(total / pos.size)
    return math.fsum((dtp * tp / (pos.size * (tp + fp))).tolist())


def roc_curve(id_scores, ood_scores):
    """(fpr, tpr) arrays including the (0, 0) origin, ID treated as positive."""
    a, b = _pair(id_scores, ood_scores)
    tp, fp, _ = _step_pr(a, b)
    return np.r_[0.0, fp / b.size], np.r_[0.0, tp / a.size]


def threshold_at_tpr(val_id_scores, tpr: float = 0.95) -> float:
    """Largest tau (taken from the validation scores) with
    fraction(val >= tau) >= tpr."""
    if not 0 < tpr < 1:
        raise ValueError("tpr must lie in (0, 1)")
    s = np.sort(np.asarray(val_id_scores, dtype=float).ravel())
    n = s.size
    if n == 0:
        raise ValueError("no validation scores")
    if n < 20:
        log.warning("only %d validation scores; the %.0f%% quantile is unstable", n, 100 * tpr)
    j = int(math.floor(n * (1 - tpr) + 1 + 1e-9))
    j = min(max(j, 1), n)
    while j < n and np.mean(s >= s[j]) >= tpr:
        j += 1
    while j > 1 and np.mean(s >= s[j - 1]) < tpr:
        j -= 1
    return float(s[j - 1])


def detect(score, tau):
    """OOD when score < tau, ID otherwise (a score equal to tau is ID)."""
    score = np.asarray(score, dtype=float)
    out = np.where(score < tau, OOD, ID)
    return str(out) if out.ndim == 0 else out


def predict(model: Mlp, head: MetricHead, x) -> np.ndarray:
    """Class prediction: argmax of the margin-free logits (s*cos for metric heads)."""
    return plain_logits(model(x), head).argmax(axis=1)


def closed_set_accuracy(model: Mlp, head: MetricHead, id_test) -> float:
    return float(np.mean(predict(model, head, id_test.features) == id_test.labels))


@dataclass
class EvalRecord:
    ood_set: str
    loss_kind: str
    score_kind: str
    oe: bool
    seed: int
    auroc: float
    aupr_in: float
    aupr_out: float
    tau: float
    tpr_at_tau: float
    closed_set_accuracy: float


REPORT_FIELDS = list(EvalRecord.__dataclass_fields__)


@dataclass
class EvalReport:
    records: list

    def rows(self):
        return [asdict(r) for r in self.records]

    def get(self, ood_set, score_kind) -> EvalRecord:
        for r in self.records:
            if r.ood_set == ood_set and r.score_kind == score_kind:
                return r
        raise KeyError((ood_set, score_kind))


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for row in report.rows():
            w.writerow([_fmt(row[f]) for f in REPORT_FIELDS])


def read_report_csv(path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(REPORT_FIELDS):
        raise ValueError(f"{path}: not an evaluation report")
    recs = []
    for r in rows:
        recs.append(EvalRecord(
            r["ood_set"], r["loss_kind"], r["score_kind"], r["oe"] == "1", int(r["seed"]),
            *(float(r[k]) for k in REPORT_FIELDS[5:])))
    return EvalReport(recs)


def write_roc_csv(fpr, tpr, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in zip(fpr, tpr):
            w.writerow([_fmt(float(f)), _fmt(float(t))])
