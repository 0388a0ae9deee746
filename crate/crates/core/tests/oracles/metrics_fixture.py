"""Reference scores for fixtures/metrics_20.csv, tallied with exact fractions.

Malignant (1) is the positive class; Weight-F1 weights per-class F1 by support;
kappa uses marginal-product expected agreement.
Run: python3 metrics_fixture.py
"""
import csv
from collections import defaultdict
from fractions import Fraction as F
from pathlib import Path

rows = list(csv.DictReader(open(Path(__file__).parent.parent / "fixtures" / "metrics_20.csv")))
tp = sum(1 for r in rows if r["true_label"] == "1" and r["predicted_label"] == "1")
fp = sum(1 for r in rows if r["true_label"] == "0" and r["predicted_label"] == "1")
tn = sum(1 for r in rows if r["true_label"] == "0" and r["predicted_label"] == "0")
fn = sum(1 for r in rows if r["true_label"] == "1" and r["predicted_label"] == "0")
n = tp + fp + tn + fn
print("tp fp tn fn", tp, fp, tn, fn)

precision = F(tp, tp + fp)
recall = F(tp, tp + fn)
f1_pos = 2 * precision * recall / (precision + recall)
npv = F(tn, tn + fn)
specificity = F(tn, tn + fp)
f1_neg = 2 * npv * specificity / (npv + specificity)
weighted_f1 = (f1_pos * (tp + fn) + f1_neg * (tn + fp)) / n
acc = F(tp + tn, n)
bal = (recall + specificity) / 2
pe = (F(tp + fp, n) * F(tp + fn, n)) + (F(tn + fn, n) * F(tn + fp, n))
kappa = (acc - pe) / (1 - pe)
dice = F(2 * tp, 2 * tp + fp + fn)

per_patient = defaultdict(lambda: [0, 0])
for r in rows:
    per_patient[r["patient_id"]][0] += r["true_label"] == r["predicted_label"]
    per_patient[r["patient_id"]][1] += 1
patient_acc = sum(F(c, t) for c, t in per_patient.values()) / len(per_patient)

for name, v in [
    ("precision", precision),
    ("recall", recall),
    ("weighted_f1", weighted_f1),
    ("accuracy", acc),
    ("balanced_accuracy", bal),
    ("kappa", kappa),
    ("dice", dice),
    ("patient_accuracy", patient_acc),
]:
    print(f"{name:18} {v} = {float(v)!r}")
