"""Reference values for the weighted cross-entropy and auxiliary-loss fixtures.

Cross-entropy: logits (2, -1), (0.5, 0.3), (-0.2, 1.7); labels 0, 1, 1;
class weights 1.5 (benign), 0.75 (malignant); loss = mean_i w[y_i] * CE_i.
Auxiliary: mean over rows of the squared Euclidean distance.
Run: python3 finetune_fixture.py
"""
from mpmath import mp, mpf, exp, log

mp.dps = 40

logits = [(mpf(2), mpf(-1)), (mpf("0.5"), mpf("0.3")), (mpf("-0.2"), mpf("1.7"))]
labels = [0, 1, 1]
weights = [mpf("1.5"), mpf("0.75")]

total = mpf(0)
grads = []
for (a, b), y in zip(logits, labels):
    den = exp(a) + exp(b)
    p = [exp(a) / den, exp(b) / den]
    w = weights[y]
    total += -w * log(p[y])
    grads.append([w * (p[c] - (1 if c == y else 0)) / len(labels) for c in range(2)])
print("ce loss", mp.nstr(total / len(labels), 25))
for g in grads:
    print("ce grad", [mp.nstr(v, 25) for v in g])

pred = [
    [mpf("0.61"), mpf("0.12"), mpf("0.74"), mpf("0.95"), mpf("0.25"), mpf("0.30")],
    [mpf("0.58"), mpf("0.05"), mpf("0.69"), mpf("1.02"), mpf("0.31"), mpf("0.22")],
]
true = [
    [mpf("0.644"), mpf("0.093"), mpf("0.717"), mpf("0.954"), mpf("0.267"), mpf("0.283")],
    [mpf("0.650"), mpf("0.072"), mpf("0.704"), mpf("0.990"), mpf("0.286"), mpf("0.105")],
]
aux = sum(sum((p - t) ** 2 for p, t in zip(pr, tr)) for pr, tr in zip(pred, true)) / len(pred)
print("aux loss", mp.nstr(aux, 25))
