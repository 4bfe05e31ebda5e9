"""
Malignancy labels from a logistic model
=======================================

Score nodules with the built-in coefficients, label them, then refit a
model from synthetic outcomes and check it ranks held-out cases well.
"""

import numpy as np

from synlungs import NoduleFeatures, assign_label, default_model, evaluate_auc, fit, predict_probability

model = default_model()
cases = [
    NoduleFeatures(age=52, sex="F", size=5, margin="Smooth", location="LowerLobe"),
    NoduleFeatures(age=64, sex="M", size=9, margin="Lobulated", location="MiddleLobe"),
    NoduleFeatures(age=71, sex="M", size=18, margin="Spiculated", location="UpperLobe"),
]
for f in cases:
    lab = assign_label(f, model, threshold=0.5)
    print(f"{f.size:>4.0f} mm {f.margin:<10s} {f.location:<10s} p = {lab.probability:.3f} -> {lab.label}")

# Bernoulli mode draws the label, so a nodule scored p is malignant in about
# a fraction p of draws. The seeded stream makes the draws reproducible.
rng = np.random.default_rng(7)
f = cases[1]
p = predict_probability(f, model)
rate = np.mean([assign_label(f, model, rng=rng, mode="Bernoulli").malignant for _ in range(5000)])
print(f"\nBernoulli labels for p = {p:.3f}: malignant rate {rate:.3f}")

# Refit from outcomes drawn from the default model itself.
rng = np.random.default_rng(1)


def draw(n):
    return [
        NoduleFeatures(
            age=float(rng.normal(61, 8)), sex=str(rng.choice(["F", "M"])), size=float(rng.gamma(2.5, 1 / 0.35)) + 0.5,
            margin=str(rng.choice(["Smooth", "Lobulated", "Spiculated"], p=[0.6, 0.25, 0.15])),
            location=str(rng.choice(["LowerLobe", "MiddleLobe", "UpperLobe"])),
        )
        for _ in range(n)
    ]


train, test = draw(5000), draw(2000)
outcome = lambda fs: [(f, rng.random() < predict_probability(f, model)) for f in fs]  # noqa: E731
refit = fit(outcome(train), l2=1e-3, standardization=model.standardization)
print(f"refit in {len(refit.objective_trace) - 1} Newton steps")
for name, w0, w1 in zip(("age", "size"), model.weights, refit.weights):
    print(f"  {name:<5s} true {w0:+.2f}  refit {w1:+.2f}")
held_out = outcome(test)
print(f"held-out AUC: default {evaluate_auc(model, held_out):.3f}, refit {evaluate_auc(refit, held_out):.3f}")
