"""Logistic malignancy model: encoding, prediction, IRLS fitting, labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .metrics import auc
from .volume import VoxelVolume

SEXES = ("F", "M")
MARGINS = ("Smooth", "Lobulated", "Spiculated")
LOCATIONS = ("LowerLobe", "MiddleLobe", "UpperLobe")
TYPES = ("Solid", "PartSolid", "GroundGlass")

CONTINUOUS = ("age", "size")
# first level of each tuple is the reference (all-zero indicators)
CATEGORICAL = (("sex", SEXES), ("margin", MARGINS), ("location", LOCATIONS), ("nodule_type", TYPES))
FEATURE_NAMES = tuple(CONTINUOUS) + tuple(
    f"{name}={level}" for name, levels in CATEGORICAL for level in levels[1:]
)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoduleFeatures:
    age: float
    sex: str
    size: float
    margin: str = "Smooth"
    location: str = "LowerLobe"
    nodule_type: str = "Solid"

    def __post_init__(self):
        if self.age <= 0 or self.size <= 0:
            raise ValueError("age and size must be positive")
        for name, levels in CATEGORICAL:
            value = getattr(self, name)
            value = getattr(value, "value", value)
            if value not in levels:
                raise ValueError(f"{name} must be one of {levels}, got {value!r}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    standardization: dict[str, tuple[float, float]]
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected {len(FEATURE_NAMES)} weights, got {w.shape}")
        for name in CONTINUOUS:
            mean, std = self.standardization[name]
            if std <= 0:
                raise ValueError(f"standardization std for {name} must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "intercept", float(self.intercept))

    def to_dict(self) -> dict:
        return {
            "format": "synlungs-logistic/1",
            "features": list(FEATURE_NAMES),
            "reference_levels": {name: levels[0] for name, levels in CATEGORICAL},
            "standardization": {k: list(v) for k, v in self.standardization.items()},
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LogisticModel:
        if list(d["features"]) != list(FEATURE_NAMES):
            raise ValueError("model feature encoding does not match this version")
        std = {k: (float(v[0]), float(v[1])) for k, v in d["standardization"].items()}
        return cls(np.asarray(d["weights"], dtype=float), float(d["intercept"]), std)


def default_model() -> LogisticModel:
    """Illustrative coefficients with clinically plausible signs.

    Larger, spiculated, upper-lobe nodules in older patients score higher.
    The magnitudes are configuration, not fitted values.
    """
    weights = dict.fromkeys(FEATURE_NAMES, 0.0)
    weights.update({
        "age": 0.35,
        "size": 1.2,
        "sex=M": 0.2,
        "margin=Lobulated": 0.6,
        "margin=Spiculated": 1.4,
        "location=MiddleLobe": 0.1,
        "location=UpperLobe": 0.4,
        "nodule_type=PartSolid": 0.3,
        "nodule_type=GroundGlass": -0.2,
    })
    return LogisticModel(
        np.array([weights[n] for n in FEATURE_NAMES]),
        -2.5,
        {"age": (61.0, 5.0), "size": (8.0, 5.0)},
    )


def save_model(model: LogisticModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LogisticModel:
    return LogisticModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _raw_matrix(rows) -> tuple[np.ndarray, np.ndarray]:
    cont = np.array([[f.age, f.size] for f in rows], dtype=float).reshape(-1, 2)
    cats = []
    for name, levels in CATEGORICAL:
        values = [getattr(f, name) for f in rows]
        for level in levels[1:]:
            cats.append([v == level for v in values])
    return cont, np.array(cats, dtype=float).T.reshape(len(rows), -1)


def encode_many(rows, model_or_std) -> np.ndarray:
    std = model_or_std.standardization if isinstance(model_or_std, LogisticModel) else model_or_std
    cont, cats = _raw_matrix(list(rows))
    mean = np.array([std[n][0] for n in CONTINUOUS])
    scale = np.array([std[n][1] for n in CONTINUOUS])
    return np.hstack([(cont - mean) / scale, cats])


def encode(features: NoduleFeatures, model: LogisticModel) -> np.ndarray:
    return encode_many([features], model)[0]


def predict_probability(features: NoduleFeatures, model: LogisticModel) -> float:
    return float(expit(encode(features, model) @ model.weights + model.intercept))


def predict_many(rows, model: LogisticModel) -> np.ndarray:
    return expit(encode_many(rows, model) @ model.weights + model.intercept)


def _objective(theta, X, y, l2):
    z = X @ theta
    # log(1 + e^z) evaluated stably
    nll = np.mean(np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - y * z)
    return nll + 0.5 * l2 * float(theta[1:] @ theta[1:])


def fit(data, l2: float = 1e-4, standardization=None, max_iter: int = 100, tol: float = 1e-6) -> LogisticModel:
    """Penalized maximum likelihood by damped Newton (IRLS) steps.

    Minimizes ``mean NLL + l2/2 * ||w||^2`` (intercept unpenalized) from a
    zero start, halving each step until the objective decreases. Stops when
    the gradient norm drops below ``tol``.
    """
    data = list(data)
    rows = [f for f, _ in data]
    y = np.array([float(bool(o)) for _, o in data])
    if y.size == 0 or y.min() == y.max():
        raise ValueError("fitting needs at least one example of each outcome")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if standardization is None:
        cont, _ = _raw_matrix(rows)
        sd = cont.std(axis=0)
        standardization = {
            name: (float(cont[:, i].mean()), float(sd[i]) if sd[i] > 0 else 1.0) for i, name in enumerate(CONTINUOUS)
        }
    X = np.hstack([np.ones((len(rows), 1)), encode_many(rows, standardization)])
    n, p = X.shape
    penalty = np.full(p, l2)
    penalty[0] = 0.0
    theta = np.zeros(p)
    obj = _objective(theta, X, y, l2)
    trace = [obj]
    for _ in range(max_iter):
        mu = expit(X @ theta)
        grad = X.T @ (mu - y) / n + penalty * theta
        if np.linalg.norm(grad) < tol:
            break
        hess = (X.T * (mu * (1 - mu))) @ X / n + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            candidate = theta - t * step
            cand_obj = _objective(candidate, X, y, l2)
            if cand_obj <= obj:
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed to decrease the objective")
        theta, obj = candidate, cand_obj
        trace.append(obj)
    else:
        raise ConvergenceError(f"no convergence within {max_iter} iterations (separable data needs l2 > 0)")
    if l2 == 0:
        # a strictly separating fit means the likelihood has no finite maximizer
        z = X @ theta
        if (z[y == 1] > 0).all() and (z[y == 0] < 0).all():
            raise ConvergenceError("data are linearly separable; fit with l2 > 0")
    return LogisticModel(theta[1:], theta[0], standardization, tuple(trace))


@dataclass(frozen=True)
class LabeledNodule:
    features: NoduleFeatures
    probability: float
    label: str
    threshold_used: float

    @property
    def malignant(self) -> bool:
        return self.label == "malignant"


def assign_label(
    features: NoduleFeatures,
    model: LogisticModel,
    threshold: float = 0.5,
    rng: np.random.Generator | None = None,
    mode: str = "Deterministic",
) -> LabeledNodule:
    """Label by thresholding the probability, or by a seeded Bernoulli draw.

    In Bernoulli mode the reported threshold is the uniform draw ``u`` and
    the nodule is malignant iff ``probability >= u``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    p = predict_probability(features, model)
    mode = {"det": "Deterministic", "bern": "Bernoulli"}.get(mode, mode)
    if mode == "Deterministic":
        used = threshold
    elif mode == "Bernoulli":
        if rng is None:
            raise ValueError("Bernoulli labeling needs a random stream")
        used = float(rng.random())
    else:
        raise ValueError(f"unknown labeling mode {mode!r}")
    return LabeledNodule(features, p, "malignant" if p >= used else "benign", used)


def evaluate_auc(model: LogisticModel, data) -> float:
    data = list(data)
    scores = predict_many([f for f, _ in data], model)
    return auc(scores, [bool(o) for _, o in data])


def lobe_from_position(lung: VoxelVolume, center_z_index: int) -> str:
    """Upper/Middle/Lower by thirds of the lung's z extent (upper = high z)."""
    zs = np.nonzero(np.asarray(lung.values).any(axis=(1, 2)))[0]
    if zs.size == 0:
        raise ValueError("lung mask is empty")
    lo, hi = zs.min(), zs.max() + 1
    frac = (center_z_index + 0.5 - lo) / (hi - lo)
    if frac >= 2.0 / 3.0:
        return "UpperLobe"
    if frac >= 1.0 / 3.0:
        return "MiddleLobe"
    return "LowerLobe"
