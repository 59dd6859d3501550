"""Gradient-based evaluation attacks: FGSM, PGD-k, and margin-loss PGD.

All attacks iterate signed-gradient steps with projection onto the
intersection of the epsilon-ball around the natural image and the pixel
domain.  The projection is exact in float32: after the two clips, any
one-ulp rounding stragglers in the measured perturbation are nudged back
toward the natural image, so the budget invariants hold with zero tolerance
on the arrays actually returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Classifier, classify
from .tensor import ShapeError, Tape, Tensor, margin_hinge, softmax_cross_entropy


class BudgetViolation(AssertionError):
    """An adversarial array escaped the epsilon-ball or pixel domain."""


_KINDS = ("fgsm", "pgd", "cw_margin")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float
    alpha: float = 2.0 / 255.0
    steps: int = 1
    random_init: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"AttackSpec: kind must be one of {_KINDS}, got {self.kind!r}")
        if self.steps < 1:
            raise ValueError(f"AttackSpec: steps must be >= 1, got {self.steps}")
        if self.alpha <= 0:
            raise ValueError(f"AttackSpec: alpha must be positive, got {self.alpha}")
        # epsilon == 0 is the budget sweep's null point (accuracy == natural)
        if self.epsilon < 0:
            raise ValueError(f"AttackSpec: epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "fgsm" and self.steps != 1:
            raise ValueError(f"AttackSpec: fgsm implies steps == 1, got {self.steps}")

    def name(self) -> str:
        if self.kind == "fgsm":
            return "fgsm"
        tag = "pgd" if self.kind == "pgd" else "cw"
        return f"{tag}-{self.steps}"


def project_linf(xa: np.ndarray, x0: np.ndarray, eps, lo=0.0, hi=1.0) -> np.ndarray:
    """Project xa into {v : |v - x0|_inf <= eps} intersect [lo, hi], exactly.

    Mutates and returns xa.  The trailing fix-up loop handles the rare case
    where float rounding of clip(x0 +/- eps) leaves the measured difference
    one ulp outside the ball.
    """
    dt = xa.dtype.type
    eps = dt(eps)
    np.clip(xa, x0 - eps, x0 + eps, out=xa)
    np.clip(xa, dt(lo), dt(hi), out=xa)
    bad = np.abs(xa - x0) > eps
    while bad.any():
        xa[bad] = np.nextafter(xa[bad], x0[bad])
        bad = np.abs(xa - x0) > eps
    return xa


def assert_budget(xa: np.ndarray, x0: np.ndarray, eps: float, lo=0.0, hi=1.0) -> None:
    """Zero-tolerance budget check on the arrays as stored."""
    d = np.abs(xa - x0).max() if xa.size else 0.0
    if d > np.asarray(eps, dtype=xa.dtype):
        raise BudgetViolation(f"perturbation inf-norm {d!r} exceeds epsilon {eps!r}")
    if xa.size and (xa.min() < lo or xa.max() > hi):
        raise BudgetViolation(f"pixels outside [{lo}, {hi}]: range [{xa.min()!r}, {xa.max()!r}]")


def _objective_grad(xa: np.ndarray, y: np.ndarray, model: Classifier, kind: str, onehot: np.ndarray) -> np.ndarray:
    with Tape() as tape:
        xt = Tensor(xa, requires_grad=True)
        _, logits = classify(xt, model, train=False)
        loss = margin_hinge(logits, y) if kind == "cw_margin" else softmax_cross_entropy(logits, onehot)
        tape.backward(loss)
    g = tape.grad(xt)
    return g if g is not None else np.zeros_like(xa)


def _iterate(x: np.ndarray, y: np.ndarray, model: Classifier, spec: AttackSpec, alpha: float, rng) -> np.ndarray:
    x0 = np.ascontiguousarray(x, dtype=np.float32)
    dt = x0.dtype.type
    eps = dt(spec.epsilon)
    al = dt(alpha)
    if spec.random_init:
        if rng is None:
            raise ValueError("random_init attack needs an rng")
        xa = x0 + rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape).astype(np.float32)
        project_linf(xa, x0, eps)
    else:
        xa = x0.copy()
    onehot = np.eye(model.cfg.num_classes, dtype=np.float32)[y]
    # cross-entropy is ascended, the hinge margin descended
    sgn = dt(-1.0) if spec.kind == "cw_margin" else dt(1.0)
    for _ in range(spec.steps):
        g = _objective_grad(xa, y, model, spec.kind, onehot)
        xa += sgn * al * np.sign(g)
        project_linf(xa, x0, eps)
    assert_budget(xa, x0, eps)
    return xa


def pgd_attack(x: np.ndarray, y: np.ndarray, model: Classifier, spec: AttackSpec, rng=None) -> np.ndarray:
    return _iterate(x, y, model, spec, spec.alpha, rng)


def fgsm_attack(x: np.ndarray, y: np.ndarray, model: Classifier, spec: AttackSpec, rng=None) -> np.ndarray:
    """Single signed-gradient step of size epsilon; PGD-1 with alpha = epsilon."""
    return _iterate(x, y, model, spec, spec.epsilon, rng)


def cw_margin_attack(x: np.ndarray, y: np.ndarray, model: Classifier, spec: AttackSpec, rng=None) -> np.ndarray:
    return _iterate(x, y, model, spec, spec.alpha, rng)


def run_attack(x: np.ndarray, y: np.ndarray, model: Classifier, spec: AttackSpec, rng=None) -> np.ndarray:
    if spec.kind == "fgsm":
        return fgsm_attack(x, y, model, spec, rng)
    if spec.kind == "pgd":
        return pgd_attack(x, y, model, spec, rng)
    return cw_margin_attack(x, y, model, spec, rng)


def evaluate_accuracy(dataset, model: Classifier, spec: AttackSpec | None = None, seed: int = 0, batch_size: int = 128) -> float:
    """Post-attack accuracy over the dataset; spec=None gives natural accuracy."""
    images, labels = dataset.images, dataset.labels
    if images.shape[0] == 0:
        raise ValueError("evaluate_accuracy: empty dataset")
    rng = np.random.default_rng([seed, _spec_key(spec)]) if spec is not None else None
    correct = 0
    for i in range(0, images.shape[0], batch_size):
        xb = images[i : i + batch_size]
        yb = labels[i : i + batch_size]
        if spec is not None:
            xb = run_attack(xb, yb, model, spec, rng)
        _, logits = classify(Tensor(xb), model, train=False)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / images.shape[0]


def _spec_key(spec: AttackSpec | None) -> int:
    """Stable per-spec rng stream key so duplicate specs attack identically."""
    if spec is None:
        return 0
    import hashlib

    text = f"{spec.kind}|{spec.epsilon!r}|{spec.alpha!r}|{spec.steps}|{spec.random_init}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
