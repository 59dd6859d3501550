"""Attack correctness: closed-form oracles, projection soundness, equivalences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsynth.attacks import (
    AttackSpec,
    BudgetViolation,
    assert_budget,
    cw_margin_attack,
    evaluate_accuracy,
    fgsm_attack,
    pgd_attack,
    project_linf,
    run_attack,
)
from advsynth.models import Classifier, ClassifierConfig, classify, softmax
from advsynth.tensor import Tensor

rng = np.random.default_rng(7)
EPS = 8.0 / 255.0
ALPHA = 2.0 / 255.0


def random_clf(seed=0, num_classes=3, in_channels=3):
    cfg = ClassifierConfig(
        conv_blocks=((8, 1), (8, 2), (16, 2)),
        latent_dim=16,
        num_classes=num_classes,
        in_channels=in_channels,
    )
    return Classifier.init(cfg, np.random.default_rng(seed))


def linear_clf(taps=(0.5, -0.7), fc=((1.0, -1.0), (-1.0, 1.0))):
    """Pointwise-linear two-channel model: an analytic gradient oracle.

    A single 3x3 conv with only the center tap set acts per pixel; identity
    batchnorm (eval stats) and leak=1 keep the chain affine, so the input
    gradient has one closed-form sign per (sample, channel).
    """
    cfg = ClassifierConfig(conv_blocks=((2, 1),), latent_dim=2, num_classes=2, in_channels=2, leak=1.0)
    clf = Classifier.init(cfg, np.random.default_rng(0))
    w = np.zeros((3, 3, 2, 2), dtype=np.float32)
    w[1, 1, 0, 0] = taps[0]
    w[1, 1, 1, 1] = taps[1]
    clf.store.params["conv0_w"].data[:] = w
    clf.store.params["fc_w"].data[:] = np.array(fc, dtype=np.float32)
    clf.store.params["fc_b"].data[:] = 0.0
    return clf, np.array(taps, dtype=np.float32)


def zero_clf():
    clf = random_clf()
    clf.store.params["conv0_w"].data[:] = 0.0  # latent collapses to a constant
    return clf


def expected_ce_signs(clf, taps, x, y):
    """sign of dCE/dx per (sample, channel) for the pointwise-linear model."""
    _, logits = classify(Tensor(x), clf, train=False)
    p = softmax(logits.data)
    onehot = np.eye(2, dtype=np.float32)[y]
    dlat = (p - onehot) @ clf.store.params["fc_w"].data.T
    return np.sign(dlat * taps[None, :])  # (n, 2), constant over pixels


# ----------------------------------------------------------------- oracles


def test_fgsm_linear_model_closed_form():
    clf, taps = linear_clf()
    x = rng.uniform(0.3, 0.7, (5, 8, 8, 2)).astype(np.float32)
    y = np.array([0, 1, 0, 1, 0])
    spec = AttackSpec("fgsm", EPS)
    out = fgsm_attack(x, y, clf, spec)
    sgn = expected_ce_signs(clf, taps, x, y)
    expect = np.clip(x + np.float32(EPS) * sgn[:, None, None, :], 0.0, 1.0)
    assert np.allclose(out, expect, atol=1e-7)


def test_pgd1_linear_model_closed_form():
    clf, taps = linear_clf(taps=(0.9, 0.4))
    x = rng.uniform(0.3, 0.7, (4, 8, 8, 2)).astype(np.float32)
    y = np.array([1, 0, 1, 0])
    spec = AttackSpec("pgd", EPS, alpha=ALPHA, steps=1)
    out = pgd_attack(x, y, clf, spec)
    sgn = expected_ce_signs(clf, taps, x, y)
    expect = np.clip(x + np.float32(ALPHA) * sgn[:, None, None, :], 0.0, 1.0)
    assert np.allclose(out, expect, atol=1e-7)


def test_cw_step_direction_on_linear_model():
    # correctly classified rows move along sign(w_other - w_true) per channel
    clf, taps = linear_clf(taps=(1.0, 1.0), fc=((2.0, -1.0), (-1.0, 2.0)))
    x = np.full((2, 8, 8, 2), 0.5, dtype=np.float32)
    x[0, :, :, 0] = 0.8  # class-0 heavy
    x[1, :, :, 1] = 0.8  # class-1 heavy
    y = np.array([0, 1])
    _, logits = classify(Tensor(x), clf, train=False)
    assert np.array_equal(logits.data.argmax(1), y)  # margins active
    fc = clf.store.params["fc_w"].data
    spec = AttackSpec("cw_margin", EPS, alpha=ALPHA, steps=1)
    out = cw_margin_attack(x, y, clf, spec)
    for b, (true, other) in enumerate([(0, 1), (1, 0)]):
        sgn = np.sign((fc[:, other] - fc[:, true]) * taps)
        expect = np.clip(x[b] + np.float32(ALPHA) * sgn[None, None, :], 0.0, 1.0)
        assert np.allclose(out[b], expect, atol=1e-7)


def test_cw_inactive_margin_keeps_input():
    # misclassified with a large wrong-class margin: hinge 0, gradient 0
    clf, _ = linear_clf(taps=(1.0, 1.0), fc=((2.0, -1.0), (-1.0, 2.0)))
    x = np.full((1, 8, 8, 2), 0.5, dtype=np.float32)
    x[0, :, :, 0] = 0.9
    y = np.array([1])  # the model strongly prefers class 0
    _, logits = classify(Tensor(x), clf, train=False)
    assert logits.data.argmax(1)[0] == 0
    spec = AttackSpec("cw_margin", EPS, alpha=ALPHA, steps=5)
    out = cw_margin_attack(x, y, clf, spec)
    assert np.array_equal(out, x)


def test_zero_gradient_model_leaves_input_unchanged():
    clf = zero_clf()
    x = rng.uniform(0.2, 0.8, (3, 16, 16, 3)).astype(np.float32)
    y = np.array([0, 1, 2])
    for kind in ("fgsm", "pgd"):
        spec = AttackSpec(kind, EPS, alpha=ALPHA, steps=1)
        assert np.array_equal(run_attack(x, y, clf, spec), x)


def test_fgsm_equals_pgd1_bit_identical():
    clf = random_clf(seed=5)
    x = rng.uniform(0, 1, (6, 16, 16, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    a = fgsm_attack(x, y, clf, AttackSpec("fgsm", EPS))
    b = pgd_attack(x, y, clf, AttackSpec("pgd", EPS, alpha=EPS, steps=1))
    assert np.array_equal(a, b)


# ------------------------------------------------------------- projection


def test_project_linf_exact():
    x0 = rng.uniform(0, 1, (4, 4)).astype(np.float32)
    xa = (x0 + rng.uniform(-0.5, 0.5, x0.shape)).astype(np.float32)
    out = project_linf(xa.copy(), x0, EPS)
    assert np.abs(out - x0).max() <= np.float32(EPS)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_assert_budget_raises_on_violation():
    x0 = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(BudgetViolation):
        assert_budget(x0 + 2 * EPS, x0, EPS)
    with pytest.raises(BudgetViolation):
        assert_budget(x0 - 1.0, x0, EPS)  # below pixel floor


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["fgsm", "pgd", "cw_margin"]))
def test_projection_soundness_property(seed, kind):
    r = np.random.default_rng(seed)
    clf = random_clf(seed=seed % 13)
    x = r.uniform(0, 1, (3, 16, 16, 3)).astype(np.float32)
    y = r.integers(0, 3, 3)
    steps = 1 if kind == "fgsm" else int(r.integers(1, 6))
    spec = AttackSpec(kind, EPS, alpha=ALPHA, steps=steps, random_init=True)
    out = run_attack(x, y, clf, spec, np.random.default_rng(seed))
    assert_budget(out, x, EPS)  # zero tolerance


def test_attack_determinism():
    clf = random_clf(seed=2)
    x = rng.uniform(0, 1, (4, 16, 16, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 0])
    spec = AttackSpec("pgd", EPS, alpha=ALPHA, steps=5, random_init=True)
    a = run_attack(x, y, clf, spec, np.random.default_rng(11))
    b = run_attack(x, y, clf, spec, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_random_init_requires_rng():
    clf = random_clf()
    x = rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
    with pytest.raises(ValueError, match="rng"):
        pgd_attack(x, np.array([0, 1]), clf, AttackSpec("pgd", EPS, steps=1, random_init=True))


# ------------------------------------------------------------------ spec


def test_attack_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        AttackSpec("autoattack", EPS)
    with pytest.raises(ValueError, match="steps"):
        AttackSpec("pgd", EPS, steps=0)
    with pytest.raises(ValueError, match="alpha"):
        AttackSpec("pgd", EPS, alpha=0.0)
    with pytest.raises(ValueError, match="fgsm"):
        AttackSpec("fgsm", EPS, steps=3)
    with pytest.raises(ValueError, match="epsilon"):
        AttackSpec("pgd", -EPS)


def test_attack_spec_names():
    assert AttackSpec("fgsm", EPS).name() == "fgsm"
    assert AttackSpec("pgd", EPS, steps=20).name() == "pgd-20"
    assert AttackSpec("cw_margin", EPS, steps=20).name() == "cw-20"


# --------------------------------------------------------------- accuracy


def test_constant_model_scores_chance_on_balanced_set():
    from advsynth.data import Dataset

    clf = zero_clf()  # always predicts the same class
    n_per = 20
    images = rng.uniform(0, 1, (3 * n_per, 16, 16, 3)).astype(np.float32)
    labels = np.repeat(np.arange(3), n_per)
    ds = Dataset(images, labels, "test", 3)
    acc = evaluate_accuracy(ds, clf, None)
    assert acc == pytest.approx(1.0 / 3.0)


def test_evaluate_accuracy_rejects_empty_dataset():
    from types import SimpleNamespace

    clf = random_clf()
    empty = SimpleNamespace(
        images=np.zeros((0, 16, 16, 3), dtype=np.float32),
        labels=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(empty, clf, None)


def test_fgsm_never_beats_pgd_under_more_steps():
    # same-budget dominance on a fixed random model: more steps cannot make
    # the attack weaker on average; small slack for random-init noise
    clf = random_clf(seed=9)
    from advsynth.data import Dataset

    images = rng.uniform(0, 1, (90, 16, 16, 3)).astype(np.float32)
    labels = rng.integers(0, 3, 90)
    ds = Dataset(images, labels, "test", 3)
    nat = evaluate_accuracy(ds, clf, None)
    fgsm = evaluate_accuracy(ds, clf, AttackSpec("fgsm", EPS), seed=1)
    pgd = evaluate_accuracy(ds, clf, AttackSpec("pgd", EPS, alpha=ALPHA, steps=10, random_init=True), seed=1)
    assert pgd <= fgsm + 0.03
    assert fgsm <= nat + 0.03
