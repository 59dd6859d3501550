"""Generator/classifier architecture contracts and the two projections."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsynth.models import (
    Classifier,
    ClassifierConfig,
    Generator,
    GeneratorConfig,
    PerturbationBudget,
    apply_perturbation,
    check_pairing,
    classify,
    generate_perturbation,
    predict,
    softmax,
)
from advsynth.tensor import ShapeError, Tape, Tensor

rng = np.random.default_rng(42)

EPS = 8.0 / 255.0


def small_gen(eps=EPS, z_dim=8, seed=0):
    cfg = GeneratorConfig(z_dim=z_dim, base_spatial=4, channel_schedule=(8, 8, 4, 3), output_shape=(16, 16, 3))
    return Generator.init(cfg, np.random.default_rng(seed)), PerturbationBudget(eps)


def small_clf(num_classes=3, in_channels=3, seed=0):
    cfg = ClassifierConfig(
        conv_blocks=((8, 1), (8, 2), (16, 2)),
        latent_dim=16,
        num_classes=num_classes,
        in_channels=in_channels,
    )
    return Classifier.init(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------- configs


def test_generator_config_rejects_bad_spatial_chain():
    with pytest.raises(ValueError, match="base_spatial"):
        GeneratorConfig(z_dim=8, base_spatial=4, channel_schedule=(8, 8, 4, 3), output_shape=(32, 32, 3))


def test_generator_config_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        GeneratorConfig(z_dim=8, base_spatial=4, channel_schedule=(8, 8, 4, 1), output_shape=(16, 16, 3))


def test_classifier_config_rejects_latent_channel_mismatch():
    with pytest.raises(ValueError, match="latent_dim"):
        ClassifierConfig(conv_blocks=((8, 1), (16, 2)), latent_dim=8, num_classes=3)


def test_budget_rejects_negative_epsilon():
    with pytest.raises(ValueError, match="epsilon"):
        PerturbationBudget(-0.1)


def test_budget_allows_zero_epsilon():
    PerturbationBudget(0.0)  # the budget sweep needs the null ball


def test_pairing_check():
    gen, _ = small_gen(z_dim=8)
    clf = small_clf()  # latent_dim 16
    with pytest.raises(ValueError, match="z_dim"):
        check_pairing(gen.cfg, clf.cfg)


# ---------------------------------------------------------------- generator


def test_generator_output_within_budget():
    gen, budget = small_gen()
    z = Tensor(rng.standard_normal((16, 8)).astype(np.float32))
    delta = generate_perturbation(z, gen, budget, train=True)
    assert delta.shape == (16, 16, 16, 3)
    assert np.abs(delta.data).max() <= np.float32(EPS)


def test_generator_zero_epsilon_gives_zero_perturbation():
    gen, _ = small_gen()
    z = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    delta = generate_perturbation(z, gen, PerturbationBudget(0.0), train=True)
    assert np.all(delta.data == 0.0)


def test_generator_rejects_z_dim_mismatch():
    gen, budget = small_gen(z_dim=8)
    with pytest.raises(ShapeError):
        generate_perturbation(Tensor(rng.standard_normal((4, 5)).astype(np.float32)), gen, budget)


def test_untrained_generator_not_fully_saturated():
    # a tanh head would pin nearly every value to +-eps; the clipped linear
    # head must keep a nonzero fraction strictly inside the ball
    gen, budget = small_gen(seed=3)
    z = Tensor(np.random.default_rng(7).standard_normal((1000, 8)).astype(np.float32))
    delta = generate_perturbation(z, gen, budget, train=True).data
    saturated = np.mean(np.abs(delta) >= np.float32(EPS))
    assert saturated < 1.0


def test_generator_gradient_reaches_all_parameters():
    gen, budget = small_gen()
    gen.store.set_trainable(True)
    z = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
    with Tape() as tape:
        delta = generate_perturbation(z, gen, budget, train=True)
        # pull every output toward +eps; interior clip region passes gradient
        loss = Tensor(np.array(0.0))
        from advsynth.tensor import tsum

        loss = tsum(delta)
        tape.backward(loss)
    grads = gen.store.grads(tape)
    for name in gen.store.params:
        assert name in grads, f"no gradient for {name}"
        assert np.isfinite(grads[name]).all()


def test_generator_paper_scale_shape_chain():
    # z 640 -> fc 4096 -> 8x8x64 -> 16x16x32 -> 32x32x16 -> 32x32x3
    cfg = GeneratorConfig(z_dim=640, base_spatial=8, channel_schedule=(64, 32, 16, 3), output_shape=(32, 32, 3))
    gen = Generator.init(cfg, np.random.default_rng(0))
    assert gen.store.params["fc_w"].data.shape == (640, 4096)
    assert gen.store.params["deconv1_w"].data.shape == (4, 4, 32, 64)
    assert gen.store.params["deconv2_w"].data.shape == (4, 4, 16, 32)
    assert gen.store.params["out_w"].data.shape == (4, 4, 16, 3)
    z = Tensor(rng.standard_normal((2, 640)).astype(np.float32))
    delta = generate_perturbation(z, gen, PerturbationBudget(EPS), train=True)
    assert delta.shape == (2, 32, 32, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generator_budget_property(seed):
    r = np.random.default_rng(seed)
    gen, budget = small_gen(seed=seed % 17)
    # random weight rescale exercises saturating and non-saturating regimes
    for k, t in gen.store.params.items():
        t.data *= r.uniform(0.1, 30.0)
    z = Tensor(r.standard_normal((8, 8)).astype(np.float32))
    delta = generate_perturbation(z, gen, budget, train=True).data
    assert np.abs(delta).max() <= np.float32(EPS)


# ---------------------------------------------------------------- projection


def test_apply_perturbation_clips_at_pixel_max():
    budget = PerturbationBudget(EPS)
    x = Tensor(np.ones((1, 2, 2, 3), dtype=np.float32))
    delta = Tensor(np.full((1, 2, 2, 3), EPS, dtype=np.float32))
    out = apply_perturbation(x, delta, budget)
    assert np.all(out.data == 1.0)


def test_apply_perturbation_identity_for_zero_delta():
    budget = PerturbationBudget(EPS)
    x = Tensor(rng.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32))
    out = apply_perturbation(x, Tensor(np.zeros_like(x.data)), budget)
    assert np.array_equal(out.data, x.data)


def test_apply_perturbation_shape_mismatch():
    budget = PerturbationBudget(EPS)
    with pytest.raises(ShapeError):
        apply_perturbation(
            Tensor(np.zeros((1, 4, 4, 3), dtype=np.float32)),
            Tensor(np.zeros((1, 4, 4, 1), dtype=np.float32)),
            budget,
        )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_apply_perturbation_domain_property(seed):
    r = np.random.default_rng(seed)
    budget = PerturbationBudget(EPS)
    x = r.uniform(0, 1, (3, 5, 5, 2)).astype(np.float32)
    delta = r.uniform(-EPS, EPS, x.shape).astype(np.float32)
    out = apply_perturbation(Tensor(x), Tensor(delta), budget).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.abs(out - x).max() <= np.float32(EPS) * (1 + 1e-6)


# ---------------------------------------------------------------- classifier


def test_classify_shape_contract():
    clf = small_clf(num_classes=10)
    x = Tensor(rng.uniform(0, 1, (4, 16, 16, 3)).astype(np.float32))
    latent, logits = classify(x, clf, train=False)
    assert latent.shape == (4, 16)
    assert logits.shape == (4, 10)


def test_classify_rejects_channel_mismatch():
    clf = small_clf(in_channels=3)
    with pytest.raises(ShapeError):
        classify(Tensor(rng.uniform(0, 1, (2, 16, 16, 1)).astype(np.float32)), clf)


def test_classify_duplicated_rows_identical_in_eval():
    clf = small_clf()
    one = rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
    x = Tensor(np.repeat(one, 4, axis=0))
    latent, logits = classify(x, clf, train=False)
    for i in range(1, 4):
        assert np.array_equal(latent.data[0], latent.data[i])
        assert np.array_equal(logits.data[0], logits.data[i])


def test_classify_softmax_rows_normalized():
    clf = small_clf(num_classes=5)
    x = Tensor(rng.uniform(0, 1, (8, 16, 16, 3)).astype(np.float32))
    _, logits = classify(x, clf, train=False)
    p = softmax(logits.data)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.min() >= 0


def test_latent_logit_coupling():
    # logits must be exactly the linear head applied to the latent
    clf = small_clf()
    x = Tensor(rng.uniform(0, 1, (6, 16, 16, 3)).astype(np.float32))
    latent, logits = classify(x, clf, train=False)
    w = clf.store.params["fc_w"].data
    b = clf.store.params["fc_b"].data
    assert np.allclose(logits.data, latent.data @ w + b, atol=1e-6)


def test_predict_matches_argmax():
    clf = small_clf(num_classes=4)
    x = rng.uniform(0, 1, (10, 16, 16, 3)).astype(np.float32)
    _, logits = classify(Tensor(x), clf, train=False)
    assert np.array_equal(predict(x, clf), logits.data.argmax(axis=1))


def test_classifier_train_mode_changes_running_stats():
    clf = small_clf()
    before = clf.store.state["bn0"].mean.copy()
    x = Tensor(rng.uniform(0, 1, (8, 16, 16, 3)).astype(np.float32))
    classify(x, clf, train=True, update_running=True)
    after = clf.store.state["bn0"].mean
    assert not np.array_equal(before, after)
