"""Perturbation generator, classifier, and the two projection operators.

The generator maps Gaussian noise to an image-shaped perturbation through
FC -> reshape -> (deconv, batchnorm, leaky-ReLU) x2 -> conv, with no output
activation; the perturbation is clipped to the epsilon-ball instead (a tanh
head would saturate nearly all values at the bounds).  The classifier is a
small conv stack ending in global average pooling; its pooled features are
the latent space in which OT distances are measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BNState,
    ParamStore,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    clip,
    conv2d,
    deconv2d,
    leaky_relu,
    matmul,
    reshape,
    tmean,
)


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        # epsilon == 0 is allowed: the budget sweep and degenerate-budget
        # checks exercise the null ball
        if self.epsilon < 0:
            raise ValueError(f"PerturbationBudget: epsilon must be >= 0, got {self.epsilon}")
        if not self.pixel_min < self.pixel_max:
            raise ValueError(f"PerturbationBudget: need pixel_min < pixel_max, got {self.pixel_min}, {self.pixel_max}")


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    base_spatial: int = 4
    channel_schedule: tuple[int, ...] = (64, 32, 16, 3)
    output_shape: tuple[int, int, int] = (16, 16, 3)
    leak: float = 0.2

    def __post_init__(self):
        h, w, c = self.output_shape
        if len(self.channel_schedule) != 4:
            raise ValueError(f"GeneratorConfig: two-deconv schedule needs 4 channel entries, got {self.channel_schedule}")
        if self.base_spatial * 4 != h or self.base_spatial * 4 != w:
            raise ValueError(
                f"GeneratorConfig: base_spatial {self.base_spatial} x4 must equal output {h}x{w}"
            )
        if self.channel_schedule[-1] != c:
            raise ValueError(f"GeneratorConfig: final channels {self.channel_schedule[-1]} != image channels {c}")
        if self.z_dim < 1:
            raise ValueError(f"GeneratorConfig: z_dim must be positive, got {self.z_dim}")


@dataclass(frozen=True)
class ClassifierConfig:
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 2))
    latent_dim: int = 64
    num_classes: int = 3
    in_channels: int = 3
    leak: float = 0.1

    def __post_init__(self):
        if self.latent_dim != self.conv_blocks[-1][0]:
            raise ValueError(
                f"ClassifierConfig: latent_dim {self.latent_dim} must equal final block channels {self.conv_blocks[-1][0]}"
            )
        for ch, s in self.conv_blocks:
            if s not in (1, 2) or ch < 1:
                raise ValueError(f"ClassifierConfig: bad block ({ch},{s})")
        if self.num_classes < 2:
            raise ValueError(f"ClassifierConfig: need >= 2 classes, got {self.num_classes}")


class Generator:
    def __init__(self, cfg: GeneratorConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float32) -> "Generator":
        st = ParamStore()
        ch0, ch1, ch2, cout = cfg.channel_schedule
        base = cfg.base_spatial
        fc_out = base * base * ch0
        st.add("fc_w", (rng.standard_normal((cfg.z_dim, fc_out)) * np.sqrt(2.0 / cfg.z_dim)).astype(dtype))
        st.add("fc_b", np.zeros(fc_out, dtype=dtype))
        st.add("deconv1_w", (rng.standard_normal((4, 4, ch1, ch0)) * np.sqrt(2.0 / (16 * ch0))).astype(dtype))
        st.add("bn1_gamma", np.ones(ch1, dtype=dtype))
        st.add("bn1_beta", np.zeros(ch1, dtype=dtype))
        st.add_bn_state("bn1", ch1, dtype)
        st.add("deconv2_w", (rng.standard_normal((4, 4, ch2, ch1)) * np.sqrt(2.0 / (16 * ch1))).astype(dtype))
        st.add("bn2_gamma", np.ones(ch2, dtype=dtype))
        st.add("bn2_beta", np.zeros(ch2, dtype=dtype))
        st.add_bn_state("bn2", ch2, dtype)
        st.add("out_w", (rng.standard_normal((4, 4, ch2, cout)) * np.sqrt(2.0 / (16 * ch2))).astype(dtype))
        st.add("out_b", np.zeros(cout, dtype=dtype))
        return cls(cfg, st)


class Classifier:
    def __init__(self, cfg: ClassifierConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: ClassifierConfig, rng: np.random.Generator, dtype=np.float32) -> "Classifier":
        st = ParamStore()
        cin = cfg.in_channels
        for i, (ch, _stride) in enumerate(cfg.conv_blocks):
            st.add(f"conv{i}_w", (rng.standard_normal((3, 3, cin, ch)) * np.sqrt(2.0 / (9 * cin))).astype(dtype))
            st.add(f"bn{i}_gamma", np.ones(ch, dtype=dtype))
            st.add(f"bn{i}_beta", np.zeros(ch, dtype=dtype))
            st.add_bn_state(f"bn{i}", ch, dtype)
            cin = ch
        st.add("fc_w", (rng.standard_normal((cfg.latent_dim, cfg.num_classes)) * np.sqrt(1.0 / cfg.latent_dim)).astype(dtype))
        st.add("fc_b", np.zeros(cfg.num_classes, dtype=dtype))
        return cls(cfg, st)


def check_pairing(gen_cfg: GeneratorConfig, cls_cfg: ClassifierConfig) -> None:
    """z lives in the classifier's latent space, so the dims must agree."""
    if gen_cfg.z_dim != cls_cfg.latent_dim:
        raise ValueError(f"generator z_dim {gen_cfg.z_dim} != classifier latent_dim {cls_cfg.latent_dim}")


def generate_perturbation(
    z: Tensor,
    gen: Generator,
    budget: PerturbationBudget,
    train: bool = True,
    update_running: bool = False,
) -> Tensor:
    """G(z) clipped elementwise to [-eps, eps].

    The clip gradient passes through strictly inside the ball and is zero at
    and beyond the bounds.
    """
    cfg = gen.cfg
    if z.data.ndim != 2 or z.shape[1] != cfg.z_dim:
        raise ShapeError(f"generate_perturbation: z shape {z.shape} vs z_dim {cfg.z_dim}")
    p = gen.store.params
    st = gen.store.state
    base, (ch0, ch1, ch2, cout) = cfg.base_spatial, cfg.channel_schedule
    n = z.shape[0]
    h = add(matmul(z, p["fc_w"]), p["fc_b"])
    h = reshape(h, (n, base, base, ch0))
    h = deconv2d(h, p["deconv1_w"], stride=2)
    h = batchnorm(h, p["bn1_gamma"], p["bn1_beta"], st["bn1"], train=train, update_running=update_running)
    h = leaky_relu(h, cfg.leak)
    h = deconv2d(h, p["deconv2_w"], stride=2)
    h = batchnorm(h, p["bn2_gamma"], p["bn2_beta"], st["bn2"], train=train, update_running=update_running)
    h = leaky_relu(h, cfg.leak)
    h = conv2d(h, p["out_w"], stride=1, padding="same")
    h = add(h, p["out_b"])
    eps = h.data.dtype.type(budget.epsilon)
    return clip(h, -eps, eps)


def apply_perturbation(x: Tensor, delta: Tensor, budget: PerturbationBudget) -> Tensor:
    if x.shape != delta.shape:
        raise ShapeError(f"apply_perturbation: image {x.shape} vs perturbation {delta.shape}")
    return clip(add(x, delta), budget.pixel_min, budget.pixel_max)


def classify(
    x: Tensor,
    clf: Classifier,
    train: bool = False,
    update_running: bool = False,
) -> tuple[Tensor, Tensor]:
    """Returns (latent, logits): pooled penultimate features and the linear head."""
    cfg = clf.cfg
    if x.data.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ShapeError(f"classify: input {x.shape} vs {cfg.in_channels} channels")
    p = clf.store.params
    st = clf.store.state
    h = x
    for i, (_ch, stride) in enumerate(cfg.conv_blocks):
        h = conv2d(h, p[f"conv{i}_w"], stride=stride, padding="same")
        h = batchnorm(h, p[f"bn{i}_gamma"], p[f"bn{i}_beta"], st[f"bn{i}"], train=train, update_running=update_running)
        h = leaky_relu(h, cfg.leak)
    latent = tmean(h, axis=(1, 2))
    logits = add(matmul(latent, p["fc_w"]), p["fc_b"])
    return latent, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def predict(x: np.ndarray, clf: Classifier, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions for a raw image array."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], batch_size):
        _, logits = classify(Tensor(x[i : i + batch_size]), clf, train=False)
        out[i : i + batch_size] = logits.data.argmax(axis=1)
    return out
