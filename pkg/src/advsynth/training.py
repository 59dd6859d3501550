"""Alternating min-max training.

Each step, in order: draw z; synthesize and apply the bounded perturbation;
take one momentum ascent step on the generator objective; regenerate the
perturbation with the SAME z under the updated generator; take one momentum
descent step on the classifier objective.  The ablation variants differ only
in which loss terms feed the two updates; everything else is one shared code
path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .attacks import assert_budget
from .data import Dataset, augment, epoch_permutation
from .models import (
    Classifier,
    ClassifierConfig,
    Generator,
    GeneratorConfig,
    PerturbationBudget,
    apply_perturbation,
    check_pairing,
    classify,
    generate_perturbation,
)
from .ot import cost_matrix, sinkhorn_distance
from .tensor import Tape, Tensor, add, momentum_step, softmax_cross_entropy, trow_slice

VARIANTS = ("noReg+OT", "OT-Reg+Xent", "OT-Reg+OT")
# "natural" trains the plain-CE twin used as the robustness baseline
ALL_VARIANTS = VARIANTS + ("natural",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 64
    batch_size: int = 64
    epsilon: float = 8.0 / 255.0
    lr_classifier: float = 0.05
    lr_generator: float = 0.01
    lr_decay: float = 0.1
    # absolute transition steps; None means "scale the paper's 60/179 and
    # 90/179 fractions to this run's total step count at train() time"
    lr_transitions: Optional[tuple[int, ...]] = None
    momentum: float = 0.9
    label_smoothing: float = 0.5
    sinkhorn_reg: float = 0.01
    sinkhorn_iters: int = 100
    ot_grad_mode: str = "unroll"  # or "fixed_plan"
    variant: str = "OT-Reg+OT"
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.variant not in ALL_VARIANTS:
            raise ValueError(f"TrainConfig: variant must be one of {ALL_VARIANTS}, got {self.variant!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"TrainConfig: label_smoothing must be in [0,1), got {self.label_smoothing}")
        if self.lr_classifier <= 0 and self.lr_classifier != 0:
            raise ValueError("TrainConfig: lr_classifier must be >= 0")
        if self.lr_classifier < 0 or self.lr_generator < 0:
            raise ValueError("TrainConfig: learning rates must be >= 0")
        if self.epsilon < 0:
            raise ValueError(f"TrainConfig: epsilon must be >= 0, got {self.epsilon}")
        if self.batch_size < 2:
            raise ValueError("TrainConfig: batch_size must be >= 2 (the OT term couples a batch)")
        if self.ot_grad_mode not in ("unroll", "fixed_plan"):
            raise ValueError(f"TrainConfig: bad ot_grad_mode {self.ot_grad_mode!r}")


_PAPER_TRANSITION_FRACTIONS = (60.0 / 179.0, 90.0 / 179.0)


def resolve_transitions(cfg: TrainConfig, total_steps: int) -> TrainConfig:
    """Fill in absolute decay steps scaled from the paper's schedule."""
    if cfg.lr_transitions is not None:
        return cfg
    steps = tuple(int(round(f * total_steps)) for f in _PAPER_TRANSITION_FRACTIONS)
    return replace(cfg, lr_transitions=steps)


def lr_schedule(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Classifier LR decays at each transition; generator LR never does."""
    if cfg.lr_transitions is None:
        raise ValueError("lr_schedule: transitions unresolved; call resolve_transitions first")
    k = sum(1 for t in cfg.lr_transitions if step >= t)
    return cfg.lr_classifier * cfg.lr_decay**k, cfg.lr_generator


def smooth_labels(y, w: float):
    """(1-w) * onehot + w/C, rows stay on the simplex."""
    if not 0 <= w < 1:
        raise ValueError(f"smooth_labels: w must be in [0,1), got {w}")
    arr = y.data if isinstance(y, Tensor) else y
    c = arr.shape[1]
    out = arr * arr.dtype.type(1 - w) + arr.dtype.type(w / c)
    return Tensor(out) if isinstance(y, Tensor) else out


def onehot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    return np.eye(num_classes, dtype=dtype)[labels]


@dataclass
class IterationRecord:
    step: int
    ce_loss: float
    ot_distance: float
    lr_classifier: float
    lr_generator: float
    wallclock_ms: int


def _ot_between(lat_nat, lat_adv, cfg: TrainConfig):
    cm = cost_matrix(lat_nat, lat_adv)
    return sinkhorn_distance(cm, cfg.sinkhorn_reg, cfg.sinkhorn_iters, cfg.ot_grad_mode)


def train_step(
    x: np.ndarray,
    y: np.ndarray,
    clf: Classifier,
    gen: Optional[Generator],
    cfg: TrainConfig,
    step: int,
    rng: np.random.Generator,
    events: Optional[list] = None,
    compute_ot_metric: bool = True,
) -> IterationRecord:
    t0 = time.perf_counter()
    lr_c, lr_g = lr_schedule(step, cfg)
    budget = PerturbationBudget(cfg.epsilon)
    targets = smooth_labels(onehot(y, clf.cfg.num_classes), cfg.label_smoothing)
    ot_value = 0.0

    if cfg.variant == "natural":
        clf.store.set_trainable(True)
        with Tape() as tape:
            _, logits = classify(Tensor(x), clf, train=True, update_running=True)
            ce = softmax_cross_entropy(logits, targets)
            tape.backward(ce)
        ce_value = float(ce.data)
        if not np.isfinite(ce_value):
            raise TrainingDiverged(f"non-finite loss at step {step}: ce={ce_value!r} variant={cfg.variant}")
        momentum_step(clf.store, clf.store.grads(tape), lr_c, cfg.momentum)
        if events is not None:
            events.append(("theta_update", step))
        ms = int((time.perf_counter() - t0) * 1000)
        return IterationRecord(step, ce_value, ot_value, lr_c, lr_g, ms)

    assert gen is not None
    z_arr = rng.standard_normal((x.shape[0], gen.cfg.z_dim)).astype(np.float32)

    # generator ascent; classifier parameters frozen for this pass
    clf.store.set_trainable(False)
    gen.store.set_trainable(True)
    if cfg.variant != "OT-Reg+Xent":
        # natural latents are a constant of the generator update
        lat_nat_const = classify(Tensor(x), clf, train=True, update_running=False)[0].data
    with Tape() as phi_tape:
        delta = generate_perturbation(Tensor(z_arr), gen, budget, train=True, update_running=True)
        x_adv = apply_perturbation(Tensor(x), delta, budget)
        lat_adv_phi, logits_adv_phi = classify(x_adv, clf, train=True, update_running=False)
        if cfg.variant == "OT-Reg+Xent":
            gen_obj = softmax_cross_entropy(logits_adv_phi, targets)
        else:
            gen_obj, _ = _ot_between(Tensor(lat_nat_const), lat_adv_phi, cfg)
        phi_tape.backward(gen_obj)
    if not np.isfinite(gen_obj.data):
        raise TrainingDiverged(f"non-finite generator objective {gen_obj.data!r} at step {step}")
    ascent = {k: -g for k, g in gen.store.grads(phi_tape).items()}
    momentum_step(gen.store, ascent, lr_g, cfg.momentum)
    if events is not None:
        events.append(("phi_update", step, id(z_arr)))

    # regenerate with the SAME z under the updated generator
    gen.store.set_trainable(False)
    delta2 = generate_perturbation(Tensor(z_arr), gen, budget, train=True, update_running=False)
    eps32 = np.float32(cfg.epsilon)
    if delta2.data.size and np.abs(delta2.data).max() > eps32:
        raise AssertionError(f"synthesized perturbation escaped the budget at step {step}")
    x_adv_arr = np.clip(x + delta2.data, np.float32(budget.pixel_min), np.float32(budget.pixel_max))
    if events is not None:
        events.append(("regenerate", step, id(z_arr)))

    # classifier descent on the regenerated adversarial batch; both branches
    # share one forward, so batch statistics come from the union batch
    clf.store.set_trainable(True)
    nb = x.shape[0]
    both = np.concatenate([x, x_adv_arr], axis=0)
    with Tape() as theta_tape:
        lat_both, logits_both = classify(Tensor(both), clf, train=True, update_running=True)
        lat_nat = trow_slice(lat_both, 0, nb)
        lat_adv = trow_slice(lat_both, nb, 2 * nb)
        logits_adv = trow_slice(logits_both, nb, 2 * nb)
        ce = softmax_cross_entropy(logits_adv, targets)
        if cfg.variant in ("OT-Reg+OT", "OT-Reg+Xent"):
            d, _plan = _ot_between(lat_nat, lat_adv, cfg)
            loss = add(ce, d)
            ot_value = float(d.data)
        else:
            loss = ce
            if compute_ot_metric:
                # diagnostic only: never part of the noReg classifier loss
                d_diag, _ = _ot_between(Tensor(lat_nat.data), Tensor(lat_adv.data), cfg)
                ot_value = float(d_diag.data)
        theta_tape.backward(loss)
    ce_value = float(ce.data)
    if not (np.isfinite(ce_value) and np.isfinite(ot_value)):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: ce={ce_value!r} ot={ot_value!r} variant={cfg.variant}"
        )
    momentum_step(clf.store, clf.store.grads(theta_tape), lr_c, cfg.momentum)
    if events is not None:
        events.append(("theta_update", step))

    ms = int((time.perf_counter() - t0) * 1000)
    return IterationRecord(step, ce_value, ot_value, lr_c, lr_g, ms)


METRICS_HEADER = "step,ce_loss,ot_distance,lr_classifier,lr_generator,wallclock_ms"


@dataclass
class TrainResult:
    classifier: Classifier
    generator: Optional[Generator]
    config: TrainConfig
    records: list
    total_steps: int
    checkpoint_paths: list
    metrics_path: Optional[str]


def default_model_configs(dataset: Dataset, cfg: TrainConfig) -> tuple[GeneratorConfig, ClassifierConfig]:
    _n, h, w, c = dataset.images.shape
    if h != w or h % 4 != 0:
        raise ValueError(f"default model configs need square images with side divisible by 4, got {h}x{w}")
    cls_cfg = ClassifierConfig(num_classes=dataset.num_classes, in_channels=c)
    gen_cfg = GeneratorConfig(
        z_dim=cls_cfg.latent_dim,
        base_spatial=h // 4,
        channel_schedule=(64, 32, 16, c),
        output_shape=(h, w, c),
    )
    return gen_cfg, cls_cfg


def _write_metrics_row(f, r: IterationRecord) -> None:
    f.write(f"{r.step},{r.ce_loss!r},{r.ot_distance!r},{r.lr_classifier!r},{r.lr_generator!r},{r.wallclock_ms}\n")


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = None
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = line.split(",")
            rows.append(dict(zip(header, vals)))
    return rows


def metrics_equal(path_a, path_b) -> bool:
    """Row-wise equality ignoring the wallclock_ms column, which measures
    time rather than computation."""
    a, b = read_metrics(path_a), read_metrics(path_b)
    if len(a) != len(b):
        return False
    keys = ("step", "ce_loss", "ot_distance", "lr_classifier", "lr_generator")
    return all(ra[k] == rb[k] for ra, rb in zip(a, b) for k in keys)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    gen_cfg: Optional[GeneratorConfig] = None,
    cls_cfg: Optional[ClassifierConfig] = None,
    checkpoint_interval: Optional[int] = None,
    log_interval: int = 1,
    resume_from=None,
    force_resume: bool = False,
    config_hash: str = "",
    stop_after: Optional[int] = None,
    events: Optional[list] = None,
) -> TrainResult:
    """Runs Algorithm-1 training over the dataset.

    Emits a checkpoint at step 0, every `checkpoint_interval` steps, and at
    the final step (when out_dir is given), plus an append-only metrics CSV.
    `stop_after` ends the run early at a step boundary (used by the
    resume-equivalence tests); resume_from continues from a saved checkpoint
    with identical results to an uninterrupted run.
    """
    import os

    from .checkpoint import load_checkpoint, restore_models, restore_rng, save_checkpoint

    steps_per_epoch = dataset.n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"train: dataset of {dataset.n} too small for batch_size {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    cfg = resolve_transitions(cfg, total_steps)
    use_augment = cfg.augment and dataset.family == "cifar10"

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config_hash != config_hash and not force_resume:
            raise ValueError(
                f"resume refused: checkpoint config hash {ck.config_hash!r} does not match"
                f" current config hash {config_hash!r} (pass force to override)"
            )
        clf, gen = restore_models(ck)
        stream = restore_rng(ck)
        if stream is None:
            raise ValueError("resume refused: checkpoint carries no rng state")
        start_step = ck.step
    else:
        if cls_cfg is None or gen_cfg is None:
            d_gen, d_cls = default_model_configs(dataset, cfg)
            gen_cfg = gen_cfg or d_gen
            cls_cfg = cls_cfg or d_cls
        clf = Classifier.init(cls_cfg, np.random.default_rng([cfg.seed, 0]))
        gen = None if cfg.variant == "natural" else Generator.init(gen_cfg, np.random.default_rng([cfg.seed, 1]))
        if gen is not None:
            check_pairing(gen.cfg, clf.cfg)
        stream = np.random.default_rng([cfg.seed, 2])
        start_step = 0

    ckpt_paths = []
    metrics_path = None
    metrics_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")

        def ckpt(step):
            p = os.path.join(out_dir, f"ckpt_{step:06d}.bin")
            save_checkpoint(
                p, step, config_hash, clf, gen, stream,
                extra={"variant": cfg.variant, "seed": cfg.seed, "epsilon": cfg.epsilon},
            )
            ckpt_paths.append(p)

        if resume_from is None:
            ckpt(0)
            metrics_f = open(metrics_path, "w")
            metrics_f.write(f"# config_hash={config_hash} seed={cfg.seed} variant={cfg.variant}\n")
            metrics_f.write(METRICS_HEADER + "\n")
        else:
            # drop rows past the checkpoint so the resumed stream continues
            # exactly where the saved state does
            kept = []
            if os.path.exists(metrics_path):
                with open(metrics_path) as f:
                    for line in f:
                        s = line.strip()
                        if s.startswith("#") or s.startswith("step") or not s:
                            kept.append(line)
                        elif int(s.split(",", 1)[0]) < start_step:
                            kept.append(line)
            else:
                kept = [f"# config_hash={config_hash} seed={cfg.seed} variant={cfg.variant}\n", METRICS_HEADER + "\n"]
            with open(metrics_path, "w") as f:
                f.writelines(kept)
            metrics_f = open(metrics_path, "a")
    else:

        def ckpt(step):
            pass

    records = []
    end_step = total_steps if stop_after is None else min(stop_after, total_steps)
    try:
        for step in range(start_step, end_step):
            epoch, bi = divmod(step, steps_per_epoch)
            if bi == 0 or step == start_step:
                perm = epoch_permutation(dataset.n, cfg.seed, epoch)
            sel = perm[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            x = dataset.images[sel]
            y = dataset.labels[sel]
            if use_augment:
                x = augment(x, stream)
            logged = step % log_interval == 0 or step + 1 == end_step
            rec = train_step(x, y, clf, gen, cfg, step, stream, events=events, compute_ot_metric=logged)
            if logged:
                records.append(rec)
                if metrics_f is not None:
                    _write_metrics_row(metrics_f, rec)
                    metrics_f.flush()
            done = step + 1
            if out_dir is not None and (
                (checkpoint_interval and done % checkpoint_interval == 0) or done == end_step
            ):
                ckpt(done)
        if out_dir is not None and end_step == start_step:
            # zero-step run: the initial checkpoint is the final one
            pass
    finally:
        if metrics_f is not None:
            metrics_f.close()

    return TrainResult(clf, gen, cfg, records, total_steps, ckpt_paths, metrics_path)
