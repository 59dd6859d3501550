"""Robustness measurement protocols.

White-box accuracy grids, surrogate-transfer (black-box) evaluation, the
epsilon budget sweep, the perturbation diversity trace, and the three-variant
ablation.  Every protocol takes an explicit seed and derives all randomness
from it, so reports are reproducible from (checkpoint, dataset, seed, specs).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, _spec_key, evaluate_accuracy, run_attack
from .data import Dataset
from .models import Classifier, PerturbationBudget, classify, generate_perturbation
from .tensor import Tensor

DEFAULT_EVAL_BATCH = 128


@dataclass
class EvalReport:
    model_id: str
    natural_accuracy: float
    attack_accuracies: dict[str, float]
    config_hash: str = ""
    timestamp: str = ""

    def __post_init__(self):
        for name, acc in [("natural", self.natural_accuracy), *self.attack_accuracies.items()]:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"EvalReport: accuracy {name}={acc} outside [0,1]")

    def rows(self) -> list[tuple[str, float]]:
        return [("natural", self.natural_accuracy)] + list(self.attack_accuracies.items())

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# model={self.model_id} config_hash={self.config_hash} time={self.timestamp}\n")
            f.write("attack,accuracy\n")
            for name, acc in self.rows():
                f.write(f"{name},{acc:.6f}\n")

    def to_summary(self, path) -> None:
        blob = {
            "model_id": self.model_id,
            "config_hash": self.config_hash,
            "timestamp": self.timestamp,
            "natural_accuracy": self.natural_accuracy,
            "attack_accuracies": self.attack_accuracies,
        }
        with open(path, "w") as f:
            json.dump(blob, f, indent=1, sort_keys=True)
            f.write("\n")


@dataclass
class DiversityTrace:
    """Per-checkpoint (step, mean, std) of normalized-latent distances."""

    entries: list[tuple[int, float, float]]
    k: int
    subset_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        for step, _mean, std in self.entries:
            if std < 0:
                raise ValueError(f"DiversityTrace: negative std at step {step}")

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# k={self.k} subset={','.join(map(str, self.subset_indices.tolist()))}\n")
            f.write("step,mean,std\n")
            for step, mean, std in self.entries:
                f.write(f"{step},{mean:.8f},{std:.8f}\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def whitebox_grid(
    model: Classifier,
    dataset: Dataset,
    specs: list[AttackSpec],
    seed: int = 0,
    model_id: str = "",
    config_hash: str = "",
    batch_size: int = DEFAULT_EVAL_BATCH,
) -> EvalReport:
    """Natural accuracy plus one attacked accuracy per spec, fixed seed."""
    natural = evaluate_accuracy(dataset, model, None, seed=seed, batch_size=batch_size)
    accs = {}
    for spec in specs:
        accs[spec.name()] = evaluate_accuracy(dataset, model, spec, seed=seed, batch_size=batch_size)
    return EvalReport(model_id, natural, accs, config_hash, _now())


def synthesize_attack_set(
    model: Classifier,
    dataset: Dataset,
    spec: AttackSpec,
    seed: int = 0,
    batch_size: int = DEFAULT_EVAL_BATCH,
) -> Dataset:
    """Attacked copy of the dataset, batch-for-batch as evaluate_accuracy runs it.

    Sharing the rng derivation with evaluate_accuracy makes replaying the
    returned set on the generating model reproduce its white-box accuracy
    exactly; the set also survives the dataset file format losslessly.
    """
    rng = np.random.default_rng([seed, _spec_key(spec)])
    out = np.empty_like(dataset.images)
    for i in range(0, dataset.n, batch_size):
        xb = dataset.images[i : i + batch_size]
        yb = dataset.labels[i : i + batch_size]
        out[i : i + batch_size] = run_attack(xb, yb, model, spec, rng)
    return Dataset(out, dataset.labels.copy(), dataset.split, dataset.num_classes, dataset.family)


def blackbox_transfer(
    target: Classifier,
    surrogate: Classifier,
    dataset: Dataset,
    specs: list[AttackSpec],
    seed: int = 0,
    model_id: str = "",
    config_hash: str = "",
    batch_size: int = DEFAULT_EVAL_BATCH,
) -> EvalReport:
    """Attacks generated on the surrogate, accuracy measured on the target."""
    if surrogate.cfg.in_channels != target.cfg.in_channels:
        raise ValueError(
            f"blackbox_transfer: surrogate takes {surrogate.cfg.in_channels} channels,"
            f" target takes {target.cfg.in_channels}"
        )
    if surrogate.cfg.num_classes != target.cfg.num_classes:
        raise ValueError(
            f"blackbox_transfer: class count mismatch {surrogate.cfg.num_classes}"
            f" vs {target.cfg.num_classes}"
        )
    natural = evaluate_accuracy(dataset, target, None, seed=seed, batch_size=batch_size)
    accs = {}
    for spec in specs:
        adv = synthesize_attack_set(surrogate, dataset, spec, seed=seed, batch_size=batch_size)
        accs[spec.name()] = evaluate_accuracy(adv, target, None, seed=seed, batch_size=batch_size)
    return EvalReport(model_id, natural, accs, config_hash, _now())


def budget_sweep(
    model: Classifier,
    dataset: Dataset,
    epsilons: list[float],
    base_spec: AttackSpec | None = None,
    seed: int = 0,
    batch_size: int = DEFAULT_EVAL_BATCH,
) -> list[tuple[float, float]]:
    """(epsilon, PGD accuracy) curve; epsilon 0 degenerates to natural accuracy.

    The zero point still runs the attack loop: projection onto a radius-0
    ball returns the natural images bit-exactly, so no special casing.
    """
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("budget_sweep: epsilons must be sorted ascending")
    if base_spec is None:
        base_spec = AttackSpec("pgd", 8.0 / 255.0, alpha=2.0 / 255.0, steps=20, random_init=True)
    curve = []
    for eps in epsilons:
        spec = replace(base_spec, epsilon=float(eps))
        acc = evaluate_accuracy(dataset, model, spec, seed=seed, batch_size=batch_size)
        curve.append((float(eps), acc))
    return curve


def sweep_to_csv(curve: list[tuple[float, float]], path, model_id: str = "", config_hash: str = "") -> None:
    with open(path, "w") as f:
        f.write(f"# model={model_id} config_hash={config_hash}\n")
        f.write("epsilon,accuracy\n")
        for eps, acc in curve:
            f.write(f"{eps:.8f},{acc:.6f}\n")


def _normalized_latents(model: Classifier, x: np.ndarray) -> np.ndarray:
    lat, _ = classify(Tensor(x), model, train=False)
    v = lat.data
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    return v / np.maximum(norms, 1e-12)


def diversity_subset(n: int, size: int, seed: int) -> np.ndarray:
    """Seed-derived evaluation subset; logged in the trace for provenance."""
    if n <= size:
        return np.arange(n, dtype=np.int64)
    return np.sort(np.random.default_rng([seed, 101]).choice(n, size=size, replace=False))


def diversity_study(
    checkpoints: list,
    dataset: Dataset,
    k: int,
    seed: int = 0,
    subset_size: int = 256,
) -> DiversityTrace:
    """Latent-space spread of synthesized perturbations per checkpoint.

    For each image in a fixed subset, k perturbations are synthesized from
    fresh z draws; the Euclidean distance between the L2-normalized latents
    of the natural and each adversarial image is recorded.  Per checkpoint
    the trace keeps the mean distance over all (image, z) pairs and the
    per-image distance std averaged over images.
    """
    from .checkpoint import load_checkpoint, restore_models

    if k < 2:
        raise ValueError(f"diversity_study: k must be >= 2, got {k}")
    if not checkpoints:
        raise ValueError("diversity_study: no checkpoints given")
    loaded = []
    for p in checkpoints:
        ck = p if not isinstance(p, (str, os.PathLike)) else load_checkpoint(p)
        if ck.gen_cfg is None:
            raise ValueError(f"diversity_study: checkpoint at step {ck.step} has no generator")
        loaded.append(ck)
    arch = (loaded[0].cls_cfg, loaded[0].gen_cfg)
    for ck in loaded[1:]:
        if (ck.cls_cfg, ck.gen_cfg) != arch:
            raise ValueError("diversity_study: checkpoints disagree on architecture")
    loaded.sort(key=lambda ck: ck.step)

    idx = diversity_subset(dataset.n, subset_size, seed)
    x_all = dataset.images[idx]
    entries = []
    for ck in loaded:
        clf, gen = restore_models(ck)
        budget = PerturbationBudget(float(ck.extra.get("epsilon", 8.0 / 255.0)))
        nat = _normalized_latents(clf, x_all)
        rng = np.random.default_rng([seed, 202, ck.step])
        means = np.empty(len(idx))
        stds = np.empty(len(idx))
        for i in range(len(idx)):
            z = rng.standard_normal((k, gen.cfg.z_dim)).astype(np.float32)
            delta = generate_perturbation(Tensor(z), gen, budget, train=False)
            xi = np.clip(x_all[i][None] + delta.data, 0.0, 1.0)
            adv = _normalized_latents(clf, xi)
            dist = np.sqrt(((adv - nat[i][None]) ** 2).sum(axis=1))
            means[i] = dist.mean()
            stds[i] = dist.std()
        entries.append((ck.step, float(means.mean()), float(stds.mean())))
    return DiversityTrace(entries, k, idx)


def export_latents(model: Classifier, dataset: Dataset, path, batch_size: int = 256) -> None:
    """Latent vectors as CSV `label,v0..v{d-1}` for external embedding tools."""
    with open(path, "w") as f:
        first = True
        for i in range(0, dataset.n, batch_size):
            lat, _ = classify(Tensor(dataset.images[i : i + batch_size]), model, train=False)
            if first:
                f.write("label," + ",".join(f"v{j}" for j in range(lat.shape[1])) + "\n")
                first = False
            for row, lab in zip(lat.data, dataset.labels[i : i + batch_size]):
                f.write(str(int(lab)) + "," + ",".join(f"{v:.7g}" for v in row) + "\n")


ABLATION_SPECS = (
    AttackSpec("pgd", 8.0 / 255.0, alpha=2.0 / 255.0, steps=20, random_init=True),
    AttackSpec("cw_margin", 8.0 / 255.0, alpha=2.0 / 255.0, steps=20, random_init=True),
)


def ablation_grid(
    train_ds: Dataset,
    test_ds: Dataset,
    base_cfg,
    out_dir=None,
    eval_seed: int = 0,
    config_hash: str = "",
) -> list[EvalReport]:
    """Trains the three variants under identical settings and evaluates each.

    Only the variant field differs between runs; seed, budget, schedule and
    architecture are shared.  Reports come back in canonical variant order.
    """
    from .training import VARIANTS, train

    reports = []
    for variant in VARIANTS:
        cfg = replace(base_cfg, variant=variant)
        run_dir = os.path.join(out_dir, variant.replace("+", "_")) if out_dir is not None else None
        result = train(train_ds, cfg, out_dir=run_dir, config_hash=config_hash)
        rep = whitebox_grid(
            result.classifier,
            test_ds,
            list(ABLATION_SPECS),
            seed=eval_seed,
            model_id=variant,
            config_hash=config_hash,
        )
        reports.append(rep)
    return reports


def write_ablation_csv(reports: list[EvalReport], path, seed: int) -> None:
    """Three-row comparison table; the shared training seed sits in the header."""
    names = []
    for rep in reports:
        for name, _ in rep.rows():
            if name not in names:
                names.append(name)
    with open(path, "w") as f:
        f.write(f"# seed={seed} (shared by all rows)\n")
        f.write("variant," + ",".join(names) + "\n")
        for rep in reports:
            row = dict(rep.rows())
            f.write(rep.model_id + "," + ",".join(f"{row.get(n, float('nan')):.6f}" for n in names) + "\n")
