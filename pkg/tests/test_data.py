"""Dataset construction, toy synthesis, CIFAR parsing, augmentation, batching."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsynth.data import (
    DataFormatError,
    Dataset,
    ToySpec,
    augment,
    batch_iterator,
    epoch_permutation,
    hflip,
    load_cifar10_binary,
    load_dataset,
    save_dataset,
    synth_toy,
)

rng = np.random.default_rng(3)


def tiny_ds(n=12, size=16, classes=3, split="train"):
    images = rng.uniform(0, 1, (n, size, size, 3)).astype(np.float32)
    labels = np.arange(n) % classes
    return Dataset(images, labels.astype(np.int64), split, classes)


# ----------------------------------------------------------------- Dataset


def test_dataset_validation():
    with pytest.raises(ValueError, match="nonempty"):
        Dataset(np.zeros((0, 8, 8, 3), dtype=np.float32), np.zeros(0, dtype=np.int64), "train", 3)
    img = np.zeros((2, 8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="labels"):
        Dataset(img, np.zeros(3, dtype=np.int64), "train", 3)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Dataset(img + 2.0, np.zeros(2, dtype=np.int64), "train", 3)
    with pytest.raises(ValueError, match="labels outside"):
        Dataset(img, np.array([0, 5]), "train", 3)
    with pytest.raises(ValueError, match="split"):
        Dataset(img, np.zeros(2, dtype=np.int64), "validation", 3)


# ------------------------------------------------------------------- toy


def test_toy_deterministic():
    spec = ToySpec(samples_per_class=24)
    tr1, te1 = synth_toy(spec)
    tr2, te2 = synth_toy(spec)
    assert np.array_equal(tr1.images, tr2.images)
    assert np.array_equal(tr1.labels, tr2.labels)
    assert np.array_equal(te1.images, te2.images)


def test_toy_split_and_balance():
    spec = ToySpec(classes=3, samples_per_class=60)
    tr, te = synth_toy(spec)
    # fixed 5:1 split per class
    assert tr.n == 3 * 50 and te.n == 3 * 10
    for ds in (tr, te):
        counts = np.bincount(ds.labels, minlength=3)
        assert (counts == counts[0]).all()
    assert tr.images.min() >= 0.0 and tr.images.max() <= 1.0


def test_toy_seed_changes_content():
    a, _ = synth_toy(ToySpec(samples_per_class=12, seed=0))
    b, _ = synth_toy(ToySpec(samples_per_class=12, seed=1))
    assert not np.array_equal(a.images, b.images)


def test_toy_spec_validation():
    with pytest.raises(ValueError, match="image_size"):
        ToySpec(image_size=4)
    with pytest.raises(ValueError, match="classes"):
        ToySpec(classes=1)
    with pytest.raises(ValueError, match="samples per class"):
        ToySpec(samples_per_class=3)


def test_noiseless_toy_is_separable():
    # a plain 2-layer CNN fits the clean shapes exactly within 5 epochs
    from advsynth.tensor import (
        ParamStore,
        Tape,
        Tensor,
        add,
        conv2d,
        leaky_relu,
        matmul,
        momentum_step,
        reshape,
        softmax_cross_entropy,
    )

    tr, _ = synth_toy(ToySpec(samples_per_class=2400, noise_std=0.0))
    init = np.random.default_rng(0)
    st = ParamStore()
    st.add("w1", (init.standard_normal((3, 3, 3, 16)) * np.sqrt(2 / 27)).astype(np.float32))
    st.add("w2", (init.standard_normal((3, 3, 16, 32)) * np.sqrt(2 / 144)).astype(np.float32))
    st.add("fc_w", (init.standard_normal((512, 3)) * np.sqrt(1 / 512)).astype(np.float32))
    st.add("fc_b", np.zeros(3, dtype=np.float32))
    st.set_trainable(True)

    def logits(x):
        h = leaky_relu(conv2d(Tensor(x), st.params["w1"], stride=2, padding="same"), 0.1)
        h = leaky_relu(conv2d(h, st.params["w2"], stride=2, padding="same"), 0.1)
        return add(matmul(reshape(h, (h.shape[0], 512)), st.params["fc_w"]), st.params["fc_b"])

    eye = np.eye(3, dtype=np.float32)
    per_epoch = tr.n // 32
    for step, (xb, yb) in enumerate(batch_iterator(tr, 32, seed=0, drop_last=True, epochs=5)):
        # anneal once so the last epochs settle instead of rattling
        lr = 0.05 if step < 2.5 * per_epoch else 0.005
        with Tape() as tape:
            loss = softmax_cross_entropy(logits(xb), eye[yb])
            tape.backward(loss)
        momentum_step(st, st.grads(tape), lr, 0.9)

    pred = np.concatenate(
        [logits(tr.images[i : i + 256]).data.argmax(1) for i in range(0, tr.n, 256)]
    )
    assert (pred == tr.labels).mean() == 1.0


# ------------------------------------------------------------------ CIFAR


def write_cifar_fixture(path: str, labels, seed=0):
    r = np.random.default_rng(seed)
    with open(path, "wb") as f:
        for lab in labels:
            f.write(struct.pack("B", lab))
            f.write(r.integers(0, 256, 3072, dtype=np.uint8).tobytes())


def test_cifar_fixture_roundtrip(tmp_path):
    d = tmp_path / "cifar"
    d.mkdir()
    for i, name in enumerate([f"data_batch_{k}.bin" for k in range(1, 6)]):
        write_cifar_fixture(str(d / name), [3, 7], seed=i)
    write_cifar_fixture(str(d / "test_batch.bin"), [1, 9])
    tr, te = load_cifar10_binary(str(d))
    assert tr.n == 10 and te.n == 2
    assert list(tr.labels[:2]) == [3, 7]
    assert list(te.labels) == [1, 9]
    assert tr.images.shape == (10, 32, 32, 3)


def test_cifar_planar_channel_order_and_scaling(tmp_path):
    # first 1024 bytes are the red plane; byte 255 scales to exactly 1.0
    p = tmp_path / "data_batch_1.bin"
    rec = bytearray(3073)
    rec[0] = 2
    for i in range(1, 1025):
        rec[i] = 255  # red plane
    p.write_bytes(bytes(rec))
    for name in [f"data_batch_{k}.bin" for k in range(2, 6)] + ["test_batch.bin"]:
        write_cifar_fixture(str(tmp_path / name), [0])
    tr, _ = load_cifar10_binary(str(tmp_path))
    img = tr.images[0]
    assert np.all(img[:, :, 0] == 1.0)
    assert np.all(img[:, :, 1] == 0.0) and np.all(img[:, :, 2] == 0.0)


def test_cifar_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(b"\x00" * 5000)  # not a multiple of 3073
    for name in [f"data_batch_{k}.bin" for k in range(2, 6)] + ["test_batch.bin"]:
        write_cifar_fixture(str(tmp_path / name), [0])
    with pytest.raises(DataFormatError, match="byte offset"):
        load_cifar10_binary(str(tmp_path))


def test_cifar_corrupt_label(tmp_path):
    write_cifar_fixture(str(tmp_path / "data_batch_1.bin"), [11])
    for name in [f"data_batch_{k}.bin" for k in range(2, 6)] + ["test_batch.bin"]:
        write_cifar_fixture(str(tmp_path / name), [0])
    with pytest.raises(DataFormatError, match="label"):
        load_cifar10_binary(str(tmp_path))


# ------------------------------------------------------------ augmentation


def test_hflip_involution():
    img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    assert np.array_equal(hflip(hflip(img)), img)


def test_augment_preserves_domain_and_labels_shape():
    batch = rng.uniform(0, 1, (16, 16, 16, 3)).astype(np.float32)
    out = augment(batch, np.random.default_rng(0))
    assert out.shape == batch.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_reproducible():
    batch = rng.uniform(0, 1, (8, 16, 16, 3)).astype(np.float32)
    a = augment(batch, np.random.default_rng(5))
    b = augment(batch, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_identity_crop_when_offsets_centered():
    # offset (pad, pad) recovers the original window; reflect padding never
    # leaks values outside [0,1] so the only change can be the flip
    from advsynth.data import random_crop

    img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    assert np.array_equal(random_crop(img, 4, 4), img)


# --------------------------------------------------------------- batching


def test_batch_iterator_drop_last_arithmetic():
    ds = tiny_ds(n=130 * 1)  # N=130
    ds2 = Dataset(rng.uniform(0, 1, (130, 8, 8, 3)).astype(np.float32), (np.arange(130) % 3).astype(np.int64), "train", 3)
    batches = list(batch_iterator(ds2, 64, seed=0, drop_last=True))
    assert len(batches) == 2
    assert all(x.shape[0] == 64 for x, _ in batches)


def test_batch_iterator_partition_without_drop():
    ds = tiny_ds(n=10)
    batches = list(batch_iterator(ds, 4, seed=1, drop_last=False))
    seen = np.concatenate([x for x, _ in batches])
    assert seen.shape[0] == 10
    # every image appears exactly once
    flat = {img.tobytes() for img in seen}
    assert len(flat) == 10
    orig = {img.tobytes() for img in ds.images}
    assert flat == orig


def test_batch_iterator_deterministic():
    ds = tiny_ds(n=20)
    a = [y.tolist() for _, y in batch_iterator(ds, 5, seed=3, drop_last=True, epochs=2)]
    b = [y.tolist() for _, y in batch_iterator(ds, 5, seed=3, drop_last=True, epochs=2)]
    assert a == b


def test_batch_iterator_rejects_oversized_batch():
    ds = tiny_ds(n=6)
    with pytest.raises(ValueError, match="batch size"):
        next(batch_iterator(ds, 7, seed=0, drop_last=True))


def test_epoch_permutation_depends_only_on_seed_and_epoch():
    assert np.array_equal(epoch_permutation(50, 4, 2), epoch_permutation(50, 4, 2))
    assert not np.array_equal(epoch_permutation(50, 4, 2), epoch_permutation(50, 4, 3))


# ------------------------------------------------------------- file format


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = tiny_ds(n=9, split="test")
    path = str(tmp_path / "toy.ds")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert back.split == ds.split and back.num_classes == ds.num_classes
    assert back.family == ds.family


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dataset_roundtrip_property(tmp_path_factory, seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 8))
    size = int(r.integers(8, 17))
    c = int(r.integers(1, 4))
    classes = int(r.integers(2, 6))
    ds = Dataset(
        r.uniform(0, 1, (n, size, size, c)).astype(np.float32),
        r.integers(0, classes, n).astype(np.int64),
        "train",
        classes,
    )
    path = str(tmp_path_factory.mktemp("ds") / "x.ds")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)


def test_load_dataset_bad_magic(tmp_path):
    p = tmp_path / "bad.ds"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataFormatError, match="magic"):
        load_dataset(str(p))


def test_load_dataset_truncated_pixels(tmp_path):
    ds = tiny_ds(n=4)
    p = str(tmp_path / "t.ds")
    save_dataset(ds, p)
    data = open(p, "rb").read()
    with open(p, "wb") as f:
        f.write(data[:-100])
    with pytest.raises(DataFormatError, match="truncated pixel"):
        load_dataset(p)
