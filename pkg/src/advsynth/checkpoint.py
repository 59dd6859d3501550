"""Versioned binary checkpoints.

Layout (little-endian throughout):

    magic "ASCK" | u32 version | u64 step
    | u32 len | config-hash utf-8
    | u32 len | meta json utf-8   (model configs, rng state, variant tag)
    | u32 tensor count
    | per tensor: u32 name len | name utf-8 | u8 dtype tag | u8 ndim
                  | ndim x u64 dims | raw values

dtype tags: 0 = float32, 1 = float64, 2 = int64.  Tensors are sorted by
name so identical state always serializes to identical bytes; the table
covers both parameter stores, their momentum buffers, and batchnorm running
moments.  The rng state lives in the meta record.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .models import Classifier, ClassifierConfig, Generator, GeneratorConfig
from .tensor import BNState, ParamStore, Tensor

_MAGIC = b"ASCK"
_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    cls_cfg: ClassifierConfig
    gen_cfg: Optional[GeneratorConfig]
    tensors: dict[str, np.ndarray]
    rng_state: Optional[dict]
    extra: dict


def _store_tensors(prefix: str, store: ParamStore) -> dict[str, np.ndarray]:
    out = {}
    for name, t in store.params.items():
        out[f"{prefix}/param/{name}"] = t.data
        out[f"{prefix}/momentum/{name}"] = store.momentum[name]
    for name, st in store.state.items():
        out[f"{prefix}/bn/{name}/mean"] = st.mean
        out[f"{prefix}/bn/{name}/var"] = st.var
    return out


def _load_store(prefix: str, tensors: dict[str, np.ndarray]) -> ParamStore:
    store = ParamStore()
    pp = f"{prefix}/param/"
    for key in tensors:
        if key.startswith(pp):
            name = key[len(pp):]
            store.add(name, tensors[key].copy())
            store.momentum[name] = tensors[f"{prefix}/momentum/{name}"].copy()
    bp = f"{prefix}/bn/"
    for key in tensors:
        if key.startswith(bp) and key.endswith("/mean"):
            name = key[len(bp):-len("/mean")]
            mean = tensors[key]
            st = BNState(mean.shape[0], mean.dtype)
            st.mean = mean.copy()
            st.var = tensors[f"{prefix}/bn/{name}/var"].copy()
            store.state[name] = st
    return store


def _jsonable_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def save_checkpoint(
    path,
    step: int,
    config_hash: str,
    clf: Classifier,
    gen: Optional[Generator],
    rng: Optional[np.random.Generator] = None,
    extra: Optional[dict] = None,
) -> None:
    tensors = _store_tensors("clf", clf.store)
    if gen is not None:
        tensors.update(_store_tensors("gen", gen.store))
    meta = {
        "cls_cfg": asdict(clf.cfg),
        "gen_cfg": asdict(gen.cfg) if gen is not None else None,
        "rng_state": _jsonable_rng(rng) if rng is not None else None,
        "extra": extra or {},
    }
    blob = _serialize(step, config_hash, meta, tensors)
    with open(path, "wb") as f:
        f.write(blob)


def _serialize(step: int, config_hash: str, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [_MAGIC, struct.pack("<IQ", _VERSION, step)]
    h = config_hash.encode()
    parts.append(struct.pack("<I", len(h)))
    parts.append(h)
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(m)))
    parts.append(m)
    names = sorted(tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(le.tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, step = struct.unpack("<IQ", take(12))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    config_hash = take(hlen).decode()
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        tag, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = np.dtype(_DTYPES[tag]).newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(_DTYPES[tag])
    cls_cfg = _cfg_from_dict(ClassifierConfig, meta["cls_cfg"])
    gen_cfg = _cfg_from_dict(GeneratorConfig, meta["gen_cfg"]) if meta["gen_cfg"] else None
    return Checkpoint(step, config_hash, cls_cfg, gen_cfg, tensors, meta.get("rng_state"), meta.get("extra", {}))


def _cfg_from_dict(cls, d: dict):
    d = dict(d)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(tuple(e) if isinstance(e, list) else e for e in v)
    return cls(**d)


def restore_models(ck: Checkpoint) -> tuple[Classifier, Optional[Generator]]:
    clf = Classifier(ck.cls_cfg, _load_store("clf", ck.tensors))
    gen = Generator(ck.gen_cfg, _load_store("gen", ck.tensors)) if ck.gen_cfg is not None else None
    return clf, gen


def restore_rng(ck: Checkpoint) -> Optional[np.random.Generator]:
    if ck.rng_state is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ck.rng_state
    return rng
