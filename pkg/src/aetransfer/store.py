"""Self-describing binary container for models, adversarial batches and datasets.

Layout::

    b"AETX\\x01\\n"  | uint64 LE header length | UTF-8 JSON header | raw blocks

The header holds ``kind``, free-form ``meta`` and one entry per block (name,
dtype, shape, byte count) in the order the blocks follow.  Blocks are C-order
little-endian.  JSON is written with sorted keys and Python float repr, so
decode followed by encode reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AETX\x01\n"
ARTIFACT_ROOT_ENV = "AETRANSFER_ROOT"
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1", "u1": "|u1"}


class FormatError(ValueError):
    pass


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "artifacts"))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _dtype_code(arr: np.ndarray) -> str:
    kind = {"f": "f8", "i": "i8", "u": "u1" if arr.dtype.itemsize == 1 else "i8", "b": "b1"}.get(arr.dtype.kind)
    if kind is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return kind


def encode_container(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blocks, payload = [], []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        blocks.append({"name": name, "dtype": code, "shape": list(arr.shape), "nbytes": len(raw)})
        payload.append(raw)
    header = dumps_json({"kind": kind, "meta": meta, "blocks": blocks}).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def decode_container(raw: bytes, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if not raw.startswith(MAGIC):
        raise FormatError("not an AETX container (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise FormatError("truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    off += hlen
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind!r} container, found {kind!r}")
    arrays = {}
    for blk in header["blocks"]:
        n = blk["nbytes"]
        if off + n > len(raw):
            raise FormatError(f"block {blk['name']!r} runs past end of file")
        arr = np.frombuffer(raw[off:off + n], dtype=_DTYPES[blk["dtype"]]).reshape(blk["shape"])
        arrays[blk["name"]] = arr.copy()
        off += n
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after last block")
    return kind, header["meta"], arrays


def write_bytes(path, raw: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return path


# ---- models ----------------------------------------------------------------


def encode_model(model) -> bytes:
    meta = {"spec": model.spec.to_dict(), "seed": model.seed, "train_meta": model.meta,
            "model_id": model.model_id}
    return encode_container("model", meta, {f"param/{k}": v for k, v in model.params.items()})


def decode_model(raw: bytes):
    from .nn import ModelSpec, TrainedModel

    _, meta, arrays = decode_container(raw, "model")
    params = {k.split("/", 1)[1]: v for k, v in arrays.items()}
    model = TrainedModel(ModelSpec.from_dict(meta["spec"]), params, meta["seed"], meta["train_meta"])
    if model.model_id != meta["model_id"]:
        raise FormatError("model id mismatch: parameters do not match the stored hash")
    return model


def save_model(model, path) -> Path:
    return write_bytes(path, encode_model(model))


def load_model(path):
    return decode_model(Path(path).read_bytes())


# ---- adversarial batches ---------------------------------------------------


def encode_batch(batch) -> bytes:
    meta = {"target_id": batch.target_id, "config": batch.config.to_dict(), "meta": batch.meta}
    arrays = {
        "source": batch.source, "adversarial": batch.adversarial, "labels": batch.labels,
        "pre_misclassified": batch.pre_misclassified, "converged": batch.converged,
        "iterations": batch.iterations,
    }
    return encode_container("aebatch", meta, arrays)


def decode_batch(raw: bytes):
    from .attacks import AEBatch, AttackConfig

    _, meta, a = decode_container(raw, "aebatch")
    return AEBatch(a["source"], a["adversarial"], a["labels"], meta["target_id"],
                   AttackConfig.from_dict(meta["config"]), a["pre_misclassified"],
                   a["converged"], a["iterations"], meta["meta"])


def save_batch(batch, path) -> Path:
    return write_bytes(path, encode_batch(batch))


def load_batch(path):
    return decode_batch(Path(path).read_bytes())


# ---- datasets --------------------------------------------------------------


def encode_dataset(splits: dict) -> bytes:
    arrays, meta = {}, {}
    for name, sp in splits.items():
        arrays[f"{name}/images"] = sp.images
        arrays[f"{name}/labels"] = sp.labels
        meta[name] = {"source": sp.source, "num_classes": sp.num_classes, "meta": sp.meta}
    return encode_container("dataset", meta, arrays)


def decode_dataset(raw: bytes) -> dict:
    from .data import DatasetSplit

    _, meta, a = decode_container(raw, "dataset")
    return {name: DatasetSplit(a[f"{name}/images"], a[f"{name}/labels"], name, m["source"],
                               m["num_classes"], m["meta"])
            for name, m in meta.items()}


def save_dataset(splits: dict, path) -> Path:
    return write_bytes(path, encode_dataset(splits))


def load_dataset(path) -> dict:
    return decode_dataset(Path(path).read_bytes())


# ---- ensemble manifests ----------------------------------------------------


def save_ensemble_manifest(path, member_paths, weights=None, gradient_mode: str = "per-model") -> Path:
    weights = list(weights) if weights is not None else [1.0] * len(member_paths)
    doc = {"members": [{"path": str(p), "weight": float(w)} for p, w in zip(member_paths, weights)],
           "gradient_mode": gradient_mode}
    return write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_ensemble_manifest(path):
    from .ensemble import EnsembleModel

    path = Path(path)
    doc = json.loads(path.read_text())
    members, weights = [], []
    for entry in doc["members"]:
        p = Path(entry["path"])
        if not p.is_absolute():
            p = path.parent / p
        members.append(load_model(p))
        weights.append(float(entry.get("weight", 1.0)))
    return EnsembleModel(tuple(members), tuple(weights), doc.get("gradient_mode", "per-model"))


def load_target(path):
    """A model container or an ensemble manifest, chosen by content."""
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(MAGIC):
        return decode_model(raw)
    return load_ensemble_manifest(path)
