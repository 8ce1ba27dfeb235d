"""Deterministic on-disk container for factor archives and model checkpoints.

Byte layout
-----------
A ZIP file (stored, no compression) whose members appear in this order:

* ``manifest.json``: UTF-8 JSON with sorted keys, holding ``kind``,
  ``format`` (integer version), free-form ``meta`` and ``arrays``, the
  sorted list of array names.
* ``arrays/<name>.npy`` for every array name in sorted order: NPY 1.0,
  C order, little-endian ``float64`` (``<f8``) or ``int64`` (``<i8``).

Every member carries the timestamp 1980-01-01 00:00:00 and fixed permission
bits, so identical content produces identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile

import numpy as np
from numpy.lib import format as npy_format

FORMAT = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    """Raised for unreadable or mismatched archives."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _npy_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        a = a.astype("<i8")
    else:
        a = a.astype("<f8")
    buf = io.BytesIO()
    npy_format.write_array(buf, np.ascontiguousarray(a), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    info.create_system = 3
    return info


def to_bytes(kind: str, arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    names = sorted(arrays)
    manifest = {"kind": kind, "format": FORMAT, "meta": meta, "arrays": names}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_member("manifest.json"),
                    json.dumps(manifest, sort_keys=True, indent=1, allow_nan=False))
        for name in names:
            zf.writestr(_member(f"arrays/{name}.npy"), _npy_bytes(arrays[name]))
    return buf.getvalue()


def from_bytes(data: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT:
                raise ArchiveError(f"unsupported archive format {manifest.get('format')!r}")
            if kind is not None and manifest.get("kind") != kind:
                raise ArchiveError(f"archive holds {manifest.get('kind')!r}, expected {kind!r}")
            arrays = {}
            for name in manifest["arrays"]:
                raw = io.BytesIO(zf.read(f"arrays/{name}.npy"))
                arrays[name] = npy_format.read_array(raw, allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise ArchiveError(f"corrupt archive: {e}") from e
    return arrays, manifest["meta"]


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory and rename it into place."""
    path = os.fspath(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write(path, to_bytes(kind, arrays, meta))


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise ArchiveError(f"cannot read {os.fspath(path)}: {e.strerror}") from e
    return from_bytes(data, kind)


# -- typed helpers ----------------------------------------------------------------


def state_arrays(state) -> dict[str, np.ndarray]:
    """Arrays of an ``SdtnState`` keyed ``G<k>``, ``U<k>``, ``V<k>``, ``ranks`` and the head."""
    out = {"ranks": state.factors.ranks}
    for k, g in enumerate(state.factors.factors):
        out[f"G{k}"] = g
    for k, pair in enumerate(state.glr):
        if pair is not None:
            out[f"U{k}"] = pair.U
            out[f"V{k}"] = pair.V
    if state.head is not None:
        out["head_W"], out["head_b"] = state.head
    return out


def save_trained(path, trained, meta: dict | None = None) -> None:
    """Checkpoint of a trained classifier; ``meta`` gains the config and its digest."""
    cfg = trained.config.to_dict()
    arrays = {f"net.{k}": v for k, v in trained.params.items()}
    arrays["train.patches"] = trained.train_patches
    arrays["train.labels"] = trained.train_labels
    if trained.tensors is not None:
        arrays.update(trained.tensors.named())
    full = dict(meta or {})
    full.update({"trn_config": cfg, "config_digest": digest(cfg), "iteration": trained.iteration})
    save(path, "checkpoint", arrays, full)


def load_trained(path):
    from .trn import TensorBatch, TrainedTrn, TrnConfig

    arrays, meta = load(path, "checkpoint")
    try:
        cfg = TrnConfig.from_dict(meta["trn_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise ArchiveError(f"checkpoint carries an invalid config: {e}") from e
    if digest(cfg.to_dict()) != meta.get("config_digest"):
        raise ArchiveError("checkpoint config digest does not match its config")
    params = {k[4:]: v for k, v in arrays.items() if k.startswith("net.")}
    tensors = None
    if cfg.uses_tensors:
        tensors = TensorBatch.from_named({k: v for k, v in arrays.items() if k.startswith("sdtn.")})
    trained = TrainedTrn(cfg, params, arrays["train.patches"], arrays["train.labels"],
                         tensors, int(meta["iteration"]))
    return trained, meta
