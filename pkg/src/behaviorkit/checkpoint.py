"""Directory checkpoints: ``metadata.json`` plus one little-endian blob per tensor.

The same layout stores model/optimizer state and the probe's embedding cache.
Writes go to a temporary sibling directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

FORMAT = "behaviorkit-tensors"
VERSION = 1


def _blob_name(i: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)[:80]
    return f"{i:05d}_{safe}.bin"


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def save_tensors(path, tensors: Mapping[str, object], metadata: dict | None = None) -> Path:
    """Atomically write ``tensors`` (name -> array) and JSON ``metadata`` to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        index = {}
        for i, (name, value) in enumerate(tensors.items()):
            arr = _to_numpy(value)
            dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|<" else arr.dtype
            fname = _blob_name(i, name)
            (tmp / fname).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
            index[name] = {"file": fname, "dtype": dtype.str, "shape": list(arr.shape)}
        meta = {"format": FORMAT, "version": VERSION, "tensors": index,
                "metadata": metadata or {}}
        with open(tmp / "metadata.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_metadata(path) -> dict:
    meta_file = Path(path) / "metadata.json"
    if not meta_file.is_file():
        raise CheckpointError(f"checkpoint metadata missing: {meta_file}")
    try:
        meta = json.loads(meta_file.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata {meta_file}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{meta_file} is not a {FORMAT} file")
    return meta


def load_tensors(path, names=None) -> tuple:
    """Return ``(tensors, metadata)``; ``names`` restricts which blobs are read."""
    path = Path(path)
    meta = read_metadata(path)
    out = {}
    for name, info in meta["tensors"].items():
        if names is not None and name not in names:
            continue
        blob = path / info["file"]
        dtype = np.dtype(info["dtype"])
        expected = int(np.prod(info["shape"], dtype=np.int64)) * dtype.itemsize
        if not blob.is_file():
            raise CheckpointError(f"checkpoint blob missing: {blob}")
        if blob.stat().st_size != expected:
            raise CheckpointError(
                f"checkpoint blob {blob} has {blob.stat().st_size} bytes, expected {expected}")
        out[name] = np.fromfile(blob, dtype=dtype).reshape(info["shape"])
    return out, meta["metadata"]


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> tuple:
    sd = optimizer.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            tensors[f"optim.{idx}.{key}"] = val
    return tensors, {"param_groups": sd["param_groups"]}


def save_training_checkpoint(path, model: torch.nn.Module, optimizer=None, *,
                             metadata: dict | None = None) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(metadata or {})
    if optimizer is not None:
        opt_tensors, opt_meta = _optimizer_tensors(optimizer)
        tensors.update(opt_tensors)
        meta["optimizer"] = opt_meta
    return save_tensors(path, tensors, meta)


def load_training_checkpoint(path, model: torch.nn.Module, optimizer=None) -> dict:
    """Restore ``model`` (and ``optimizer``) in place; return the metadata dict."""
    tensors, meta = load_tensors(path)
    model_sd = {k[len("model."):]: torch.from_numpy(v.copy())
                for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(model_sd, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match the model: {exc}") from exc
    if optimizer is not None:
        if "optimizer" not in meta:
            raise CheckpointError(f"checkpoint {path} holds no optimizer state")
        state = {}
        for k, v in tensors.items():
            if k.startswith("optim."):
                _, idx, key = k.split(".", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
        optimizer.load_state_dict({"state": state,
                                   "param_groups": meta["optimizer"]["param_groups"]})
    return meta
