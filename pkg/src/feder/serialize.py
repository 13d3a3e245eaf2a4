"""Flat binary container for named tensors; round-trips bit-exactly.

Layout: magic line, one JSON header line listing (name, shape, dtype) per
tensor, then the raw little-endian row-major values concatenated in header
order. The same container carries model parameters and datasets.
"""
from __future__ import annotations

import json

import numpy as np

from .data import Dataset
from .nn import ModelParams

MAGIC = b"FEDTENSOR1\n"
_DTYPES = {"float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


def save_tensors(path, named) -> None:
    entries = []
    blobs = []
    for name, arr in named:
        a = np.ascontiguousarray(arr)
        if a.dtype == np.float64:
            tag = "float64"
        elif a.dtype == np.int64:
            tag = "int64"
        else:
            raise ValueError(f"unsupported dtype {a.dtype} for {name}")
        if tag == "float64" and not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite values in {name}")
        entries.append({"name": str(name), "shape": list(a.shape), "dtype": tag})
        blobs.append(a.astype(_DTYPES[tag], copy=False).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(entries).encode())
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a tensor container")
        header = json.loads(fh.readline().decode())
        named = []
        for entry in header:
            dt = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            arr = np.frombuffer(buf, dtype=dt)
            if arr.size != count:
                raise ValueError(f"truncated data for {entry['name']}")
            named.append((entry["name"], arr.reshape(entry["shape"]).copy()))
    return named


def save_params(path, params: ModelParams) -> None:
    save_tensors(path, params.layers)


def load_params(path) -> ModelParams:
    return ModelParams(load_tensors(path))


def save_dataset(path, d: Dataset) -> None:
    save_tensors(path, [
        ("inputs", d.inputs),
        ("labels", d.labels),
        ("class_count", np.array([d.class_count], dtype=np.int64)),
    ])


def load_dataset(path) -> Dataset:
    named = dict(load_tensors(path))
    return Dataset(named["inputs"], named["labels"], int(named["class_count"][0]))
