import numpy as np
import pytest

from feder.data import generate_blobs
from feder.serialize import (load_dataset, load_params, load_tensors, save_dataset,
                             save_params, save_tensors)
from helpers import tiny_model


def test_params_roundtrip_bit_exact(tmp_path):
    params = tiny_model().init_params(3)
    path = tmp_path / "params.bin"
    save_params(path, params)
    loaded = load_params(path)
    assert loaded.shapes() == params.shapes()
    for (name, a), (_, b) in zip(params, loaded):
        assert a.tobytes() == b.tobytes(), name


def test_dataset_roundtrip(tmp_path):
    d = generate_blobs(5, 3, 2, 4, 4, 7)
    path = tmp_path / "data.bin"
    save_dataset(path, d)
    loaded = load_dataset(path)
    assert loaded.class_count == 3
    assert loaded.inputs.tobytes() == d.inputs.tobytes()
    assert np.array_equal(loaded.labels, d.labels)


def test_header_preserves_names_shapes_dtypes(tmp_path):
    path = tmp_path / "mixed.bin"
    named = [("a", np.arange(6, dtype=np.float64).reshape(2, 3)),
             ("b", np.array([1, 2, 3], dtype=np.int64))]
    save_tensors(path, named)
    loaded = load_tensors(path)
    assert [(n, t.shape, t.dtype.kind) for n, t in loaded] == \
        [("a", (2, 3), "f"), ("b", (3,), "i")]


def test_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError, match="non-finite"):
        save_tensors(tmp_path / "bad.bin", [("w", np.array([np.nan]))])


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        save_tensors(tmp_path / "bad.bin", [("w", np.array([1.0], dtype=np.float32))])


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "not_tensors.bin"
    path.write_bytes(b"something else entirely")
    with pytest.raises(ValueError, match="container"):
        load_tensors(path)
