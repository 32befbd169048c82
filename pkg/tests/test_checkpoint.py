"""Checkpoint file format: manifest + raw little-endian float32 blob."""

import numpy as np
import pytest

from boneage.checkpoint import FORMAT_LINE, load_checkpoint, restore_params, save_checkpoint
from boneage.errors import CheckpointError
from boneage.tensor import Tensor


def _params(rng):
    return {
        "enc.w": Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True),
        "enc.b": Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True),
        "fc.w": Tensor(rng.standard_normal((10, 4)).astype(np.float32), requires_grad=True),
    }


def test_roundtrip_is_exact(tmp_path):
    params = _params(np.random.default_rng(0))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(params)
    for name, p in params.items():
        np.testing.assert_array_equal(loaded[name], p.data)


def test_file_layout(tmp_path):
    params = _params(np.random.default_rng(1))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    header, blob = raw.split(b"\n\n", 1)
    lines = header.decode("ascii").splitlines()
    assert lines[0] == FORMAT_LINE
    assert lines[1].split() == ["enc.w", "3x2x3x3", "float32", "0"]
    # offsets advance by the byte size of each parameter
    assert lines[2].split() == ["enc.b", "3", "float32", str(3 * 2 * 3 * 3 * 4)]
    total = sum(int(np.prod(p.data.shape)) for p in params.values())
    assert len(blob) == 4 * total
    # blob is little-endian float32 in manifest order
    first = np.frombuffer(blob, dtype="<f4", count=3 * 2 * 3 * 3)
    np.testing.assert_array_equal(first.reshape(3, 2, 3, 3), params["enc.w"].data)


def test_missing_format_line_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"fmt=2\nx 1 float32 0\n\n" + b"\x00" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "trunc.ckpt"
    path.write_bytes(f"{FORMAT_LINE}\nx 4 float32 0\n\n".encode() + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_nonexistent_file_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_restore_params_shape_and_name_checks(tmp_path):
    params = _params(np.random.default_rng(2))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)

    target = _params(np.random.default_rng(3))
    restore_params(target, loaded)
    np.testing.assert_array_equal(target["fc.w"].data, params["fc.w"].data)

    del loaded["fc.w"]
    with pytest.raises(CheckpointError, match="fc.w"):
        restore_params(_params(np.random.default_rng(4)), loaded)

    loaded2 = load_checkpoint(path)
    loaded2["fc.w"] = loaded2["fc.w"].reshape(4, 10)
    with pytest.raises(CheckpointError, match="shape"):
        restore_params(_params(np.random.default_rng(5)), loaded2)


def test_spaces_in_parameter_names_rejected(tmp_path):
    bad = {"a b": Tensor(np.zeros(1), requires_grad=True)}
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", bad)
