import hashlib
import json
import struct

import pytest

from akd_lab.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from akd_lab.errors import ArtifactError, ShapeError
from akd_lab.models import ModelSpec, init_params


@pytest.fixture
def saved(tmp_path, mlp_spec):
    params = init_params(mlp_spec, 5)
    path = save_checkpoint(
        params, tmp_path / "ckpts" / "teacher_ep3.ckpt", spec=mlp_spec, epoch=3, metadata={"config_hash": "abc"}
    )
    return path, params


def test_roundtrip(saved, mlp_spec):
    path, params = saved
    ckpt = load_checkpoint(path)
    assert ckpt.params == params
    assert ckpt.params.seed == 5
    assert ckpt.spec == mlp_spec
    assert ckpt.epoch == 3
    assert ckpt.metadata == {"config_hash": "abc"}
    assert ckpt.model.params is ckpt.params


def test_no_temporary_file_left(saved):
    path, _ = saved
    assert sorted(p.name for p in path.parent.iterdir()) == ["teacher_ep3.ckpt"]


def test_save_rejects_mismatched_spec(tmp_path, mlp_spec):
    other = ModelSpec("mlp", (2,), (4, 2), 2)
    with pytest.raises(ShapeError):
        save_checkpoint(init_params(mlp_spec, 0), tmp_path / "x.ckpt", spec=other, epoch=1)


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_file(saved):
    path, _ = saved
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(ArtifactError):
        load_checkpoint(path)


def test_corrupted_payload(saved):
    path, _ = saved
    raw = bytearray(path.read_bytes())
    raw[-50] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactError, match="checksum"):
        load_checkpoint(path)


def test_bad_magic(saved):
    path, _ = saved
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[len(MAGIC):])
    with pytest.raises(ArtifactError, match="not an akd-lab checkpoint"):
        load_checkpoint(path)


def test_artifact_error_exit_code(tmp_path):
    with pytest.raises(ArtifactError) as excinfo:
        load_checkpoint(tmp_path / "nope.ckpt")
    assert excinfo.value.exit_code == 3


def _rewrite_header(path, edit):
    body = path.read_bytes()[:-32]
    start = len(MAGIC) + 5
    (header_len,) = struct.unpack_from("<I", body, len(MAGIC) + 1)
    header = json.loads(body[start : start + header_len])
    edit(header)
    header_bytes = json.dumps(header).encode("utf-8")
    body = body[: len(MAGIC) + 1] + struct.pack("<I", len(header_bytes)) + header_bytes + body[start + header_len :]
    path.write_bytes(body + hashlib.sha256(body).digest())


@pytest.mark.parametrize("key", ["tensors", "seed", "epoch"])
def test_header_missing_field_is_artifact_error(saved, key):
    path, _ = saved
    _rewrite_header(path, lambda header: header.pop(key))
    with pytest.raises(ArtifactError, match="malformed header") as excinfo:
        load_checkpoint(path)
    assert excinfo.value.exit_code == 3


def test_header_with_bad_tensor_layout(saved):
    path, _ = saved
    _rewrite_header(path, lambda header: header.update(tensors=[["w0", None]]))
    with pytest.raises(ArtifactError, match="malformed header"):
        load_checkpoint(path)
