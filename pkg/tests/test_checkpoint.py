"""Parameter checkpoints and attention trace files."""

import numpy as np
import pytest

from app.core.error_handling import CheckpointFormatError, DatasetFormatError, ShapeError
from app.engine.checkpoint import load_checkpoint, load_trace, save_checkpoint, save_trace
from app.engine.module import ForwardContext
from app.models.mdt import MDT

pytestmark = pytest.mark.unit


def test_model_round_trip_restores_identical_outputs(tmp_path, tiny_mdt_config, tiny_batch):
    model = MDT(tiny_mdt_config)
    path = save_checkpoint(tmp_path / "best.mdtc", model.state_dict())

    restored = MDT(tiny_mdt_config.model_copy(update={"init_seed": 99}))
    restored.load_state_dict(load_checkpoint(path))

    ctx = ForwardContext(training=False)
    np.testing.assert_array_equal(model(tiny_batch, ctx).data, restored(tiny_batch, ctx).data)


def test_saving_twice_is_byte_identical(tmp_path, tiny_mdt_config):
    state = MDT(tiny_mdt_config).state_dict()
    first = save_checkpoint(tmp_path / "a.mdtc", state).read_bytes()
    second = save_checkpoint(tmp_path / "b.mdtc", state).read_bytes()
    assert first == second
    assert first[:4] == b"MDTC"


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.mdtc"
    path.write_bytes(b"NOPE\x01\x00")
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_file_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "w.mdtc", {"w": np.ones((3, 4), dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)


def test_missing_file_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_checkpoint(tmp_path / "absent.mdtc")


def test_state_dict_mismatch_is_rejected(tiny_mdt_config):
    model = MDT(tiny_mdt_config)
    state = model.state_dict()
    name = next(iter(state))

    with pytest.raises(CheckpointFormatError, match="missing"):
        model.load_state_dict({k: v for k, v in state.items() if k != name})

    bad_shape = dict(state)
    bad_shape[name] = np.zeros(state[name].shape + (2,), dtype=np.float32)
    with pytest.raises(ShapeError):
        model.load_state_dict(bad_shape)


def test_trace_file_keeps_tags_and_cls_index(tmp_path):
    matrices = [("0:self", np.eye(3, dtype=np.float32)), ("1:self", np.full((3, 3), 1 / 3, dtype=np.float32))]
    path = save_trace(tmp_path / "attention.attn", matrices, ["CLS", "cc_0", "img_0"], cls_index=0)

    loaded, tags, cls_index = load_trace(path)
    assert tags == ["CLS", "cc_0", "img_0"]
    assert cls_index == 0
    assert [name for name, _ in loaded] == ["0:self", "1:self"]
    np.testing.assert_allclose(loaded[1][1], matrices[1][1])


def test_trace_without_cls_token(tmp_path):
    path = save_trace(tmp_path / "t.attn", [("0:self", np.eye(2, dtype=np.float32))], ["a", "b"], cls_index=None)
    _, _, cls_index = load_trace(path)
    assert cls_index is None
