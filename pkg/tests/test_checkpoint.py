import io

import pytest
import torch

from refaudio.checkpoint import CHECKPOINT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from refaudio.errors import RefAudioOSError, RefAudioValueError


def test_round_trip(tmp_path, codec_model, text_encoder, codec):
    path = tmp_path / "mrc.ckpt"
    save_checkpoint(path, Checkpoint(codec_model, text_encoder, codec, config_echo="[run]\nseed = 0\n"))
    loaded = load_checkpoint(path)
    assert loaded.model.config == codec_model.config
    for (name, a), (_, b) in zip(codec_model.state_dict().items(), loaded.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert torch.equal(loaded.text_encoder.table.weight, text_encoder.table.weight)
    assert loaded.codec.mode == "deterministic"
    assert loaded.config_echo.startswith("[run]")
    assert loaded.state is None
    assert sorted(p.name for p in tmp_path.iterdir()) == ["mrc.ckpt"]


def test_missing_checkpoint(tmp_path):
    with pytest.raises(RefAudioOSError) as info:
        load_checkpoint(tmp_path / "absent.ckpt")
    assert info.value.exit_code == 3


def _write_payload(path, payload):
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path.write_bytes(buffer.getvalue())


def test_rejects_foreign_and_future_files(tmp_path):
    _write_payload(tmp_path / "foreign.ckpt", {"weights": {}})
    with pytest.raises(RefAudioValueError, match="not a refaudio checkpoint"):
        load_checkpoint(tmp_path / "foreign.ckpt")

    _write_payload(tmp_path / "future.ckpt",
                   {"format": "refaudio-checkpoint", "version": CHECKPOINT_VERSION + 1})
    with pytest.raises(RefAudioValueError, match="unsupported"):
        load_checkpoint(tmp_path / "future.ckpt")


def test_corrupt_file_is_an_io_error(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip archive")
    with pytest.raises(RefAudioOSError):
        load_checkpoint(tmp_path / "junk.ckpt")
