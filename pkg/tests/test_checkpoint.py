import json
import os

import pytest
import torch

from ssmvla.checkpoint import load_checkpoint, save_checkpoint
from ssmvla.errors import MalformedContainerError, SchemaVersionError


def _state():
    m = torch.nn.Linear(3, 2)
    opt = torch.optim.AdamW(m.parameters())
    m(torch.randn(4, 3)).sum().backward()
    opt.step()
    return {"model": m.state_dict(), "opt": opt.state_dict(), "rng": torch.Generator().manual_seed(1).get_state(), "pair": (1, "a")}


def test_round_trip(tmp_path):
    state = _state()
    save_checkpoint(tmp_path / "ck", state, {"step": 3})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 3}
    for k, v in state["model"].items():
        assert torch.equal(back["model"][k], v)
    assert torch.equal(back["opt"]["state"][0]["exp_avg"], state["opt"]["state"][0]["exp_avg"])
    assert back["pair"] == (1, "a")
    assert torch.equal(back["rng"], state["rng"])


def test_corrupted_tensor_detected(tmp_path):
    save_checkpoint(tmp_path / "ck", _state())
    f = tmp_path / "ck" / "tensors" / "0.bin"
    data = bytearray(f.read_bytes())
    data[-1] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(MalformedContainerError):
        load_checkpoint(tmp_path / "ck")


def test_schema_version_checked(tmp_path):
    save_checkpoint(tmp_path / "ck", _state())
    p = tmp_path / "ck" / "manifest.json"
    m = json.loads(p.read_text())
    m["schema_version"] = 7
    p.write_text(json.dumps(m))
    with pytest.raises(SchemaVersionError):
        load_checkpoint(tmp_path / "ck")


def test_unsupported_object(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "ck", {"x": object()})
    assert not os.path.exists(tmp_path / "ck")
