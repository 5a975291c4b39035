import json

import numpy as np
import pytest

from gconv_lab.checkpoint import load_checkpoint, save_checkpoint
from gconv_lab.errors import ContractError
from gconv_lab.zoo import ArchSpec, build_model


def test_round_trip_model(tmp_path):
    state = build_model(ArchSpec("toy", "generator", "gconv"), 4).state_dict()
    save_checkpoint(tmp_path / "g", state, {"seed": 4})
    back = load_checkpoint(tmp_path / "g.json")
    assert list(back) == list(state)
    assert all(np.array_equal(back[k], state[k]) for k in state)


def test_manifest_layout(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([-1.5])}
    save_checkpoint(tmp_path / "c", tensors)
    m = json.loads((tmp_path / "c.json").read_text())
    assert m["format"] == "gconv-lab-checkpoint" and m["blob"] == "c.bin"
    assert m["tensors"] == [{"name": "a", "shape": [2, 3], "dtype": "f64", "offset": 0},
                            {"name": "b", "shape": [1], "dtype": "f64", "offset": 48}]
    raw = (tmp_path / "c.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f8"), [0, 1, 2, 3, 4, 5, -1.5])


def test_loaded_state_restores_outputs(tmp_path, rng):
    spec = ArchSpec("toy", "generator", "gconv")
    a, b = build_model(spec, 1), build_model(spec, 2)
    save_checkpoint(tmp_path / "a", a.state_dict())
    b.load_state_dict(load_checkpoint(tmp_path / "a"))
    z = rng.standard_normal((3, 32))
    assert np.array_equal(a(z, train=False).data, b(z, train=False).data)


def test_truncated_blob(tmp_path):
    save_checkpoint(tmp_path / "t", {"w": np.ones(4)})
    (tmp_path / "t.bin").write_bytes(b"\0" * 16)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "t")


def test_wrong_format(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.json")
