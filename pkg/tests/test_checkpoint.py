import json
import struct

import numpy as np
import pytest
import torch

from vibertgrid.checkpoint import MAGIC, load_tensors, read_header, save_tensors


def test_round_trip_preserves_values_and_dtypes(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b": torch.arange(5, dtype=torch.int64),
               "c": torch.tensor(2.5, dtype=torch.float64), "empty": torch.zeros(0, 3)}
    save_tensors(tmp_path / "x.ckpt", tensors, {"note": "hi"})
    back, meta = load_tensors(tmp_path / "x.ckpt")
    assert meta == {"note": "hi"}
    for k, t in tensors.items():
        assert back[k].dtype == t.dtype and torch.equal(back[k], t)


def test_layout_is_self_describing(tmp_path):
    t = torch.tensor([1.0, 2.0], dtype=torch.float32)
    save_tensors(tmp_path / "x.ckpt", {"w": t, "v": torch.tensor([7], dtype=torch.int32)}, {})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert header == read_header(tmp_path / "x.ckpt")
    w, v = header["tensors"]
    assert (w["name"], w["shape"], w["dtype"], w["offset"], w["nbytes"]) == ("w", [2], "<f4", 0, 8)
    assert v["offset"] == 8 and v["dtype"] == "<i4"
    data = raw[16 + n:]
    assert np.frombuffer(data[:8], "<f4").tolist() == [1.0, 2.0]
    assert np.frombuffer(data[8:12], "<i4").tolist() == [7]


def test_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError):
        load_tensors(p)
    with pytest.raises(ValueError):
        read_header(p)


def test_write_is_atomic(tmp_path):
    save_tensors(tmp_path / "x.ckpt", {"a": torch.ones(2)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
