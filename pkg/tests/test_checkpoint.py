import json

import numpy as np
import pytest
import torch

from longidiff.checkpoint import (MAGIC, Checkpoint, CheckpointError, load_checkpoint, parameter_digest,
                                  save_checkpoint)
from longidiff.encoder import EncoderConfig, build_encoder
from longidiff.unet import UNetConfig, build_unet


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_roundtrip_bit_exact(tmp_path, dtype):
    net = build_unet(UNetConfig(), seed=4, zero_init=False, dtype=dtype)
    enc = build_encoder(EncoderConfig(), seed=2, dtype=dtype)
    ck = Checkpoint(meta={"kind": "test", "step": 7})
    ck.add_module("denoiser", net, net.config.to_dict())
    ck.add_module("encoder", enc, enc.config.to_dict())
    path = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(path)
    assert back.meta == ck.meta
    net2 = back.load_into("denoiser", build_unet(UNetConfig.from_dict(back.sections["denoiser"]["config"]), seed=99))
    enc2 = back.load_into("encoder", build_encoder(EncoderConfig(), seed=99))
    assert parameter_digest(net2) == parameter_digest(net)
    assert parameter_digest(enc2) == parameter_digest(enc)
    assert next(net2.parameters()).dtype == dtype
    # saving again yields the same bytes
    assert save_checkpoint(tmp_path / "b.ckpt", back).read_bytes() == path.read_bytes()


def test_layout(tmp_path):
    ck = Checkpoint(meta={"b": 1, "a": 2})
    ck.tensors["s/w"] = np.array([[1.0, 2.0], [3.0, 4.0]])
    ck.tensors["s/v"] = np.array([5.0])
    ck.sections["s"] = {"config": {}, "dtype": "float64"}
    data = save_checkpoint(tmp_path / "x.ckpt", ck).read_bytes()
    first, second, rest = data.split(b"\n", 2)
    assert first == MAGIC + b" 1"
    n = int(second)
    header = json.loads(rest[:n])
    assert rest[:n].decode() == json.dumps(header, sort_keys=True, separators=(",", ":"))
    payload = rest[n:]
    assert np.frombuffer(payload, "<f8").tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert [e["offset"] for e in header["tensors"]] == [0, 32]


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOT-A-CKPT 1\n2\n{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(MAGIC + b" 9\n2\n{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        Checkpoint().state_dict("missing")
    with pytest.raises(CheckpointError):
        Checkpoint().add_module("a/b", torch.nn.Linear(1, 1))


def test_digest_sensitivity():
    a = build_encoder(EncoderConfig(), seed=0)
    b = build_encoder(EncoderConfig(), seed=0)
    assert parameter_digest(a) == parameter_digest(b)
    with torch.no_grad():
        b.proj.weight[0, 0] += 1e-6
    assert parameter_digest(a) != parameter_digest(b)
    assert parameter_digest(a, ("proj.",)) == parameter_digest(b, ("proj.",))
