import pytest
import torch

from longidiff.encoder import (EncoderConfig, OutcomeHead, OutcomeTask, SemanticEncoder, build_encoder, build_head,
                               encode, predict_outcome)
from longidiff.unet import parameter_count
from helpers import fd_check_module, fd_check_tensors


def test_encode_shape_and_dtype():
    enc = build_encoder(EncoderConfig())
    z = encode(enc, torch.randn(3, 1, 32, 32))
    assert z.shape == (3, 64) and torch.isfinite(z).all()
    assert parameter_count(enc) == 315776


def test_encode_rejects_bad_shapes():
    enc = build_encoder(EncoderConfig())
    for bad in (torch.randn(1, 32, 32), torch.randn(1, 2, 32, 32), torch.randn(1, 1, 16, 16)):
        with pytest.raises(ValueError):
            encode(enc, bad)


def test_seeded_build():
    a = build_encoder(EncoderConfig(), seed=3)
    b = build_encoder(EncoderConfig(), seed=3)
    x = torch.randn(2, 1, 32, 32)
    assert torch.equal(encode(a, x), encode(b, x))


def test_batch_independence():
    enc = build_encoder(EncoderConfig(), dtype=torch.float64)
    x = torch.randn(4, 1, 32, 32, dtype=torch.float64)
    full = encode(enc, x)
    assert torch.allclose(full[1:2], encode(enc, x[1:2]), atol=1e-12)


def test_final_layer_is_projection():
    enc = SemanticEncoder(EncoderConfig())
    final = list(enc.final_layer_parameters())
    assert {id(p) for p in final} == {id(p) for p in enc.proj.parameters()}


def test_config_roundtrip():
    cfg = EncoderConfig(z_dim=32)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_head_and_prediction_range():
    enc = build_encoder(EncoderConfig())
    head = build_head(64, OutcomeTask.MRS_DISCHARGE)
    p = predict_outcome(enc, head, torch.randn(5, 1, 32, 32))
    assert p.shape == (5,) and ((p > 0) & (p < 1)).all()
    assert isinstance(OutcomeHead(64), OutcomeHead)
    assert {t.value for t in OutcomeTask} == {"nihss24", "mrs_discharge", "synthetic"}


def test_multi_slice_mean_pooling():
    enc = build_encoder(EncoderConfig(), dtype=torch.float64)
    head = build_head(64, dtype=torch.float64)
    x = torch.randn(3, 4, 1, 32, 32, dtype=torch.float64)
    z = encode(enc, x.reshape(12, 1, 32, 32)).reshape(3, 4, -1).mean(1)
    assert torch.allclose(predict_outcome(enc, head, x), torch.sigmoid(head(z)), atol=1e-12)
    # one slice per patient is the plain path
    assert torch.allclose(predict_outcome(enc, head, x[:, :1]), predict_outcome(enc, head, x[:, 0]), atol=1e-12)


def gradcheck_encode(fraction=0.01, seed=0):
    enc = build_encoder(EncoderConfig(), seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 1, 32, 32, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(2, 64, dtype=torch.float64, generator=g)
    loss = lambda: (encode(enc, x) * w).sum()
    e_params, k = fd_check_module(enc, loss, fraction, seed=seed)
    e_inputs, _ = fd_check_tensors(loss, [x], fraction=0.05, seed=seed)
    return max(e_params, e_inputs), k, parameter_count(enc)


def test_encode_gradients():
    err, k, total = gradcheck_encode(fraction=0.002)
    assert err < 1e-3
