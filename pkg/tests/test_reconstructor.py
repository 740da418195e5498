import json

import numpy as np
import pytest
import torch

from prosody_slm.encoder import EncoderConfig
from prosody_slm.errors import ConfigError, InputError
from prosody_slm.reconstructor import (
    MelReconstructor,
    OptimConfig,
    ReconstructorConfig,
    WhisperPro,
    linear_schedule,
    load_encoder,
    mel_loss,
    save_encoder,
    total_loss,
    train_whisperpro,
)
from prosody_slm.synth_data import RenderConfig, SpecDistribution, make_dataset

FD_CFG = ReconstructorConfig(d_model=8, prosody_dim=8, vocab_size=10, n_enc_layers=1, n_dec_layers=1,
                             n_heads=2, n_frames=4, n_mels=3, dropout=0.0)


def test_mel_and_total_loss_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        want = float(np.sum((a - b) ** 2) / a.size)
        got = mel_loss(torch.tensor(a), torch.tensor(b)).item()
        assert abs(got - want) <= 1e-6 * max(1.0, want)
        l1, l2, lam = rng.normal(size=3)
        assert abs(total_loss(l1, l2, abs(lam)) - (l1 + abs(lam) * l2)) <= 1e-12


def test_mel_loss_shape_mismatch():
    with pytest.raises(InputError):
        mel_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_reconstruct_shape_and_alignment():
    torch.manual_seed(0)
    m = MelReconstructor(FD_CFG).eval()
    assert m.reconstruct([1, 2], torch.randn(2, 8)).shape == (3, 4)
    assert m.fuse([1, 2], torch.randn(2, 8)).shape == (2, 8)
    with pytest.raises(InputError):
        m.reconstruct([1, 2, 3], torch.randn(2, 8))


def test_fd_gradients_reconstructor(fd_check):
    torch.manual_seed(0)
    m = MelReconstructor(FD_CFG).double().eval()
    tokens = torch.tensor([1, 5])
    P = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(3, 4, dtype=torch.float64)
    params = [P, *m.parameters()]
    worst = fd_check(lambda: mel_loss(m.reconstruct(tokens, P), target), params, n_coords=6)
    assert worst <= 1e-4


def test_schedule():
    assert linear_schedule(0, 100, 2) == 0.5
    assert linear_schedule(1, 100, 2) == 1.0
    assert linear_schedule(2, 100, 2) == 1.0
    assert linear_schedule(100, 100, 2) == 0.0
    assert OptimConfig(steps=3000).warmup_steps == 60


def test_config_errors():
    with pytest.raises(ConfigError):
        ReconstructorConfig(lambda_mel=-1).validate()
    with pytest.raises(ConfigError):
        WhisperPro(EncoderConfig(d=32), ReconstructorConfig(prosody_dim=64))


def _tiny(lam, steps=6):
    ds = make_dataset(16, SpecDistribution(), RenderConfig(), seed=0)
    enc = EncoderConfig(d=16, n_enc_layers=1, n_dec_layers=2, n_heads=2, prosody_layer=1)
    rec = ReconstructorConfig(d_model=16, prosody_dim=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, lambda_mel=lam)
    return ds, enc, rec, OptimConfig(steps=steps, batch_size=4)


def test_training_curve_and_determinism(tmp_path):
    ds, enc, rec, opt = _tiny(1.0)
    a = train_whisperpro(ds, enc, rec, opt, curve_path=tmp_path / "c.jsonl")
    b = train_whisperpro(ds, enc, rec, opt)
    assert a.curve == b.curve
    lines = [json.loads(l) for l in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert lines == a.curve and len(lines) == 6
    for r in lines:
        assert set(r) == {"step", "L_ASR", "L_mel", "total", "lr"}
        assert r["total"] == pytest.approx(r["L_ASR"] + r["L_mel"])


def test_lambda_zero_leaves_reconstructor_out_of_the_gradient():
    ds, enc, rec, opt = _tiny(0.0, steps=3)
    res = train_whisperpro(ds, enc, rec, opt)
    assert all(r["total"] == pytest.approx(r["L_ASR"]) for r in res.curve)


def test_checkpoint_round_trip(tmp_path):
    ds, enc, rec, opt = _tiny(1.0, steps=1)
    model = train_whisperpro(ds, enc, rec, opt).model
    model.save(tmp_path / "w.ckpt")
    back = WhisperPro.load(tmp_path / "w.ckpt")
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    save_encoder(tmp_path / "e.ckpt", model.asr)
    for src in ("w.ckpt", "e.ckpt"):
        e = load_encoder(tmp_path / src)
        assert all(torch.equal(e.state_dict()[k], v) for k, v in model.asr.state_dict().items())
