import numpy as np
import pytest
import torch
from torch.nn import functional as F

from prosody_slm.encoder import EncoderConfig, SpeechEncoder, asr_loss, pad_batch, token_accuracy
from prosody_slm.errors import ConfigError, InputError

SMALL = EncoderConfig(d=16, n_enc_layers=1, n_dec_layers=2, n_heads=2, prosody_layer=1)


def test_asr_loss_matches_log_softmax_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, v = rng.integers(1, 10), rng.integers(2, 20)
        logits = rng.normal(size=(n, v)) * 3
        y = rng.integers(0, v, size=n)
        # numpy oracle: logsumexp by hand
        m = logits.max(1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(1, keepdims=True)))[:, 0]
        want = float(np.mean(lse - logits[np.arange(n), y]))
        got = asr_loss(torch.tensor(logits), torch.tensor(y)).item()
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_asr_loss_batched_ignores_pad():
    logits = torch.randn(2, 3, 5, dtype=torch.float64)
    targets = torch.tensor([[1, 2, 0], [3, 0, 0]])
    want = 0.5 * (F.cross_entropy(logits[0, :2], targets[0, :2]) + F.cross_entropy(logits[1, :1], targets[1, :1]))
    assert torch.allclose(asr_loss(logits, targets, ignore_index=0), want)


def test_asr_loss_errors():
    with pytest.raises(InputError):
        asr_loss(torch.zeros(3, 4), torch.zeros(2, dtype=torch.long))
    with pytest.raises(InputError):
        asr_loss(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))


def test_shapes_and_prosody_extraction():
    torch.manual_seed(0)
    enc = SpeechEncoder(SMALL).eval()
    mel = np.random.default_rng(0).normal(size=(24, 40)).astype(np.float32)
    assert enc.encode(mel).shape == (20, 16)
    P = enc.extract_prosody(mel, [5, 6, 7])
    assert P.shape == (3, 16)
    P2 = enc.extract_prosody(mel, [5, 6, 7], layer=2)
    assert not torch.allclose(P, P2)
    # causal: prefix states do not depend on later tokens
    assert torch.allclose(enc.extract_prosody(mel, [5, 6, 9])[:2], P[:2], atol=1e-6)


def test_batched_extraction_matches_single():
    torch.manual_seed(1)
    enc = SpeechEncoder(SMALL).eval()
    mels = np.random.default_rng(1).normal(size=(2, 24, 40)).astype(np.float32)
    toks = [[4, 5, 6, 7], [8, 9]]
    batch = enc.extract_prosody_batch(mels, toks)
    for b in range(2):
        assert torch.allclose(batch[b], enc.extract_prosody(mels[b], toks[b]), atol=1e-5)


def test_extraction_errors():
    enc = SpeechEncoder(SMALL)
    mel = np.zeros((24, 40), np.float32)
    with pytest.raises(InputError):
        enc.extract_prosody(mel, [])
    with pytest.raises(ConfigError):
        enc.extract_prosody(mel, [4], layer=3)
    with pytest.raises(InputError):
        enc.encode(np.zeros((24, 39), np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        SpeechEncoder(EncoderConfig(prosody_layer=0))
    with pytest.raises(ConfigError):
        SpeechEncoder(EncoderConfig(d=30, n_heads=4))


def test_transcribe_stops_and_is_bounded():
    enc = SpeechEncoder(SMALL).eval()
    out = enc.transcribe(np.zeros((24, 40), np.float32))
    assert len(out) <= SMALL.max_text_len and 2 not in out


def test_pad_batch_and_token_accuracy():
    assert pad_batch([[1, 2], [3]], 0).tolist() == [[1, 2], [3, 0]]
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 2, 3]], [[1, 9]]) == pytest.approx(1 / 3)
    assert token_accuracy([[1]], [[1, 5]]) == 0.5
