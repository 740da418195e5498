import json

import pytest
import torch

from prosody_slm.backbone import (
    BackboneConfig,
    Example,
    ToyLM,
    TrainStagePlan,
    collate,
    generate,
    lm_targets,
    load_backbone,
    response_accuracy,
    response_ce,
    response_logits,
    save_backbone,
    train_stage,
    with_response,
)
from prosody_slm.distillation import KDConfig
from prosody_slm.errors import ConfigError, InputError
from prosody_slm.injection import EmbedSlot, MixedSequence, Projector, build_global_input
from prosody_slm.vocab import EOS, PAD, SEP

CFG = BackboneConfig(d_llm=16, n_layers=1, n_heads=2, vocab_size=20, max_len=16)


def model_and_projector(seed=0):
    torch.manual_seed(seed)
    return ToyLM(CFG).eval(), Projector(8, 16).eval()


def examples(n=8, prosody=True):
    g = torch.Generator().manual_seed(1)
    out = []
    for i in range(n):
        text = [4 + i % 5, 5, 6]
        out.append(Example(text, [10 + i % 3], torch.randn(3, 8, generator=g) if prosody else None))
    return out


def test_embed_slot_enters_directly():
    m, _ = model_and_projector()
    v = torch.randn(16)
    a = m(MixedSequence([EmbedSlot(v, "x")]) + MixedSequence.from_tokens([5]))
    ids = torch.tensor([[0, 5]])
    mask = torch.tensor([[True, False]])
    emb = torch.stack([v, torch.zeros(16)])[None]
    assert torch.allclose(a, m.forward_batch(ids, mask, emb)[0])
    b = m(MixedSequence([EmbedSlot(v + torch.randn(16), "x")]) + MixedSequence.from_tokens([5]))
    assert not torch.allclose(a, b)


def test_padding_does_not_leak():
    m, p = model_and_projector()
    s1 = build_global_input([4, 5], torch.randn(2, 8), p)
    s2 = MixedSequence.from_tokens([4, 5, 6, 7, 8])
    ids, mask, emb = collate([s1, s2], 16)
    out = m.forward_batch(ids, mask, emb)
    assert torch.allclose(out[0, :3], m(s1), atol=1e-5)
    assert ids[0, 3:].tolist() == [PAD, PAD]


def test_too_long_rejected():
    m, _ = model_and_projector()
    with pytest.raises(InputError):
        m(MixedSequence.from_tokens([4] * 17))


def test_response_positions_and_targets():
    seq, pos = with_response(MixedSequence([EmbedSlot(torch.zeros(16), "g")]) + MixedSequence.from_tokens([4, 5]), [9, 10])
    assert seq.layout() == "ETTTTT" and seq.token_ids == [4, 5, SEP, 9, 10]
    assert pos == [3, 4, 5]
    t, m = lm_targets(seq, pos)
    assert t.tolist() == [4, 5, SEP, 9, 10, EOS]
    assert m.tolist() == [False, False, False, True, True, True]
    with pytest.raises(InputError):
        with_response(seq, [])


def test_response_ce_oracle():
    logits = torch.randn(2, 4, 7, dtype=torch.float64)
    targets = torch.randint(0, 7, (2, 4))
    mask = torch.tensor([[0, 1, 1, 0], [1, 1, 1, 1]], dtype=torch.bool)
    lp = torch.log_softmax(logits, -1).gather(-1, targets[..., None])[..., 0]
    want = 0.5 * (-lp[0, 1:3].mean() - lp[1].mean())
    assert torch.allclose(response_ce(logits, targets, mask), want)


def test_stage1_freezes_backbone_stage2_moves_it(tmp_path):
    m, p = model_and_projector()
    exs = examples()
    proj_before = [q.clone() for q in p.parameters()]
    r1 = train_stage(m, p, exs, TrainStagePlan(1, lr=1e-2, epochs=2, batch_size=4),
                     metrics_path=tmp_path / "s1.jsonl")
    assert r1.digest_before == r1.digest_after == m.backbone_digest()
    assert any(not torch.equal(a, b) for a, b in zip(proj_before, p.parameters()))
    recs = [json.loads(l) for l in (tmp_path / "s1.jsonl").read_text().splitlines()]
    assert recs == r1.metrics and len(recs) == 4
    assert recs[0]["trainable_param_count"] == sum(q.numel() for q in p.parameters())
    assert all(q.requires_grad for q in m.parameters())
    r2 = train_stage(m, p, exs, TrainStagePlan(2, lr=1e-2, epochs=1, batch_size=4))
    assert r2.digest_after != r2.digest_before
    assert r2.metrics[0]["trainable_param_count"] > recs[0]["trainable_param_count"]


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m, p = model_and_projector()
        runs.append(train_stage(m, p, examples(), TrainStagePlan(2, lr=1e-2, epochs=2, batch_size=3)).metrics)
    assert runs[0] == runs[1]


def test_training_learns_text_task():
    torch.manual_seed(0)
    m = ToyLM(CFG)
    exs = [Example([4 + k, 5], [10 + k]) for k in range(4)]
    train_stage(m, None, exs, TrainStagePlan(2, lr=1e-2, epochs=60, batch_size=4))
    assert response_accuracy(m, None, exs) == 1.0
    assert generate(m, MixedSequence.from_tokens([6, 5])) == [12]


def test_stage_errors():
    m, p = model_and_projector()
    with pytest.raises(ConfigError):
        TrainStagePlan(3, 1e-3, 1).validate()
    with pytest.raises(InputError):
        train_stage(m, p, [], TrainStagePlan(2, 1e-3, 1))
    with pytest.raises(InputError):
        train_stage(m, p, examples(), TrainStagePlan(2, 1e-3, 1), kd=KDConfig(alpha=0.5))
    with pytest.raises(ConfigError):
        Example([4], [5], torch.randn(1, 8)).prompt(None)


def test_response_logits_shape():
    m, p = model_and_projector()
    assert response_logits(m, MixedSequence.from_tokens([4, 5]), [6, 7]).shape == (3, 20)


def test_checkpoint_round_trip(tmp_path):
    m, p = model_and_projector()
    save_backbone(tmp_path / "b.ckpt", m, p)
    m2, p2 = load_backbone(tmp_path / "b.ckpt")
    assert m2.backbone_digest() == m.backbone_digest()
    x = torch.randn(8)
    assert torch.equal(p(x), p2(x))
    save_backbone(tmp_path / "t.ckpt", m)
    assert load_backbone(tmp_path / "t.ckpt")[1] is None
