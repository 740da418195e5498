import numpy as np
import pytest
import torch

from prosody_slm.backbone import BackboneConfig, Example, ToyLM, TrainStagePlan, batch_loss, train_stage
from prosody_slm.distillation import (
    KDConfig,
    KDSource,
    build_kd_pair,
    kd_example,
    kd_kl_loss,
    kd_record,
    mixed_loss,
    read_kd_records,
    student_text,
    teacher_text,
    write_kd_records,
)
from prosody_slm.errors import ConfigError, InputError
from prosody_slm.injection import Projector
from prosody_slm.vocab import SEP


def np_kl_oracle(t, s, pos, T):
    def softmax(x):
        e = np.exp(x - x.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    pt, ps = softmax(t[pos] / T), softmax(s[pos] / T)
    return T * T * float(np.sum(pt * (np.log(pt) - np.log(ps))))


def test_kd_kl_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        S, V = rng.integers(2, 10), rng.integers(2, 15)
        t, s = rng.normal(size=(S, V)) * 2, rng.normal(size=(S, V)) * 2
        pos = sorted(rng.choice(S, rng.integers(1, S + 1), replace=False).tolist())
        T = float(rng.uniform(0.5, 4))
        want = np_kl_oracle(t, s, pos, T)
        got = kd_kl_loss(torch.tensor(t), torch.tensor(s), pos, T).item()
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_mixed_loss_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        kl, ce, a = rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 1)
        assert abs(mixed_loss(kl, ce, a) - (a * kl + (1 - a) * ce)) <= 1e-12
    with pytest.raises(ConfigError):
        mixed_loss(1.0, 1.0, 1.5)


def test_identical_logits_give_zero():
    x = torch.randn(4, 6)
    assert kd_kl_loss(x, x.clone(), [1, 2], 2.0).item() == pytest.approx(0.0, abs=1e-6)


def test_teacher_side_detached_and_fd_gradient(fd_check):
    t = torch.randn(5, 7, dtype=torch.float64, requires_grad=True)
    s = torch.randn(5, 7, dtype=torch.float64, requires_grad=True)
    kd_kl_loss(t, s, [1, 3, 4], 2.0).backward()
    assert t.grad is None and s.grad is not None
    worst = fd_check(lambda: kd_kl_loss(t, s, [1, 3, 4], 2.0), [s])
    assert worst <= 1e-4


def test_kd_errors():
    x = torch.randn(3, 5)
    with pytest.raises(InputError):
        kd_kl_loss(x, x, [], 2.0)
    with pytest.raises(InputError):
        kd_kl_loss(torch.randn(3, 4), x, [0], 2.0)
    with pytest.raises(InputError):
        kd_kl_loss(x, x, [0, 1], 2.0, teacher_positions=[0])
    with pytest.raises(ConfigError):
        KDConfig(setting="nope").validate()
    with pytest.raises(ConfigError):
        KDConfig(alpha=-0.1).validate()


def source():
    return KDSource(gt_text=[4, 5, 6], asr_text=[4, 9], prosody=torch.randn(2, 8), response=[12, 13])


def test_source_settings():
    s = source()
    assert teacher_text(s, "GTQ_GTA") == [4, 5, 6] and student_text(s, "GTQ_GTA") == [4, 5, 6]
    assert teacher_text(s, "ASRQ_ASRA") == [4, 9] and student_text(s, "ASRQ_ASRA") == [4, 9]
    assert teacher_text(s, "ASRQ_GTA") == [4, 5, 6] and student_text(s, "ASRQ_GTA") == [4, 9]


def test_pair_alignment():
    torch.manual_seed(0)
    pair = build_kd_pair(source(), "ASRQ_GTA", Projector(8, 16))
    assert pair.teacher_tokens == [4, 5, 6, SEP, 12, 13]
    assert pair.teacher_positions == [3, 4, 5]
    assert pair.student.layout() == "ETTTTT"  # E, 4, 9, SEP, 12, 13
    assert pair.answer_positions == [3, 4, 5]
    with pytest.raises(ConfigError):
        build_kd_pair(source(), "XX", Projector(8, 16))


def test_records_round_trip(tmp_path):
    rec = kd_record(source(), "GTQ_GTA")
    write_kd_records(tmp_path / "k.jsonl", [rec, rec])
    assert read_kd_records(tmp_path / "k.jsonl") == [rec, rec]


def test_alpha_one_is_pure_kd_and_alpha_zero_pure_ce():
    torch.manual_seed(0)
    m = ToyLM(BackboneConfig(d_llm=16, n_layers=1, n_heads=2, vocab_size=20, max_len=16)).eval()
    p = Projector(8, 16).eval()
    src = source()
    teacher = torch.randn(3, 20)
    ex = kd_example(src, "ASRQ_ASRA", teacher)
    plain = Example(list(ex.text), list(ex.response), ex.prosody)
    ce = batch_loss(m, p, [plain])
    assert torch.allclose(batch_loss(m, p, [ex], KDConfig(alpha=0.0)), ce)
    from prosody_slm.backbone import with_response

    seq, pos = with_response(ex.prompt(p), ex.response)
    want_kl = kd_kl_loss(teacher, m(seq), pos, 2.0, teacher_positions=range(3))
    assert torch.allclose(batch_loss(m, p, [ex], KDConfig(alpha=1.0)), want_kl, atol=1e-6)


def test_kd_pulls_student_to_teacher():
    torch.manual_seed(0)
    m = ToyLM(BackboneConfig(d_llm=16, n_layers=1, n_heads=2, vocab_size=20, max_len=16))
    p = Projector(8, 16)
    teacher = torch.full((3, 20), -5.0)
    teacher[0, 15] = teacher[1, 16] = teacher[2, 2] = 5.0
    ex = Example([4, 5], [12, 13], torch.randn(2, 8), teacher)
    before = batch_loss(m, p, [ex], KDConfig(alpha=1.0)).item()
    train_stage(m, p, [ex], TrainStagePlan(2, lr=1e-2, epochs=40), kd=KDConfig(alpha=1.0))
    assert batch_loss(m, p, [ex], KDConfig(alpha=1.0)).item() < 0.1 * before
