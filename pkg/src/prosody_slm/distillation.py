"""Distillation objectives and teacher/student pairing.

The KL term is ``T^2 * sum_j KL(P_t(.|j) || P_s(.|j))`` over answer positions
with temperature-scaled softmaxes; the teacher side is always detached.  When
teacher and student prompts differ in length, answer positions are matched by
index within the response (k-th response token on each side).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch.nn import functional as F

from .backbone import Example, with_response
from .errors import ConfigError, InputError
from .injection import MixedSequence, Projector, build_global_input
from .vocab import SEP

SETTINGS = ("GTQ_GTA", "ASRQ_ASRA", "ASRQ_GTA")


@dataclass(frozen=True)
class KDConfig:
    alpha: float = 0.0
    temperature: float = 2.0
    setting: str = "ASRQ_ASRA"

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1]")
        if self.temperature <= 0:
            raise ConfigError(f"temperature={self.temperature} must be > 0")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown source setting {self.setting!r}")


def kd_kl_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    answer_positions: Sequence[int],
    temperature: float,
    teacher_positions: Sequence[int] | None = None,
) -> torch.Tensor:
    """Summed forward KL over answer positions, scaled by ``T^2``.

    ``teacher_positions`` index the teacher sequence in the same order as
    ``answer_positions`` index the student one; by default both are the same.
    """
    answer_positions = list(answer_positions)
    if not answer_positions:
        raise InputError("answer position set is empty")
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    if teacher_logits.shape[-1] != student_logits.shape[-1]:
        raise InputError(
            f"vocab width mismatch: teacher {teacher_logits.shape[-1]} vs student {student_logits.shape[-1]}"
        )
    t_pos = answer_positions if teacher_positions is None else list(teacher_positions)
    if len(t_pos) != len(answer_positions):
        raise InputError("teacher and student answer positions differ in count")
    t = teacher_logits.detach()[t_pos].to(student_logits.dtype) / temperature
    s = student_logits[answer_positions] / temperature
    log_pt = F.log_softmax(t, dim=-1)
    log_ps = F.log_softmax(s, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum()
    return temperature**2 * kl


def mixed_loss(l_kl, l_ce, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]")
    return alpha * l_kl + (1 - alpha) * l_ce


@dataclass
class KDSource:
    """One spoken question: clean and transcribed backbone tokens, its prosody
    and the teacher response collected for a given setting."""

    gt_text: list[int]
    asr_text: list[int]
    prosody: torch.Tensor
    response: list[int]
    prosody_ref: str = ""


def teacher_text(src: KDSource, setting: str) -> list[int]:
    return list(src.asr_text if setting == "ASRQ_ASRA" else src.gt_text)


def student_text(src: KDSource, setting: str) -> list[int]:
    return list(src.gt_text if setting == "GTQ_GTA" else src.asr_text)


@dataclass
class KDPair:
    teacher_tokens: list[int]
    student: MixedSequence
    answer_positions: list[int]
    teacher_positions: list[int]


def build_kd_pair(src: KDSource, setting: str, projector: Projector) -> KDPair:
    if setting not in SETTINGS:
        raise ConfigError(f"unknown source setting {setting!r}")
    if not src.response:
        raise InputError("response is empty")
    t_prompt = teacher_text(src, setting)
    student, positions = with_response(
        build_global_input(student_text(src, setting), src.prosody, projector), src.response
    )
    teacher_seq = [*t_prompt, SEP, *src.response]
    t_start = len(t_prompt)
    return KDPair(
        teacher_seq, student, positions, list(range(t_start, t_start + len(src.response) + 1))
    )


def kd_example(src: KDSource, setting: str, teacher_logits: torch.Tensor | None = None) -> Example:
    """Training example for the student; ``teacher_logits`` are indexed by response position."""
    return Example(student_text(src, setting), list(src.response), src.prosody, teacher_logits)


def kd_record(src: KDSource, setting: str) -> dict:
    return {
        "gt_text": list(src.gt_text),
        "asr_text": list(src.asr_text),
        "prosody_ref": src.prosody_ref,
        "response": list(src.response),
        "setting": setting,
    }


def write_kd_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_kd_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
