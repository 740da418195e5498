"""Toy decoder-only language model over mixed token / embedding inputs.

Token slots go through the embedding table, embedding slots enter the first
layer as-is; learned absolute positions count every slot.  Training follows a
two-stage plan: stage 1 updates only the prosody projector, stage 2 updates
projector and backbone together.  Cross-entropy covers response positions only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, InputError, TrainingDiverged
from .injection import MixedSequence, Projector, TokenSlot, build_input
from .layers import causal_mask, encoder_layer, param_digest
from .tensorio import load_checkpoint, save_checkpoint
from .vocab import EOS, PAD, SEP


@dataclass(frozen=True)
class BackboneConfig:
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_len: int = 32
    dropout: float = 0.0

    def validate(self) -> None:
        if self.d_llm % self.n_heads:
            raise ConfigError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if min(self.n_layers, self.vocab_size, self.max_len) < 1:
            raise ConfigError("n_layers, vocab_size and max_len must be >= 1")


class ToyLM(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_llm)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_llm)
        self.layers = nn.ModuleList(
            [encoder_layer(cfg.d_llm, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers)]
        )
        self.norm = nn.LayerNorm(cfg.d_llm)
        self.lm_head = nn.Linear(cfg.d_llm, cfg.vocab_size)

    def forward_batch(self, ids: torch.Tensor, embed_mask: torch.Tensor, embeds: torch.Tensor) -> torch.Tensor:
        """``(B, S)`` ids, ``(B, S)`` bool mask, ``(B, S, d)`` embeds -> ``(B, S, V)`` logits.

        Sequences are right-padded; the causal mask keeps padding from
        influencing earlier positions, so no key-padding mask is needed.
        """
        B, S = ids.shape
        if S > self.cfg.max_len:
            raise InputError(f"sequence length {S} exceeds max_len={self.cfg.max_len}")
        if embeds.shape != (B, S, self.cfg.d_llm):
            raise InputError(f"embeds {tuple(embeds.shape)} != {(B, S, self.cfg.d_llm)}")
        tok = self.tok_emb(ids)
        h = torch.where(embed_mask[..., None], embeds.to(tok.dtype), tok)
        h = h + self.pos_emb(torch.arange(S))
        mask = causal_mask(S, h.dtype)
        for layer in self.layers:
            h = layer(h, src_mask=mask)
        return self.lm_head(self.norm(h))

    def forward(self, seq: MixedSequence) -> torch.Tensor:
        if len(seq) == 0:
            raise InputError("empty sequence")
        ids, mask, embeds = seq.to_tensors(self.cfg.d_llm)
        return self.forward_batch(ids[None], mask[None], embeds[None])[0]

    def backbone_digest(self) -> str:
        return param_digest(self)


def collate(seqs: Sequence[MixedSequence], d: int):
    """Right-pad a list of sequences into batch tensors."""
    S = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), S), PAD, dtype=torch.long)
    mask = torch.zeros(len(seqs), S, dtype=torch.bool)
    embeds = torch.zeros(len(seqs), S, d)
    for b, s in enumerate(seqs):
        i, m, e = s.to_tensors(d)
        ids[b, : len(s)], mask[b, : len(s)], embeds[b, : len(s)] = i, m, e.to(embeds.dtype)
    return ids, mask, embeds


# -- examples -----------------------------------------------------------------


@dataclass
class Example:
    """One training / scoring example.

    ``text`` are backbone tokens of the prompt; ``prosody`` (``N x d``) is
    injected when present.  ``teacher_logits`` (``len(response) + 1`` rows,
    aligned by response index, last row for EOS) feed the KD term.
    """

    text: list[int]
    response: list[int]
    prosody: torch.Tensor | None = None
    teacher_logits: torch.Tensor | None = None
    mode: str = "global"
    r: int = 1

    def prompt(self, projector: Projector | None) -> MixedSequence:
        if self.prosody is None:
            return MixedSequence.from_tokens(self.text)
        if projector is None:
            raise ConfigError("example carries prosody but no projector was given")
        return build_input(self.text, self.prosody, projector, self.mode, self.r)


def with_response(prompt: MixedSequence, response: Sequence[int]) -> tuple[MixedSequence, list[int]]:
    """Append ``SEP + response``; return the sequence and its answer positions.

    Position ``len(prompt) + k`` predicts ``(response + [EOS])[k]``.
    """
    if len(response) == 0:
        raise InputError("response is empty")
    seq = prompt + MixedSequence.from_tokens([SEP, *response])
    start = len(prompt)
    return seq, list(range(start, start + len(response) + 1))


def lm_targets(seq: MixedSequence, answer_positions: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Next-slot ids for every position (PAD where the next slot is an embedding or
    absent, EOS after the final slot) plus a bool mask of response positions."""
    S = len(seq)
    targets = torch.full((S,), PAD, dtype=torch.long)
    for i in range(S - 1):
        nxt = seq[i + 1]
        if isinstance(nxt, TokenSlot):
            targets[i] = nxt.id
    targets[S - 1] = EOS
    mask = torch.zeros(S, dtype=torch.bool)
    mask[list(answer_positions)] = True
    return targets, mask


def response_ce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Per-example mean cross-entropy over masked positions, averaged over the batch."""
    if logits.dim() == 2:
        logits, targets, mask = logits[None], targets[None], mask[None]
    nll = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
    m = mask.to(nll.dtype)
    per_example = (nll * m).sum(-1) / m.sum(-1).clamp_min(1)
    return per_example.mean() if reduce else per_example


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainStagePlan:
    stage: int
    lr: float
    epochs: int
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr >= 0, epochs >= 1 and batch_size >= 1 required")

    @property
    def trainable(self) -> tuple[str, ...]:
        return ("projector",) if self.stage == 1 else ("projector", "backbone")


@dataclass
class StageResult:
    metrics: list[dict] = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""


def _trainable_params(model: ToyLM, projector: Projector | None, plan: TrainStagePlan) -> list[nn.Parameter]:
    params = list(projector.parameters()) if projector is not None else []
    if plan.stage == 2:
        params += list(model.parameters())
    return params


def batch_loss(model: ToyLM, projector: Projector | None, batch: Sequence[Example], kd=None) -> torch.Tensor:
    from .distillation import kd_kl_loss, mixed_loss

    seqs, positions = zip(*(with_response(ex.prompt(projector), ex.response) for ex in batch))
    ids, emask, embeds = collate(seqs, model.cfg.d_llm)
    logits = model.forward_batch(ids, emask, embeds)
    S = ids.shape[1]
    targets = torch.full((len(batch), S), PAD, dtype=torch.long)
    rmask = torch.zeros(len(batch), S, dtype=torch.bool)
    for b, (seq, pos) in enumerate(zip(seqs, positions)):
        t, m = lm_targets(seq, pos)
        targets[b, : len(seq)], rmask[b, : len(seq)] = t, m
    ce = response_ce(logits, targets, rmask, reduce=False)
    if kd is None or kd.alpha == 0:
        return ce.mean()
    # examples without teacher logits (paralinguistic tasks) keep plain CE
    losses = []
    for b, (ex, pos) in enumerate(zip(batch, positions)):
        if ex.teacher_logits is None:
            losses.append(ce[b])
        else:
            kl = kd_kl_loss(ex.teacher_logits, logits[b], pos, kd.temperature,
                            teacher_positions=range(len(pos)))
            losses.append(mixed_loss(kl, ce[b], kd.alpha))
    return torch.stack(losses).mean()


def train_stage(
    model: ToyLM,
    projector: Projector | None,
    examples: Sequence[Example],
    plan: TrainStagePlan,
    kd=None,
    metrics_path: str | Path | None = None,
) -> StageResult:
    """Run one training stage in place; returns per-step metric records."""
    plan.validate()
    if not examples:
        raise InputError("no training examples")
    if kd is not None and kd.alpha > 0 and all(ex.teacher_logits is None for ex in examples):
        raise InputError("KD with alpha > 0 but no example carries teacher logits")
    torch.manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    frozen = plan.stage == 1
    for p in model.parameters():
        p.requires_grad_(not frozen)
    params = _trainable_params(model, projector, plan)
    if not params:
        raise ConfigError("stage has no trainable parameters")
    n_trainable = sum(p.numel() for p in params)
    result = StageResult(digest_before=model.backbone_digest())
    bs = min(plan.batch_size, len(examples))
    per_epoch = math.ceil(len(examples) / bs)
    total = per_epoch * plan.epochs
    optim = torch.optim.Adam(params, lr=plan.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(optim, lambda s: max(0.0, 1 - s / total))
    model.train()
    if projector is not None:
        projector.train()
    fh = open(metrics_path, "w") if metrics_path else None
    step = 0
    try:
        for _ in range(plan.epochs):
            order = rng.permutation(len(examples))
            for i in range(0, len(order), bs):
                batch = [examples[j] for j in order[i : i + bs]]
                loss = batch_loss(model, projector, batch, kd)
                rec = {
                    "stage": plan.stage,
                    "step": step,
                    "loss": loss.item(),
                    "lr": optim.param_groups[0]["lr"],
                    "trainable_param_count": n_trainable,
                }
                if not math.isfinite(rec["loss"]):
                    raise TrainingDiverged(f"non-finite loss at stage {plan.stage} step {step}", rec)
                result.metrics.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                optim.zero_grad()
                loss.backward()
                optim.step()
                sched.step()
                step += 1
    finally:
        if fh:
            fh.close()
        for p in model.parameters():
            p.requires_grad_(True)
    model.eval()
    if projector is not None:
        projector.eval()
    result.digest_after = model.backbone_digest()
    return result


# -- inference ----------------------------------------------------------------


@torch.no_grad()
def generate(model: ToyLM, prompt: MixedSequence, max_new: int = 4) -> list[int]:
    """Greedy continuation after ``prompt + SEP`` until EOS or ``max_new`` tokens."""
    seq = prompt + MixedSequence.from_tokens([SEP])
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(model(seq)[-1].argmax())
        if nxt == EOS:
            break
        out.append(nxt)
        seq = seq + MixedSequence.from_tokens([nxt])
    return out


@torch.no_grad()
def response_logits(model: ToyLM, prompt: MixedSequence, response: Sequence[int]) -> torch.Tensor:
    """Logits at the ``len(response) + 1`` answer positions, ``(K + 1, V)``."""
    seq, pos = with_response(prompt, response)
    return model(seq)[pos]


def response_accuracy(model: ToyLM, projector: Projector | None, examples: Sequence[Example]) -> float:
    """Teacher-forced argmax accuracy over response tokens (EOS included)."""
    hits = total = 0
    with torch.no_grad():
        for ex in examples:
            seq, pos = with_response(ex.prompt(projector), ex.response)
            pred = model(seq)[pos].argmax(-1)
            gold = torch.as_tensor([*ex.response, EOS])
            hits += int((pred == gold).sum())
            total += len(pos)
    return hits / max(total, 1)


# -- checkpoints --------------------------------------------------------------


def save_backbone(path: str | Path, model: ToyLM, projector: Projector | None = None) -> None:
    tensors = {f"lm.{k}": v for k, v in model.state_dict().items()}
    sections = {}
    if projector is not None:
        tensors.update({f"proj.{k}": v for k, v in projector.state_dict().items()})
        sections["projector"] = {"d_in": projector.d_in, "d_out": projector.d_out,
                                 "hidden": projector.fc1.out_features}
    save_checkpoint(path, {"backbone": asdict(model.cfg)}, tensors, sections)


def load_backbone(path: str | Path) -> tuple[ToyLM, Projector | None]:
    config, tensors, sections = load_checkpoint(path)
    model = ToyLM(BackboneConfig(**config["backbone"]))
    model.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("lm.")})
    projector = None
    if "projector" in sections:
        projector = Projector(**sections["projector"])
        projector.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("proj.")})
    model.eval()
    return model, projector
