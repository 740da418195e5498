"""Probing classifiers with repeated stratified cross-validation.

Each of ``n_seeds`` seeds reshuffles the stratified folds; every (seed, fold)
run re-initialises the probe, trains with Adam + cross-entropy, validates on
the held-out fold after each epoch, early-stops on validation accuracy and
reports the held-out accuracy of its best checkpoint.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ProbeConfig:
    kind: Literal["1layer", "2layer"] = "2layer"
    hidden: int = 256
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    n_seeds: int = 10
    n_folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("1layer", "2layer"):
            raise ConfigError(f"unknown probe kind {self.kind!r}")
        for name in ("hidden", "lr", "batch_size", "max_epochs", "patience", "n_seeds", "n_folds"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")


@dataclass
class ProbeReport:
    runs: list[dict]
    mean: float
    std: float
    config: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [r["accuracy"] for r in self.runs]

    def to_record(self) -> dict:
        return {"runs": self.runs, "mean": self.mean, "std": self.std, "config": self.config}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ProbeReport":
        d = json.loads(Path(path).read_text())
        return cls(d["runs"], d["mean"], d["std"], d["config"])


def make_probe(kind: str, in_dim: int, n_classes: int, config: ProbeConfig | None = None) -> nn.Module:
    config = config or ProbeConfig(kind=kind)
    if in_dim < 1 or n_classes < 1:
        raise ConfigError("in_dim and n_classes must be >= 1")
    if kind == "1layer":
        return nn.Sequential(nn.Dropout(config.dropout), nn.Linear(in_dim, n_classes))
    if kind == "2layer":
        return nn.Sequential(
            nn.Linear(in_dim, config.hidden),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.hidden, n_classes),
        )
    raise ConfigError(f"unknown probe kind {kind!r}")


def stratified_folds(labels: Sequence, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per item.

    Each class is shuffled independently and dealt round-robin, continuing the
    deal from where the previous class stopped so fold sizes stay balanced too.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < n_folds:
            raise InputError(f"class {c!r} has {n} members, fewer than n_folds={n_folds}")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset = (offset + len(idx)) % n_folds
    return folds


def _accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        return float((model(x).argmax(-1) == y).float().mean())


def _train_one(
    x_tr: torch.Tensor,
    y_tr: torch.Tensor,
    x_va: torch.Tensor,
    y_va: torch.Tensor,
    n_classes: int,
    config: ProbeConfig,
    seed: int,
) -> dict:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = make_probe(config.kind, x_tr.shape[1], n_classes, config)
    optim = torch.optim.Adam(model.parameters(), lr=config.lr)
    best_acc, best_state, best_epoch, stale = -1.0, None, -1, 0
    epochs_run = 0
    for epoch in range(config.max_epochs):
        model.train()
        order = torch.randperm(len(x_tr), generator=gen)
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            loss = F.cross_entropy(model(x_tr[idx]), y_tr[idx])
            optim.zero_grad()
            loss.backward()
            optim.step()
        epochs_run = epoch + 1
        acc = _accuracy(model, x_va, y_va)
        if acc > best_acc:
            best_acc, best_state, best_epoch, stale = acc, copy.deepcopy(model.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    return {
        "accuracy": _accuracy(model, x_va, y_va),
        "best_val_accuracy": best_acc,
        "best_epoch": best_epoch,
        "epochs_run": epochs_run,
    }


def run_probe_cv(embeddings, labels: Sequence, config: ProbeConfig) -> ProbeReport:
    config.validate()
    x = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)
    raw = np.asarray(labels)
    if x.dim() != 2 or len(x) != len(raw):
        raise InputError(f"embeddings {tuple(x.shape)} do not match {len(raw)} labels")
    classes, y_np = np.unique(raw, return_inverse=True)
    y = torch.as_tensor(y_np, dtype=torch.long)
    runs = []
    for s in range(config.n_seeds):
        run_seed = int(np.random.SeedSequence([config.seed, s]).generate_state(1)[0])
        folds = stratified_folds(raw, config.n_folds, run_seed)
        for k in range(config.n_folds):
            va = torch.as_tensor(folds == k)
            result = _train_one(x[~va], y[~va], x[va], y[va], len(classes), config, run_seed + k)
            runs.append({"seed": s, "fold": k, **result})
    runs.sort(key=lambda r: (r["seed"], r["fold"]))
    accs = np.array([r["accuracy"] for r in runs])
    return ProbeReport(runs, float(accs.mean()), float(accs.std()), asdict(config))
