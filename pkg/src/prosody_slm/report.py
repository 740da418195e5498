"""Render a Markdown summary of an artifact directory.

Missing sections are listed rather than treated as errors, so a partial or
empty directory still yields a report.
"""
from __future__ import annotations

import json
from pathlib import Path

from .evaluation import GapReport, render_gap_table

SECTIONS = ("encoder", "probe", "gap", "emotion", "kd_grid", "plots")


def _load(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def _jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def encoder_section(root: Path) -> str | None:
    m = _load(root / "encoder" / "metrics.json")
    if m is None:
        return None
    rows = [[name, f"{v['lambda_mel']:g}", f"{100 * v['token_accuracy']:.1f}",
             f"{v['final']['L_ASR']:.4f}", f"{v['final']['L_mel']:.4f}"] for name, v in sorted(m.items())]
    return _table(["Variant", "lambda", "Token acc. (%)", "final L_ASR", "final L_mel"], rows)


def probe_section(root: Path) -> str | None:
    """One row per (probe kind, attribute); one column per encoder variant."""
    s = _load(root / "probe" / "summary.json")
    if s is None:
        return None
    variants = sorted(s)
    keys = sorted({(k, a) for v in variants for k in s[v] for a in s[v][k]})
    rows = []
    for kind, attr in keys:
        cells = [kind, attr]
        for v in variants:
            r = s[v].get(kind, {}).get(attr)
            if r is None or "skipped" in r:
                cells.append("skipped")
            else:
                cells.append(f"{100 * r['mean']:.2f} ± {100 * r['std']:.2f}")
        rows.append(cells)
    return _table(["Probe", "Attribute", *variants], rows)


def gap_section(root: Path) -> str | None:
    files = sorted((root / "eval").glob("gap_*.json"))
    if not files:
        return None
    reports = [GapReport.load(f) for f in files]
    text_acc = {b: r["acc_text"] for rep in reports for b, r in rep.rows.items()}
    head = "Text-mode reference: " + ", ".join(f"{b} {100 * a:.1f}" for b, a in sorted(text_acc.items()))
    return head + "\n\n```\n" + render_gap_table(reports) + "```\n"


def emotion_section(root: Path) -> str | None:
    e = _load(root / "eval" / "emotion.json")
    if e is None:
        return None
    rows = [[n, f"{100 * v['accuracy']:.1f}", f"{100 * v['accuracy_zeroed']:.1f}"] for n, v in sorted(e.items())]
    return _table(["Model", "Emotion acc. (%)", "Prosody zeroed (%)"], rows)


def kd_grid_section(root: Path) -> str | None:
    """alpha x source-setting grid of speech-mode accuracy (gap in brackets)."""
    g = _load(root / "eval" / "kd_grid.json")
    if not g:
        return None
    alphas = sorted({a for s in g.values() for a in s}, key=float)
    rows = []
    for setting in sorted(g):
        cells = [setting]
        for a in alphas:
            r = g[setting].get(a)
            cells.append("-" if r is None else f"{100 * r['acc_speech']:.1f} ({100 * r['gap']:.1f})")
        rows.append(cells)
    return _table(["Setting", *[f"alpha={a}" for a in alphas]], rows)


def plot_curves(root: Path, plots_dir: Path) -> list[str]:
    """Loss-curve PNGs for every curve file present; returns written names."""
    curves = sorted((root / "encoder").glob("*_curve.jsonl")) + sorted((root / "backbone").glob("*_metrics.jsonl"))
    if not curves:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in curves:
        recs = _jsonl(path)
        fig, ax = plt.subplots(figsize=(5, 3))
        if recs and "L_ASR" in recs[0]:
            for key in ("L_ASR", "L_mel", "total"):
                ax.plot([r["step"] for r in recs], [r[key] for r in recs], label=key)
        else:
            for stage in sorted({r["stage"] for r in recs}):
                sel = [r for r in recs if r["stage"] == stage]
                ax.plot([r["step"] for r in sel], [r["loss"] for r in sel], label=f"stage {stage}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.legend()
        ax.set_title(f"{path.parent.name}/{path.stem}")
        fig.tight_layout()
        name = f"{path.parent.name}_{path.stem}.png"
        fig.savefig(plots_dir / name, dpi=80)
        plt.close(fig)
        written.append(name)
    return written


def build_report(root: str | Path, plots_dir: str | Path | None = None) -> tuple[str, list[str]]:
    """Markdown report text and the list of missing sections."""
    root = Path(root)
    parts = ["# Experiment report\n"]
    missing = []
    builders = [
        ("encoder", "Encoder variants", encoder_section),
        ("probe", "Probing (mean ± std accuracy, %)", probe_section),
        ("gap", "Modality gap (%)", gap_section),
        ("emotion", "Emotion task", emotion_section),
        ("kd_grid", "KD ablation grid (speech acc. %, gap in brackets)", kd_grid_section),
    ]
    for key, title, fn in builders:
        body = fn(root) if root.exists() else None
        if body is None:
            missing.append(key)
            continue
        parts.append(f"## {title}\n\n{body}")
    plots = plot_curves(root, Path(plots_dir)) if plots_dir is not None and root.exists() else []
    if plots:
        parts.append("## Loss curves\n\n" + "".join(f"- plots/{p}\n" for p in plots))
    else:
        missing.append("plots")
    if missing:
        parts.append("## Missing\n\n" + "".join(f"- {m}\n" for m in missing))
    return "\n".join(parts), missing
