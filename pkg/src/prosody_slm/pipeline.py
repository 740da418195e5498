"""Stage runner: gen-data -> train-encoder -> probe -> build-kd-data ->
train-backbone -> evaluate -> report.

Every stage writes into its own sub-directory of the artifact directory
(through a ``.tmp`` sibling that is renamed on success, so a failing stage
leaves earlier artifacts untouched), then drops ``markers/<stage>.done``
holding the config digest and the list of files the stage read.  Reads go
through :meth:`StageContext.inp`, which refuses paths outside the stage's
declared inputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import report as report_mod
from .backbone import (
    BackboneConfig,
    Example,
    ToyLM,
    TrainStagePlan,
    generate,
    load_backbone,
    response_logits,
    save_backbone,
    train_stage,
)
from .config import STAGES, ExperimentConfig, dump_config
from .distillation import KDConfig, KDSource, kd_example, kd_record, read_kd_records, teacher_text, write_kd_records
from .encoder import EncoderConfig, token_accuracy
from .errors import ConfigError, InputError
from .evaluation import GapReport, SpeechScorer, TextScorer, eval_mc, render_gap_table, render_items, speech_inputs
from .injection import MixedSequence, Projector
from .probing import ProbeConfig, run_probe_cv
from .reconstructor import OptimConfig, ReconstructorConfig, WhisperPro, load_encoder, train_whisperpro
from .synth_data import (
    RenderConfig,
    SpecDistribution,
    active_frames,
    load_dataset,
    make_dataset,
    quantile_bin,
    render_mel,
    save_dataset,
    utterance_scalars,
)
from .tasks import SyntheticTasks, TaskConfig
from .tensorio import load_matrix, save_matrix
from .vocab import PAD, Vocab

log = logging.getLogger(__name__)

STAGE_IO: dict[str, tuple[tuple[str, ...], str]] = {
    "gen-data": ((), "data"),
    "train-encoder": (("data",), "encoder"),
    "probe": (("data", "encoder"), "probe"),
    "build-kd-data": (("encoder",), "kd"),
    "train-backbone": (("kd",), "backbone"),
    "evaluate": (("encoder", "kd", "backbone"), "eval"),
    "report": (("encoder", "probe", "backbone", "eval"), "report"),
}


class StageFailed(RuntimeError):
    pass


def config_digest(cfg: ExperimentConfig) -> str:
    d = cfg.model_dump(mode="python")
    d.pop("out_dir"), d.pop("stages")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def sub_seed(seed: int, name: str) -> int:
    """Stable per-purpose seed derived from the master seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class StageContext:
    stage: str
    root: Path
    cfg: ExperimentConfig
    reads: list[str] = field(default_factory=list)

    @property
    def inputs(self) -> tuple[str, ...]:
        return STAGE_IO[self.stage][0]

    @property
    def output(self) -> str:
        return STAGE_IO[self.stage][1]

    def inp(self, section: str, *parts: str) -> Path:
        if section not in self.inputs:
            raise InputError(f"stage {self.stage!r} did not declare input {section!r}")
        rel = "/".join((section, *parts))
        self.reads.append(rel)
        return self.root / section / Path(*parts) if parts else self.root / section

    def out(self, *parts: str) -> Path:
        p = self.root / f"{self.output}.tmp" / Path(*parts) if parts else self.root / f"{self.output}.tmp"
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


# -- shared builders ----------------------------------------------------------


def vocab_of(cfg: ExperimentConfig) -> Vocab:
    return Vocab(size=cfg.encoder.vocab_size)


def distribution(cfg: ExperimentConfig) -> SpecDistribution:
    v = vocab_of(cfg)
    d = cfg.data
    return SpecDistribution(
        vocab_size=v.end_word,
        token_low=v.first_word,
        min_len=d.min_len,
        max_len=d.max_len,
        n_speakers=d.n_speakers,
        n_pitch=d.n_pitch,
        n_energy=d.n_energy,
        n_emotion=d.n_emotion,
        phrases=tuple(v.merges),
        phrase_prob=d.phrase_prob,
    )


def render_config(cfg: ExperimentConfig) -> RenderConfig:
    r = cfg.render
    return RenderConfig(
        n_mels=r.n_mels,
        n_frames=r.n_frames,
        span=r.span,
        pitch_offset=r.pitch_offset,
        energy_factor=r.energy_factor,
        speaker_depth=r.speaker_depth,
        emotion_depth=r.emotion_depth,
        noise_sigma=r.noise_sigma,
        table_seed=r.table_seed,
        vocab_size=cfg.encoder.vocab_size,
        n_pitch=cfg.data.n_pitch,
        n_speakers=cfg.data.n_speakers,
        n_emotion=cfg.data.n_emotion,
    )


def encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(
        d=e.d,
        n_enc_layers=e.n_enc_layers,
        n_dec_layers=e.n_dec_layers,
        n_heads=e.n_heads,
        vocab_size=e.vocab_size,
        max_text_len=e.max_text_len,
        prosody_layer=e.prosody_layer,
        n_mels=cfg.render.n_mels,
        n_frames=cfg.render.n_frames,
        stride=e.stride,
    )


def reconstructor_config(cfg: ExperimentConfig, lam: float) -> ReconstructorConfig:
    r = cfg.reconstructor
    return ReconstructorConfig(
        d_model=cfg.encoder.d,
        prosody_dim=cfg.encoder.d,
        vocab_size=cfg.encoder.vocab_size,
        n_enc_layers=r.n_enc_layers,
        n_dec_layers=r.n_dec_layers,
        n_heads=r.n_heads,
        dropout=r.dropout,
        n_frames=cfg.render.n_frames,
        n_mels=cfg.render.n_mels,
        lambda_mel=lam,
    )


def backbone_config(cfg: ExperimentConfig, teacher: bool = False) -> BackboneConfig:
    if teacher:
        t = cfg.kd.teacher
        return BackboneConfig(t.d_llm, t.n_layers, t.n_heads, cfg.encoder.vocab_size, cfg.backbone.max_len)
    b = cfg.backbone
    return BackboneConfig(b.d_llm, b.n_layers, b.n_heads, cfg.encoder.vocab_size, b.max_len)


def encoder_variants(cfg: ExperimentConfig) -> dict[str, float]:
    """``B`` is the configured encoder; ``A`` the ASR-only comparison."""
    out = {"B": cfg.reconstructor.lambda_mel}
    if cfg.encoder.train_baseline:
        out["A"] = 0.0
    return out


def backbone_runs(cfg: ExperimentConfig) -> dict[str, dict]:
    runs = {"main": {"kd": True, "setting": cfg.kd.setting, "alpha": cfg.kd.alpha}}
    if cfg.backbone.train_no_kd:
        runs["nokd"] = {"kd": False, "setting": cfg.kd.setting, "alpha": 0.0}
    for s in cfg.kd.grid_settings:
        for a in cfg.kd.grid_alphas:
            runs[f"grid_{s}_a{a:g}"] = {"kd": True, "setting": s, "alpha": float(a)}
    return runs


def kd_settings(cfg: ExperimentConfig) -> list[str]:
    return sorted({cfg.kd.setting, *cfg.kd.grid_settings})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


# -- stages -------------------------------------------------------------------


def stage_gen_data(ctx: StageContext) -> None:
    cfg = ctx.cfg
    ds = make_dataset(
        cfg.data.n_items, distribution(cfg), render_config(cfg), sub_seed(cfg.seed, "data"),
        cfg.data.fractions, cfg.data.workers,
    )
    save_dataset(ds, ctx.out())


def stage_train_encoder(ctx: StageContext) -> None:
    cfg = ctx.cfg
    ds = load_dataset(ctx.inp("data"))
    test = ds.split("test") or ds.items
    metrics = {}
    for name, lam in encoder_variants(cfg).items():
        opt = OptimConfig(
            lr=cfg.optim.lr, steps=cfg.optim.steps, batch_size=cfg.optim.batch_size,
            warmup_fraction=cfg.optim.warmup_fraction, seed=sub_seed(cfg.seed, "encoder"),
        )
        res = train_whisperpro(
            ds, encoder_config(cfg), reconstructor_config(cfg, lam), opt, curve_path=ctx.out(f"{name}_curve.jsonl")
        )
        res.model.save(ctx.out(f"{name}.ckpt"), extra={"variant": {"name": name, "lambda_mel": lam}})
        hyps = res.model.asr.transcribe_batch(np.stack([it.mel for it in test]))
        metrics[name] = {
            "lambda_mel": lam,
            "token_accuracy": token_accuracy([it.transcript for it in test], hyps),
            "final": res.curve[-1],
        }
    _write_json(ctx.out("metrics.json"), metrics)


def _probe_labels(ds, attr: str, n_bins: int) -> list[int]:
    if attr in ("f0", "energy"):
        values = [utterance_scalars(it.mel, active_frames(it.spec, ds.render))[attr] for it in ds.items]
        return quantile_bin(values, n_bins)
    return [getattr(it.spec, attr) for it in ds.items]


def stage_probe(ctx: StageContext) -> None:
    cfg, p = ctx.cfg, ctx.cfg.probe
    ds = load_dataset(ctx.inp("data"))
    mels = np.stack([it.mel for it in ds.items])
    summary: dict = {}
    for name in encoder_variants(cfg):
        enc = load_encoder(ctx.inp("encoder", f"{name}.ckpt")).eval()
        with torch.no_grad():
            P = enc.extract_prosody_batch(mels, [list(it.transcript) for it in ds.items])
        X = np.stack([x.mean(0).numpy() for x in P])
        save_matrix(ctx.out(f"{name}_embeddings.bin"), X)
        for kind in p.kinds:
            pc = ProbeConfig(kind=kind, hidden=p.hidden, dropout=p.dropout, lr=p.lr, batch_size=p.batch_size,
                             max_epochs=p.max_epochs, patience=p.patience, n_seeds=p.n_seeds,
                             n_folds=p.n_folds, seed=sub_seed(cfg.seed, "probe"))
            for attr in p.attributes:
                key = summary.setdefault(name, {}).setdefault(kind, {})
                try:
                    rep = run_probe_cv(X, _probe_labels(ds, attr, p.n_bins), pc)
                except InputError as err:
                    key[attr] = {"skipped": str(err)}
                    continue
                rep.save(ctx.out(f"{name}_{kind}_{attr}.json"))
                key[attr] = {"mean": rep.mean, "std": rep.std, "n_runs": len(rep.runs)}
    _write_json(ctx.out("summary.json"), summary)


def _save_prosody(ctx: StageContext, sub: str, i: int, P: torch.Tensor) -> str:
    rel = f"{sub}/{i:06d}.bin"
    save_matrix(ctx.out(rel), P.numpy())
    return rel


def stage_build_kd_data(ctx: StageContext) -> None:
    cfg = ctx.cfg
    v, tasks = vocab_of(cfg), SyntheticTasks(vocab_of(cfg), TaskConfig(cfg.data.min_len, cfg.data.max_len))
    rc, dist = render_config(cfg), distribution(cfg)

    # teacher text LM on clean QA
    rng = np.random.default_rng(sub_seed(cfg.seed, "teacher-data"))
    qs = [tasks.question(rng) for _ in range(cfg.kd.teacher.n_train)]
    t = cfg.kd.teacher
    torch.manual_seed(sub_seed(cfg.seed, "teacher-init"))
    teacher = ToyLM(backbone_config(cfg, teacher=True))
    train_stage(teacher, None, [Example(v.llm_tokenize(q), [tasks.answer(q)]) for q in qs],
                TrainStagePlan(2, t.lr, t.epochs, t.batch_size, sub_seed(cfg.seed, "teacher")),
                metrics_path=ctx.out("teacher_metrics.jsonl"))
    save_backbone(ctx.out("teacher.ckpt"), teacher)

    enc = load_encoder(ctx.inp("encoder", "B.ckpt")).eval()
    rate = cfg.kd.corruption_rate

    specs = tasks.qa_specs(cfg.kd.n_kd, dist, sub_seed(cfg.seed, "kd-questions"))
    si = speech_inputs(enc, np.stack([render_mel(s, rc) for s in specs]), v, rate, sub_seed(cfg.seed, "kd-asr"))
    refs = [_save_prosody(ctx, "prosody", i, x.prosody) for i, x in enumerate(si)]
    for setting in kd_settings(cfg):
        records = []
        for spec, x, ref in zip(specs, si, refs):
            src = KDSource(v.llm_tokenize(spec.token_ids), v.llm_tokenize(x.asr_words), x.prosody, [], ref)
            src.response = generate(teacher, MixedSequence.from_tokens(teacher_text(src, setting)), 2) or [PAD]
            records.append(kd_record(src, setting))
        write_kd_records(ctx.out(f"kd_{setting}.jsonl"), records)

    especs = tasks.emotion_specs(cfg.kd.n_emotion_train, dist, sub_seed(cfg.seed, "emotion-train"))
    esi = speech_inputs(enc, np.stack([render_mel(s, rc) for s in especs]), v, rate, sub_seed(cfg.seed, "emotion-asr"))
    erecs = []
    for i, (spec, x) in enumerate(zip(especs, esi)):
        erecs.append({
            "asr_text": v.llm_tokenize(x.asr_words),
            "prosody_ref": _save_prosody(ctx, "emotion_prosody", i, x.prosody),
            "response": [tasks.emotion_answers[spec.emotion]],
            "emotion": spec.emotion,
        })
    write_kd_records(ctx.out("emotion.jsonl"), erecs)


def _load_prosody(ctx: StageContext, ref: str) -> torch.Tensor:
    return torch.from_numpy(load_matrix(ctx.inp("kd", *ref.split("/"))))


def stage_train_backbone(ctx: StageContext) -> None:
    cfg = ctx.cfg
    b = cfg.backbone
    emotion = [
        Example(r["asr_text"], r["response"], _load_prosody(ctx, r["prosody_ref"]), mode=b.mode, r=b.r)
        for r in read_kd_records(ctx.inp("kd", "emotion.jsonl"))
    ]
    teacher = None
    summary = {}
    for name, run in backbone_runs(cfg).items():
        examples = list(emotion)
        kd = None
        if run["kd"]:
            kd = KDConfig(run["alpha"], cfg.kd.temperature, run["setting"])
            kd.validate()
            if kd.alpha > 0 and teacher is None:
                teacher, _ = load_backbone(ctx.inp("kd", "teacher.ckpt"))
            for r in read_kd_records(ctx.inp("kd", f"kd_{run['setting']}.jsonl")):
                src = KDSource(r["gt_text"], r["asr_text"], _load_prosody(ctx, r["prosody_ref"]), r["response"])
                logits = None
                if kd.alpha > 0:
                    logits = response_logits(
                        teacher, MixedSequence.from_tokens(teacher_text(src, run["setting"])), src.response
                    )
                ex = kd_example(src, run["setting"], logits)
                ex.mode, ex.r = b.mode, b.r
                examples.append(ex)
        seed = sub_seed(cfg.seed, f"backbone-{name}")
        torch.manual_seed(seed)
        model = ToyLM(backbone_config(cfg))
        projector = Projector(cfg.encoder.d, b.d_llm)
        stages = {}
        with open(ctx.out(f"{name}_metrics.jsonl"), "w") as fh:
            for k, sec in ((1, b.stage1), (2, b.stage2)):
                res = train_stage(model, projector, examples, TrainStagePlan(k, sec.lr, sec.epochs, sec.batch_size, seed), kd)
                for rec in res.metrics:
                    fh.write(json.dumps(rec) + "\n")
                stages[f"stage{k}"] = {"digest_before": res.digest_before, "digest_after": res.digest_after,
                                       "final_loss": res.metrics[-1]["loss"], "steps": len(res.metrics)}
        save_backbone(ctx.out(f"{name}.ckpt"), model, projector)
        summary[name] = {**run, "n_examples": len(examples), **stages}
    _write_json(ctx.out("summary.json"), summary)


def stage_evaluate(ctx: StageContext) -> None:
    cfg = ctx.cfg
    v = vocab_of(cfg)
    tasks = SyntheticTasks(v, TaskConfig(cfg.data.min_len, cfg.data.max_len))
    rc, dist = render_config(cfg), distribution(cfg)
    enc = load_encoder(ctx.inp("encoder", "B.ckpt")).eval()
    teacher, _ = load_backbone(ctx.inp("kd", "teacher.ckpt"))
    rate = cfg.kd.corruption_rate

    qa = tasks.qa_benchmark(cfg.eval.n_qa, dist, sub_seed(cfg.seed, "eval-qa"))
    qa_in = speech_inputs(enc, render_items(qa, rc), v, rate, sub_seed(cfg.seed, "eval-qa-asr"))
    emo = tasks.emotion_benchmark(cfg.eval.n_emotion, dist, sub_seed(cfg.seed, "eval-emotion"))
    emo_in = speech_inputs(enc, render_items(emo, rc), v, rate, sub_seed(cfg.seed, "eval-emotion-asr"))

    acc_text = eval_mc(TextScorer(teacher, v), qa)
    gaps, emotion, grid = [], {}, {}
    for name, run in backbone_runs(cfg).items():
        model, projector = load_backbone(ctx.inp("backbone", f"{name}.ckpt"))
        b = cfg.backbone
        speech = SpeechScorer(model, projector, v, qa_in, b.mode, b.r)
        rep = GapReport(name)
        rep.add("qa", acc_text, eval_mc(speech, qa))
        rep.save(ctx.out(f"gap_{name}.json"))
        gaps.append(rep)
        emotion[name] = {
            "accuracy": eval_mc(SpeechScorer(model, projector, v, emo_in, b.mode, b.r), emo),
            "accuracy_zeroed": eval_mc(SpeechScorer(model, projector, v, emo_in, b.mode, b.r, zero_prosody=True), emo),
        }
        if name.startswith("grid_"):
            grid.setdefault(run["setting"], {})[f"{run['alpha']:g}"] = rep.rows["qa"]
    _write_json(ctx.out("emotion.json"), emotion)
    _write_json(ctx.out("kd_grid.json"), grid)
    ctx.out("gap_table.txt").write_text(render_gap_table(gaps))


def stage_report(ctx: StageContext) -> None:
    for section in ctx.inputs:
        ctx.inp(section)
    text, _ = report_mod.build_report(ctx.root, plots_dir=ctx.out("plots"))
    ctx.out("report.md").write_text(text)


STAGE_FNS: dict[str, Callable[[StageContext], None]] = {
    "gen-data": stage_gen_data,
    "train-encoder": stage_train_encoder,
    "probe": stage_probe,
    "build-kd-data": stage_build_kd_data,
    "train-backbone": stage_train_backbone,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


# -- runner -------------------------------------------------------------------


def marker_path(root: Path, stage: str) -> Path:
    return root / "markers" / f"{stage}.done"


def run_pipeline(cfg: ExperimentConfig, force: bool = False, stages: list[str] | None = None) -> dict[str, str]:
    """Run the selected stages in canonical order; returns ``{stage: "ran" | "skipped"}``."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    selected = [s for s in STAGES if s in (stages or cfg.stages)]
    digest = config_digest(cfg)
    lock = FileLock(str(root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageFailed(f"another run holds the lock on {root}") from None
    status: dict[str, str] = {}
    try:
        (root / "config.yaml").write_text(dump_config(cfg))
        for stage in selected:
            marker = marker_path(root, stage)
            if marker.exists() and not force:
                prev = _read_json(marker)
                if prev["config_digest"] != digest:
                    raise ConfigError(
                        f"{root} holds stage {stage!r} from a different config; use --force or another --out"
                    )
                log.info("skip %s (done)", stage)
                status[stage] = "skipped"
                continue
            for section in STAGE_IO[stage][0]:
                if not (root / section).exists():
                    raise StageFailed(f"stage {stage!r} needs {section!r}; run its producing stage first")
            log.info("run %s", stage)
            ctx = StageContext(stage, root, cfg)
            tmp = root / f"{ctx.output}.tmp"
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir(parents=True)
            try:
                STAGE_FNS[stage](ctx)
            except Exception as err:
                shutil.rmtree(tmp, ignore_errors=True)
                raise StageFailed(f"stage {stage!r} failed: {err}") from err
            final = root / ctx.output
            shutil.rmtree(final, ignore_errors=True)
            tmp.rename(final)
            marker.parent.mkdir(exist_ok=True)
            _write_json(marker, {"stage": stage, "config_digest": digest, "reads": sorted(set(ctx.reads))})
            status[stage] = "ran"
    finally:
        lock.release()
    return status
