"""Command line entry point: ``prosody-slm {run,report,validate,sweep}``.

``--config`` accepts a YAML path or the name of a bundled config
(``default``, ``smoke``).  Exit codes: 0 success, 1 stage failure,
2 invalid configuration.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from importlib import resources
from pathlib import Path

import yaml

from .config import STAGES, ExperimentConfig, dump_config, load_config
from .errors import ConfigError
from .pipeline import StageFailed, run_pipeline
from .report import build_report

BUNDLED = ("default", "smoke")


def resolve_config(name: str) -> Path:
    if name in BUNDLED and not Path(name).exists():
        return Path(str(resources.files("prosody_slm") / "configs" / f"{name}.yaml"))
    return Path(name)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = yaml.safe_load(value)
    return out


def _load(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "stages", None):
        overrides["stages"] = args.stages.split(",")
    overrides.update(extra or {})
    return load_config(resolve_config(args.config), overrides=overrides)


def cmd_run(args) -> int:
    cfg = _load(args)
    status = run_pipeline(cfg, force=args.force)
    for stage, what in status.items():
        print(f"{stage}: {what}")
    print(f"artifacts: {cfg.out_dir}")
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(dump_config(cfg), end="")
    print("config ok", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    root = Path(args.dir)
    text, missing = build_report(root, plots_dir=root / "report" / "plots" if root.exists() else None)
    if root.exists():
        (root / "report").mkdir(exist_ok=True)
        (root / "report" / "report.md").write_text(text)
    print(text)
    return 0


def sweep_points(grid: list[str]) -> list[dict]:
    """Cartesian expansion of ``key=v1,v2,...`` specs."""
    axes = []
    for spec in grid:
        key, sep, values = spec.partition("=")
        if not sep or not values:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {spec!r}")
        axes.append([(key, yaml.safe_load(v)) for v in values.split(",")])
    return [dict(p) for p in itertools.product(*axes)]


def cmd_sweep(args) -> int:
    base = _load(args)
    points = sweep_points(args.grid)
    for i, point in enumerate(points):
        slug = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in point.items())
        out = str(Path(base.out_dir) / f"{i:03d}_{slug}")
        cfg = _load(args, {**point, "out_dir": out})
        print(f"[{i + 1}/{len(points)}] {out}")
        if not args.dry_run:
            run_pipeline(cfg, force=args.force)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prosody-slm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="YAML path or bundled name (default, smoke)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config field")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="artifact directory (overrides out_dir)")

    r = sub.add_parser("run", help="execute the configured stages")
    common(r)
    r.add_argument("--force", action="store_true", help="re-run stages that already completed")
    r.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    common(v, out=False)
    v.set_defaults(fn=cmd_validate)

    rep = sub.add_parser("report", help="summarise an artifact directory")
    rep.add_argument("dir")
    rep.set_defaults(fn=cmd_report)

    s = sub.add_parser("sweep", help="run the cartesian product of --grid values")
    common(s)
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2")
    s.add_argument("--stages")
    s.add_argument("--force", action="store_true")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error:\n{err}", file=sys.stderr)
        return 2
    except StageFailed as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
