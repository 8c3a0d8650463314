"""Command-line entry point: ``uwb-ssr <command> [options]``.

Settings resolve as defaults < ``--config`` file (TOML or JSON, sections
``synth``, ``clutter``, ``model``, ``train``, ``run``) < flags.  Every command
that takes ``--out`` writes the resolved settings to ``run_config.json``
there, which can be fed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (FrameSetFormatError, SynthConfig, generate_dataset, load_dataset, load_frameset,
                   preprocess_dataset, read_header, synth_preprocessed)
from .model import CheckpointError, ModelConfig, load_checkpoint
from .preprocess import ClutterConfig
from .training import CVReport, TrainConfig, evaluate, loso_split, run_loso_cv, train_fold

log = logging.getLogger("uwb_ssr")

GRADCHECK_TOL = 1e-4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    clutter: ClutterConfig = field(default_factory=ClutterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "synth": asdict(self.synth),
            "clutter": asdict(self.clutter),
            "model": self.model.to_dict(),
            "train": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.train).items()},
            "run": {"workers": self.workers},
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


_SECTIONS = {"synth": SynthConfig, "clutter": ClutterConfig, "model": ModelConfig, "train": TrainConfig}


def _read_config_file(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(text)
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        return tomllib.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve_config(doc: dict, seed=None, workers=None) -> RunConfig:
    """Build a :class:`RunConfig` from a nested mapping plus flag overrides."""
    unknown = set(doc) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config section '{sorted(unknown)[0]}'")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = dict(doc.get(name, {}))
        valid = {f.name for f in fields(cls)}
        for key in section:
            if key not in valid:
                raise ConfigError(f"unknown config key '{name}.{key}'")
        if seed is not None and "seed" in valid:
            section["seed"] = seed
        try:
            parts[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value in [{name}]: {exc}") from exc
    run = dict(doc.get("run", {}))
    for key in run:
        if key != "workers":
            raise ConfigError(f"unknown config key 'run.{key}'")
    n_workers = workers if workers is not None else int(run.get("workers", 1))
    if n_workers < 1:
        raise ConfigError("invalid value for 'run.workers': must be >= 1")
    return RunConfig(workers=n_workers, **parts)


def _load_run_config(args) -> RunConfig:
    doc = _read_config_file(Path(args.config)) if args.config else {}
    return resolve_config(doc, seed=args.seed, workers=args.workers)


def _dataset(args, cfg: RunConfig):
    """Preprocessed samples from ``--data``, or a freshly synthesized corpus."""
    if args.data:
        manifest, samples = load_dataset(args.data, cfg.clutter)
        n_classes = len(manifest.words)
        sessions = manifest.sessions
    else:
        samples = synth_preprocessed(cfg.synth, cfg.clutter)
        n_classes = cfg.synth.n_words
        sessions = sorted({s.session for s in samples})
    if cfg.model.n_classes != n_classes:
        cfg.model = replace(cfg.model, n_classes=n_classes)
    return samples, sessions


# -- commands ------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    manifest = generate_dataset(cfg.synth, out, workers=cfg.workers)
    cfg.save(out)
    print(f"wrote {len(manifest.samples)} frame sets "
          f"({len(manifest.words)} words x {len(manifest.sessions)} sessions) to {out}")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    if not args.data:
        raise ConfigError("preprocess needs --data pointing at a raw dataset")
    dst = preprocess_dataset(args.data, args.out, cfg.clutter)
    cfg.save(args.out)
    print(f"preprocessed {len(dst.samples)} frame sets into {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    samples, sessions = _dataset(args, cfg)
    if args.fold is None:
        raise ConfigError("train needs --fold")
    out = Path(args.out)
    cfg.save(out)
    plan = loso_split(sessions, args.fold, cfg.train.seed, cfg.train.n_val_sessions(len(sessions)))

    def progress(h):
        log.info("epoch %d: train %.4f  val %.4f  lr %.2e", h.epochs_run, h.train_loss[-1],
                 h.val_loss[-1], h.lr[-1])

    res = train_fold(plan, samples, cfg.model, cfg.train, args.fold,
                     checkpoint=out / f"fold_{args.fold:02d}.ckpt", progress=progress)
    summary = {"fold": res.fold, "test_session": res.test_session, "accuracy": res.accuracy,
               "best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
               "val_sessions": list(plan.val_sessions), "train_sessions": list(plan.train_sessions)}
    (out / f"fold_{args.fold:02d}.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def cmd_cv(args, cfg: RunConfig) -> int:
    samples, sessions = _dataset(args, cfg)
    out = Path(args.out)
    cfg.save(out)
    report = run_loso_cv(samples, cfg.model, cfg.train, sessions, workers=cfg.workers, out_dir=out)
    print(report.to_table())
    print(f"report: {out / 'cv_report.csv'}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    model, meta = load_checkpoint(args.checkpoint)
    samples, _ = _dataset(args, cfg)
    if args.sessions:
        keep = set(args.sessions.split(","))
        samples = [s for s in samples if s.session in keep]
    elif "test_session" in meta:
        samples = [s for s in samples if s.session == meta["test_session"]]
    if not samples:
        raise ConfigError("no samples selected for evaluation")
    res = evaluate(model, samples)
    print(json.dumps({"accuracy": res.accuracy, "correct": res.correct, "total": res.total}))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import full_model_check, primitive_suite

    seed = args.seed if args.seed is not None else 0
    errors = primitive_suite(seed)
    errors["full_model"] = full_model_check(args.coords, seed, cfg.model)
    for name, err in errors.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = Path(args.file)
    m, n, rate = read_header(path.read_bytes(), path)
    fs = load_frameset(path)
    x = fs.frames
    print(f"file        {path}")
    print(f"frames (M)  {m}")
    print(f"bins (N)    {n}")
    print(f"frame_rate  {rate:.3f} Hz")
    print(f"duration    {m / rate:.3f} s" if rate > 0 else "duration    n/a")
    print(f"amplitude   min {x.min():.6g}  max {x.max():.6g}  mean {x.mean():.6g}  std {x.std():.6g}")
    print(f"row means   max |.| {np.abs(x.mean(axis=1)).max():.3g}")
    return 0


COMMANDS = {
    "generate": cmd_generate, "preprocess": cmd_preprocess, "train": cmd_train, "cv": cmd_cv,
    "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--workers", type=int, help="parallel workers for generation / CV folds")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uwb-ssr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic raw dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="raw dataset -> network-ready dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train and test one LOSO fold")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cv", parents=[common], help="full leave-one-session-out run")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--sessions", help="comma-separated session ids (default: checkpoint's test session)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--coords", type=int, default=1000, help="sampled model coordinates")

    p = sub.add_parser("inspect", parents=[common], help="header and statistics of a UWBF file")
    p.add_argument("file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"uwb-ssr: config error: {exc}", file=sys.stderr)
        return 1
    except (FrameSetFormatError, CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"uwb-ssr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
