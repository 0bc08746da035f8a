"""Command-line entry point: corpus simulation, training, evaluation, comparison.

Every command resolves its parameters (config file < environment < flags),
serializes the resolved configuration into the run directory before doing any
work, and holds a lock file so only one command touches a run directory at a
time. Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from pathlib import Path

from . import data as data_mod
from .data import ALL_CONDITIONS, ALL_MODES, TrainingMode, build_pool, load_pool, synth_corpus
from .dsp import SpectroConfig
from .errors import TrainingFailure, XtseError
from .metrics import PESQ_CMD_ENV
from .model import BackboneParams, DenoiserParams
from .report import (
    EvalReport,
    IdentityStub,
    compare_reports,
    consistency_gap,
    denoiser_probe,
    evaluate,
    render_comparison,
    render_report,
)
from .training import TrainConfig, default_stages, load_checkpoint, run_training

SEED_ENV = "XTSE_SEED"

PRESETS = {
    "small": {
        "win_ms": 32.0,
        "hop_ms": 8.0,
        "denoiser_channels": [6, 10],
        "denoiser_rnn": 24,
        "backbone_hidden": 64,
        "backbone_blocks": 2,
    },
    "tiny": {
        "win_ms": 16.0,
        "hop_ms": 4.0,
        "denoiser_channels": [4, 6],
        "denoiser_rnn": 10,
        "backbone_hidden": 12,
        "backbone_blocks": 1,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); usage errors are exit 1 here
        raise UsageError(f"{self.prog}: {message}")


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise data_mod.DataError(
            f"run directory {run_dir} is locked by another command (remove {lock} if stale)"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def _resolve(args: argparse.Namespace, file_keys: dict, env_keys: dict, flag_keys: dict) -> dict:
    """Config precedence: defaults < config file < environment < flags."""
    resolved = dict(file_keys)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise data_mod.DataError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        unknown = sorted(set(loaded) - set(file_keys))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        resolved.update(loaded)
    for key, env_name in env_keys.items():
        if env_name in os.environ:
            resolved[key] = type(file_keys[key])(os.environ[env_name]) if file_keys[key] is not None else os.environ[env_name]
    for key, value in flag_keys.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _dump_run_config(run_dir: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, **resolved}
    (run_dir / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _parse_range(text: str) -> tuple[float, float]:
    lo, hi = (float(x) for x in text.split(","))
    return lo, hi


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    defaults = {
        "speakers": 4,
        "utts": 6,
        "duration": 1.0,
        "rate": 8000,
        "triplets": None,
        "enroll_duration": 2.0,
        "sir_range": [-5.0, 5.0],
        "snr_range": [0.0, 15.0],
        "seed": 0,
    }
    flags = {
        "speakers": args.speakers,
        "utts": args.utts,
        "duration": args.duration,
        "rate": args.rate,
        "triplets": args.triplets,
        "enroll_duration": args.enroll_duration,
        "sir_range": list(_parse_range(args.sir_range)) if args.sir_range else None,
        "snr_range": list(_parse_range(args.snr_range)) if args.snr_range else None,
        "seed": args.seed,
    }
    cfg = _resolve(args, defaults, {"seed": SEED_ENV}, flags)
    if cfg["triplets"] is None:
        cfg["triplets"] = cfg["speakers"] * cfg["utts"]

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise data_mod.DataError(f"{out} already exists and is not empty (use --force to overwrite)")
    with run_lock(out):
        _dump_run_config(out, "simulate", cfg)
        corpus = synth_corpus(
            cfg["speakers"], cfg["utts"], cfg["duration"], cfg["rate"], cfg["seed"]
        )
        pool_spec = {
            "n_triplets": cfg["triplets"],
            "seed": cfg["seed"],
            "sir_range": cfg["sir_range"],
            "snr_range": cfg["snr_range"],
            "enroll_duration_s": cfg["enroll_duration"],
        }
        data_mod.save_corpus(out, corpus, pool_spec)
        pool = load_pool(out)
        report = evaluate(
            IdentityStub(), pool, compute_stoi=False, model_id="unprocessed-check", corpus_id=str(out)
        )
        lines = ["# Generation report", "", "Unprocessed SI-SDR per condition:", ""]
        for condition in sorted(report.unprocessed):
            row = report.unprocessed[condition]
            lines.append(f"- {condition}: {row.si_sdr:.2f} dB over {row.n_items} items")
        text = "\n".join(lines) + "\n"
        (out / "generation_report.md").write_text(text)
        print(text, end="")
    print(f"corpus written to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_pieces(cfg: dict, rate: int):
    preset = PRESETS[cfg["preset"]]
    spectro = SpectroConfig(sample_rate=rate, win_ms=preset["win_ms"], hop_ms=preset["hop_ms"])
    denoiser = DenoiserParams(
        channels=tuple(preset["denoiser_channels"]), rnn_hidden=preset["denoiser_rnn"]
    )
    backbone = BackboneParams(
        hidden=preset["backbone_hidden"], n_blocks=preset["backbone_blocks"]
    )
    return spectro, denoiser, backbone


def cmd_train(args) -> int:
    if args.mode == "condition-wise" and not args.condition:
        raise UsageError("--mode condition-wise requires --condition")
    defaults = {
        "mode": "triplec-parallel",
        "condition": None,
        "w": 50.0,
        "batch_size": 4,
        "seed": 0,
        "epochs": [4, 5, 6],
        "lr0": 5e-4,
        "decay_every": 2,
        "preset": "small",
    }
    flags = {
        "mode": args.mode,
        "condition": args.condition,
        "w": args.w,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "epochs": [args.epochs] * 3 if args.epochs is not None else None,
        "lr0": args.lr0,
        "decay_every": None,
        "preset": "tiny" if args.tiny else None,
    }
    cfg = _resolve(args, defaults, {"seed": SEED_ENV}, flags)

    corpus_dir = Path(args.corpus)
    pool = load_pool(corpus_dir)
    rate = pool[0].sample_rate
    mode = TrainingMode(cfg["mode"], cfg["condition"])
    spectro, denoiser, backbone = _model_pieces(cfg, rate)
    train_config = TrainConfig(
        spectro=spectro,
        denoiser=denoiser,
        backbone=backbone,
        stages=default_stages(
            mode,
            w=cfg["w"],
            epochs=tuple(cfg["epochs"]),
            lr0=cfg["lr0"],
            decay_a_every=cfg["decay_every"],
        ),
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    out = Path(args.out)
    with run_lock(out):
        _dump_run_config(out, "train", {**cfg, "corpus": str(corpus_dir)})
        try:
            result = run_training(train_config, pool, out, resume=args.resume)
        except TrainingFailure:
            raise
    print(f"final checkpoint: {result.final_dir}")
    print(f"training log:     {result.log_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.stub):
        raise UsageError("provide exactly one of --checkpoint or --stub")
    defaults = {"conditions": list(ALL_CONDITIONS), "seed": 0, "stoi": True}
    flags = {
        "conditions": args.conditions.split(",") if args.conditions else None,
        "seed": args.seed,
        "stoi": None if args.no_stoi is False else False,
    }
    cfg = _resolve(args, defaults, {"seed": SEED_ENV}, flags)

    corpus_dir = Path(args.corpus)
    pool = load_pool(corpus_dir)
    if args.stub:
        if args.stub != "identity":
            raise UsageError(f"unknown stub {args.stub!r} (only 'identity' is available)")
        model = IdentityStub()
        model_id = "identity-stub"
        probe_model = None
    else:
        ckpt = Path(args.checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise data_mod.DataError(f"checkpoint not found: {ckpt}")
        model, _, _ = load_checkpoint(ckpt)
        model_id = str(ckpt)
        probe_model = model

    resolved = {**cfg, "corpus": str(corpus_dir), "model": model_id}
    out = Path(args.out) if args.out else Path(f"eval_{_config_hash(resolved)}")
    with run_lock(out):
        _dump_run_config(out, "eval", resolved)
        report = evaluate(
            model,
            pool,
            conditions=tuple(cfg["conditions"]),
            compute_stoi=cfg["stoi"],
            pesq_cmd=os.environ.get(PESQ_CMD_ENV),
            model_id=model_id,
            corpus_id=str(corpus_dir),
            metadata={"seed": cfg["seed"], "config_hash": _config_hash(resolved)},
        )
        (out / "report.md").write_text(render_report(report, "markdown"))
        (out / "report.csv").write_text(render_report(report, "csv"))
        (out / "report.json").write_text(report.to_json())
        extras = []
        if probe_model is not None and pool:
            gap = consistency_gap(probe_model, pool)
            probe = denoiser_probe(probe_model, pool, out_dir=out)
            extras = [
                "",
                f"consistency gap (mean L1 between noisy-condition extractions): {gap:.6f}",
                "denoiser probe (mean over pool):",
            ]
            for condition, row in sorted(probe.items()):
                extras.append(
                    f"- {condition}: rel_change {row['rel_change']:.4f}, "
                    f"denoised SI-SDR {row['si_sdr_denoised']:.2f} dB "
                    f"(unprocessed {row['si_sdr_unprocessed']:.2f} dB)"
                )
            (out / "diagnostics.md").write_text("\n".join(extras).strip() + "\n")
    print(render_report(report, "text"), end="")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def cmd_compare(args) -> int:
    reports = []
    for run in (args.run_a, args.run_b):
        path = Path(run) / "report.json"
        if not path.exists():
            raise data_mod.DataError(f"no report.json under {run}")
        reports.append(EvalReport.from_json(path.read_text()))
    delta = compare_reports(reports[0], reports[1])
    text = render_comparison(delta, args.run_a, args.run_b)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="xtse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic three-condition corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--speakers", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--duration", type=float, help="seconds per utterance")
    p.add_argument("--rate", type=int)
    p.add_argument("--triplets", type=int)
    p.add_argument("--enroll-duration", type=float, dest="enroll_duration")
    p.add_argument("--sir-range", dest="sir_range", help="lo,hi in dB")
    p.add_argument("--snr-range", dest="snr_range", help="lo,hi in dB")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the staged training loop")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--mode", choices=ALL_MODES)
    p.add_argument("--condition", choices=ALL_CONDITIONS)
    p.add_argument("--w", type=float, help="consistency weight")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int, help="epochs per stage")
    p.add_argument("--lr0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--tiny", action="store_true", help="CI-sized model and STFT preset")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or stub) on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--stub", help="'identity' evaluates the unprocessed mixtures")
    p.add_argument("--out")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--conditions", help="comma-separated subset of conditions")
    p.add_argument("--no-stoi", action="store_true", dest="no_stoi")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-condition metric deltas of two eval runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3
    except XtseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
