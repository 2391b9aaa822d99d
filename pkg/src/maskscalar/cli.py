"""Command-line entry point.

Exit codes: 0 success, 1 bad usage or invalid config, 2 runtime failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PRESETS, ExperimentConfig, build_config, load_config
from .evaluation import dump_json, evaluate, sweep_alpha, write_sweep_csv
from .features import (ConfigError, NormStats, asr_feature_pipeline, mel_spectrogram, read_wav,
                       utterance_stats, write_matrix_csv, write_wav)
from .gradcheck import gradcheck_matrix
from .model import PREDICTED
from .scenes import MODES, make_scene, sample_scene_config
from .training import read_training_checkpoint, train

log = logging.getLogger("maskscalar")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage problems are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _parse_set(items: list[str]) -> dict:
    """``section.key=value`` pairs; values are JSON, falling back to plain strings."""
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _config(args) -> ExperimentConfig:
    base = load_config(args.config, args.preset)
    extra = _parse_set(args.set)
    if getattr(args, "mode", None):
        extra.setdefault("model", {})["mode"] = args.mode
        extra.setdefault("simulator", {})["mode"] = args.mode
    if not extra:
        return base
    merged = base.to_dict()
    for section, values in extra.items():
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r}")
        merged[section].update(values)
    # the merged dict is complete, so no preset defaults are needed underneath
    return build_config(merged, "desk")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _alpha_arg(text: str) -> str | float:
    if text == PREDICTED:
        return text
    try:
        a = float(text)
    except ValueError:
        raise UsageError(f"alpha must be a number or {PREDICTED!r}, got {text!r}") from None
    if not 0.0 <= a <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {a}")
    return a


def _alpha_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--alphas expects comma-separated numbers, got {text!r}") from None
    if not grid or any(not 0.0 < a <= 1.0 for a in grid):
        raise UsageError("--alphas must be a nonempty list of values in (0, 1]")
    return grid


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    sim = cfg.simulator if args.seed is None else replace(cfg.simulator, seed=args.seed)
    sr = cfg.feature.sample_rate
    index = []
    for i in range(args.count):
        sc = sample_scene_config(sim, i, sr)
        if args.level_db is not None:
            sc = replace(sc, snr_db=args.level_db)
        scene = make_scene(sc, cfg.feature, keep_waveforms=True)
        stem = f"scene_{i:04d}"
        files = {}
        for name, wav in sorted(scene.waveforms.items()):
            fname = f"{stem}_{name}.wav"
            write_wav(out / fname, wav, sr)
            files[name] = {"file": fname, "peak": float(np.max(np.abs(wav))) if wav.size else 0.0,
                           "clipped": bool(wav.size and np.max(np.abs(wav)) > 1.0)}
        manifest = {
            "index": i,
            "scene": sc.to_dict(),
            "files": files,
            "leakage": scene.leakage,
            "cleaner_passthrough": scene.cleaner_passthrough,
            "mel_frames": int(scene.clean_mel.shape[0]),
        }
        _write_json(out / f"{stem}.json", manifest)
        index.append(f"{stem}.json")
    _write_json(out / "manifest.json", {"config": cfg.to_dict(), "scenes": index})
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        cfg = replace(cfg, schedule=replace(cfg.schedule, total_steps=args.steps))
        cfg = build_config(cfg.to_dict())  # re-run validation
    resume = _existing(args.resume, "checkpoint") if args.resume else None
    out = _out_dir(args)
    _write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, out, resume=resume)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained to step {result.step}; {len(result.checkpoints)} checkpoints in {out}")
    if last:
        print("last: " + " ".join(f"{k}={v}" for k, v in last.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    cfg = _config(args) if (args.config or args.set) else None
    out = _out_dir(args)
    summary = evaluate(ckpt, cfg, _alpha_arg(args.alpha), args.beta)
    dump_json(out / "eval.json", summary)
    for level, s in summary["buckets"].items():
        print(f"{level:>7}  l_asr_proxy={s['l_asr_proxy']:.4f}  baseline={s['l_asr_baseline']:.4f}  "
              f"snr_impr={s['snr_impr_db']:.2f}dB  alpha={s['alpha_mean']:.3f}+-{s['alpha_std']:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.oracle == bool(args.checkpoint):
        raise UsageError("pass exactly one of --oracle or --checkpoint")
    cfg = _config(args)
    ckpt = _existing(args.checkpoint, "checkpoint") if args.checkpoint else None
    if args.beta is not None and not 0.0 <= args.beta < 1.0:
        raise UsageError("--beta must be in [0, 1)")
    beta = cfg.model.beta if args.beta is None else args.beta
    out = _out_dir(args)
    rows = sweep_alpha(cfg, _alpha_grid(args.alphas), beta, ckpt, args.level_db,
                       include_predicted=args.include_predicted and ckpt is not None)
    write_sweep_csv(out / "sweep.csv", rows)
    for r in rows:
        print(f"alpha={r.alpha}  distortion={r.distortion:.4g}  residual={r.residual:.4g}  "
              f"l_asr_proxy={r.l_asr_proxy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    if args.full:
        cfg = replace(cfg, gradcheck=replace(cfg.gradcheck, max_per_param=None))
    modes = MODES if args.topology == "both" else (args.topology,)
    variants = {"both": (False, True), "e1": (False,), "e2": (True,)}[args.variant]
    results = gradcheck_matrix(cfg, modes, variants)
    tol = cfg.gradcheck.tolerance
    worst = max(r.report.max_rel_error for r in results)
    for r in results:
        tag = "E2" if r.stop_gradient else "E1"
        rep = r.report
        print(f"{r.mode:<12} {tag}  max_rel_error={rep.max_rel_error:.3e}  worst={rep.worst_param}"
              f"{list(rep.worst_index)}  checked={rep.n_checked}")
        log.info("%s %s took %.1fs", r.mode, tag, r.seconds)
    print(f"max relative error {worst:.3e} (tolerance {tol:g})")
    if args.out:
        out = _out_dir(args)
        records = []
        for r in results:
            d = r.to_dict()
            d.pop("seconds")  # timing would break byte-identical reruns
            records.append(d)
        _write_json(out / "gradcheck.json", {"max_rel_error": worst, "tolerance": tol, "results": records})
    return EXIT_OK if worst < tol else EXIT_RUNTIME


def cmd_features(args) -> int:
    cfg = _config(args)
    wav = _existing(args.wav, "wav file")
    out = _out_dir(args)
    samples, rate = read_wav(wav)
    if samples.ndim > 1:
        samples = samples[:, args.channel]
    if rate != cfg.feature.sample_rate:
        raise UsageError(f"{wav}: sample rate {rate} != configured {cfg.feature.sample_rate}")
    mel = mel_spectrogram(samples, cfg.feature)
    if args.checkpoint:
        stats: NormStats = read_training_checkpoint(_existing(args.checkpoint, "checkpoint")).stats.asr
    else:
        stats = utterance_stats(mel)
    feats = asr_feature_pipeline(mel, stats, cfg.feature)
    write_matrix_csv(out / "mel.csv", mel, prefix="mel")
    write_matrix_csv(out / "asr_features.csv", feats, prefix="f")
    print(f"{mel.shape[0]} frames -> {feats.shape[0]} stacked frames of dim {feats.shape[1]}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--preset", choices=PRESETS, default="desk")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="maskscalar", description="Mask-scalar frontend experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write simulated scenes as WAV + JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int, help="simulator seed (default from config)")
    s.add_argument("--level-db", type=float, help="fix SNR/SER instead of sampling it")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a frontend")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--steps", type=int, help="override schedule.total_steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="per-bucket metrics for a checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--alpha", default=PREDICTED, help="'predicted' or a fixed value in [0, 1]")
    s.add_argument("--beta", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-alpha", parents=[common], help="fixed-alpha sweep (oracle or trained)")
    s.add_argument("--out", required=True)
    s.add_argument("--oracle", action="store_true")
    s.add_argument("--checkpoint")
    s.add_argument("--alphas", help="comma-separated grid (default from config)")
    s.add_argument("--beta", type=float)
    s.add_argument("--level-db", type=float)
    s.add_argument("--include-predicted", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the frontend loss")
    s.add_argument("--out")
    s.add_argument("--topology", choices=("both",) + MODES, default="both")
    s.add_argument("--variant", choices=("both", "e1", "e2"), default="both")
    s.add_argument("--full", action="store_true", help="check every element even if gradcheck.max_per_param is set")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("features", parents=[common], help="Mel and ASR features of a WAV file")
    s.add_argument("--out", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--checkpoint", help="take normalisation stats from a checkpoint")
    s.set_defaults(func=cmd_features)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
