"""Command-line pipeline: synth, train, predict, eval, report.

Prediction composes the pieces: the recurrent predictor produces Y_hat from
the last l observations; in ddms mode a DDIM pass conditioned on motion
features of Y_hat reconstructs the residual from seeded Gaussian noise and is
added before denormalization. Outputs are .sseq files (metric grade) plus
optional 8-bit PGM frames for quick viewing.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import networks
from .baseline_advection import estimate_motion, extrapolate, persistence
from .checkpoint import read_checkpoint
from .config import RunConfig, load_config, parse_config_text
from .data_pipeline import (
    NormalizationSpec,
    SatelliteSequence,
    denormalize,
    normalize,
    read_dataset,
    read_sseq,
    synth_generate,
    write_dataset,
    write_sseq,
)
from .detection import threshold_detect, write_mask_pgm
from .diffusion import NoiseSchedule, build_schedule, ddim_sample
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    StormcastError,
)
from .metrics import leadtime_report, write_report_csv
from .trainer import train, unpack_params

PREDICT_MODES = ("ddms", "predictor-only", "advection", "persistence")


def _apply_thread_cap() -> None:
    """STORMCAST_THREADS caps BLAS pools; honored if set before first use."""
    cap = os.environ.get("STORMCAST_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


# ---------------------------------------------------------------------------
# checkpoint loading


def load_model(checkpoint_path) -> Tuple[
    networks.PredictorParams,
    networks.MotionEncoderParams,
    networks.DenoiserParams,
    networks.ArchConfig,
    NoiseSchedule,
]:
    """Rebuild parameters, architecture, and schedule from one checkpoint."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    arrays, cfg_text = read_checkpoint(path)
    meta = parse_config_text(cfg_text, source=str(path))
    try:
        arch = networks.ArchConfig(
            widths=tuple(int(v) for v in meta["widths"].split(",")),
            unet_widths=tuple(int(v) for v in meta["unet_widths"].split(",")),
            history_len=int(meta["history_len"]),
            forecast_len=int(meta["forecast_len"]),
            time_embed_dim=int(meta["time_embed_dim"]),
        )
        sched = build_schedule(
            int(meta["diffusion_steps"]),
            beta_start=float(meta.get("beta_start", "1e-4")),
            beta_end=float(meta.get("beta_end", "0.02")),
        )
    except KeyError as exc:
        raise DataError(f"checkpoint {path} lacks config field {exc}") from None
    pred, mot, den = unpack_params(arrays, arch, use_ema=True)
    return pred, mot, den, arch, sched


# ---------------------------------------------------------------------------
# forecasting


def reconstruct_residual(
    cond: networks.ConditioningFeatures,
    den: networks.DenoiserParams,
    sched: NoiseSchedule,
    ddim_steps: int,
    shape: Tuple[int, int, int],
    rng: np.random.Generator,
    ensemble: int = 1,
) -> np.ndarray:
    """DDIM-reconstruct the residual stack from seeded noise, model units.

    With ensemble > 1 the per-sample reconstructions are averaged.
    """
    if ensemble < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {ensemble}")

    def eps_model(x_t, t, c):
        return networks.denoiser_forward(x_t, t, c, den).data

    acc = np.zeros(shape)
    for _ in range(ensemble):
        x_tt = rng.standard_normal(shape)
        acc += ddim_sample(x_tt, ddim_steps, eps_model, cond, sched)
    return acc / ensemble


def forecast_sequence(
    seq: SatelliteSequence,
    mode: str,
    pred: Optional[networks.PredictorParams] = None,
    mot: Optional[networks.MotionEncoderParams] = None,
    den: Optional[networks.DenoiserParams] = None,
    arch: Optional[networks.ArchConfig] = None,
    sched: Optional[NoiseSchedule] = None,
    ddim_steps: int = 20,
    seed: int = 0,
    ensemble: int = 1,
    norm: NormalizationSpec = NormalizationSpec(),
    forecast_len: Optional[int] = None,
    baseline_window: int = 7,
    baseline_sigma: float = 3.0,
    baseline_max_speed: float = 10.0,
    residual_sampler: Optional[Callable[..., np.ndarray]] = None,
) -> SatelliteSequence:
    """Forecast k frames past the end of ``seq`` in the requested mode.

    Model modes condition on the last ``arch.history_len`` frames; baseline
    modes use up to that many. Model outputs are clamped to the normalization
    band before conversion back to kelvin. ``residual_sampler`` overrides the
    DDIM reconstruction in ddms mode (same call shape as
    ``reconstruct_residual``); used to zero out the diffusion path.
    """
    if mode not in PREDICT_MODES:
        raise ConfigError(f"unknown predict mode '{mode}'; choose from {PREDICT_MODES}")
    h, w = seq.grid

    if mode in ("advection", "persistence"):
        k = forecast_len if forecast_len is not None else (
            arch.forecast_len if arch is not None else 16
        )
        history = seq.frames[-min(seq.length, 8) :].astype(np.float64)
        if mode == "persistence":
            frames = persistence(history[-1], k)
        else:
            field = estimate_motion(
                history,
                window=baseline_window,
                sigma=baseline_sigma,
                max_speed=baseline_max_speed,
            )
            frames = extrapolate(history[-1], field, k)
    else:
        if pred is None or arch is None:
            raise ConfigError(f"mode '{mode}' requires a trained checkpoint")
        l, k = arch.history_len, arch.forecast_len
        if seq.length < l:
            raise DataError(f"need at least {l} history frames, sequence has {seq.length}")
        x = normalize(seq.frames[-l:], norm)
        y_hat = networks.predictor_forward(x, pred).data
        if mode == "ddms":
            if mot is None or den is None or sched is None:
                raise ConfigError("ddms mode requires motion encoder and denoiser weights")
            cond = networks.motion_encode(y_hat, mot)
            sampler = residual_sampler if residual_sampler is not None else reconstruct_residual
            residual = sampler(
                cond, den, sched, ddim_steps, (k, h, w), np.random.default_rng(seed), ensemble
            )
            y_hat = y_hat + residual
        frames = denormalize(np.clip(y_hat, -1.0, 1.0), norm)

    step = seq.interval_minutes * 60
    stamps = [seq.timestamps[-1] + (i + 1) * step for i in range(frames.shape[0])]
    return SatelliteSequence(
        frames.astype(np.float32), stamps, interval_minutes=seq.interval_minutes
    )


# ---------------------------------------------------------------------------
# PGM frame export


def write_frame_pgm(path, frame: np.ndarray, norm: NormalizationSpec) -> None:
    """8-bit grayscale: the normalization band mapped onto [0, 255]."""
    span = norm.t_max - norm.t_min
    scaled = np.clip((np.asarray(frame, dtype=np.float64) - norm.t_min) / span, 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _export_frames(seq: SatelliteSequence, out_dir: Path, stem: str, norm: NormalizationSpec) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(seq.length):
        frame = seq.frames[i]
        write_frame_pgm(out_dir / f"{stem}_f{i:03d}.pgm", frame, norm)
        write_mask_pgm(out_dir / f"{stem}_f{i:03d}_mask.pgm", threshold_detect(frame))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out_dir, n: int, seed: int) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    sequences = synth_generate(cfg.synth_config(seed=seed), n)
    return write_dataset(out, sequences)


def cmd_train(cfg: RunConfig, data_dir, out_dir) -> Path:
    data = read_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    sched = build_schedule(
        cfg.get_int("diffusion.steps"),
        beta_start=cfg.get_float("diffusion.beta_start"),
        beta_end=cfg.get_float("diffusion.beta_end"),
    )
    train(
        data,
        cfg.train_config(),
        cfg.arch_config(),
        sched=sched,
        norm=cfg.norm_spec(),
        out_dir=out,
        checkpoint_every=cfg.get_int("train.checkpoint_every"),
    )
    return out / "checkpoint_final.sckp"


def cmd_predict(
    cfg: RunConfig,
    input_path,
    out_dir,
    mode: str,
    checkpoint_path=None,
    seed: int = 0,
    ensemble: int = 1,
    export_pgm: bool = False,
    holdout: bool = False,
) -> List[Path]:
    """Forecast each input .sseq; with ``holdout`` the trailing k frames are
    withheld from the model and written under out/truth/ for evaluation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    norm = cfg.norm_spec()

    pred = mot = den = arch = sched = None
    if mode in ("ddms", "predictor-only"):
        if checkpoint_path is None:
            raise ConfigError(f"mode '{mode}' requires --checkpoint")
        pred, mot, den, arch, sched = load_model(checkpoint_path)
    k = arch.forecast_len if arch is not None else cfg.get_int("arch.forecast_len")

    in_path = Path(input_path)
    if not in_path.exists():
        raise DataError(f"input not found: {in_path}")
    paths = sorted(in_path.glob("*.sseq")) if in_path.is_dir() else [in_path]
    if not paths:
        raise DataError(f"no .sseq files under {in_path}")

    written: List[Path] = []
    for i, path in enumerate(paths):
        seq = read_sseq(path)
        truth = None
        if holdout:
            if seq.length <= k:
                raise DataError(
                    f"{path}: need more than {k} frames to hold out {k} for truth"
                )
            truth = SatelliteSequence(
                seq.frames[-k:], seq.timestamps[-k:], seq.interval_minutes
            )
            seq = SatelliteSequence(
                seq.frames[:-k], seq.timestamps[:-k], seq.interval_minutes
            )
        forecast = forecast_sequence(
            seq,
            mode,
            pred=pred,
            mot=mot,
            den=den,
            arch=arch,
            sched=sched,
            ddim_steps=cfg.get_int("diffusion.ddim_steps"),
            seed=seed + i,
            ensemble=ensemble,
            norm=norm,
            forecast_len=k,
            baseline_window=cfg.get_int("baseline.window"),
            baseline_sigma=cfg.get_float("baseline.sigma"),
            baseline_max_speed=cfg.get_float("baseline.max_speed"),
        )
        pred_path = out / f"pred_{path.stem}.sseq"
        write_sseq(pred_path, forecast)
        written.append(pred_path)
        if truth is not None:
            truth_dir = out / "truth"
            truth_dir.mkdir(exist_ok=True)
            write_sseq(truth_dir / f"{path.stem}.sseq", truth)
        if export_pgm:
            _export_frames(forecast, out / "frames", f"pred_{path.stem}", norm)
    return written


def _sequence_pairs(pred_dir, truth_dir) -> List[Tuple[np.ndarray, np.ndarray]]:
    pred_path = Path(pred_dir)
    truth_path = Path(truth_dir)
    pred_files = sorted(pred_path.glob("*.sseq")) if pred_path.is_dir() else [pred_path]
    truth_files = sorted(truth_path.glob("*.sseq")) if truth_path.is_dir() else [truth_path]
    if not pred_files:
        raise DataError(f"no .sseq files under {pred_path}")
    if len(pred_files) != len(truth_files):
        raise DataError(
            f"{len(pred_files)} prediction files vs {len(truth_files)} truth files"
        )
    pairs = []
    for pf, tf in zip(pred_files, truth_files):
        p = read_sseq(pf)
        t = read_sseq(tf)
        if p.length != t.length:
            raise DataError(
                f"{pf.name} has {p.length} frames but {tf.name} has {t.length}"
            )
        if p.grid != t.grid:
            raise DataError(f"{pf.name} grid {p.grid} differs from {tf.name} grid {t.grid}")
        pairs.append((p.frames.astype(np.float64), t.frames.astype(np.float64)))
    return pairs


def cmd_eval(cfg: RunConfig, pred_dir, truth_dir, out_path) -> Path:
    if cfg.get_str("detect.mode") != "threshold":
        raise ConfigError(
            "only detect.mode=threshold is wired into the command line; the "
            "learned segmenter is available through the library"
        )
    pairs = _sequence_pairs(pred_dir, truth_dir)
    report = leadtime_report(
        pairs, interval_minutes=cfg.get_int("synth.interval_minutes")
    )
    out = Path(out_path)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out)
    return out


def cmd_report(cfg: RunConfig, input_path, out_dir) -> Path:
    """Export every frame of a .sseq as grayscale + mask PGMs with a summary."""
    in_path = Path(input_path)
    if not in_path.exists():
        raise DataError(f"input not found: {in_path}")
    seq = read_sseq(in_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norm = cfg.norm_spec()
    _export_frames(seq, out, in_path.stem, norm)
    lines = ["frame,min_k,mean_k,max_k,convective_fraction"]
    for i in range(seq.length):
        frame = seq.frames[i]
        frac = float(threshold_detect(frame).mask.mean())
        lines.append(
            f"{i},{frame.min():.2f},{frame.mean():.2f},{frame.max():.2f},{frac:.6f}"
        )
    summary = out / f"{in_path.stem}_summary.csv"
    summary.write_text("\n".join(lines) + "\n")
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", default="desk", help="config preset (desk, paper)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--precision", type=int, choices=(32, 64), help="float width")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stormcast", description="Satellite convection nowcasting pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic .sseq sequences")
    p.add_argument("--n", type=int, default=None, help="number of sequences")
    _add_common(p)

    p = sub.add_parser("train", help="train the forecasting model")
    p.add_argument("--data", default=None, help="directory of training .sseq files")
    p.add_argument("--max-batches", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("predict", help="forecast from observation files")
    p.add_argument("--input", required=True, help=".sseq file or directory")
    p.add_argument("--checkpoint", default=None, help="trained checkpoint (.sckp)")
    p.add_argument("--mode", default=None, choices=PREDICT_MODES)
    p.add_argument("--ensemble", type=int, default=None, help="residual samples to average")
    p.add_argument("--export-pgm", action="store_true", help="also write PGM frames")
    p.add_argument(
        "--holdout",
        action="store_true",
        help="withhold the last k input frames and write them under out/truth/",
    )
    _add_common(p)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--pred", required=True, help="prediction .sseq file or directory")
    p.add_argument("--truth", required=True, help="truth .sseq file or directory")
    _add_common(p)

    p = sub.add_parser("report", help="export frames and a summary for one .sseq")
    p.add_argument("--input", required=True, help=".sseq file")
    _add_common(p)

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.precision is not None:
        overrides["precision"] = str(args.precision)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, preset=args.preset, overrides=overrides)


def main(argv: Optional[List[str]] = None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        out_dir = cfg.get_str("out_dir")
        seed = cfg.get_int("seed")
        if args.command == "synth":
            n = args.n if args.n is not None else cfg.get_int("synth.count")
            if n < 0:
                raise ConfigError(f"--n must be >= 0, got {n}")
            files = cmd_synth(cfg, out_dir, n, seed)
            print(f"wrote {len(files)} sequence files to {out_dir}")
        elif args.command == "train":
            overrides = dict(cfg.values)
            if args.max_batches is not None:
                overrides["train.max_batches"] = str(args.max_batches)
            cfg = RunConfig(overrides)
            data_dir = args.data if args.data is not None else cfg.get_str("data_dir")
            ckpt = cmd_train(cfg, data_dir, out_dir)
            print(f"training complete; checkpoint at {ckpt}")
        elif args.command == "predict":
            mode = args.mode if args.mode is not None else cfg.get_str("predict.mode")
            ensemble = (
                args.ensemble if args.ensemble is not None else cfg.get_int("predict.ensemble")
            )
            files = cmd_predict(
                cfg,
                args.input,
                out_dir,
                mode,
                checkpoint_path=args.checkpoint,
                seed=seed,
                ensemble=ensemble,
                export_pgm=args.export_pgm,
                holdout=args.holdout,
            )
            print(f"wrote {len(files)} forecast files to {out_dir}")
        elif args.command == "eval":
            out = cmd_eval(cfg, args.pred, args.truth, out_dir)
            print(f"report written to {out}")
        elif args.command == "report":
            out = cmd_report(cfg, args.input, out_dir)
            print(f"summary written to {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except StormcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
