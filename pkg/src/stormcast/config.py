"""Flat key=value run configuration with presets.

One namespace covers data paths, synthetic-data settings, architecture,
training, diffusion schedule, detection mode, and baseline parameters. Every
key has a default; unknown keys are rejected; the effective configuration is
echoed alongside outputs so runs are reconstructable from their artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .data_pipeline import NormalizationSpec, SynthConfig
from .errors import ConfigError
from .networks import ArchConfig
from .trainer import TrainConfig

DEFAULTS: Dict[str, str] = {
    "data_dir": "data",
    "out_dir": "out",
    "seed": "0",
    "precision": "32",
    # synthetic data
    "synth.height": "64",
    "synth.width": "64",
    "synth.n_frames": "24",
    "synth.interval_minutes": "15",
    "synth.count": "10",
    "synth.blob_count_min": "2",
    "synth.blob_count_max": "5",
    "synth.depth_min": "30.0",
    "synth.depth_max": "105.0",
    "synth.velocity_min": "-1.5",
    "synth.velocity_max": "1.5",
    "synth.growth_min": "-0.02",
    "synth.growth_max": "0.02",
    "synth.sigma_min": "3.0",
    "synth.sigma_max": "8.0",
    "synth.background_k": "290.0",
    "synth.deep_fraction": "0.5",
    # normalization band
    "norm.t_min": "180.0",
    "norm.t_max": "320.0",
    # architecture
    "arch.widths": "64,128,192,256",
    "arch.unet_widths": "64,128,192,256",
    "arch.history_len": "8",
    "arch.forecast_len": "16",
    "arch.time_embed_dim": "32",
    # training
    "train.batch_size": "4",
    "train.learning_rate": "5e-5",
    "train.loss_lambda": "10.0",
    "train.ema_decay": "0.99",
    "train.max_batches": "200",
    "train.stop_residual_grad": "true",
    "train.checkpoint_every": "100",
    # diffusion schedule
    "diffusion.steps": "100",
    "diffusion.beta_start": "1e-4",
    "diffusion.beta_end": "0.02",
    "diffusion.ddim_steps": "20",
    # detection
    "detect.mode": "threshold",
    # advection baseline
    "baseline.window": "7",
    "baseline.sigma": "3.0",
    "baseline.max_speed": "10.0",
    # prediction
    "predict.mode": "ddms",
    "predict.ensemble": "1",
}

# The desk preset is the default scale; the paper preset restores the
# full-length diffusion chain and sampler.
PRESETS: Dict[str, Dict[str, str]] = {
    "desk": {},
    "paper": {
        "train.batch_size": "8",
        "diffusion.steps": "1000",
        "diffusion.ddim_steps": "200",
    },
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, str]

    def get_str(self, key: str) -> str:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key '{key}'") from None

    def get_int(self, key: str) -> int:
        raw = self.get_str(key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key '{key}' expects an integer, got '{raw}'") from None

    def get_float(self, key: str) -> float:
        raw = self.get_str(key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key '{key}' expects a number, got '{raw}'") from None

    def get_bool(self, key: str) -> bool:
        raw = self.get_str(key).lower()
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise ConfigError(f"config key '{key}' expects a boolean, got '{raw}'")

    def get_int_tuple(self, key: str) -> Tuple[int, ...]:
        raw = self.get_str(key)
        try:
            return tuple(int(v) for v in raw.split(","))
        except ValueError:
            raise ConfigError(
                f"config key '{key}' expects comma-separated integers, got '{raw}'"
            ) from None

    # -- typed views ------------------------------------------------------

    def synth_config(self, seed: Optional[int] = None) -> SynthConfig:
        return SynthConfig(
            height=self.get_int("synth.height"),
            width=self.get_int("synth.width"),
            n_frames=self.get_int("synth.n_frames"),
            interval_minutes=self.get_int("synth.interval_minutes"),
            blob_count=(self.get_int("synth.blob_count_min"), self.get_int("synth.blob_count_max")),
            depth_range=(self.get_float("synth.depth_min"), self.get_float("synth.depth_max")),
            velocity_range=(
                self.get_float("synth.velocity_min"),
                self.get_float("synth.velocity_max"),
            ),
            growth_range=(self.get_float("synth.growth_min"), self.get_float("synth.growth_max")),
            sigma_range=(self.get_float("synth.sigma_min"), self.get_float("synth.sigma_max")),
            background_k=self.get_float("synth.background_k"),
            deep_fraction=self.get_float("synth.deep_fraction"),
            seed=self.get_int("seed") if seed is None else seed,
        )

    def arch_config(self) -> ArchConfig:
        return ArchConfig(
            widths=self.get_int_tuple("arch.widths"),
            unet_widths=self.get_int_tuple("arch.unet_widths"),
            history_len=self.get_int("arch.history_len"),
            forecast_len=self.get_int("arch.forecast_len"),
            time_embed_dim=self.get_int("arch.time_embed_dim"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.get_int("train.batch_size"),
            learning_rate=self.get_float("train.learning_rate"),
            loss_lambda=self.get_float("train.loss_lambda"),
            ema_decay=self.get_float("train.ema_decay"),
            max_batches=self.get_int("train.max_batches"),
            seed=self.get_int("seed"),
            precision=self.get_int("precision"),
            stop_residual_grad=self.get_bool("train.stop_residual_grad"),
        )

    def norm_spec(self) -> NormalizationSpec:
        return NormalizationSpec(
            t_min=self.get_float("norm.t_min"), t_max=self.get_float("norm.t_max")
        )

    def echo_text(self) -> str:
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values)) + "\n"

    def write_echo(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_effective.txt").write_text(self.echo_text())


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse key=value lines; '#' starts a comment, blanks are skipped."""
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{stripped}'")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(
    path=None,
    preset: str = "desk",
    overrides: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge defaults <- preset <- file <- overrides, rejecting unknown keys."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
    values = dict(DEFAULTS)
    values.update(PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        file_values = parse_config_text(p.read_text(), source=str(p))
        for key in file_values:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}' in {p}")
        values.update(file_values)
    if overrides:
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = str(val)
    return RunConfig(values)
