"""Optimization loop: combined forecast loss, Adam, EMA, checkpointing.

The training objective couples a per-frame MAE term on the deterministic
prediction with a noise-prediction term on the residual between truth and
prediction:

    L = sum_i mean|Y_i - Y_hat_i| + lambda * sum_i Diff(Y_i - Y_hat_i)

where Diff denoises the residual stack conditioned on motion features of
Y_hat. Gradients from the diffusion term reach the motion encoder (and through
it the predictor), but by default they are stopped where Y_hat enters the
residual target; ``stop_residual_grad`` toggles that.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import networks, tensor_engine as te
from .checkpoint import write_checkpoint
from .data_pipeline import NormalizationSpec, SatelliteSequence, normalize
from .diffusion import NoiseSchedule, build_schedule, diffusion_loss
from .errors import ConfigError, ContractError, DataError, NumericalError

EMA_PREFIX = "ema/"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 5e-5
    loss_lambda: float = 10.0
    ema_decay: float = 0.99
    max_batches: int = 200
    seed: int = 0
    precision: int = 32
    stop_residual_grad: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.loss_lambda < 0:
            raise ConfigError(f"loss_lambda must be >= 0, got {self.loss_lambda}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.max_batches < 0:
            raise ConfigError(f"max_batches must be >= 0, got {self.max_batches}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: Dict[str, te.Tensor]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adam_step(
    params: Dict[str, te.Tensor],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    A non-finite gradient aborts before any parameter is touched, naming the
    offending parameter.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def ema_update(
    ema: Dict[str, np.ndarray], params: Dict[str, te.Tensor], decay: float
) -> None:
    """In-place exponential moving average: ema <- decay*ema + (1-decay)*p."""
    if not (0.0 <= decay < 1.0):
        raise ConfigError(f"ema decay must lie in [0, 1), got {decay}")
    for name, p in params.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * p.data


# ---------------------------------------------------------------------------
# loss


def combined_loss(
    x_frames: np.ndarray,
    y_frames: np.ndarray,
    predictor: networks.PredictorParams,
    motion: networks.MotionEncoderParams,
    denoiser: networks.DenoiserParams,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    loss_lambda: float,
    stop_residual_grad: bool = True,
) -> Tuple[te.Tensor, float, float]:
    """Return (loss tensor, mae_term, diff_term) for one training sample.

    ``x_frames`` (l, H, W) and ``y_frames`` (k, H, W) are in model units.
    The scalar loss equals mae_term + lambda * diff_term, each term already
    summed across the k forecast frames (per-frame means, then summed).
    With loss_lambda == 0 the diffusion path is skipped entirely.
    """
    y_frames = np.asarray(y_frames)
    k = y_frames.shape[0]
    y_hat = networks.predictor_forward(x_frames, predictor)
    if y_hat.shape != y_frames.shape:
        raise ContractError(
            f"prediction shape {y_hat.shape} does not match target {y_frames.shape}"
        )
    mae_mean = te.mean(te.abs_(te.sub(y_hat, te.Tensor(y_frames))))
    if loss_lambda == 0.0:
        loss = te.scale(mae_mean, float(k))
        return loss, float(k) * mae_mean.item(), 0.0

    residual = te.sub(te.Tensor(y_frames), y_hat)
    if stop_residual_grad:
        residual = residual.detach()
    cond = networks.motion_encode(y_hat, motion)

    def eps_model(x_t: te.Tensor, t: int, c) -> te.Tensor:
        return networks.denoiser_forward(x_t, t, c, denoiser)

    diff_mean = diffusion_loss(residual, eps_model, cond, sched, rng)
    loss = te.scale(te.add(mae_mean, te.scale(diff_mean, float(loss_lambda))), float(k))
    return loss, float(k) * mae_mean.item(), float(k) * diff_mean.item()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    predictor: networks.PredictorParams
    motion: networks.MotionEncoderParams
    denoiser: networks.DenoiserParams
    ema: Dict[str, np.ndarray]
    log: List[Tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.log[0][3] if self.log else float("nan")

    @property
    def final_loss(self) -> float:
        return self.log[-1][3] if self.log else float("nan")


def _merged(pred, mot, den) -> Dict[str, te.Tensor]:
    out: Dict[str, te.Tensor] = {}
    out.update(pred.tensors)
    out.update(mot.tensors)
    out.update(den.tensors)
    return out


def pack_arrays(result: TrainResult) -> Dict[str, np.ndarray]:
    """Flatten a training result into named arrays for checkpointing."""
    arrays: Dict[str, np.ndarray] = {}
    for name, p in _merged(result.predictor, result.motion, result.denoiser).items():
        arrays[name] = p.data
    for name, a in result.ema.items():
        arrays[EMA_PREFIX + name] = a
    return arrays


def unpack_params(
    arrays: Dict[str, np.ndarray], arch: networks.ArchConfig, use_ema: bool = True
) -> Tuple[networks.PredictorParams, networks.MotionEncoderParams, networks.DenoiserParams]:
    """Rebuild the three parameter sets from checkpoint arrays.

    Prefers EMA weights when present and requested; falls back to the raw
    parameters otherwise.
    """
    groups: Dict[str, Dict[str, te.Tensor]] = {"pred.": {}, "mot.": {}, "den.": {}}
    for name, arr in arrays.items():
        key = name
        if key.startswith(EMA_PREFIX):
            continue
        if use_ema and EMA_PREFIX + name in arrays:
            arr = arrays[EMA_PREFIX + name]
        for prefix, bucket in groups.items():
            if key.startswith(prefix):
                bucket[key] = te.Tensor(np.array(arr), requires_grad=True)
                break
        else:
            raise DataError(f"checkpoint array '{name}' has no known parameter prefix")
    for prefix, bucket in groups.items():
        if not bucket:
            raise DataError(f"checkpoint is missing all '{prefix}' parameters")
    return (
        networks.PredictorParams(arch, groups["pred."]),
        networks.MotionEncoderParams(arch, groups["mot."]),
        networks.DenoiserParams(arch, groups["den."]),
    )


def _config_text(arch: networks.ArchConfig, cfg: TrainConfig, sched: NoiseSchedule) -> str:
    lines = []
    for key, val in (
        ("widths", ",".join(str(w) for w in arch.widths)),
        ("unet_widths", ",".join(str(w) for w in arch.unet_widths)),
        ("history_len", arch.history_len),
        ("forecast_len", arch.forecast_len),
        ("time_embed_dim", arch.time_embed_dim),
        ("batch_size", cfg.batch_size),
        ("learning_rate", cfg.learning_rate),
        ("loss_lambda", cfg.loss_lambda),
        ("ema_decay", cfg.ema_decay),
        ("max_batches", cfg.max_batches),
        ("seed", cfg.seed),
        ("precision", cfg.precision),
        ("diffusion_steps", sched.T),
        ("beta_start", repr(float(sched.beta[0]))),
        ("beta_end", repr(float(sched.beta[-1]))),
    ):
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def write_loss_log(path, rows: Sequence[Tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "mae_term", "diff_term", "total"])
        for batch, mae_v, diff_v, total in rows:
            writer.writerow([batch, f"{mae_v:.8f}", f"{diff_v:.8f}", f"{total:.8f}"])


def _dataset_samples(
    dataset: Sequence[SatelliteSequence],
    arch: networks.ArchConfig,
    norm: NormalizationSpec,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    l, k = arch.history_len, arch.forecast_len
    if not dataset:
        raise DataError("training dataset is empty")
    samples = []
    for seq in dataset:
        if seq.length < l + k:
            raise DataError(
                f"sequence of length {seq.length} too short for history {l} + forecast {k}"
            )
        frames = normalize(seq.frames, norm)
        samples.append((frames[:l], frames[l : l + k]))
    return samples


def train(
    dataset: Sequence[SatelliteSequence],
    cfg: TrainConfig,
    arch: networks.ArchConfig,
    sched: Optional[NoiseSchedule] = None,
    norm: Optional[NormalizationSpec] = None,
    out_dir=None,
    checkpoint_every: int = 100,
) -> TrainResult:
    """Run the optimization loop and return final parameters, EMA, and log.

    Deterministic for a fixed (dataset, cfg, arch, schedule): sample order is
    a seeded permutation per epoch and all noise draws come from one seeded
    generator. A non-finite loss aborts with the last periodic checkpoint
    intact on disk. With max_batches == 0 the returned (and checkpointed)
    parameters equal the freshly initialized ones.
    """
    sched = sched if sched is not None else build_schedule(100)
    norm = norm if norm is not None else NormalizationSpec()
    samples = _dataset_samples(dataset, arch, norm)
    dtype = np.float32 if cfg.precision == 32 else np.float64

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    cfg_text = _config_text(arch, cfg, sched)

    with te.using_dtype(dtype):
        pred, mot, den = networks.init_params(arch, cfg.seed)
        merged = _merged(pred, mot, den)
        opt = init_optimizer(merged)
        ema = {name: p.data.copy() for name, p in merged.items()}
        result = TrainResult(pred, mot, den, ema)

        def save(tag: str) -> None:
            if out_path is not None:
                write_checkpoint(out_path / f"checkpoint_{tag}.sckp", pack_arrays(result), cfg_text)

        rng = np.random.default_rng(cfg.seed)
        batch_index = 0
        order: List[int] = []
        while batch_index < cfg.max_batches:
            if len(order) < cfg.batch_size:
                order.extend(int(i) for i in rng.permutation(len(samples)))
            take = order[: cfg.batch_size]
            del order[: cfg.batch_size]

            grad_acc = {name: np.zeros_like(p.data) for name, p in merged.items()}
            mae_sum = diff_sum = total_sum = 0.0
            for idx in take:
                x, y = samples[idx]
                with te.Tape() as tape:
                    loss, mae_v, diff_v = combined_loss(
                        x,
                        y,
                        pred,
                        mot,
                        den,
                        sched,
                        rng,
                        cfg.loss_lambda,
                        cfg.stop_residual_grad,
                    )
                    table = te.backward(loss, tape)
                total = loss.item()
                if not np.isfinite(total):
                    raise NumericalError(
                        f"non-finite loss at batch {batch_index}; last periodic "
                        "checkpoint (if any) is the most recent good state"
                    )
                scale = 1.0 / len(take)
                for name, p in merged.items():
                    grad_acc[name] += scale * table.get(p)
                mae_sum += mae_v * scale
                diff_sum += diff_v * scale
                total_sum += total * scale

            adam_step(merged, grad_acc, opt, cfg.learning_rate)
            ema_update(ema, merged, cfg.ema_decay)
            result.log.append((batch_index, mae_sum, diff_sum, total_sum))
            batch_index += 1
            if checkpoint_every > 0 and batch_index % checkpoint_every == 0:
                save("latest")

        save("final")
        if out_path is not None:
            write_loss_log(out_path / "loss_log.csv", result.log)
    return result


# ---------------------------------------------------------------------------
# segmentation head training (binary cross-entropy against mask labels)


def train_segmenter(
    frames: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    steps: int = 200,
    lr: float = 2e-3,
    widths: Tuple[int, int, int] = (8, 16, 32),
):
    """Fit the learned segmenter to (frame, mask) pairs with Adam on BCE.

    ``frames`` is (n, H, W) in kelvin, ``labels`` (n, H, W) in {0, 1}. Uses
    the logit identity BCE = mean(softplus(logits) - labels * logits).
    """
    from .detection import init_segmenter, segmenter_logits

    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if frames.shape != labels.shape or frames.ndim != 3:
        raise ContractError(
            f"frames {frames.shape} and labels {labels.shape} must both be (n, H, W)"
        )
    params = init_segmenter(seed, widths)
    opt = init_optimizer(params.tensors)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        i = int(rng.integers(0, frames.shape[0]))
        with te.Tape() as tape:
            logits = segmenter_logits(frames[i], params)
            target = te.Tensor(labels[i])
            loss = te.mean(te.sub(te.softplus(logits), te.mul(target, logits)))
            table = te.backward(loss, tape)
        grads = {name: table.get(p) for name, p in params.tensors.items()}
        adam_step(params.tensors, grads, opt, lr)
    return params
