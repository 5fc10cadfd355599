"""The three learnable networks: recurrent predictor, motion encoder, denoiser.

The predictor is a ConvGRU encoder-decoder over single-channel frames: four
encoder stages (ResNet block, ConvGRU, stride-2 downsampling conv; the last
stage keeps full depth with no downsampling) and a decoder of three
ResNet + transposed-conv stages whose upsampled features receive the matching
encoder hidden state by addition, finished by a 1x1 conv head. Forecast
frames are produced autoregressively: decode, then feed the frame back
through the encoder.

The motion encoder is a structural copy of the predictor's encoder with its
own weights; its final hidden states form a 4-level conditioning pyramid.

The denoiser is a UNet over the k forecast frames stacked as channels. Each
level concatenates the conditioning pyramid entry at its resolution and adds
a per-level linear projection of a sinusoidal step embedding.

All forwards run on single sequences (no batch axis); batching is the
trainer's loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import tensor_engine as te
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ArchConfig:
    """Shared shape settings for all three networks."""

    widths: Tuple[int, int, int, int] = (64, 128, 192, 256)  # encoder stage channels
    unet_widths: Tuple[int, int, int, int] = (64, 128, 192, 256)
    history_len: int = 8  # frames consumed
    forecast_len: int = 16  # frames produced
    time_embed_dim: int = 32

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.unet_widths) != 4:
            raise ContractError("exactly 4 stage widths are required")
        if any(w < 1 for w in self.widths + self.unet_widths):
            raise ContractError("stage widths must be positive")
        if self.history_len < 1 or self.forecast_len < 1:
            raise ContractError("history and forecast lengths must be positive")
        if self.time_embed_dim % 2:
            raise ContractError("time_embed_dim must be even")


@dataclass
class PredictorParams:
    config: ArchConfig
    tensors: Dict[str, te.Tensor]


@dataclass
class MotionEncoderParams:
    config: ArchConfig
    tensors: Dict[str, te.Tensor]


@dataclass
class DenoiserParams:
    config: ArchConfig
    tensors: Dict[str, te.Tensor]


@dataclass
class ConditioningFeatures:
    """Final-step hidden state of each motion-encoder stage, coarse to fine
    ordering [full, 1/2, 1/4, 1/8] resolution."""

    features: List[te.Tensor]

    def __post_init__(self):
        if len(self.features) != 4:
            raise DimensionError("conditioning pyramid must have 4 levels")

    def detach(self) -> "ConditioningFeatures":
        return ConditioningFeatures([f.detach() for f in self.features])


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    # fan_in = shape[1] * kh * kw; for transposed kernels shape[1] is the
    # output side, mirroring the usual deconv convention.
    fan_in = shape[1] * (shape[2] * shape[3] if len(shape) == 4 else 1)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Builder:
    """Accumulates named parameter tensors with deterministic draw order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: Dict[str, te.Tensor] = {}

    def conv(self, name: str, c_out: int, c_in: int, k: int) -> None:
        self.tensors[f"{name}.w"] = te.Tensor(
            _uniform(self.rng, (c_out, c_in, k, k)), requires_grad=True
        )
        self.tensors[f"{name}.b"] = te.Tensor(np.zeros(c_out), requires_grad=True)

    def deconv(self, name: str, c_from: int, c_to: int, k: int) -> None:
        # conv_transpose2d maps a c_from-channel input through a
        # (c_from, c_to, k, k) kernel; bias has c_to entries.
        self.tensors[f"{name}.w"] = te.Tensor(
            _uniform(self.rng, (c_from, c_to, k, k)), requires_grad=True
        )
        self.tensors[f"{name}.b"] = te.Tensor(np.zeros(c_to), requires_grad=True)


def _build_encoder(b: _Builder, cfg: ArchConfig, prefix: str) -> None:
    c_in = 1
    for i, w in enumerate(cfg.widths):
        stage = f"{prefix}.enc{i}"
        b.conv(f"{stage}.res.c1", w, c_in, 3)
        b.conv(f"{stage}.res.c2", w, w, 3)
        if c_in != w:
            b.conv(f"{stage}.res.proj", w, c_in, 1)
        for gate in ("wz", "wr", "wc"):
            b.conv(f"{stage}.gru.{gate}", w, 2 * w, 3)
        if i < 3:
            b.conv(f"{stage}.down", w, w, 3)
        c_in = w


def _build_decoder(b: _Builder, cfg: ArchConfig, prefix: str) -> None:
    for j in range(3):
        c_from = cfg.widths[3 - j]
        c_to = cfg.widths[2 - j]
        stage = f"{prefix}.dec{j}"
        b.conv(f"{stage}.res.c1", c_from, c_from, 3)
        b.conv(f"{stage}.res.c2", c_from, c_from, 3)
        b.deconv(f"{stage}.up", c_from, c_to, 4)
    b.conv(f"{prefix}.head", 1, cfg.widths[0], 1)


def _build_denoiser(b: _Builder, cfg: ArchConfig, prefix: str) -> None:
    uw = cfg.unet_widths
    k = cfg.forecast_len
    for i in range(4):
        c_in = (k if i == 0 else uw[i - 1]) + cfg.widths[i]
        stage = f"{prefix}.down{i}"
        b.conv(f"{stage}.c1", uw[i], c_in, 3)
        b.conv(f"{stage}.c2", uw[i], uw[i], 3)
        b.conv(f"{stage}.temb", uw[i], cfg.time_embed_dim, 1)
        if i < 3:
            b.conv(f"{stage}.down", uw[i], uw[i], 3)
    for j in range(3):
        c_from = uw[3 - j]
        c_to = uw[2 - j]
        stage = f"{prefix}.up{j}"
        b.deconv(f"{stage}.dc", c_from, c_to, 4)
        b.conv(f"{stage}.c1", c_to, 2 * c_to, 3)  # concat with the skip feature
        b.conv(f"{stage}.c2", c_to, c_to, 3)
        b.conv(f"{stage}.temb", c_to, cfg.time_embed_dim, 1)
    b.conv(f"{prefix}.head", k, uw[0], 1)
    # the head refines an identity estimate (eps_hat = x_t + correction), so
    # start the correction small instead of at full fan-in scale
    b.tensors[f"{prefix}.head.w"].data *= 0.01


def init_params(
    config: ArchConfig, seed: int
) -> Tuple[PredictorParams, MotionEncoderParams, DenoiserParams]:
    """Fan-in-scaled uniform weights, zero biases, one deterministic stream.

    The predictor and motion encoder share structure but draw independently.
    """
    rng = np.random.default_rng(seed)
    b = _Builder(rng)
    _build_encoder(b, config, "pred")
    _build_decoder(b, config, "pred")
    pred = {k: v for k, v in b.tensors.items() if k.startswith("pred.")}
    _build_encoder(b, config, "mot")
    mot = {k: v for k, v in b.tensors.items() if k.startswith("mot.")}
    _build_denoiser(b, config, "den")
    den = {k: v for k, v in b.tensors.items() if k.startswith("den.")}
    return (
        PredictorParams(config, pred),
        MotionEncoderParams(config, mot),
        DenoiserParams(config, den),
    )


def count_parameters(params) -> int:
    return sum(t.size for t in params.tensors.values())


# ---------------------------------------------------------------------------
# building-block forwards


def _conv(p: Dict[str, te.Tensor], name: str, x: te.Tensor, stride: int = 1, padding: int = 1):
    return te.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)


def _resnet_block(p: Dict[str, te.Tensor], name: str, x: te.Tensor) -> te.Tensor:
    y = te.leaky_relu(_conv(p, f"{name}.c1", x))
    y = _conv(p, f"{name}.c2", y)
    if f"{name}.proj.w" in p:
        x = te.conv2d(x, p[f"{name}.proj.w"], p[f"{name}.proj.b"], padding=0)
    return te.leaky_relu(te.add(y, x))


def conv_gru_cell(x: te.Tensor, h: te.Tensor, weights: Dict[str, te.Tensor]) -> te.Tensor:
    """z = sig(conv[x,h]); r = sig(conv[x,h]); cand = tanh(conv[x, r*h]);
    h' = (1-z)*h + z*cand. `weights` holds wz/wr/wc kernels and biases."""
    if x.shape[1:] != h.shape[1:]:
        raise DimensionError(f"input {x.shape} and state {h.shape} are misaligned")
    xh = te.concat([x, h], axis=0)
    z = te.sigmoid(te.conv2d(xh, weights["wz.w"], weights["wz.b"], padding=1))
    r = te.sigmoid(te.conv2d(xh, weights["wr.w"], weights["wr.b"], padding=1))
    gated = te.concat([x, te.mul(r, h)], axis=0)
    cand = te.tanh(te.conv2d(gated, weights["wc.w"], weights["wc.b"], padding=1))
    return te.add(h, te.mul(z, te.sub(cand, h)))


def _gate_weights(p: Dict[str, te.Tensor], stage: str) -> Dict[str, te.Tensor]:
    return {
        f"{g}.{s}": p[f"{stage}.gru.{g}.{s}"] for g in ("wz", "wr", "wc") for s in ("w", "b")
    }


def _zero_hiddens(cfg: ArchConfig, h: int, w: int) -> List[te.Tensor]:
    sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8)]
    return [te.Tensor(np.zeros((cw, sh, sw))) for cw, (sh, sw) in zip(cfg.widths, sizes)]


def _encode_frame(
    p: Dict[str, te.Tensor], prefix: str, frame: te.Tensor, hiddens: List[te.Tensor]
) -> List[te.Tensor]:
    """One pass through the 4 encoder stages; returns the updated hidden list."""
    x = frame
    new = []
    for i in range(4):
        stage = f"{prefix}.enc{i}"
        x = _resnet_block(p, f"{stage}.res", x)
        h = conv_gru_cell(x, hiddens[i], _gate_weights(p, stage))
        new.append(h)
        if i < 3:
            x = te.leaky_relu(_conv(p, f"{stage}.down", h, stride=2))
    return new


def _decode_frame(p: Dict[str, te.Tensor], prefix: str, hiddens: List[te.Tensor]) -> te.Tensor:
    u = hiddens[3]
    for j in range(3):
        stage = f"{prefix}.dec{j}"
        u = _resnet_block(p, f"{stage}.res", u)
        u = te.conv_transpose2d(
            u, p[f"{stage}.up.w"], p[f"{stage}.up.b"], stride=2, padding=1
        )
        u = te.leaky_relu(te.add(u, hiddens[2 - j]))
    return te.conv2d(u, p[f"{prefix}.head.w"], p[f"{prefix}.head.b"], padding=0)


def _check_grid(shape, what: str) -> None:
    if shape[-2] % 8 or shape[-1] % 8:
        raise ContractError(f"{what} spatial size {shape[-2]}x{shape[-1]} not divisible by 8")


def _as_tensor(x) -> te.Tensor:
    return x if isinstance(x, te.Tensor) else te.Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# network forwards


def predictor_forward(X, params: PredictorParams) -> te.Tensor:
    """History (l,H,W) in model units -> forecast (k,H,W).

    Consumes history frame by frame, then rolls k steps feeding each decoded
    frame back through the encoder (the frame after the last decode is not
    re-encoded; nothing reads the state it would produce).
    """
    X = _as_tensor(X)
    if X.ndim != 3 or X.shape[0] < 1:
        raise ContractError(f"history must be (l,H,W) with l >= 1, got {X.shape}")
    _check_grid(X.shape, "history")
    cfg = params.config
    p = params.tensors
    hiddens = _zero_hiddens(cfg, X.shape[1], X.shape[2])
    for i in range(X.shape[0]):
        frame = te.slice_axis(X, i, i + 1, axis=0)
        hiddens = _encode_frame(p, "pred", frame, hiddens)
    outputs = []
    for f in range(cfg.forecast_len):
        y = _decode_frame(p, "pred", hiddens)
        outputs.append(y)
        if f < cfg.forecast_len - 1:
            hiddens = _encode_frame(p, "pred", y, hiddens)
    return te.concat(outputs, axis=0)


def motion_encode(Y_hat, params: MotionEncoderParams) -> ConditioningFeatures:
    """Predicted sequence (k,H,W) -> final hidden state of each stage."""
    Y_hat = _as_tensor(Y_hat)
    if Y_hat.ndim != 3 or Y_hat.shape[0] < 1:
        raise ContractError(f"sequence must be (k,H,W), got {Y_hat.shape}")
    _check_grid(Y_hat.shape, "sequence")
    p = params.tensors
    hiddens = _zero_hiddens(params.config, Y_hat.shape[1], Y_hat.shape[2])
    for i in range(Y_hat.shape[0]):
        frame = te.slice_axis(Y_hat, i, i + 1, axis=0)
        hiddens = _encode_frame(p, "mot", frame, hiddens)
    return ConditioningFeatures(hiddens)


def _time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the step index, shaped (dim, 1, 1)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).reshape(dim, 1, 1)


def denoiser_forward(
    x_t, t: int, cond: ConditioningFeatures, params: DenoiserParams
) -> te.Tensor:
    """Noisy residual stack (k,H,W), step t, conditioning pyramid -> eps_hat.

    Parameterized as eps_hat = x_t + correction: at high noise levels the
    input itself is already most of eps, so the network only has to learn
    the time-dependent deviation.
    """
    x = _as_tensor(x_t)
    cfg = params.config
    p = params.tensors
    if x.ndim != 3:
        raise ContractError(f"denoiser input must be (k,H,W), got {x.shape}")
    _check_grid(x.shape, "denoiser input")
    h, w = x.shape[1], x.shape[2]
    for lvl, f in enumerate(cond.features):
        want = (cfg.widths[lvl], h >> lvl, w >> lvl)
        if f.shape != want:
            raise DimensionError(
                f"conditioning level {lvl} has shape {f.shape}, expected {want}"
            )
    emb = te.Tensor(_time_embedding(t, cfg.time_embed_dim))

    def inject(stage: str, u: te.Tensor) -> te.Tensor:
        temb = te.conv2d(emb, p[f"{stage}.temb.w"], p[f"{stage}.temb.b"], padding=0)
        return te.add(u, temb)

    u = x
    skips = []
    for i in range(4):
        stage = f"den.down{i}"
        u = te.concat([u, cond.features[i]], axis=0)
        u = te.leaky_relu(inject(stage, _conv(p, f"{stage}.c1", u)))
        u = te.leaky_relu(_conv(p, f"{stage}.c2", u))
        skips.append(u)
        if i < 3:
            u = te.leaky_relu(_conv(p, f"{stage}.down", u, stride=2))
    for j in range(3):
        stage = f"den.up{j}"
        u = te.conv_transpose2d(u, p[f"{stage}.dc.w"], p[f"{stage}.dc.b"], stride=2, padding=1)
        u = te.concat([u, skips[2 - j]], axis=0)
        u = te.leaky_relu(inject(stage, _conv(p, f"{stage}.c1", u)))
        u = te.leaky_relu(_conv(p, f"{stage}.c2", u))
    return te.add(x, te.conv2d(u, p["den.head.w"], p["den.head.b"], padding=0))
