"""Binary convection masks from brightness temperature.

The operational rule is fixed: a pixel is convective iff its temperature is
strictly below 210 K. A small learned 2-D UNet segmenter is provided as a
drop-in alternative, trained against threshold-derived labels; the threshold
rule remains the default for all metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from . import tensor_engine as te
from .errors import ContractError, DataError, DimensionError

CONVECTION_THRESHOLD_K = 210.0

# Fixed affine applied to kelvin before the segmenter so its inputs sit near
# unit scale; part of the model definition, not a tunable.
_SEG_CENTER_K = 250.0
_SEG_SCALE_K = 50.0


@dataclass
class ConvectionMask:
    mask: np.ndarray  # (H, W), values {0, 1}
    source: str  # "threshold" or "learned"

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError("mask must be strictly binary")
        if self.source not in ("threshold", "learned"):
            raise ContractError(f"unknown mask source '{self.source}'")
        self.mask = self.mask.astype(np.uint8)


def threshold_detect(frame: np.ndarray) -> ConvectionMask:
    """Strict rule: 1 iff temperature < 210.0 K.

    Rejects frames that look normalized (entirely within [-1, 1]); feeding
    model units here silently flags everything as convective.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise DimensionError(f"frame must be 2-D, got shape {frame.shape}")
    if frame.size and frame.min() >= -1.0 and frame.max() <= 1.0:
        raise ContractError(
            "frame values lie in [-1, 1]; expected kelvin, got model units"
        )
    return ConvectionMask((frame < CONVECTION_THRESHOLD_K).astype(np.uint8), "threshold")


# ---------------------------------------------------------------------------
# learned segmenter: 3-level 2-D UNet


@dataclass
class SegmenterParams:
    widths: Tuple[int, int, int]
    tensors: Dict[str, te.Tensor]


def init_segmenter(seed: int, widths: Tuple[int, int, int] = (8, 16, 32)) -> SegmenterParams:
    rng = np.random.default_rng(seed)
    tensors: Dict[str, te.Tensor] = {}

    def conv(name, co, ci, k):
        fan_in = ci * k * k
        bound = math.sqrt(6.0 / fan_in)
        tensors[f"{name}.w"] = te.Tensor(
            rng.uniform(-bound, bound, size=(co, ci, k, k)), requires_grad=True
        )
        tensors[f"{name}.b"] = te.Tensor(np.zeros(co), requires_grad=True)

    w0, w1, w2 = widths
    conv("d0.c1", w0, 1, 3)
    conv("d0.c2", w0, w0, 3)
    conv("d0.down", w0, w0, 3)
    conv("d1.c1", w1, w0, 3)
    conv("d1.c2", w1, w1, 3)
    conv("d1.down", w1, w1, 3)
    conv("mid.c1", w2, w1, 3)
    conv("mid.c2", w2, w2, 3)
    tensors["u1.dc.w"] = te.Tensor(
        rng.uniform(-math.sqrt(6.0 / (w1 * 16)), math.sqrt(6.0 / (w1 * 16)), size=(w2, w1, 4, 4)),
        requires_grad=True,
    )
    tensors["u1.dc.b"] = te.Tensor(np.zeros(w1), requires_grad=True)
    conv("u1.c1", w1, 2 * w1, 3)
    tensors["u0.dc.w"] = te.Tensor(
        rng.uniform(-math.sqrt(6.0 / (w0 * 16)), math.sqrt(6.0 / (w0 * 16)), size=(w1, w0, 4, 4)),
        requires_grad=True,
    )
    tensors["u0.dc.b"] = te.Tensor(np.zeros(w0), requires_grad=True)
    conv("u0.c1", w0, 2 * w0, 3)
    conv("head", 1, w0, 1)
    return SegmenterParams(widths, tensors)


def segmenter_logits(frame: np.ndarray, params: SegmenterParams) -> te.Tensor:
    """Pre-sigmoid map of one kelvin frame; differentiable for training."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise DimensionError(f"frame must be 2-D, got shape {frame.shape}")
    if frame.shape[0] % 4 or frame.shape[1] % 4:
        raise DimensionError(
            f"frame size {frame.shape} not divisible by 4 (two downsamplings)"
        )
    p = params.tensors

    def conv(name, x, stride=1, padding=1):
        return te.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)

    x = te.Tensor(((frame - _SEG_CENTER_K) / _SEG_SCALE_K)[None])
    s0 = te.leaky_relu(conv("d0.c2", te.leaky_relu(conv("d0.c1", x))))
    x = te.leaky_relu(conv("d0.down", s0, stride=2))
    s1 = te.leaky_relu(conv("d1.c2", te.leaky_relu(conv("d1.c1", x))))
    x = te.leaky_relu(conv("d1.down", s1, stride=2))
    x = te.leaky_relu(conv("mid.c2", te.leaky_relu(conv("mid.c1", x))))
    x = te.conv_transpose2d(x, p["u1.dc.w"], p["u1.dc.b"], stride=2, padding=1)
    x = te.leaky_relu(conv("u1.c1", te.concat([x, s1], axis=0)))
    x = te.conv_transpose2d(x, p["u0.dc.w"], p["u0.dc.b"], stride=2, padding=1)
    x = te.leaky_relu(conv("u0.c1", te.concat([x, s0], axis=0)))
    return conv("head", x, padding=0)


def unet_segment(frame: np.ndarray, params: SegmenterParams) -> ConvectionMask:
    """Sigmoid of the logits, cut at 0.5 into a binary mask."""
    logits = segmenter_logits(frame, params)
    prob = 1.0 / (1.0 + np.exp(-logits.data[0]))
    return ConvectionMask((prob > 0.5).astype(np.uint8), "learned")


# ---------------------------------------------------------------------------
# PGM export


def write_mask_pgm(path, mask: ConvectionMask) -> None:
    """8-bit binary PGM (P5): 0 = clear, 255 = convective."""
    h, w = mask.mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.mask * np.uint8(255)).tobytes())


def read_mask_pgm(path) -> ConvectionMask:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise DataError(f"{path}: truncated PGM header")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3][: h * w], dtype=np.uint8).reshape(h, w)
    return ConvectionMask((pixels > 127).astype(np.uint8), "threshold")
