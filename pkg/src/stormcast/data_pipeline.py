"""Sequence extraction, cropping, normalization, synthetic scenes, and .sseq files.

A dataset is a collection of fixed-interval brightness-temperature sequences
(kelvin). Synthetic scenes replace the satellite archive: cold Gaussian blobs
drift over a warm background, composited by pixel-wise minimum, with per-frame
multiplicative deepening or decay. Sequences with timing gaps are dropped,
never interpolated; interpolation would fabricate convection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError

# Physical plausibility band for 10.8 um brightness temperature, kelvin.
TEMP_BAND = (150.0, 340.0)

# Margin (kelvin) kept between a blob's peak depth and the detection line so
# threshold crossings in synthetic scenes are unambiguous either way.
_THRESHOLD_MARGIN_K = 5.0

_SSEQ_MAGIC = b"SSEQ"
_SSEQ_VERSION = 1
_SSEQ_HEADER = struct.Struct("<4sHIIIH")


@dataclass
class SatelliteSequence:
    """L frames of brightness temperature on a fixed grid at fixed cadence."""

    frames: np.ndarray  # (L, H, W), kelvin
    timestamps: List[int]  # epoch seconds, one per frame
    interval_minutes: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise DataError(f"frames must be (L,H,W), got shape {self.frames.shape}")
        self.timestamps = [int(t) for t in self.timestamps]
        if len(self.timestamps) != self.frames.shape[0]:
            raise DataError(
                f"{len(self.timestamps)} timestamps for {self.frames.shape[0]} frames"
            )
        if self.interval_minutes <= 0:
            raise DataError("interval_minutes must be positive")
        step = self.interval_minutes * 60
        diffs = np.diff(self.timestamps)
        if len(diffs) and not np.all(diffs == step):
            raise DataError("timestamps must increase by exactly the frame interval")
        lo, hi = TEMP_BAND
        if self.frames.size:
            fmin, fmax = float(self.frames.min()), float(self.frames.max())
            if fmin < lo or fmax > hi:
                raise DataError(
                    f"temperatures [{fmin:.1f}, {fmax:.1f}] K leave the plausible band {TEMP_BAND}"
                )

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine kelvin <-> model-unit map; the band covers deep convective tops
    (< 210 K) through warm surface."""

    t_min: float = 180.0
    t_max: float = 320.0

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ContractError(f"t_min {self.t_min} must be below t_max {self.t_max}")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic convective-scene generator settings."""

    height: int = 64
    width: int = 64
    n_frames: int = 24
    interval_minutes: int = 15
    blob_count: Tuple[int, int] = (2, 5)  # inclusive range per scene
    depth_range: Tuple[float, float] = (30.0, 105.0)  # kelvin below background, at peak
    velocity_range: Tuple[float, float] = (-1.5, 1.5)  # px/frame, per component
    growth_range: Tuple[float, float] = (-0.02, 0.02)  # fractional depth change per frame
    sigma_range: Tuple[float, float] = (3.0, 8.0)  # Gaussian radius, px
    background_k: float = 290.0
    deep_fraction: float = 0.5  # fraction of blobs colder than 210 K at peak
    threshold_k: float = 210.0
    seed: int = 0

    def __post_init__(self):
        for name in ("blob_count", "depth_range", "velocity_range", "growth_range", "sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} range ({lo}, {hi}) is empty")
        if self.height < 8 or self.width < 8:
            raise ContractError("grid must be at least 8x8")
        if not 0.0 <= self.deep_fraction <= 1.0:
            raise ContractError("deep_fraction must lie in [0, 1]")
        vmax = max(abs(self.velocity_range[0]), abs(self.velocity_range[1]))
        if vmax * (self.n_frames - 1) > min(self.height, self.width):
            raise ContractError("velocity range lets blobs cross the whole grid; not trackable")
        lo, hi = TEMP_BAND
        if not lo <= self.background_k - self.depth_range[1]:
            raise ContractError("deepest blob would leave the plausible temperature band")
        if not self.background_k <= hi:
            raise ContractError("background temperature leaves the plausible band")


@dataclass(frozen=True)
class Blob:
    """One advected Gaussian cold structure."""

    y: float
    x: float
    vy: float  # px/frame
    vx: float
    sigma: float
    peak_depth: float  # kelvin below background at the deepest frame
    growth: float  # fractional depth change per frame


# ---------------------------------------------------------------------------
# sequence extraction and cropping


def extract_sequences(
    store: Sequence[Tuple[int, np.ndarray]],
    interval_minutes: int,
    length: int,
    stride: int = 1,
) -> List[SatelliteSequence]:
    """Cut every gap-free window of `length` frames at exact cadence.

    `store` is (epoch_seconds, frame) pairs sorted by time. Windows containing
    a missing or off-cadence timestamp are dropped.
    """
    if length < 1 or stride < 1:
        raise ContractError("length and stride must be positive")
    if not store:
        return []
    ts = np.asarray([t for t, _ in store], dtype=np.int64)
    if np.any(np.diff(ts) <= 0):
        raise DataError("frame store must be sorted by strictly increasing time")
    step = interval_minutes * 60
    out = []
    for start in range(0, len(store) - length + 1, stride):
        window = ts[start : start + length]
        if np.all(np.diff(window) == step):
            frames = np.stack([f for _, f in store[start : start + length]])
            out.append(
                SatelliteSequence(frames, window.tolist(), interval_minutes)
            )
    return out


def crop_patches(
    seq: SatelliteSequence,
    size: int,
    mode: str = "grid",
    stride: Optional[int] = None,
    count: int = 1,
    seed: int = 0,
) -> List[SatelliteSequence]:
    """Cut size x size sub-sequences at one offset per patch, all frames aligned.

    grid mode tiles with `stride` (default `size`, non-overlapping); random
    mode draws `count` offsets from `seed`.
    """
    h, w = seq.grid
    if size > min(h, w):
        raise ContractError(f"crop size {size} exceeds frame {h}x{w}")
    if mode == "grid":
        step = size if stride is None else stride
        if step < 1:
            raise ContractError("stride must be positive")
        offsets = [(oy, ox) for oy in range(0, h - size + 1, step) for ox in range(0, w - size + 1, step)]
    elif mode == "random":
        rng = np.random.default_rng(seed)
        offsets = [
            (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
            for _ in range(count)
        ]
    else:
        raise ContractError(f"unknown crop mode '{mode}' (use 'grid' or 'random')")
    return [
        SatelliteSequence(
            seq.frames[:, oy : oy + size, ox : ox + size].copy(),
            seq.timestamps,
            seq.interval_minutes,
        )
        for oy, ox in offsets
    ]


# ---------------------------------------------------------------------------
# normalization


def normalize(frames, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Kelvin -> [-1, 1] model units; out-of-band values clamp to the endpoints.

    Computed in 64-bit so the round trip is exact to well below 1e-9.
    """
    x = frames.frames if isinstance(frames, SatelliteSequence) else frames
    x = np.asarray(x, dtype=np.float64)
    x = np.clip(x, spec.t_min, spec.t_max)
    return 2.0 * (x - spec.t_min) / (spec.t_max - spec.t_min) - 1.0


def denormalize(units, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Model units -> kelvin; inverse of normalize on the clamp band."""
    u = np.asarray(units, dtype=np.float64)
    return (u + 1.0) * 0.5 * (spec.t_max - spec.t_min) + spec.t_min


# ---------------------------------------------------------------------------
# synthetic scenes


def render_blobs(cfg: SynthConfig, blobs: Iterable[Blob], start_epoch: int = 1609459200) -> SatelliteSequence:
    """Deterministically render one sequence from explicit blob parameters.

    Per frame t, each blob sits at (y + t*vy, x + t*vx) with depth
    peak_depth * (1+growth)^(t - t_peak), where t_peak is the frame of
    greatest depth (last frame when growing, first when decaying), so
    `peak_depth` is exactly the deepest value attained. Frames composite by
    pixel-wise minimum against the warm background.
    """
    blobs = list(blobs)
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    frames = np.full((cfg.n_frames, cfg.height, cfg.width), cfg.background_k, dtype=np.float64)
    for t in range(cfg.n_frames):
        for b in blobs:
            factor = 1.0 + b.growth
            t_peak = (cfg.n_frames - 1) if factor >= 1.0 else 0
            depth = b.peak_depth * factor ** (t - t_peak)
            cy, cx = b.y + t * b.vy, b.x + t * b.vx
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob_temp = cfg.background_k - depth * np.exp(-r2 / (2.0 * b.sigma**2))
            np.minimum(frames[t], blob_temp, out=frames[t])
    np.clip(frames, TEMP_BAND[0], TEMP_BAND[1], out=frames)
    timestamps = [start_epoch + t * cfg.interval_minutes * 60 for t in range(cfg.n_frames)]
    return SatelliteSequence(frames.astype(np.float32), timestamps, cfg.interval_minutes)


def synth_generate(cfg: SynthConfig, n_sequences: int) -> List[SatelliteSequence]:
    """Draw blob parameters from cfg's seed and render n_sequences scenes.

    A blob is "deep" with probability cfg.deep_fraction: its peak depth is
    drawn past the detection threshold (plus a margin), so the scene's
    threshold crossings are controlled by configuration, not luck.
    """
    rng = np.random.default_rng(cfg.seed)
    threshold_depth = cfg.background_k - cfg.threshold_k
    deep_lo = max(cfg.depth_range[0], threshold_depth + _THRESHOLD_MARGIN_K)
    deep_hi = max(cfg.depth_range[1], deep_lo)
    shallow_lo = cfg.depth_range[0]
    shallow_hi = min(cfg.depth_range[1], max(threshold_depth - _THRESHOLD_MARGIN_K, shallow_lo))
    margin = 8.0
    sequences = []
    for s in range(n_sequences):
        n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        blobs = []
        for _ in range(n_blobs):
            deep = rng.random() < cfg.deep_fraction
            lo, hi = (deep_lo, deep_hi) if deep else (shallow_lo, shallow_hi)
            blobs.append(
                Blob(
                    y=float(rng.uniform(margin, cfg.height - margin)),
                    x=float(rng.uniform(margin, cfg.width - margin)),
                    vy=float(rng.uniform(*cfg.velocity_range)),
                    vx=float(rng.uniform(*cfg.velocity_range)),
                    sigma=float(rng.uniform(*cfg.sigma_range)),
                    peak_depth=float(rng.uniform(lo, hi)),
                    growth=float(rng.uniform(*cfg.growth_range)),
                )
            )
        start = 1609459200 + s * 86400  # one scene per synthetic day
        sequences.append(render_blobs(cfg, blobs, start_epoch=start))
    return sequences


# ---------------------------------------------------------------------------
# .sseq container (bit-exact, little-endian)


def write_sseq(path, seq: SatelliteSequence) -> None:
    """Header: magic "SSEQ", version u16, L u32, H u32, W u32, interval u16;
    then L i64 epoch-second timestamps; then L*H*W float32 kelvin, row-major."""
    length, (h, w) = seq.length, seq.grid
    header = _SSEQ_HEADER.pack(_SSEQ_MAGIC, _SSEQ_VERSION, length, h, w, seq.interval_minutes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(seq.timestamps, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def read_sseq(path) -> SatelliteSequence:
    with open(path, "rb") as fh:
        raw = fh.read(_SSEQ_HEADER.size)
        if len(raw) != _SSEQ_HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, length, h, w, interval = _SSEQ_HEADER.unpack(raw)
        if magic != _SSEQ_MAGIC:
            raise DataError(f"{path}: not a sequence file (bad magic {magic!r})")
        if version != _SSEQ_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        ts_bytes = fh.read(8 * length)
        frame_bytes = fh.read(4 * length * h * w)
        if len(ts_bytes) != 8 * length or len(frame_bytes) != 4 * length * h * w:
            raise DataError(f"{path}: truncated payload")
        trailing = fh.read(1)
    if trailing:
        raise DataError(f"{path}: trailing bytes after payload")
    timestamps = np.frombuffer(ts_bytes, dtype="<i8").tolist()
    frames = np.frombuffer(frame_bytes, dtype="<f4").reshape(length, h, w).copy()
    return SatelliteSequence(frames, timestamps, interval)


def write_dataset(directory, sequences: Iterable[SatelliteSequence]) -> List[Path]:
    """One .sseq file per sequence, zero-padded names for stable ordering."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        path = directory / f"seq_{i:05d}.sseq"
        write_sseq(path, seq)
        paths.append(path)
    return paths


def read_dataset(directory) -> List[SatelliteSequence]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.sseq"))
    if not paths:
        raise DataError(f"no .sseq files under {directory}")
    return [read_sseq(p) for p in paths]
