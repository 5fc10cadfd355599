"""Optical-flow extrapolation and persistence baselines.

Motion is represented as a dense pixel-displacement field (pixels per frame
step). Estimation is local Lucas-Kanade least squares over a sliding window;
forecasting is backward semi-Lagrangian warping of the most recent frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import ContractError, DimensionError

BOUNDARY_K = 290.0
DEFAULT_MAX_SPEED = 10.0


@dataclass(frozen=True)
class MotionField:
    """Dense displacement field in pixels per step.

    ``u`` is the x (column) component, ``v`` the y (row) component, both of
    shape (H, W). A displacement (u, v) means scene content at (y, x) moves to
    (y + v, x + u) one step later.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape != v.shape:
            raise DimensionError(
                f"motion components must share a 2-D shape, got {u.shape} and {v.shape}"
            )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ContractError("motion field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple:
        return self.u.shape

    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _pair_flow(f1: np.ndarray, f2: np.ndarray, window: int) -> tuple:
    """Lucas-Kanade solve for one frame pair.

    Returns per-pixel (u, v) plus a validity mask where the local structure
    tensor is well conditioned. Gradients are taken on the pair midpoint so
    that reversing the pair exactly negates the solution.
    """
    mid = 0.5 * (f1 + f2)
    gy, gx = np.gradient(mid)
    it = f2 - f1

    def w(a):
        return uniform_filter(a, size=window, mode="nearest")

    sxx = w(gx * gx)
    sxy = w(gx * gy)
    syy = w(gy * gy)
    sxt = w(gx * it)
    syt = w(gy * it)

    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    valid = det > np.maximum(1e-12, 1e-9 * trace * trace)
    safe_det = np.where(valid, det, 1.0)
    u = (-sxt * syy + syt * sxy) / safe_det
    v = (-syt * sxx + sxt * sxy) / safe_det
    return u, v, valid


def estimate_motion(
    frames: np.ndarray,
    window: int = 7,
    sigma: float = 3.0,
    max_speed: float = DEFAULT_MAX_SPEED,
    max_pairs: int = 3,
) -> MotionField:
    """Estimate a displacement field from an observation stack (l, H, W).

    Solves windowed least squares on each of the last min(l - 1, max_pairs)
    consecutive pairs, averages the pair fields, fills ill-conditioned pixels
    with the global mean flow, smooths with a Gaussian, and caps speed at
    ``max_speed`` pixels per step.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError(f"expected (l, H, W) frames, got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise ContractError("motion estimation needs at least two frames")
    if window < 3 or window % 2 == 0:
        raise ContractError(f"window must be odd and >= 3, got {window}")
    if max_speed <= 0:
        raise ContractError(f"max_speed must be positive, got {max_speed}")

    n_pairs = min(frames.shape[0] - 1, max_pairs)
    u_acc = np.zeros(frames.shape[1:], dtype=np.float64)
    v_acc = np.zeros_like(u_acc)
    for i in range(frames.shape[0] - n_pairs, frames.shape[0]):
        u, v, valid = _pair_flow(frames[i - 1], frames[i], window)
        if valid.any():
            mean_u = float(u[valid].mean())
            mean_v = float(v[valid].mean())
        else:
            mean_u = mean_v = 0.0
        u_acc += np.where(valid, u, mean_u)
        v_acc += np.where(valid, v, mean_v)
    u_acc /= n_pairs
    v_acc /= n_pairs

    if sigma > 0:
        u_acc = gaussian_filter(u_acc, sigma=sigma, mode="nearest")
        v_acc = gaussian_filter(v_acc, sigma=sigma, mode="nearest")

    speed = np.hypot(u_acc, v_acc)
    over = speed > max_speed
    if over.any():
        scale = np.where(over, max_speed / np.maximum(speed, 1e-30), 1.0)
        u_acc = u_acc * scale
        v_acc = v_acc * scale
    return MotionField(u=u_acc, v=v_acc)


def extrapolate(
    last: np.ndarray,
    field: MotionField,
    steps: int,
    boundary_k: float = BOUNDARY_K,
) -> np.ndarray:
    """Advect ``last`` forward, returning (steps, H, W).

    Backward semi-Lagrangian: output_s(p) samples the last observation at
    p - s * (u, v)(p) with bilinear interpolation; queries outside the frame
    read the constant ``boundary_k``. A zero field reproduces persistence
    bit for bit.
    """
    last = np.asarray(last, dtype=np.float64)
    if last.ndim != 2:
        raise DimensionError(f"expected a 2-D frame, got shape {last.shape}")
    if field.shape != last.shape:
        raise DimensionError(
            f"field shape {field.shape} does not match frame shape {last.shape}"
        )
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")

    if not (field.u.any() or field.v.any()):
        return persistence(last, steps)

    h, w = last.shape
    padded = np.pad(last, 1, mode="constant", constant_values=float(boundary_k))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    out = np.empty((steps, h, w), dtype=np.float64)
    for s in range(1, steps + 1):
        # Clamp queries to one cell past each edge; the padded ring holds the
        # boundary constant, so anything farther out resolves to it exactly.
        xq = np.clip(xx - s * field.u, -1.0, float(w))
        yq = np.clip(yy - s * field.v, -1.0, float(h))
        x0 = np.floor(xq)
        y0 = np.floor(yq)
        fx = xq - x0
        fy = yq - y0
        x0i = x0.astype(np.intp) + 1
        y0i = y0.astype(np.intp) + 1
        x1i = np.minimum(x0i + 1, w + 1)
        y1i = np.minimum(y0i + 1, h + 1)
        v00 = padded[y0i, x0i]
        v01 = padded[y0i, x1i]
        v10 = padded[y1i, x0i]
        v11 = padded[y1i, x1i]
        top = (1.0 - fx) * v00 + fx * v01
        bot = (1.0 - fx) * v10 + fx * v11
        out[s - 1] = (1.0 - fy) * top + fy * bot
    return out


def persistence(last: np.ndarray, steps: int) -> np.ndarray:
    """Forecast by repeating the most recent frame, shape (steps, H, W)."""
    last = np.asarray(last, dtype=np.float64)
    if last.ndim != 2:
        raise DimensionError(f"expected a 2-D frame, got shape {last.shape}")
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    return np.repeat(last[None, :, :], steps, axis=0)
