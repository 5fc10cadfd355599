"""Shared oracles for the test suite.

Everything here is intentionally slow and literal: nested loops and central
finite differences, written independently of the library's vectorized paths
so the two can disagree.
"""

import numpy as np

from stormcast import tensor_engine as te


def conv2d_naive(x, kernel, bias=None, stride=1, padding=1):
    """Direct six-nested-loop cross-correlation over (N,C,H,W) arrays."""
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = kernel.shape
    assert ci == ci_k
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * kernel[o, c, u, v]
                    out[b, o, i, j] = acc
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv_transpose2d_naive(x, kernel, bias=None, stride=1, padding=0):
    """Scatter-based reference for the conv2d adjoint; kernel (C_out,C_in,kH,kW)."""
    n, co, h, w = x.shape
    co_k, ci, kh, kw = kernel.shape
    assert co == co_k
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    full = np.zeros((n, ci, hp, wp), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(h):
                for j in range(w):
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                full[b, c, i * stride + u, j * stride + v] += (
                                    x[b, o, i, j] * kernel[o, c, u, v]
                                )
    out = full[:, :, padding : hp - padding, padding : wp - padding]
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def gradcheck(fn, tensors, eps=1e-4, rel_tol=1e-4):
    """Compare backward() against central finite differences.

    ``fn`` maps the given tensors to a scalar Tensor; every tensor marked
    requires_grad is perturbed element by element. Returns the worst relative
    error seen, asserting it stays below ``rel_tol``.
    """
    with te.Tape() as tape:
        loss = fn(*tensors)
    table = te.backward(loss, tape)

    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = table[t]
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            f_plus = fn(*tensors).item()
            flat[idx] = keep - eps
            f_minus = fn(*tensors).item()
            flat[idx] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = analytic.reshape(-1)[idx]
            rel = abs(numeric - ana) / max(abs(numeric) + abs(ana), 1e-6)
            worst = max(worst, rel)
    assert worst < rel_tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def spot_gradcheck(fn, tensors, rng, per_tensor=3, eps=1e-4, rel_tol=1e-4):
    """gradcheck against randomly chosen elements only, for larger models."""
    with te.Tape() as tape:
        loss = fn()
    table = te.backward(loss, tape)

    worst = 0.0
    for t in tensors:
        analytic = table[t].reshape(-1)
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            f_plus = fn().item()
            flat[idx] = keep - eps
            f_minus = fn().item()
            flat[idx] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(numeric - analytic[idx]) / max(abs(numeric) + abs(analytic[idx]), 1e-6)
            worst = max(worst, rel)
    assert worst < rel_tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst
