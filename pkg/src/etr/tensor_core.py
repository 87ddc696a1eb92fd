"""Dense float64 kernels: softmax, RMS norm and masked multi-head attention.

Tensors are plain ``numpy.ndarray`` objects in float64. Masks are additive:
``0.0`` marks a visible key, ``NEG_LARGE`` a blocked one. A finite sentinel is
used instead of ``-inf`` so the subtract-max step can never produce NaN.
"""

from __future__ import annotations

import numpy as np

NEG_LARGE = -1e9
RMS_EPS = 1e-6


class DegenerateSoftmaxError(ValueError):
    """A softmax row had no visible entry."""

    def __init__(self, msg: str = "degenerate softmax row"):
        super().__init__(msg)


def stable_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DegenerateSoftmaxError()
    if np.all(x <= NEG_LARGE):
        raise DegenerateSoftmaxError()
    z = np.exp(x - x.max())
    return z / z.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def rms_norm(x, gain) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + 1e-6)`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] == 0:
        raise ValueError(f"rms_norm length mismatch: x {x.shape} vs gain {gain.shape}")
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return gain * x * scale


def visible_mask(visible: np.ndarray) -> np.ndarray:
    """Boolean visibility matrix -> additive mask."""
    visible = np.asarray(visible, dtype=bool)
    return np.where(visible, 0.0, NEG_LARGE)


def check_mask(mask: np.ndarray) -> None:
    """Raise unless every entry is 0.0 or NEG_LARGE and no row is fully blocked."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == NEG_LARGE)):
        raise ValueError("mask entries must be 0.0 or NEG_LARGE")
    if mask.shape[1] == 0 or not np.all((mask == 0.0).any(axis=1)):
        raise DegenerateSoftmaxError()


def masked_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray,
    bias: np.ndarray | None = None,
    n_heads: int = 1,
) -> np.ndarray:
    """Multi-head scaled dot-product attention with additive mask and bias.

    Args:
        q: ``(n_q, n_heads * d_head)``.
        k, v: ``(n_k, n_heads * d_head)``.
        mask: ``(n_q, n_k)`` additive mask, shared by all heads.
        bias: ``(n_heads, n_q, n_k)`` or ``(n_q, n_k)`` additive position bias,
            or None.

    Returns:
        ``(n_q, n_heads * d_head)`` with heads concatenated.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n_q, width = q.shape
    n_k = k.shape[0]
    if k.shape != (n_k, width) or v.shape != (n_k, width):
        raise ValueError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if width % n_heads:
        raise ValueError(f"width {width} not divisible by n_heads {n_heads}")
    if mask.shape != (n_q, n_k):
        raise ValueError(f"mask shape {mask.shape} != {(n_q, n_k)}")
    check_mask(mask)
    d_head = width // n_heads

    qh = q.reshape(n_q, n_heads, d_head).transpose(1, 0, 2)
    kh = k.reshape(n_k, n_heads, d_head).transpose(1, 0, 2)
    vh = v.reshape(n_k, n_heads, d_head).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(d_head)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape not in ((n_q, n_k), (n_heads, n_q, n_k)):
            raise ValueError(f"bias shape {bias.shape} incompatible with {(n_heads, n_q, n_k)}")
        logits = logits + bias
    weights = softmax_rows(logits + mask)
    out = weights @ vh
    return out.transpose(1, 0, 2).reshape(n_q, width)
