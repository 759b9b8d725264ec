"""Periodic encoding of clip indices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TemporalEncoderParams:
    weight: Tensor  # (d, 1)
    bias: Tensor    # (d,)
    eps: float = 1e-8

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, eps: float = 1e-8) -> "TemporalEncoderParams":
        # magnitudes only: a negative slope sends the upsampled maximum under eps
        w = np.abs(rng.uniform(-1.0, 1.0, size=(d, 1))) / np.sqrt(d)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(d), requires_grad=True), eps)

    def tensors(self) -> dict[str, Tensor]:
        return {"time.weight": self.weight, "time.bias": self.bias}


def _column(t) -> Tensor:
    return T.constant(np.asarray(t, dtype=np.float64).reshape(-1, 1))


def upsample_time(t, params: TemporalEncoderParams) -> Tensor:
    """Affine lift of clip indices: ``(B,) -> (B, d)``; a scalar gives ``(d,)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("clip index must be non-negative")
    out = T.matmul(_column(t), T.transpose(params.weight)) + params.bias
    return out if np.ndim(t) else T.reshape(out, (out.shape[-1],))


def periodic_encode(t, t_max, params: TemporalEncoderParams) -> Tensor:
    """sin (even t) or cos (odd t) of ``2*pi*t' / max(T', eps)``, elementwise.

    ``t_max`` is the largest clip index of the clip's own video and may be a
    scalar or one value per clip.
    """
    t_arr = np.asarray(t)
    t_max = np.broadcast_to(np.asarray(t_max), t_arr.shape)
    if np.any(t_max < 1):
        raise ValueError("maximum clip index must be >= 1")
    up = upsample_time(t_arr, params)
    up_max = upsample_time(t_max, params)
    ratio = (2.0 * np.pi) * up / T.clamp_min(up_max, params.eps)
    even = (t_arr.astype(np.int64) % 2 == 0).astype(np.float64)
    if ratio.ndim == 2:
        even = even.reshape(-1, 1)
    return T.sin(ratio) * even + T.cos(ratio) * (1.0 - even)
