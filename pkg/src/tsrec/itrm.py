"""Item-specific temporal representation: multi-scale 2D convolution over the
embedded repeat-interval matrix.

Each kernel scale produces a same-padded feature map over the (user row,
interval column) grid; masked mean- and max-pooling collapse every map to a
per-channel vector and a single MLP layer mixes the concatenated scales down
to width d.  Padded cells are zeroed before convolution and excluded from
pooling, so their embedding values can never reach the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .optim import ParameterStore, glorot_uniform

KERNEL_SIZES = ((1, 1), (1, 3), (3, 1))


@dataclass
class ITRMParams:
    conv_w: list
    conv_b: list
    mlp_w: Tensor
    mlp_b: Tensor
    kernel_sizes: tuple = KERNEL_SIZES

    @classmethod
    def init(cls, store: ParameterStore, d: int, channels: int,
             rng: np.random.Generator, kernel_sizes=KERNEL_SIZES) -> "ITRMParams":
        conv_w, conv_b = [], []
        for k, (kh, kw) in enumerate(kernel_sizes, start=1):
            fan_in = kh * kw * d
            fan_out = channels * kh * kw
            conv_w.append(store.add(f"itrm.conv{k}.w", glorot_uniform(
                (channels, kh, kw, d), rng, fan_in=fan_in, fan_out=fan_out)))
            # biases share the layer's fan-based uniform init; a nonzero bias also
            # keeps relu off its kink when an empty branch feeds exact zeros
            conv_b.append(store.add(f"itrm.conv{k}.b", glorot_uniform(
                (channels,), rng, fan_in=fan_in, fan_out=fan_out)))
        width = len(kernel_sizes) * 2 * channels
        mlp_w = store.add("itrm.mlp.w", glorot_uniform((d, width), rng))
        mlp_b = store.add("itrm.mlp.b", glorot_uniform((d,), rng, fan_in=width, fan_out=d))
        return cls(conv_w, conv_b, mlp_w, mlp_b, tuple(kernel_sizes))

    @classmethod
    def from_store(cls, store: ParameterStore, kernel_sizes=KERNEL_SIZES) -> "ITRMParams":
        conv_w = [store.get(f"itrm.conv{k}.w") for k in range(1, len(kernel_sizes) + 1)]
        conv_b = [store.get(f"itrm.conv{k}.b") for k in range(1, len(kernel_sizes) + 1)]
        return cls(conv_w, conv_b, store.get("itrm.mlp.w"), store.get("itrm.mlp.b"),
                   tuple(kernel_sizes))


def itrm_forward(E_P: Tensor, validity_mask: np.ndarray, params: ITRMParams) -> Tensor:
    """Multi-scale convolution and dual pooling over the interval-matrix embedding.

    E_P: (B, m, n, d) or (m, n, d); validity_mask: matching (B, m, n) booleans.
    An all-invalid mask (item without repeat consumers) yields MLP(zeros).
    """
    unbatched = E_P.ndim == 3
    if unbatched:
        E_P = E_P.reshape((1,) + E_P.shape)
        validity_mask = np.asarray(validity_mask)[None]
    mask = np.asarray(validity_mask, dtype=bool)
    x = E_P * Tensor(mask[..., None].astype(np.float64))
    pooled = []
    for w, b in zip(params.conv_w, params.conv_b):
        fmap = engine.conv2d(x, w, b)                              # (B, m, n, F)
        pooled.append(engine.masked_mean(fmap, mask[..., None], axis=(1, 2)))
        pooled.append(engine.masked_max(fmap, mask[..., None], axis=(1, 2)))
    feats = engine.concat(pooled, axis=1)
    out = engine.relu(feats @ engine.transpose(params.mlp_w, (1, 0)) + params.mlp_b)
    return out.reshape(-1) if unbatched else out
