"""Sequential repeat-aware module: compare the current behavior sequence with
the sequence that preceded the item's last consumption.

Both sequences run through a shared Bi-GRU (per-direction hidden width d/2 so
the concatenated state stays d-wide) and shared same-padded Conv1D encoders;
alignment, difference/product enhancement, and pooling-projection are
branch-specific, and a learned gate fuses the two branch vectors.

Padding semantics: the GRU carries state through padded steps unchanged,
encoder outputs are zeroed at padded columns, alignment softmaxes and pooling
see only valid positions, and aligned matrices are zeroed at their own padded
columns.  A fully padded side therefore contributes a deterministic
bias-derived constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .optim import ParameterStore, glorot_uniform


@dataclass
class GRUDirection:
    wr: Tensor
    wz: Tensor
    wh: Tensor
    ur: Tensor
    uz: Tensor
    uh: Tensor


@dataclass
class MLPLayer:
    w: Tensor
    b: Tensor


@dataclass
class SRAMParams:
    fwd: GRUDirection
    bwd: GRUDirection
    conv_w: list
    conv_b: list
    conv_widths: tuple
    enhance_b: MLPLayer
    enhance_l: MLPLayer
    project_b: MLPLayer
    project_l: MLPLayer
    gate_w1: Tensor
    gate_w2: Tensor

    @classmethod
    def init(cls, store: ParameterStore, d: int, L: int,
             rng: np.random.Generator, conv_widths=(2, 3)) -> "SRAMParams":
        if d % 2 != 0:
            raise ValueError(f"d must be even for the Bi-GRU split, got {d}")
        if d % len(conv_widths) != 0:
            raise ValueError(f"d={d} not divisible by {len(conv_widths)} conv widths")
        h = d // 2

        def direction(tag):
            return GRUDirection(
                wr=store.add(f"sram.gru.{tag}.wr", glorot_uniform((h, d), rng)),
                wz=store.add(f"sram.gru.{tag}.wz", glorot_uniform((h, d), rng)),
                wh=store.add(f"sram.gru.{tag}.wh", glorot_uniform((h, d), rng)),
                ur=store.add(f"sram.gru.{tag}.ur", glorot_uniform((h, h), rng)),
                uz=store.add(f"sram.gru.{tag}.uz", glorot_uniform((h, h), rng)),
                uh=store.add(f"sram.gru.{tag}.uh", glorot_uniform((h, h), rng)))

        fwd = direction("fwd")
        bwd = direction("bwd")
        c = d // len(conv_widths)
        conv_w, conv_b = [], []
        for width in conv_widths:
            # biases share each layer's fan-based uniform init; nonzero biases keep
            # relu off its kink when a fully padded branch feeds exact zeros
            conv_w.append(store.add(f"sram.conv.k{width}.w", glorot_uniform(
                (c, d, width), rng, fan_in=d * width, fan_out=c * width)))
            conv_b.append(store.add(f"sram.conv.k{width}.b", glorot_uniform(
                (c,), rng, fan_in=d * width, fan_out=c * width)))

        def mlp(name, din, dout):
            return MLPLayer(w=store.add(f"{name}.w", glorot_uniform((dout, din), rng)),
                            b=store.add(f"{name}.b", glorot_uniform(
                                (dout,), rng, fan_in=din, fan_out=dout)))

        proj_in = 2 * d + d * L
        return cls(fwd=fwd, bwd=bwd, conv_w=conv_w, conv_b=conv_b,
                   conv_widths=tuple(conv_widths),
                   enhance_b=mlp("sram.mlp.b.enhance", 4 * d, d),
                   enhance_l=mlp("sram.mlp.l.enhance", 4 * d, d),
                   project_b=mlp("sram.mlp.b.project", proj_in, d),
                   project_l=mlp("sram.mlp.l.project", proj_in, d),
                   gate_w1=store.add("sram.gate.w1", glorot_uniform((d, d), rng)),
                   gate_w2=store.add("sram.gate.w2", glorot_uniform((d, d), rng)))

    @classmethod
    def from_store(cls, store: ParameterStore, conv_widths=(2, 3)) -> "SRAMParams":
        def direction(tag):
            return GRUDirection(*[store.get(f"sram.gru.{tag}.{p}")
                                  for p in ("wr", "wz", "wh", "ur", "uz", "uh")])

        return cls(
            fwd=direction("fwd"), bwd=direction("bwd"),
            conv_w=[store.get(f"sram.conv.k{w}.w") for w in conv_widths],
            conv_b=[store.get(f"sram.conv.k{w}.b") for w in conv_widths],
            conv_widths=tuple(conv_widths),
            enhance_b=MLPLayer(store.get("sram.mlp.b.enhance.w"),
                               store.get("sram.mlp.b.enhance.b")),
            enhance_l=MLPLayer(store.get("sram.mlp.l.enhance.w"),
                               store.get("sram.mlp.l.enhance.b")),
            project_b=MLPLayer(store.get("sram.mlp.b.project.w"),
                               store.get("sram.mlp.b.project.b")),
            project_l=MLPLayer(store.get("sram.mlp.l.project.w"),
                               store.get("sram.mlp.l.project.b")),
            gate_w1=store.get("sram.gate.w1"), gate_w2=store.get("sram.gate.w2"))


def _normalize(E, mask):
    if E.ndim == 2:
        return E.reshape((1,) + E.shape), np.asarray(mask, dtype=bool)[None, :], True
    return E, np.asarray(mask, dtype=bool), False


def _gru_pass(E: Tensor, mask: np.ndarray, p: GRUDirection, order) -> list:
    """Run one GRU direction over the given step order; padded steps keep state."""
    B, L, d = E.shape
    h = p.wr.shape[0]
    state = Tensor(np.zeros((B, h)))
    states = [None] * L
    for j in order:
        x = engine.index_axis(E, 1, j)
        state = engine.gru_step(x, state, mask[:, j:j + 1].astype(np.float64),
                                p.wr, p.wz, p.wh, p.ur, p.uz, p.uh)
        states[j] = state
    return states


def encode_bigru(E: Tensor, pad_mask: np.ndarray, params: SRAMParams) -> Tensor:
    """Bidirectional GRU over an (B, L, d) embedded sequence -> (B, d, L).

    Per-direction states are concatenated per step; output columns at padded
    positions are zeroed.
    """
    E, mask, unbatched = _normalize(E, pad_mask)
    B, L, d = E.shape
    fwd = _gru_pass(E, mask, params.fwd, range(L))
    bwd = _gru_pass(E, mask, params.bwd, range(L - 1, -1, -1))
    cols = [engine.concat([fwd[j], bwd[j]], axis=1).reshape(B, d, 1) for j in range(L)]
    H = engine.concat(cols, axis=2)
    H = H * Tensor(mask[:, None, :].astype(np.float64))
    return engine.index_axis(H, 0, 0) if unbatched else H


def encode_conv1d(H: Tensor, pad_mask: np.ndarray, params: SRAMParams) -> Tensor:
    """Same-padded multi-width Conv1D over (B, d, L), relu, flatten to (B, d*L).

    Output columns at padded positions are zeroed before flattening so the
    flat vector carries no padding artifacts.
    """
    unbatched = H.ndim == 2
    if unbatched:
        H = H.reshape((1,) + H.shape)
        pad_mask = np.asarray(pad_mask, dtype=bool)[None, :]
    B, d, L = H.shape
    outs = [engine.relu(engine.conv1d(H, w, b))
            for w, b in zip(params.conv_w, params.conv_b)]
    bar = engine.concat(outs, axis=1)
    bar = bar * Tensor(np.asarray(pad_mask, dtype=bool)[:, None, :].astype(np.float64))
    flat = bar.reshape(B, d * L)
    return flat.reshape(-1) if unbatched else flat


def align(H_l: Tensor, H_b: Tensor, mask_l: np.ndarray, mask_b: np.ndarray):
    """Soft attention alignment between the two encoded sequences.

    Returns (aligned_l, aligned_b): aligned_b mixes columns of H_l weighted by
    a softmax over the l positions (and vice versa).  A side with no valid
    positions yields zero aligned vectors.
    """
    unbatched = H_l.ndim == 2
    if unbatched:
        H_l = H_l.reshape((1,) + H_l.shape)
        H_b = H_b.reshape((1,) + H_b.shape)
        mask_l = np.asarray(mask_l, dtype=bool)[None, :]
        mask_b = np.asarray(mask_b, dtype=bool)[None, :]
    mask_l = np.asarray(mask_l, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    A = engine.transpose(H_l, (0, 2, 1)) @ H_b                       # (B, L, L)
    w_over_l = engine.masked_softmax(A, mask_l[:, :, None], axis=1)
    tilde_b = (H_l @ w_over_l) * Tensor(mask_b[:, None, :].astype(np.float64))
    w_over_b = engine.masked_softmax(A, mask_b[:, None, :], axis=2)
    tilde_l = (H_b @ engine.transpose(w_over_b, (0, 2, 1))) * Tensor(
        mask_l[:, None, :].astype(np.float64))
    if unbatched:
        return engine.index_axis(tilde_l, 0, 0), engine.index_axis(tilde_b, 0, 0)
    return tilde_l, tilde_b


def enhance(H: Tensor, H_tilde: Tensor, layer: MLPLayer, drop=None) -> Tensor:
    """Column-wise MLP over [H; aligned; difference; product] -> (B, d, L)."""
    unbatched = H.ndim == 2
    if unbatched:
        H = H.reshape((1,) + H.shape)
        H_tilde = H_tilde.reshape((1,) + H_tilde.shape)
    x = engine.concat([H, H_tilde, H - H_tilde, H * H_tilde], axis=1)
    out = engine.relu(layer.w @ x + layer.b.reshape(-1, 1))
    if drop is not None:
        out = drop(out)
    return engine.index_axis(out, 0, 0) if unbatched else out


def pool_project(V: Tensor, pad_mask: np.ndarray, h_flat: Tensor,
                 layer: MLPLayer) -> Tensor:
    """Masked mean/max pooling over columns, concat with the flat conv vector, project."""
    unbatched = V.ndim == 2
    if unbatched:
        V = V.reshape((1,) + V.shape)
        pad_mask = np.asarray(pad_mask, dtype=bool)[None, :]
        h_flat = h_flat.reshape(1, -1)
    mask3 = np.asarray(pad_mask, dtype=bool)[:, None, :]
    v_mean = engine.masked_mean(V, mask3, axis=2)
    v_max = engine.masked_max(V, mask3, axis=2)
    feats = engine.concat([v_mean, h_flat, v_max], axis=1)
    out = engine.relu(feats @ engine.transpose(layer.w, (1, 0)) + layer.b)
    return out.reshape(-1) if unbatched else out


def gated_fuse(o_l: Tensor, o_b: Tensor, params: SRAMParams) -> Tensor:
    """Dimension-wise gate g blends the two branch vectors: g*o_l + (1-g)*o_b."""
    g = engine.sigmoid(o_l @ engine.transpose(params.gate_w1, (1, 0))
                       + o_b @ engine.transpose(params.gate_w2, (1, 0)))
    return o_b + g * (o_l - o_b)


def sram_forward(E_b: Tensor, E_l: Tensor, mask_b: np.ndarray, mask_l: np.ndarray,
                 params: SRAMParams, drop=None) -> Tensor:
    """Full pipeline: encode both sequences, align, enhance, pool, and fuse."""
    unbatched = E_b.ndim == 2
    if unbatched:
        E_b = E_b.reshape((1,) + E_b.shape)
        E_l = E_l.reshape((1,) + E_l.shape)
        mask_b = np.asarray(mask_b, dtype=bool)[None, :]
        mask_l = np.asarray(mask_l, dtype=bool)[None, :]
    H_b = encode_bigru(E_b, mask_b, params)
    H_l = encode_bigru(E_l, mask_l, params)
    flat_b = encode_conv1d(H_b, mask_b, params)
    flat_l = encode_conv1d(H_l, mask_l, params)
    tilde_l, tilde_b = align(H_l, H_b, mask_l, mask_b)
    V_b = enhance(H_b, tilde_b, params.enhance_b, drop)
    V_l = enhance(H_l, tilde_l, params.enhance_l, drop)
    o_b = pool_project(V_b, mask_b, flat_b, params.project_b)
    o_l = pool_project(V_l, mask_l, flat_l, params.project_l)
    out = gated_fuse(o_l, o_b, params)
    return out.reshape(-1) if unbatched else out
