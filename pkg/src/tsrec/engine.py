"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operation set the model needs: arithmetic with
broadcasting, matmul, concat/reshape/transpose/indexing, sigmoid/tanh/relu/log,
masked softmax, embedding lookup, masked mean/max pooling, same-padded 1D/2D
convolution, clipping, and inverted dropout.  Everything runs on numpy arrays
in row-major float64; gradients are accumulated by walking the tape in reverse
topological order.

Non-differentiable points use fixed subgradients: relu'(0) = 0, max-pooling
ties go to the first index, clip passes gradient only strictly inside the
interval.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A float64 array plus an optional backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd -----------------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar; accumulates into .grad of reachable leaves."""
        if self.data.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones(()))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul (rank >= 2 required)", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


# -- shape manipulation -------------------------------------------------------

def concat(parts: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(data, tuple(parts), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), backward)


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """Select a single index along one axis (removes that axis)."""
    data = np.take(a.data, i, axis=axis)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = i
            ga[tuple(sl)] = g
            a._accumulate(ga)

    return _make(data, (a,), backward)


# -- pointwise nonlinearities ---------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return _make(data, (a,), backward)


# -- reductions -----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


# -- masked operations -----------------------------------------------------------

def _bmask(mask: np.ndarray, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax along `axis` over positions where mask is True.

    Masked positions get weight exactly 0.  Slices with no valid position
    yield all zeros (callers rely on this for empty histories).
    """
    m = _bmask(mask, a.shape)
    neg = np.where(m, a.data, -np.inf)
    with np.errstate(invalid="ignore"):
        xmax = neg.max(axis=axis, keepdims=True, initial=-np.inf)
    xmax = np.where(np.isfinite(xmax), xmax, 0.0)
    z = np.where(m, a.data - xmax, 0.0)
    e = np.where(m, np.exp(z), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    data = e / np.where(s == 0.0, 1.0, s)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward)


def masked_mean(a: Tensor, mask: np.ndarray, axis) -> Tensor:
    """Mean over valid positions along `axis`; zero where no position is valid."""
    m = _bmask(mask, a.shape)
    cnt = m.sum(axis=axis, keepdims=True)
    denom = np.where(cnt == 0, 1, cnt).astype(np.float64)
    data = (a.data * m).sum(axis=axis) / np.squeeze(denom, axis=axis)

    def backward(g):
        if a.requires_grad:
            ge = np.expand_dims(g, axis) if not isinstance(axis, tuple) else _expand_axes(g, axis)
            a._accumulate(np.broadcast_to(ge / denom, a.shape) * m)

    return _make(data, (a,), backward)


def _expand_axes(g: np.ndarray, axes: tuple) -> np.ndarray:
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def masked_max(a: Tensor, mask: np.ndarray, axis) -> Tensor:
    """Max over valid positions along `axis`; zero where no position is valid.

    Subgradient routes to the first maximal valid position.
    """
    m = _bmask(mask, a.shape)
    neg = np.where(m, a.data, -np.inf)
    if isinstance(axis, tuple):
        moved = np.moveaxis(neg, axis, tuple(range(-len(axis), 0)))
        flat = moved.reshape(moved.shape[: -len(axis)] + (-1,))
        mx = flat.max(axis=-1)
        arg = flat.argmax(axis=-1)
        any_valid = np.isfinite(mx)
        data = np.where(any_valid, mx, 0.0)

        def backward(g):
            if a.requires_grad:
                gflat = np.zeros_like(flat)
                np.put_along_axis(gflat, arg[..., None], (g * any_valid)[..., None], axis=-1)
                ga = np.moveaxis(gflat.reshape(moved.shape), tuple(range(-len(axis), 0)), axis)
                a._accumulate(ga)

        return _make(data, (a,), backward)

    mx = neg.max(axis=axis)
    arg = neg.argmax(axis=axis)
    any_valid = np.isfinite(mx)
    data = np.where(any_valid, mx, 0.0)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(arg, axis),
                              np.expand_dims(g * any_valid, axis), axis=axis)
            a._accumulate(ga)

    return _make(data, (a,), backward)


# -- gathers ---------------------------------------------------------------------

def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a computed tensor along axis 0 (scatter-add on backward)."""
    idx = np.asarray(idx)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _make(data, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (vocab, d) table; output shape ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return _make(data, (table,), backward)


# -- convolutions --------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1D convolution.

    x: (B, C, L), w: (F, C, K), b: (F,) -> (B, F, L).  For even K the extra
    pad goes on the right, so output position l sees x[l .. l+K-1-pl].
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv1d", x.shape, w.shape)
    B, C, L = x.shape
    F, _, K = w.shape
    pl, pr = (K - 1) // 2, K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)  # (B, C, L, K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L, C * K)
    wmat = w.data.reshape(F, C * K)
    data = (cols @ wmat.T).reshape(B, L, F).transpose(0, 2, 1) + b.data[:, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * L, F)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(F, C, K))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = g2 @ wmat  # (B*L, C*K)
            gxp = np.zeros_like(xp)
            gwin = gcols.reshape(B, L, C, K)
            for k in range(K):
                gxp[:, :, k:k + L] += gwin[:, :, :, k].transpose(0, 2, 1)
            x._accumulate(gxp[:, :, pl:pl + L])

    return _make(data, (x, w, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 2D convolution, channels last.

    x: (B, H, W, C), w: (F, KH, KW, C), b: (F,) -> (B, H, W, F).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    B, H, W_, C = x.shape
    F, KH, KW, _ = w.shape
    ph0, ph1 = (KH - 1) // 2, KH // 2
    pw0, pw1 = (KW - 1) // 2, KW // 2
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(1, 2))
    # (B, H, W, C, KH, KW) -> rows of flattened receptive fields for one gemm
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        B * H * W_, KH * KW * C)
    wmat = w.data.reshape(F, KH * KW * C)
    data = (cols @ wmat.T).reshape(B, H, W_, F) + b.data

    def backward(g):
        g2 = g.reshape(B * H * W_, F)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(F, KH, KW, C))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gwin = (g2 @ wmat).reshape(B, H, W_, KH, KW, C)
            gxp = np.zeros_like(xp)
            for i in range(KH):
                for j in range(KW):
                    gxp[:, i:i + H, j:j + W_, :] += gwin[:, :, :, i, j, :]
            x._accumulate(gxp[:, ph0:ph0 + H, pw0:pw0 + W_, :])

    return _make(data, (x, w, b), backward)


# -- fused recurrent cell -----------------------------------------------------------

def gru_step(x: Tensor, h_prev: Tensor, step_mask: np.ndarray,
             wr: Tensor, wz: Tensor, wh: Tensor,
             ur: Tensor, uz: Tensor, uh: Tensor) -> Tensor:
    """One gated-recurrent step with padding carry-through, as a single tape node.

    x: (B, d) inputs, h_prev: (B, h) previous state, step_mask: (B, 1) floats
    (1 = real token, 0 = padded; padded rows keep h_prev).  Computes
    r = sigm(x Wr' + h Ur'), z = sigm(x Wz' + h Uz'),
    c = tanh(x Wh' + (r*h) Uh'), new state z*h + (1-z)*c.  Fusing the step
    keeps the tape small for the sequence encoders; gradients are hand-derived
    and covered by the finite-difference suite.
    """
    m = np.asarray(step_mask, dtype=np.float64)
    xv, hv = x.data, h_prev.data
    r = expit(xv @ wr.data.T + hv @ ur.data.T)
    z = expit(xv @ wz.data.T + hv @ uz.data.T)
    rh = r * hv
    c = np.tanh(xv @ wh.data.T + rh @ uh.data.T)
    stepped = z * hv + (1.0 - z) * c
    data = m * stepped + (1.0 - m) * hv

    def backward(g):
        gs = g * m
        dz = gs * (hv - c)
        dac = gs * (1.0 - z) * (1.0 - c * c)
        drh = dac @ uh.data
        dar = drh * hv * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        if wh.requires_grad:
            wh._accumulate(dac.T @ xv)
        if uh.requires_grad:
            uh._accumulate(dac.T @ rh)
        if wr.requires_grad:
            wr._accumulate(dar.T @ xv)
        if ur.requires_grad:
            ur._accumulate(dar.T @ hv)
        if wz.requires_grad:
            wz._accumulate(daz.T @ xv)
        if uz.requires_grad:
            uz._accumulate(daz.T @ hv)
        if x.requires_grad:
            x._accumulate(dar @ wr.data + daz @ wz.data + dac @ wh.data)
        if h_prev.requires_grad:
            h_prev._accumulate(g * (1.0 - m) + gs * z + drh * r
                               + dar @ ur.data + daz @ uz.data)

    return _make(data, (x, h_prev, wr, wz, wh, ur, uz, uh), backward)


# -- dropout ----------------------------------------------------------------------

def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _make(a.data * keep, (a,), backward)
