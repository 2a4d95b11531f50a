"""User-specific temporal representation: target attention over repeat-gap history.

Scores the embedded candidate gap against the user's own past gaps for the
candidate item with scaled dot-product attention, then pools the value-mapped
history by the attention weights.  A row with no valid history (a never-seen
item) produces a zero vector, keeping the repeat signal strictly absent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .optim import ParameterStore, glorot_uniform


@dataclass
class UTRMParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, store: ParameterStore, d: int, rng: np.random.Generator) -> "UTRMParams":
        # query/key maps start near the identity so same-gap attention is
        # diagonal from the first step; random maps would leave the attention
        # uniform (and the gap signal invisible) until deep into training
        eye = np.eye(d)
        return cls(wq=store.add("utrm.wq", eye + glorot_uniform((d, d), rng)),
                   wk=store.add("utrm.wk", eye + glorot_uniform((d, d), rng)),
                   wv=store.add("utrm.wv", glorot_uniform((d, d), rng)))

    @classmethod
    def from_store(cls, store: ParameterStore) -> "UTRMParams":
        return cls(store.get("utrm.wq"), store.get("utrm.wk"), store.get("utrm.wv"))


def utrm_forward(e_t: Tensor, E_h: Tensor, valid_mask: np.ndarray,
                 params: UTRMParams) -> Tensor:
    """Attention-pool the history-gap embeddings against the candidate gap.

    e_t: (B, d) or (d,); E_h: (B, n, d) or (n, d); valid_mask: matching (B, n)
    or (n,) booleans.  Returns (B, d) (or (d,) for unbatched input).
    """
    unbatched = e_t.ndim == 1
    if unbatched:
        e_t = e_t.reshape(1, -1)
        E_h = E_h.reshape((1,) + E_h.shape)
        valid_mask = np.asarray(valid_mask)[None, :]
    B, n, d = E_h.shape

    q = e_t @ engine.transpose(params.wq, (1, 0))              # (B, d)
    K = E_h @ engine.transpose(params.wk, (1, 0))              # (B, n, d)
    V = E_h @ engine.transpose(params.wv, (1, 0))              # (B, n, d)
    sims = engine.scale((K * q.reshape(B, 1, d)).sum(axis=2), 1.0 / np.sqrt(d))
    attn = engine.masked_softmax(sims, valid_mask, axis=1)     # zero rows when no history
    out = (V * attn.reshape(B, n, 1)).sum(axis=1)
    return out.reshape(-1) if unbatched else out
