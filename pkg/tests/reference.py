"""Independent straight-line reference implementations used as test oracles.

Everything here is deliberately written with explicit loops over plain numpy
arrays and stays independent of the engine/tape code paths it checks.
Parameters are passed as a {name: ndarray} dict snapshot of the store.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def ref_masked_softmax(logits, mask):
    """1D masked softmax; all-invalid input yields all zeros."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(logits)
    if not mask.any():
        return out
    valid = logits[mask]
    e = np.exp(valid - valid.max())
    out[mask] = e / e.sum()
    return out


def loop_conv1d(x, w, b):
    """Same-padded 1D convolution by explicit loops. x: (C, L), w: (F, C, K)."""
    C, L = x.shape
    F, _, K = w.shape
    pl = (K - 1) // 2
    pr = K // 2
    xp = np.zeros((C, L + pl + pr))
    xp[:, pl:pl + L] = x
    y = np.zeros((F, L))
    for f in range(F):
        for l in range(L):
            acc = b[f]
            for c in range(C):
                for k in range(K):
                    acc += w[f, c, k] * xp[c, l + k]
            y[f, l] = acc
    return y


def loop_conv2d(x, w, b):
    """Same-padded channels-last 2D convolution by loops. x: (H, W, C), w: (F, KH, KW, C)."""
    H, W_, C = x.shape
    F, KH, KW, _ = w.shape
    ph = (KH - 1) // 2
    pw = (KW - 1) // 2
    xp = np.zeros((H + KH - 1, W_ + KW - 1, C))
    xp[ph:ph + H, pw:pw + W_, :] = x
    y = np.zeros((H, W_, F))
    for f in range(F):
        for h in range(H):
            for w_ in range(W_):
                acc = b[f]
                for i in range(KH):
                    for j in range(KW):
                        for c in range(C):
                            acc += w[f, i, j, c] * xp[h + i, w_ + j, c]
                y[h, w_, f] = acc
    return y


def ref_utrm(e_t, E_h, valid, wq, wk, wv):
    """Explicit loop over the target-attention equations; (n, d) history."""
    n, d = E_h.shape
    q = wq @ e_t
    sims = np.zeros(n)
    for k in range(n):
        sims[k] = q @ (wk @ E_h[k]) / np.sqrt(d)
    attn = ref_masked_softmax(sims, valid)
    out = np.zeros(d)
    for k in range(n):
        out += attn[k] * (wv @ E_h[k])
    return out


def ref_itrm(E_P, valid, P, kernel_sizes=((1, 1), (1, 3), (3, 1))):
    """Reference multi-scale convolution + dual pooling + MLP. E_P: (m, n, d)."""
    m, n, d = E_P.shape
    valid = np.asarray(valid, dtype=bool)
    x = E_P * valid[:, :, None]
    feats = []
    for k in range(1, len(kernel_sizes) + 1):
        fmap = loop_conv2d(x, P[f"itrm.conv{k}.w"], P[f"itrm.conv{k}.b"])
        F = fmap.shape[2]
        mean = np.zeros(F)
        mx = np.zeros(F)
        cnt = valid.sum()
        for f in range(F):
            vals = [fmap[i, j, f] for i in range(m) for j in range(n) if valid[i, j]]
            if cnt:
                mean[f] = np.sum(vals) / cnt
                mx[f] = np.max(vals)
        feats.append(mean)
        feats.append(mx)
    flat = np.concatenate(feats)
    return np.maximum(P["itrm.mlp.w"] @ flat + P["itrm.mlp.b"], 0.0)


def ref_gru_direction(E, mask, P, tag, order):
    """One GRU direction with state carry-through on padded steps. E: (L, d)."""
    L, d = E.shape
    h = P[f"sram.gru.{tag}.wr"].shape[0]
    wr, wz, wh = (P[f"sram.gru.{tag}.{k}"] for k in ("wr", "wz", "wh"))
    ur, uz, uh = (P[f"sram.gru.{tag}.{k}"] for k in ("ur", "uz", "uh"))
    state = np.zeros(h)
    states = [None] * L
    for j in order:
        r = sigmoid(wr @ E[j] + ur @ state)
        z = sigmoid(wz @ E[j] + uz @ state)
        cand = np.tanh(wh @ E[j] + uh @ (r * state))
        stepped = z * state + (1.0 - z) * cand
        state = stepped if mask[j] else state
        states[j] = state
    return states


def ref_encode_bigru(E, mask, P):
    L, d = E.shape
    fwd = ref_gru_direction(E, mask, P, "fwd", range(L))
    bwd = ref_gru_direction(E, mask, P, "bwd", range(L - 1, -1, -1))
    H = np.zeros((d, L))
    for j in range(L):
        if mask[j]:
            H[:, j] = np.concatenate([fwd[j], bwd[j]])
    return H


def ref_encode_conv1d(H, mask, P, widths=(2, 3)):
    outs = [np.maximum(loop_conv1d(H, P[f"sram.conv.k{w}.w"], P[f"sram.conv.k{w}.b"]), 0.0)
            for w in widths]
    bar = np.concatenate(outs, axis=0)
    bar = bar * np.asarray(mask, dtype=float)[None, :]
    return bar.reshape(-1)


def ref_align(H_l, H_b, mask_l, mask_b):
    d, L = H_l.shape
    A = H_l.T @ H_b
    tilde_b = np.zeros((d, L))
    tilde_l = np.zeros((d, L))
    for k in range(L):
        if mask_b[k]:
            w = ref_masked_softmax(A[:, k], mask_l)
            for j in range(L):
                tilde_b[:, k] += w[j] * H_l[:, j]
    for j in range(L):
        if mask_l[j]:
            w = ref_masked_softmax(A[j, :], mask_b)
            for k in range(L):
                tilde_l[:, j] += w[k] * H_b[:, k]
    return tilde_l, tilde_b


def ref_enhance(H, Ht, w, b):
    d, L = H.shape
    V = np.zeros((d, L))
    for j in range(L):
        x = np.concatenate([H[:, j], Ht[:, j], H[:, j] - Ht[:, j], H[:, j] * Ht[:, j]])
        V[:, j] = np.maximum(w @ x + b, 0.0)
    return V


def ref_pool_project(V, mask, h_flat, w, b):
    d, L = V.shape
    idx = [j for j in range(L) if mask[j]]
    if idx:
        v_mean = V[:, idx].mean(axis=1)
        v_max = V[:, idx].max(axis=1)
    else:
        v_mean = np.zeros(d)
        v_max = np.zeros(d)
    feats = np.concatenate([v_mean, h_flat, v_max])
    return np.maximum(w @ feats + b, 0.0)


def ref_sram(E_b, E_l, mask_b, mask_l, P, widths=(2, 3)):
    H_b = ref_encode_bigru(E_b, mask_b, P)
    H_l = ref_encode_bigru(E_l, mask_l, P)
    flat_b = ref_encode_conv1d(H_b, mask_b, P, widths)
    flat_l = ref_encode_conv1d(H_l, mask_l, P, widths)
    tilde_l, tilde_b = ref_align(H_l, H_b, mask_l, mask_b)
    V_b = ref_enhance(H_b, tilde_b, P["sram.mlp.b.enhance.w"], P["sram.mlp.b.enhance.b"])
    V_l = ref_enhance(H_l, tilde_l, P["sram.mlp.l.enhance.w"], P["sram.mlp.l.enhance.b"])
    o_b = ref_pool_project(V_b, mask_b, flat_b,
                           P["sram.mlp.b.project.w"], P["sram.mlp.b.project.b"])
    o_l = ref_pool_project(V_l, mask_l, flat_l,
                           P["sram.mlp.l.project.w"], P["sram.mlp.l.project.b"])
    g = sigmoid(P["sram.gate.w1"] @ o_l + P["sram.gate.w2"] @ o_b)
    return g * o_l + (1.0 - g) * o_b


def ref_score_row(row, P, cfg):
    """Duplicate straight-line evaluation of the full scoring path for one row.

    row: dict with user, item, target_bin, behavior(+mask), last_repeat(+mask),
    hist_bins(+mask), rtim_bins(+mask) entries as plain arrays/ints.
    """
    d = cfg.d
    e_u = P["emb.user"][row["user"]]
    e_v = P["emb.item"][row["item"]]

    if cfg.use_utrm:
        e_t = P["emb.interval"][row["target_bin"]]
        E_h = P["emb.interval"][row["hist_bins"]]
        o_ut = ref_utrm(e_t, E_h, row["hist_mask"], P["utrm.wq"], P["utrm.wk"],
                        P["utrm.wv"])
    else:
        o_ut = np.zeros(d)
    if cfg.use_itrm:
        E_P = P["emb.interval"][row["rtim_bins"]]
        o_it = ref_itrm(E_P, row["rtim_mask"], P)
    else:
        o_it = np.zeros(d)
    if cfg.use_sram:
        E_b = P["emb.item"][row["behavior"]]
        E_l = P["emb.item"][row["last_repeat"]]
        o_sr = ref_sram(E_b, E_l, row["behavior_mask"], row["last_repeat_mask"], P,
                        cfg.conv1d_widths)
    else:
        o_sr = np.zeros(d)

    fused = np.concatenate([o_ut, o_it, o_sr, e_u])
    h1 = np.maximum(P["fuse.l1.w"] @ fused + P["fuse.l1.b"], 0.0)
    o = np.maximum(P["fuse.l2.w"] @ h1 + P["fuse.l2.b"], 0.0)
    return float(sigmoid(o @ e_v))


def ref_adam_scalar(grad_fn, theta0, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam recurrence used to cross-check the optimizer."""
    theta = float(theta0)
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    return theta


def snapshot(store) -> dict:
    """Plain-array copy of a parameter store for the reference paths."""
    return {name: t.data.copy() for name, t in store.items()}
