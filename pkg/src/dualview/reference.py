"""Slow, loop-based implementations used as independent oracles.

Nothing here shares code with the vectorized paths: crops are rebuilt from
the pixel index sets, attention matrices are filled entry by entry, and
products are summed in plain Python floats.
"""
import math

import numpy as np


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i, j] = acc
    return out


def global_index_set(img_w, img_h, n_w, n_h, i, j):
    """Pixel coordinates of global sub-image ``(i, j)``, keyed by ``(u, v)``.

    Enumerates ``x = j + m*n_w``, ``y = i + n*n_h`` for
    ``0 <= m < img_w // n_w`` and ``0 <= n < img_h // n_h``.
    """
    return {(m, n): (j + m * n_w, i + n * n_h)
            for m in range(img_w // n_w) for n in range(img_h // n_h)}


def naive_local_crop(img, n_w, n_h):
    H, W = img.shape[:2]
    h, w = H // n_h, W // n_w
    items = []
    for idx in range(n_w * n_h):
        row, col = idx // n_w, idx % n_w
        sub = np.empty((h, w) + img.shape[2:])
        for v in range(h):
            for u in range(w):
                sub[v, u] = img[row * h + v, col * w + u]
        items.append(sub)
    return items


def naive_global_crop(img, n_w, n_h):
    H, W = img.shape[:2]
    items = []
    for i in range(n_h):
        for j in range(n_w):
            sub = np.empty((H // n_h, W // n_w) + img.shape[2:])
            for (u, v), (x, y) in global_index_set(W, H, n_w, n_h, i, j).items():
                sub[v, u] = img[y, x]
            items.append(sub)
    return items


def naive_local_place(items, n_w, n_h):
    h, w = items[0].shape[:2]
    out = np.empty((n_h * h, n_w * w) + items[0].shape[2:])
    for idx, sub in enumerate(items):
        row, col = idx // n_w, idx % n_w
        for v in range(h):
            for u in range(w):
                out[row * h + v, col * w + u] = sub[v, u]
    return out


def naive_global_place(items, n_w, n_h):
    h, w = items[0].shape[:2]
    out = np.empty((n_h * h, n_w * w) + items[0].shape[2:])
    for idx, sub in enumerate(items):
        i, j = idx // n_w, idx % n_w
        for (u, v), (x, y) in global_index_set(n_w * w, n_h * h, n_w, n_h, i, j).items():
            out[y, x] = sub[v, u]
    return out


def naive_cross_attention(query, context, wq, wk, wv):
    """Single-head cross-attention with every logit and weight computed separately.

    ``query`` and ``context`` are (tokens, d). Returns (output, attention).
    """
    t_q, d = query.shape
    t_c = context.shape[0]
    Q = naive_matmul(query, wq)
    K = naive_matmul(context, wk)
    V = naive_matmul(context, wv)
    A = np.zeros((t_q, t_c))
    for r in range(t_q):
        logits = []
        for c in range(t_c):
            s = 0.0
            for e in range(d):
                s += Q[r, e] * K[c, e]
            logits.append(s / math.sqrt(d))
        top = max(logits)
        w = [math.exp(z - top) for z in logits]
        total = sum(w)
        for c in range(t_c):
            A[r, c] = w[c] / total
    out = np.zeros((t_q, V.shape[1]))
    for r in range(t_q):
        for e in range(V.shape[1]):
            s = 0.0
            for c in range(t_c):
                s += A[r, c] * V[c, e]
            out[r, e] = s
    return out, A


def _naive_enhance(queries_grid, context_grid, n_w, n_h, wq, wk, wv, crop, place):
    q_items = crop(queries_grid, n_w, n_h)
    c_items = crop(context_grid, n_w, n_h)
    outs, maps = [], []
    for q, c in zip(q_items, c_items):
        h, w, d = q.shape
        o, a = naive_cross_attention(q.reshape(h * w, d), c.reshape(h * w, d), wq, wk, wv)
        outs.append(o.reshape(h, w, -1))
        maps.append(a)
    return place(outs, n_w, n_h), maps


def naive_global_enhance(f_glo, f_loc, n_w, n_h, wq, wk, wv):
    return _naive_enhance(f_glo, f_loc, n_w, n_h, wq, wk, wv, naive_global_crop, naive_global_place)


def naive_local_enhance(f_glo, f_loc, n_w, n_h, wq, wk, wv):
    return _naive_enhance(f_loc, f_glo, n_w, n_h, wq, wk, wv, naive_local_crop, naive_local_place)


def naive_avg_pool(x, kh, kw):
    h, w, d = x.shape
    out = np.zeros((h // kh, w // kw, d))
    for r in range(h // kh):
        for c in range(w // kw):
            for ch in range(d):
                s = 0.0
                for a in range(kh):
                    for b in range(kw):
                        s += x[r * kh + a, c * kw + b, ch]
                out[r, c, ch] = s / (kh * kw)
    return out
