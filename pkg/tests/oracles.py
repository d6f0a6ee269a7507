"""Independent reference computations used as test oracles.

Nothing here touches the autodiff tape or the solver machinery. Where a
bitwise comparison is intended, elementary formulas (reciprocal-multiply RMS
normalisation, tanh-form sigmoid, scaling queries before the score product)
follow the same floating-point order as the library so that equality is
meaningful.
"""

import numpy as np


def rms_norm(x, g, eps=1e-6):
    return x * (1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)) * g


def silu(x):
    return x * (0.5 + 0.5 * np.tanh(0.5 * x))


def rope(x, positions, base=10000.0):
    dh = x.shape[-1]
    k = np.arange(dh // 2, dtype=np.float64)
    theta = base ** (-k / (dh // 2))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    c, s = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    out = np.empty_like(x)
    a, b = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = a * c - b * s
    out[..., 1::2] = a * s + b * c
    return out


def attention(q, k, v):
    tq, tk = q.shape[-2], k.shape[-2]
    scores = (q * (1.0 / np.sqrt(q.shape[-1]))) @ np.swapaxes(k, -1, -2)
    future = np.arange(tk)[None, :] > (tk - tq + np.arange(tq))[:, None]
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ v


def vanilla_forward(params, n_layers, n_heads, tokens, eps=1e-6):
    """Pre-norm decoder with plain residual connections; ``params`` maps names to arrays."""
    P = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    tokens = np.atleast_2d(tokens)
    B, Tn = tokens.shape
    x = P["embed"][tokens]
    d = x.shape[-1]
    dh = d // n_heads
    pos = np.arange(Tn)

    def heads(z):
        return z.reshape(B, Tn, n_heads, dh).transpose(0, 2, 1, 3)

    for i in range(n_layers):
        L = lambda n: P[f"layers.{i}.{n}"]  # noqa: E731
        h = rms_norm(x, L("attn_norm"), eps)
        q, k, v = heads(h @ L("wq")), heads(h @ L("wk")), heads(h @ L("wv"))
        o = attention(rope(q, pos), rope(k, pos), v)
        x = x + o.transpose(0, 2, 1, 3).reshape(B, Tn, d) @ L("wo")
        h = rms_norm(x, L("ffn_norm"), eps)
        x = x + (silu(h @ L("w_gate")) * (h @ L("w_up"))) @ L("w_down")
    h = rms_norm(x, P["final_norm"], eps)
    head = P["lm_head"] if "lm_head" in P else P["embed"].T
    return h @ head


def influence(a, b):
    """``1 - mean cosine`` over rows, computed one row at a time."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1])
    b = np.asarray(b, dtype=np.float64).reshape(-1, np.shape(b)[-1])
    cos = [float(u @ w) / (np.linalg.norm(u) * np.linalg.norm(w)) for u, w in zip(a, b)]
    return 1.0 - sum(cos) / len(cos)
