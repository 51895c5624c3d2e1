"""Independent scalar-loop reference implementations used by the tests."""

import math

import numpy as np


def loop_matmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def loop_softmax_rows(logits):
    logits = np.asarray(logits, dtype=float)
    out = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        m = max(logits[i])
        ex = [math.exp(x - m) for x in logits[i]]
        tot = sum(ex)
        for j, e in enumerate(ex):
            out[i, j] = e / tot
    return out


def loop_infonce(et, e3, tau):
    """Bidirectional InfoNCE by explicit loops over the batch."""
    b = len(et)
    sim = [[sum(x * y for x, y in zip(et[i], e3[j])) / tau for j in range(b)] for i in range(b)]
    t2v = 0.0
    v2t = 0.0
    for i in range(b):
        t2v += -sim[i][i] + math.log(sum(math.exp(sim[i][j]) for j in range(b)))
        v2t += -sim[i][i] + math.log(sum(math.exp(sim[j][i]) for j in range(b)))
    return t2v / b + v2t / b


def adamw_scalar(p, grads, lr_seq, beta1=0.9, beta2=0.98, eps=1e-8, wd=0.0, clip=1.0):
    """Scalar AdamW with decoupled decay and norm clipping at `clip`."""
    m = v = 0.0
    for t, (g, lr) in enumerate(zip(grads, lr_seq), start=1):
        if abs(g) > clip:
            g = g * clip / abs(g)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        p = p * (1 - lr * wd)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
