"""Cross-attention between token and point features, aggregation, pooling
heads and the bidirectional InfoNCE objective.

Everything here is plain float64 numpy. Single-sample helpers
(`project_qkv`, `initial_attention`, `aggregate`, `pool_embed`) take 2-D
feature matrices; `forward` / `backward` run the same pipeline on a batch
(B, T, d) / (B, N, d) and return analytic parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import erf

from .errors import DegenerateError, ShapeError

TAU_MIN = 1e-3
TAU_MAX = 1.0
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_features(x, name: str = "features") -> np.ndarray:
    """Validate a token or point feature matrix (rows x dim, finite)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateError(f"{name} has non-finite entries")
    return arr


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class AttentionState:
    """Pre-softmax logits and the row-stochastic attention derived from them."""

    logits: np.ndarray
    attention: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "AttentionState":
        lg = np.array(logits, dtype=np.float64)
        if lg.ndim != 2:
            raise ShapeError(f"logits must be T x N, got shape {lg.shape}")
        if not np.all(np.isfinite(lg)):
            raise DegenerateError("attention logits are not finite")
        lg.setflags(write=False)
        att = softmax_rows(lg)
        att.setflags(write=False)
        return cls(lg, att)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.logits.shape


@dataclass
class ProjectionSet:
    w_q: np.ndarray
    w_k_3d: np.ndarray
    w_v_3d: np.ndarray
    w_v_text: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in
                (self.w_q, self.w_k_3d, self.w_v_3d, self.w_v_text)]
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d):
                raise ShapeError("projection matrices must all be square with the same dimension")
            if not np.all(np.isfinite(m)):
                raise DegenerateError("projection matrix has non-finite entries")
        self.w_q, self.w_k_3d, self.w_v_3d, self.w_v_text = mats

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, d: int) -> "ProjectionSet":
        return cls(*(np.eye(d) for _ in range(4)))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, scale: Optional[float] = None) -> "ProjectionSet":
        s = 1.0 / np.sqrt(d) if scale is None else scale
        return cls(*(rng.normal(0.0, s, size=(d, d)) for _ in range(4)))


@dataclass
class MLPHead:
    """Two-layer map d -> hidden -> d' with a GELU in between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if (self.w1.ndim != 2 or self.w2.ndim != 2
                or self.b1.shape != (self.w1.shape[1],)
                or self.w2.shape[0] != self.w1.shape[1]
                or self.b2.shape != (self.w2.shape[1],)):
            raise ShapeError("inconsistent MLP head shapes")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def identity(cls, d: int) -> "MLPHead":
        return cls(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))

    @classmethod
    def random(cls, d: int, d_out: int, rng: np.random.Generator, hidden: Optional[int] = None) -> "MLPHead":
        h = d_out if hidden is None else hidden
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)), np.zeros(h),
                   rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, d_out)), np.zeros(d_out))

    def __call__(self, x: np.ndarray, linear: bool = False) -> np.ndarray:
        u = x @ self.w1 + self.b1
        h = u if linear else gelu(u)
        return h @ self.w2 + self.b2


@dataclass(frozen=True)
class ModalEmbedding:
    vec: np.ndarray
    normalized: bool = True


@dataclass
class LossConfig:
    tau: float = 0.07
    gamma: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


# ---------------------------------------------------------------- single sample


def project_qkv(f_text, f_3d, w: ProjectionSet):
    """Return (q_text, k_3d, v_3d, v_text)."""
    ft = as_features(f_text, "f_text")
    f3 = as_features(f_3d, "f_3d")
    if ft.shape[1] != w.dim or f3.shape[1] != w.dim:
        raise ShapeError(f"feature dims {ft.shape[1]}, {f3.shape[1]} do not match projection dim {w.dim}")
    return ft @ w.w_q, f3 @ w.w_k_3d, f3 @ w.w_v_3d, ft @ w.w_v_text


def initial_attention(q_text, k_3d) -> AttentionState:
    q = as_features(q_text, "q_text")
    k = as_features(k_3d, "k_3d")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    return AttentionState.from_logits(q @ k.T / np.sqrt(q.shape[1]))


def aggregate(a: AttentionState, v_3d, v_text):
    """Return (z_text, z_3d) = (A v_3d, A^T v_text)."""
    att = a.attention
    v3 = as_features(v_3d, "v_3d")
    vt = as_features(v_text, "v_text")
    t, n = att.shape
    if v3.shape[0] != n or vt.shape[0] != t or v3.shape[1] != vt.shape[1]:
        raise ShapeError(f"attention {att.shape} incompatible with v_3d {v3.shape}, v_text {vt.shape}")
    return att @ v3, att.T @ vt


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vec)
    if not np.isfinite(n) or n == 0.0:
        raise DegenerateError("cannot normalize a zero-norm embedding")
    return vec / n


def pool_embed(z, head: MLPHead, linear: bool = False) -> ModalEmbedding:
    """Mean-pool rows, apply the head, L2-normalize.

    ``linear=True`` drops the GELU, which makes an identity head a true identity.
    """
    zz = as_features(z, "z")
    if zz.shape[1] != head.in_dim:
        raise ShapeError(f"z dim {zz.shape[1]} != head input dim {head.in_dim}")
    e = head(zz.mean(axis=0), linear=linear)
    return ModalEmbedding(l2_normalize(e), True)


# ---------------------------------------------------------------- contrastive loss


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _stack(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return np.asarray(batch, dtype=np.float64)
    return np.stack([b.vec if isinstance(b, ModalEmbedding) else np.asarray(b, dtype=np.float64)
                     for b in batch])


@dataclass
class InfoNCEResult:
    loss: float
    t2v: float
    v2t: float
    grad_text: np.ndarray
    grad_3d: np.ndarray
    grad_tau: float
    similarity: np.ndarray = field(repr=False)


def infonce_bidirectional(e_text, e_3d, cfg: LossConfig) -> InfoNCEResult:
    """Symmetric in-batch InfoNCE. Gradients are with respect to the raw
    embedding entries (and tau), treating each vector as a free variable."""
    et = _stack(e_text)
    e3 = _stack(e_3d)
    if et.ndim != 2 or et.shape[0] == 0:
        raise ShapeError("empty embedding batch")
    if et.shape != e3.shape:
        raise ShapeError(f"text batch {et.shape} and 3D batch {e3.shape} differ")
    if not cfg.tau > 0:
        raise ValueError("tau must be positive")
    b = et.shape[0]
    sim = et @ e3.T
    s = sim / cfg.tau
    diag = np.diag(s)
    t2v = float(np.mean(_logsumexp(s, 1) - diag))
    v2t = float(np.mean(_logsumexp(s, 0) - diag))

    eye = np.eye(b)
    p_row = softmax_rows(s)
    p_col = softmax_rows(s.T).T
    ds = (p_row - eye + p_col - eye) / b
    grad_text = ds @ e3 / cfg.tau
    grad_3d = ds.T @ et / cfg.tau
    grad_tau = float(-np.sum(ds * sim) / cfg.tau ** 2)
    return InfoNCEResult(t2v + v2t, t2v, v2t, grad_text, grad_3d, grad_tau, sim)


def regularizer(*params: np.ndarray) -> float:
    return float(sum(np.sum(np.square(p)) for p in params))


def total_loss(bidirectional: float, reg: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    out = bidirectional + gamma * reg
    if not np.isfinite(out):
        raise DegenerateError("total loss is not finite")
    return out


# ---------------------------------------------------------------- batched model


@dataclass
class AlignModel:
    """Learnable state: projections, one head per modality and the temperature."""

    proj: ProjectionSet
    head_text: MLPHead
    head_3d: MLPHead
    tau: float = 0.07

    PARAM_NAMES = ("w_q", "w_k_3d", "w_v_3d", "w_v_text",
                   "g_text.w1", "g_text.b1", "g_text.w2", "g_text.b2",
                   "g_3d.w1", "g_3d.b1", "g_3d.w2", "g_3d.b2", "tau")

    @classmethod
    def init(cls, d: int, d_prime: int, rng: np.random.Generator, tau: float = 0.07) -> "AlignModel":
        return cls(ProjectionSet.random(d, rng), MLPHead.random(d, d_prime, rng),
                   MLPHead.random(d, d_prime, rng), tau)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Name -> array view of every parameter (tau as a 0-d array copy)."""
        p, ht, h3 = self.proj, self.head_text, self.head_3d
        return {
            "w_q": p.w_q, "w_k_3d": p.w_k_3d, "w_v_3d": p.w_v_3d, "w_v_text": p.w_v_text,
            "g_text.w1": ht.w1, "g_text.b1": ht.b1, "g_text.w2": ht.w2, "g_text.b2": ht.b2,
            "g_3d.w1": h3.w1, "g_3d.b1": h3.b1, "g_3d.w2": h3.w2, "g_3d.b2": h3.b2,
            "tau": np.array(self.tau),
        }

    @classmethod
    def from_arrays(cls, a: Dict[str, np.ndarray]) -> "AlignModel":
        return cls(ProjectionSet(a["w_q"], a["w_k_3d"], a["w_v_3d"], a["w_v_text"]),
                   MLPHead(a["g_text.w1"], a["g_text.b1"], a["g_text.w2"], a["g_text.b2"]),
                   MLPHead(a["g_3d.w1"], a["g_3d.b1"], a["g_3d.w2"], a["g_3d.b2"]),
                   float(a["tau"]))

    def copy(self) -> "AlignModel":
        return AlignModel.from_arrays({k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def reg(self) -> float:
        return regularizer(*(v for k, v in self.arrays().items() if k != "tau"))

    @property
    def dim(self) -> int:
        return self.proj.dim


def _check_batch(f_text, f_3d, d):
    ft = np.asarray(f_text, dtype=np.float64)
    f3 = np.asarray(f_3d, dtype=np.float64)
    if ft.ndim == 2:
        ft = ft[None]
    if f3.ndim == 2:
        f3 = f3[None]
    if ft.ndim != 3 or f3.ndim != 3 or ft.shape[0] != f3.shape[0]:
        raise ShapeError(f"bad batch shapes {ft.shape}, {f3.shape}")
    if ft.shape[2] != d or f3.shape[2] != d:
        raise ShapeError(f"feature dim does not match model dim {d}")
    return ft, f3


def base_logits(model: AlignModel, f_text, f_3d) -> np.ndarray:
    """Per-sample scaled dot-product logits, shape (B, T, N)."""
    ft, f3 = _check_batch(f_text, f_3d, model.dim)
    q = ft @ model.proj.w_q
    k = f3 @ model.proj.w_k_3d
    return q @ k.transpose(0, 2, 1) / np.sqrt(model.dim)


@dataclass
class ForwardCache:
    f_text: np.ndarray
    f_3d: np.ndarray
    q: np.ndarray
    k: np.ndarray
    attention: np.ndarray
    v_3d: np.ndarray
    v_text: np.ndarray
    pooled_text: np.ndarray
    pooled_3d: np.ndarray
    u_text: np.ndarray
    u_3d: np.ndarray
    e_text: np.ndarray
    e_3d: np.ndarray
    emb_text: np.ndarray
    emb_3d: np.ndarray


def forward(model: AlignModel, f_text, f_3d, logit_offset=None,
            logits_override: Optional[np.ndarray] = None) -> ForwardCache:
    """Batched pipeline. `logit_offset` (T x N) is added to every sample's
    logits before the softmax; `logits_override` (B x T x N) replaces the
    HAF logits entirely (treated as a constant for gradients)."""
    ft, f3 = _check_batch(f_text, f_3d, model.dim)
    p = model.proj
    q = ft @ p.w_q
    k = f3 @ p.w_k_3d
    if logits_override is not None:
        logits = np.array(logits_override, dtype=np.float64)
    else:
        logits = q @ k.transpose(0, 2, 1) / np.sqrt(model.dim)
    if logit_offset is not None:
        logits = logits + logit_offset
    if not np.all(np.isfinite(logits)):
        raise DegenerateError("attention logits are not finite")
    att = softmax_rows(logits)
    v3 = f3 @ p.w_v_3d
    vt = ft @ p.w_v_text
    z_text = att @ v3
    z_3d = att.transpose(0, 2, 1) @ vt
    pt = z_text.mean(axis=1)
    p3 = z_3d.mean(axis=1)
    ut = pt @ model.head_text.w1 + model.head_text.b1
    u3 = p3 @ model.head_3d.w1 + model.head_3d.b1
    et = gelu(ut) @ model.head_text.w2 + model.head_text.b2
    e3 = gelu(u3) @ model.head_3d.w2 + model.head_3d.b2
    nt = np.linalg.norm(et, axis=1, keepdims=True)
    n3 = np.linalg.norm(e3, axis=1, keepdims=True)
    if np.any(nt == 0) or np.any(n3 == 0):
        raise DegenerateError("zero-norm embedding")
    return ForwardCache(ft, f3, q, k, att, v3, vt, pt, p3, ut, u3, et, e3, et / nt, e3 / n3)


def _head_backward(head: MLPHead, pooled, u, e, emb, d_emb):
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    d_e = (d_emb - emb * np.sum(emb * d_emb, axis=1, keepdims=True)) / norm
    h = gelu(u)
    g_w2 = h.T @ d_e
    g_b2 = d_e.sum(axis=0)
    d_u = (d_e @ head.w2.T) * gelu_grad(u)
    g_w1 = pooled.T @ d_u
    g_b1 = d_u.sum(axis=0)
    d_pooled = d_u @ head.w1.T
    return (g_w1, g_b1, g_w2, g_b2), d_pooled


def backward(model: AlignModel, c: ForwardCache, d_emb_text, d_emb_3d,
             d_tau: float = 0.0, gamma: float = 0.0,
             attention_const: bool = False) -> Dict[str, np.ndarray]:
    """Gradients of the loss for every parameter, given gradients with respect
    to the normalized embeddings. Adds the gamma * sum-of-squares term."""
    (gt_w1, gt_b1, gt_w2, gt_b2), d_pt = _head_backward(
        model.head_text, c.pooled_text, c.u_text, c.e_text, c.emb_text, d_emb_text)
    (g3_w1, g3_b1, g3_w2, g3_b2), d_p3 = _head_backward(
        model.head_3d, c.pooled_3d, c.u_3d, c.e_3d, c.emb_3d, d_emb_3d)
    t = c.f_text.shape[1]
    n = c.f_3d.shape[1]
    att = c.attention
    d_zt = np.repeat(d_pt[:, None, :] / t, t, axis=1)
    d_z3 = np.repeat(d_p3[:, None, :] / n, n, axis=1)
    d_v3 = att.transpose(0, 2, 1) @ d_zt
    d_vt = att @ d_z3
    p = model.proj
    g = {
        "w_v_3d": np.einsum("bnd,bne->de", c.f_3d, d_v3),
        "w_v_text": np.einsum("btd,bte->de", c.f_text, d_vt),
    }
    if attention_const:
        g["w_q"] = np.zeros_like(p.w_q)
        g["w_k_3d"] = np.zeros_like(p.w_k_3d)
    else:
        d_att = d_zt @ c.v_3d.transpose(0, 2, 1) + c.v_text @ d_z3.transpose(0, 2, 1)
        d_logits = att * (d_att - np.sum(d_att * att, axis=2, keepdims=True))
        scale = 1.0 / np.sqrt(model.dim)
        d_q = d_logits @ c.k * scale
        d_k = d_logits.transpose(0, 2, 1) @ c.q * scale
        g["w_q"] = np.einsum("btd,bte->de", c.f_text, d_q)
        g["w_k_3d"] = np.einsum("bnd,bne->de", c.f_3d, d_k)
    g.update({
        "g_text.w1": gt_w1, "g_text.b1": gt_b1, "g_text.w2": gt_w2, "g_text.b2": gt_b2,
        "g_3d.w1": g3_w1, "g_3d.b1": g3_b1, "g_3d.w2": g3_w2, "g_3d.b2": g3_b2,
        "tau": np.array(d_tau),
    })
    if gamma:
        params = model.arrays()
        for name in g:
            if name != "tau":
                g[name] = g[name] + 2.0 * gamma * params[name]
    return {name: g[name] for name in AlignModel.PARAM_NAMES}


def loss_and_grads(model: AlignModel, f_text, f_3d, logit_offset=None, gamma: float = 0.0,
                   logits_override=None, attention_const: bool = False):
    """Total loss, bidirectional InfoNCE result and parameter gradients."""
    c = forward(model, f_text, f_3d, logit_offset, logits_override)
    res = infonce_bidirectional(c.emb_text, c.emb_3d, LossConfig(tau=model.tau, gamma=gamma))
    grads = backward(model, c, res.grad_text, res.grad_3d, res.grad_tau, gamma,
                     attention_const=attention_const or logits_override is not None)
    loss = total_loss(res.loss, model.reg() if gamma else 0.0, gamma)
    return loss, res, grads


def embed(model: AlignModel, f_text, f_3d, logit_offset=None, logits_override=None):
    """Normalized (text, 3D) embeddings for a batch."""
    c = forward(model, f_text, f_3d, logit_offset, logits_override)
    return c.emb_text, c.emb_3d
