"""Two-phase training on synthetic planted-alignment pairs.

Phase 1 trains with the HAF attention as-is. Phase 2 additionally runs the
attention search every `mcts_every_k` steps on a probe slice of the batch and
adds the chosen logit modulation to every sample's attention until the next
search. The search output is a constant for the gradient.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, replace
from typing import Dict, IO, List, Optional, Tuple

import numpy as np

from . import config as cfgmod
from .align import (TAU_MAX, TAU_MIN, AlignModel, AttentionState, LossConfig, backward,
                    base_logits, forward, gelu, infonce_bidirectional, total_loss)
from .errors import ConfigError, DecodeError
from .mcts import MctsConfig, RewardConfig, RewardContext, compute_reward, run_search
from .metrics import in_batch_retrieval
from .synthetic import SyntheticBatch, SyntheticPairSpec, generate_synthetic_batch, planted_mass

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 32
    d_prime: int = 32
    t_tokens: int = 8
    n_points: int = 64
    batch: int = 32
    concept_count: int = 16
    noise_sigma: float = 0.1
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps_p1: int = 2000
    total_steps_p2: int = 2000
    mcts_every_k: int = 10
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    tau_init: float = 0.07
    gamma: float = 0.0
    seed: int = 0
    # search
    mcts_enabled: bool = True
    budget: int = 100
    c: float = 1.5
    rollout_depth: int = 5
    actions_per_expansion: int = 8
    mask_fraction: float = 0.1
    delta: float = 0.1
    max_tree_depth: int = 6
    selection: str = "uct"
    alpha: float = 0.5
    external_weights: Tuple[float, float, float] = (0.5, 0.3, 0.2)
    probe_size: int = 32
    offstep: str = "reuse"          # or "initial"
    fusion: str = "haf"             # or "simple"
    modulation: str = "accumulate"  # or "replace": each search starts from A_initial

    def __post_init__(self):
        for name in ("d", "d_prime", "t_tokens", "n_points", "batch", "mcts_every_k", "probe_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps_p1 < 0 or self.total_steps_p2 < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be > 0")
        if self.offstep not in ("reuse", "initial"):
            raise ValueError("offstep must be 'reuse' or 'initial'")
        if self.modulation not in ("replace", "accumulate"):
            raise ValueError("modulation must be 'replace' or 'accumulate'")
        if self.fusion not in ("haf", "simple"):
            raise ValueError("fusion must be 'haf' or 'simple'")
        self.external_weights = tuple(float(x) for x in self.external_weights)

    @property
    def total_steps(self) -> int:
        return self.total_steps_p1 + self.total_steps_p2

    def pair_spec(self) -> SyntheticPairSpec:
        return SyntheticPairSpec(self.t_tokens, self.n_points, self.d, self.concept_count,
                                 self.noise_sigma, vocab_seed=self.seed)

    def mcts_config(self, seed: int) -> MctsConfig:
        return MctsConfig(budget=self.budget, c=self.c, rollout_depth=self.rollout_depth,
                          actions_per_expansion=self.actions_per_expansion,
                          mask_fraction=self.mask_fraction, delta=self.delta,
                          max_tree_depth=self.max_tree_depth, selection=self.selection,
                          seed=seed)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.alpha, self.external_weights)


# Named ablation rows: overrides applied on top of a base TrainConfig.
EXPERIMENTS: Dict[str, Dict[str, object]] = {
    "full": {},
    "no_mcts": {"mcts_enabled": False},
    "internal_only": {"alpha": 1.0},
    "external_only": {"alpha": 0.0},
    "epsilon_greedy": {"selection": "epsilon_greedy"},
    "direct_mcts": {"_direct": True},
    "simple_fusion": {"fusion": "simple"},
}


def experiment_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    ov = dict(EXPERIMENTS[name])
    if ov.pop("_direct", False):
        # skip pre-training, keep the total step count
        ov.update(total_steps_p1=0, total_steps_p2=base.total_steps)
    return replace(base, **ov)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr_peak, then cosine decay to 0 at the last step."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _decays(name: str) -> bool:
    return name != "tau" and not name.split(".")[-1].startswith("b")


class AdamW:
    """Decoupled weight decay Adam with global-norm gradient clipping."""

    def __init__(self, names, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.05, clip_norm=1.0):
        self.names = list(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.skipped = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> bool:
        """Update `params` in place. Returns False (and counts it) when grads are non-finite."""
        if not all(np.all(np.isfinite(grads[n])) for n in self.names):
            self.skipped += 1
            log.warning("non-finite gradient; step skipped (%d so far)", self.skipped)
            return False
        norm = math.sqrt(sum(float(np.sum(np.square(grads[n]))) for n in self.names))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads[n] * scale
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(params[n], dtype=np.float64)
                self.v[n] = np.zeros_like(params[n], dtype=np.float64)
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[n]
            if _decays(n):
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   cfg: TrainConfig, step: int, opt: AdamW) -> Dict[str, np.ndarray]:
    opt.step(params, grads, cosine_lr(step, cfg))
    return params


def simple_fusion_logits(f_text: np.ndarray, f_3d: np.ndarray, w_fuse: np.ndarray) -> np.ndarray:
    """Pool both modalities, fuse through one hidden layer, and use the fused
    vector as a diagonal gate between every token and point."""
    pooled = np.concatenate([f_text.mean(axis=1), f_3d.mean(axis=1)], axis=1)
    h = gelu(pooled @ w_fuse)
    d = f_text.shape[2]
    return np.einsum("btj,bj,bnj->btn", f_text, h, f_3d) / np.sqrt(d)


class Trainer:
    def __init__(self, cfg: TrainConfig, experiment: str = "full"):
        self.cfg = cfg
        self.experiment = experiment
        self.spec = cfg.pair_spec()
        self.data_rng = np.random.default_rng([cfg.seed, 0])
        init_rng = np.random.default_rng([cfg.seed, 1])
        self.model = AlignModel.init(cfg.d, cfg.d_prime, init_rng, tau=cfg.tau_init)
        self.w_fuse = init_rng.normal(0.0, 1.0 / np.sqrt(2 * cfg.d), size=(2 * cfg.d, cfg.d))
        self.params = self.model.arrays()
        self.opt = AdamW(AlignModel.PARAM_NAMES, cfg.beta1, cfg.beta2, cfg.adam_eps,
                         cfg.weight_decay, cfg.grad_clip_norm)
        self.step = 0
        self.offset = np.zeros((cfg.t_tokens, cfg.n_points))
        self.last_search = None

    # -- helpers

    def _sync_model(self):
        tau = float(np.clip(self.params["tau"], TAU_MIN, TAU_MAX))
        self.params["tau"] = np.array(tau)
        self.model = AlignModel.from_arrays(self.params)
        # keep the dict pointing at the model's own arrays
        self.params = self.model.arrays()

    def phase(self, step: Optional[int] = None) -> int:
        s = self.step if step is None else step
        return 1 if s < self.cfg.total_steps_p1 else 2

    def logits_for(self, f_text, f_3d) -> np.ndarray:
        if self.cfg.fusion == "simple":
            return simple_fusion_logits(np.asarray(f_text), np.asarray(f_3d), self.w_fuse)
        return base_logits(self.model, f_text, f_3d)

    def _search(self, batch: SyntheticBatch):
        cfg = self.cfg
        probe = batch.subset(min(cfg.probe_size, len(batch)))
        logits = self.logits_for(probe.f_text, probe.f_3d)
        if cfg.modulation == "accumulate":
            logits = logits + self.offset
        root = AttentionState.from_logits(logits[0])
        ctx = RewardContext(self.model, probe.f_text, probe.f_3d, root, logits)
        mcfg = cfg.mcts_config(seed=int(np.random.SeedSequence([cfg.seed, 7, self.step]).generate_state(1)[0]))
        rcfg = cfg.reward_config()
        res = run_search(root, mcfg, lambda s: compute_reward(root, s, rcfg, ctx))
        reward = compute_reward(root, res.state, rcfg, ctx) if res.action is not None else 0.0
        return res, reward

    def search_due(self) -> bool:
        cfg = self.cfg
        if self.phase() != 2 or not cfg.mcts_enabled or cfg.budget < 1:
            return False
        return (self.step - cfg.total_steps_p1) % cfg.mcts_every_k == 0

    # -- one step

    def train_step(self) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        batch = generate_synthetic_batch(self.spec, cfg.batch, self.data_rng)
        phase = self.phase()
        reward = None
        mcts_ms = 0.0
        searched = False
        if self.search_due():
            ts = time.perf_counter()
            res, reward = self._search(batch)
            mcts_ms = (time.perf_counter() - ts) * 1e3
            self.last_search = res
            base = self.offset if cfg.modulation == "accumulate" else 0.0
            self.offset = base + res.offset()
            searched = True
        if phase == 1:
            offset = None
        elif searched or cfg.offstep == "reuse":
            offset = self.offset if np.any(self.offset) else None
        else:
            offset = None
        override = None
        if cfg.fusion == "simple":
            override = self.logits_for(batch.f_text, batch.f_3d)
            if offset is not None:
                override = override + offset
                offset = None
        c = forward(self.model, batch.f_text, batch.f_3d, offset, override)
        res_loss = infonce_bidirectional(c.emb_text, c.emb_3d, LossConfig(tau=self.model.tau))
        grads = backward(self.model, c, res_loss.grad_text, res_loss.grad_3d, res_loss.grad_tau,
                         cfg.gamma, attention_const=override is not None)
        loss = total_loss(res_loss.loss, self.model.reg() if cfg.gamma else 0.0, cfg.gamma)
        lr = cosine_lr(self.step, cfg)
        self.opt.step(self.params, grads, lr)
        self._sync_model()
        rec = {
            "step": self.step,
            "phase": phase,
            "loss": loss,
            "reward": reward,
            "mcts_ms": mcts_ms,
            "step_ms": (time.perf_counter() - t0) * 1e3,
            "lr": lr,
            "tau": self.model.tau,
            "planted_mass": planted_mass(c.attention, batch.mask),
        }
        self.step += 1
        return rec

    def run(self, steps: Optional[int] = None, sink: Optional[IO[str]] = None) -> List[dict]:
        n = self.cfg.total_steps - self.step if steps is None else steps
        out = []
        for _ in range(max(n, 0)):
            rec = self.train_step()
            out.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
        return out

    # -- evaluation

    def evaluate(self, n: int = 256, seed: int = 12345, offset: Optional[np.ndarray] = None) -> dict:
        """Held-out planted mass (with the current modulation unless `offset`
        is given), loss and in-batch retrieval scores."""
        batch = generate_synthetic_batch(self.spec, n, np.random.default_rng([self.cfg.seed, 99, seed]))
        off = self.offset if offset is None else offset
        if self.cfg.fusion == "simple":
            c = forward(self.model, batch.f_text, batch.f_3d,
                        logits_override=self.logits_for(batch.f_text, batch.f_3d) + off)
        else:
            c = forward(self.model, batch.f_text, batch.f_3d, off)
        res = infonce_bidirectional(c.emb_text, c.emb_3d, LossConfig(tau=self.model.tau))
        out = {"planted_mass": planted_mass(c.attention, batch.mask), "loss": res.loss}
        out.update(in_batch_retrieval(res.similarity))
        return out

    def sample_attention(self, seed: int = 0):
        """(A_initial, A_optimized, search result) for one sample under the current model."""
        batch = generate_synthetic_batch(self.spec, max(self.cfg.probe_size, 1),
                                         np.random.default_rng([self.cfg.seed, 55, seed]))
        res, reward = self._search(batch)
        return res.root.state, res.state, res, reward

    # -- checkpoints

    def save(self, path: str) -> None:
        meta = {
            "step": self.step,
            "phase": self.phase(),
            "experiment": self.experiment,
            "config": cfgmod.to_dict(self.cfg),
            "config_hash": cfgmod.config_hash(self.cfg),
            "rng_state": self.data_rng.bit_generator.state,
            "opt_t": self.opt.t,
            "opt_skipped": self.opt.skipped,
        }
        blocks = [("meta", meta), ("offset", self.offset), ("w_fuse", self.w_fuse)]
        for n in AlignModel.PARAM_NAMES:
            blocks.append((f"param/{n}", self.params[n]))
        for n in AlignModel.PARAM_NAMES:
            if n in self.opt.m:
                blocks.append((f"adam_m/{n}", self.opt.m[n]))
                blocks.append((f"adam_v/{n}", self.opt.v[n]))
        write_checkpoint(path, blocks)

    @classmethod
    def load(cls, path: str) -> "Trainer":
        blocks = read_checkpoint(path)
        meta = blocks["meta"]
        cfg = cfgmod.build(TrainConfig, meta["config"])
        if cfgmod.config_hash(cfg) != meta["config_hash"]:
            raise DecodeError("checkpoint config hash mismatch")
        tr = cls(cfg, meta.get("experiment", "full"))
        tr.step = int(meta["step"])
        tr.data_rng.bit_generator.state = meta["rng_state"]
        tr.params = {n: blocks[f"param/{n}"].copy() for n in AlignModel.PARAM_NAMES}
        tr.model = AlignModel.from_arrays(tr.params)
        tr.params = tr.model.arrays()
        tr.offset = blocks["offset"].copy()
        tr.w_fuse = blocks["w_fuse"].copy()
        tr.opt.t = int(meta["opt_t"])
        tr.opt.skipped = int(meta["opt_skipped"])
        for n in AlignModel.PARAM_NAMES:
            if f"adam_m/{n}" in blocks:
                tr.opt.m[n] = blocks[f"adam_m/{n}"].copy()
                tr.opt.v[n] = blocks[f"adam_v/{n}"].copy()
        return tr


def planted_mass_ratio(mass: float, spec: SyntheticPairSpec) -> float:
    """Planted mass relative to a uniform row (width / N)."""
    return mass / (spec.planted_width / spec.n_points)


def phase1_step(trainer: Trainer) -> dict:
    if trainer.phase() != 1:
        raise RuntimeError("trainer is past phase 1")
    return trainer.train_step()


def phase2_step(trainer: Trainer) -> dict:
    if trainer.phase() != 2:
        raise RuntimeError("trainer is still in phase 1")
    return trainer.train_step()


# ---------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"DAERCKPT"
CKPT_VERSION = 1
_KIND_ARRAY = 0
_KIND_JSON = 1


def encode_checkpoint(blocks) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blocks))]
    for name, value in blocks:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        if isinstance(value, np.ndarray):
            arr = np.asarray(value, dtype="<f8")
            parts.append(struct.pack("<BI", _KIND_ARRAY, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        else:
            js = json.dumps(value, sort_keys=True).encode("utf-8")
            parts.append(struct.pack("<BQ", _KIND_JSON, len(js)) + js)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated {self.what}: need {n} bytes at offset {self.pos}, "
                              f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


def decode_checkpoint(data: bytes) -> Dict[str, object]:
    r = _Reader(data, "checkpoint")
    if r.take(8) != CKPT_MAGIC:
        raise DecodeError("not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != CKPT_VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}")
    out: Dict[str, object] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("bad block name") from exc
        (kind,) = r.unpack("<B")
        if kind == _KIND_ARRAY:
            (ndim,) = r.unpack("<I")
            if ndim > 8:
                raise DecodeError(f"implausible array rank {ndim}")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        elif kind == _KIND_JSON:
            (n,) = r.unpack("<Q")
            try:
                out[name] = json.loads(r.take(n).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise DecodeError(f"bad json block {name!r}") from exc
        else:
            raise DecodeError(f"unknown block kind {kind}")
    if not r.done():
        raise DecodeError("trailing bytes after checkpoint blocks")
    if "meta" not in out:
        raise DecodeError("checkpoint has no meta block")
    return out


def atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_checkpoint(path: str, blocks) -> None:
    atomic_write(path, encode_checkpoint(blocks))


def read_checkpoint(path: str) -> Dict[str, object]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
