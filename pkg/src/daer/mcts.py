"""Monte Carlo tree search over attention logits.

A state is an `AttentionState`; an action adds +/- delta to the pre-softmax
logits on a masked subset of positions and re-applies the row softmax. The
search follows the select / expand / simulate / backpropagate loop and
returns the root action with the most visits.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .align import AlignModel, AttentionState, forward, infonce_bidirectional, LossConfig
from .errors import ShapeError
from .metrics import in_batch_retrieval

log = logging.getLogger(__name__)

ENHANCE = 1
SUPPRESS = -1


@dataclass(frozen=True)
class ActionSpec:
    mask: Tuple[Tuple[int, int], ...]
    sign: int = ENHANCE
    delta: float = 0.1

    def __post_init__(self):
        if not self.mask:
            raise ValueError("action mask must be non-empty")
        if self.sign not in (ENHANCE, SUPPRESS):
            raise ValueError("sign must be ENHANCE (+1) or SUPPRESS (-1)")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    def offset(self, shape: Tuple[int, int]) -> np.ndarray:
        t, n = shape
        out = np.zeros(shape)
        for r, c in self.mask:
            if not (0 <= r < t and 0 <= c < n):
                raise ShapeError(f"mask position {(r, c)} outside {shape}")
            out[r, c] += self.sign * self.delta
        return out

    def inverse(self) -> "ActionSpec":
        return ActionSpec(self.mask, -self.sign, self.delta)

    def to_json(self) -> dict:
        return {"mask": [list(p) for p in self.mask], "sign": self.sign, "delta": self.delta}


def apply_action(s: AttentionState, a: ActionSpec) -> AttentionState:
    return AttentionState.from_logits(s.logits + a.offset(s.shape))


@dataclass
class MctsConfig:
    budget: int = 100
    c: float = 1.5
    epsilon: float = 1e-6
    rollout_depth: int = 5
    actions_per_expansion: int = 8
    mask_fraction: float = 0.1
    delta: float = 0.1
    max_tree_depth: int = 6
    signs: Tuple[int, ...] = (ENHANCE, SUPPRESS)
    selection: str = "uct"          # or "epsilon_greedy"
    normalize_q: bool = True
    common_rollouts: bool = True
    greedy_epsilon: float = 0.1
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.c < 0 or not self.epsilon > 0 or self.rollout_depth < 0:
            raise ValueError("need c >= 0, epsilon > 0, rollout_depth >= 0")
        if self.selection not in ("uct", "epsilon_greedy"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


@dataclass
class Edge:
    action: ActionSpec
    child: "SearchNode"
    n: int = 0
    q: float = 0.0


@dataclass
class SearchNode:
    state: AttentionState
    depth: int = 0
    visits: int = 0
    edges: List[Edge] = field(default_factory=list)
    expanded: bool = False


def uct_score(edge: Edge, parent_visits: int, c: float, epsilon: float) -> float:
    return edge.q + c * math.sqrt(2.0 * math.log(max(parent_visits, 1)) / (edge.n + epsilon))


def backpropagate(path: Sequence[Tuple[SearchNode, Edge]], r_hat: float,
                  leaf: Optional[SearchNode] = None) -> None:
    """Incremental-mean update along root -> leaf edges; `leaf` (the simulated
    node) gets its own visit counted."""
    for node, edge in path:
        node.visits += 1
        edge.n += 1
        edge.q += (r_hat - edge.q) / edge.n
    if leaf is not None:
        leaf.visits += 1


class ActionSampler:
    """Legal actions for a T x N state: masks of fixed size over positions."""

    def __init__(self, shape: Tuple[int, int], cfg: MctsConfig):
        self.shape = shape
        self.cfg = cfg
        self.cells = shape[0] * shape[1]
        self.mask_size = int(round(cfg.mask_fraction * self.cells))
        self.mask_size = min(self.mask_size, self.cells)
        self.signs = tuple(cfg.signs)

    @property
    def n_actions(self) -> int:
        if self.mask_size < 1 or not self.signs:
            return 0
        return math.comb(self.cells, self.mask_size) * len(self.signs)

    def _make(self, flat: Sequence[int], sign: int) -> ActionSpec:
        n = self.shape[1]
        return ActionSpec(tuple((int(i) // n, int(i) % n) for i in sorted(flat)), sign, self.cfg.delta)

    def enumerate(self) -> List[ActionSpec]:
        return [self._make(combo, sign)
                for combo in itertools.combinations(range(self.cells), self.mask_size)
                for sign in self.signs]

    def sample_one(self, rng: np.random.Generator) -> ActionSpec:
        flat = rng.choice(self.cells, size=self.mask_size, replace=False)
        sign = self.signs[int(rng.integers(len(self.signs)))]
        return self._make(flat, sign)

    def candidates(self, rng: np.random.Generator, k: int) -> List[ActionSpec]:
        total = self.n_actions
        if total == 0 or k < 1:
            return []
        if total <= k:
            return self.enumerate()
        seen = set()
        out = []
        attempts = 0
        while len(out) < k and attempts < 20 * k:
            a = self.sample_one(rng)
            attempts += 1
            if (a.mask, a.sign) not in seen:
                seen.add((a.mask, a.sign))
                out.append(a)
        return out


@dataclass
class SearchResult:
    state: AttentionState
    action: Optional[ActionSpec]
    status: str
    root: SearchNode
    iterations: int
    trace: List[dict] = field(default_factory=list)

    def offset(self) -> np.ndarray:
        if self.action is None:
            return np.zeros(self.state.shape)
        return self.action.offset(self.state.shape)


def _argmax(values: Sequence[float]) -> int:
    # lowest index wins ties
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


class QBounds:
    """Running min/max of backed-up rewards, used to map Q-bar into [0, 1]."""

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, r: float) -> None:
        self.lo = min(self.lo, r)
        self.hi = max(self.hi, r)

    def scale(self, q: float) -> float:
        if self.hi > self.lo:
            return (q - self.lo) / (self.hi - self.lo)
        return q


def select_edge(node: SearchNode, cfg: MctsConfig, rng: np.random.Generator,
                bounds: Optional[QBounds] = None) -> int:
    if cfg.selection == "epsilon_greedy":
        if rng.random() < cfg.greedy_epsilon:
            return int(rng.integers(len(node.edges)))
        return _argmax([e.q for e in node.edges])
    scores = []
    for e in node.edges:
        q = e.q
        if bounds is not None and e.n > 0:
            q = bounds.scale(q)
        elif bounds is not None:
            q = 0.0
        scores.append(q + uct_score(Edge(e.action, e.child, e.n, 0.0), node.visits, cfg.c, cfg.epsilon))
    return _argmax(scores)


def run_search(a_initial: AttentionState, cfg: MctsConfig,
               reward: Callable[[AttentionState], float],
               trace_sink=None) -> SearchResult:
    """Run `cfg.budget` iterations from `a_initial`. `reward(state)` scores a
    rollout's terminal state against the root."""
    rng = np.random.default_rng(cfg.seed)
    sampler = ActionSampler(a_initial.shape, cfg)
    root = SearchNode(a_initial)
    trace: List[dict] = []
    bounds = QBounds() if cfg.normalize_q else None
    if sampler.n_actions == 0:
        log.warning("no legal action for state of shape %s; returning input unchanged", a_initial.shape)
        return SearchResult(a_initial, None, "no_legal_action", root, 0)

    for it in range(cfg.budget):
        node = root
        path: List[Tuple[SearchNode, Edge]] = []
        idx_path: List[int] = []
        while node.expanded and node.edges:
            i = select_edge(node, cfg, rng, bounds)
            path.append((node, node.edges[i]))
            idx_path.append(i)
            node = node.edges[i].child
        leaf = node
        terminal = leaf.depth >= cfg.max_tree_depth
        # The root is expanded on the first pass so every iteration runs
        # through a root edge.
        if not terminal and not leaf.expanded and (leaf is root or leaf.visits > 0):
            exp_rng = np.random.default_rng([cfg.seed, 2, leaf.depth]) if cfg.common_rollouts else rng
            for a in sampler.candidates(exp_rng, cfg.actions_per_expansion):
                leaf.edges.append(Edge(a, SearchNode(apply_action(leaf.state, a), leaf.depth + 1)))
            leaf.expanded = True
            if leaf.edges:
                i = select_edge(leaf, cfg, rng, bounds)
                path.append((leaf, leaf.edges[i]))
                idx_path.append(i)
                leaf = leaf.edges[i].child
        state = leaf.state
        roll_rng = rng
        if cfg.common_rollouts and path:
            # k-th visit of every root edge replays the same continuation
            roll_rng = np.random.default_rng([cfg.seed, 1, path[0][1].n])
        for _ in range(cfg.rollout_depth):
            state = apply_action(state, sampler.sample_one(roll_rng))
        r_hat = float(reward(state))
        if bounds is not None:
            bounds.update(r_hat)
        backpropagate(path, r_hat, leaf)
        if cfg.trace or trace_sink is not None:
            rec = {"iteration": it, "path": idx_path, "reward": r_hat}
            if cfg.trace:
                trace.append(rec)
            if trace_sink is not None:
                trace_sink.write(json.dumps(rec) + "\n")

    if not root.edges:
        log.warning("search produced no root actions; returning input unchanged")
        return SearchResult(a_initial, None, "no_legal_action", root, cfg.budget, trace)
    # most visits; equal counts fall back to higher Q-bar, then lowest index
    best = _argmax([(e.n, e.q) for e in root.edges])
    action = root.edges[best].action
    return SearchResult(apply_action(a_initial, action), action, "ok", root, cfg.budget, trace)


# ---------------------------------------------------------------- rewards


@dataclass
class RewardConfig:
    alpha: float = 0.5
    external_weights: Tuple[float, float, float] = (0.5, 0.3, 0.2)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        w = self.external_weights
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("external weights must be 3 non-negative reals summing to 1")


class RewardContext:
    """Frozen model snapshot + probe batch used to score attention states.

    A state is applied to every probe sample as a logit offset relative to
    `reference` (the root state's logits).
    """

    def __init__(self, model: AlignModel, f_text, f_3d, reference: AttentionState,
                 probe_logits: np.ndarray):
        if len(f_text) == 0:
            raise ValueError("probe batch is empty")
        self.model = model
        self.f_text = np.asarray(f_text, dtype=np.float64)
        self.f_3d = np.asarray(f_3d, dtype=np.float64)
        self.reference = reference
        self.probe_logits = np.asarray(probe_logits, dtype=np.float64)
        self._loss_cache: Dict[bytes, float] = {}
        self.evaluations = 0

    def _forward(self, s: AttentionState):
        offset = s.logits - self.reference.logits
        return forward(self.model, self.f_text, self.f_3d,
                       logits_override=self.probe_logits + offset)

    def loss(self, s: AttentionState) -> float:
        key = s.logits.tobytes()
        if key not in self._loss_cache:
            c = self._forward(s)
            self._loss_cache[key] = infonce_bidirectional(
                c.emb_text, c.emb_3d, LossConfig(tau=self.model.tau)).loss
            self.evaluations += 1
        return self._loss_cache[key]

    def external(self, s: AttentionState, weights: Tuple[float, float, float]) -> float:
        c = self._forward(s)
        m = in_batch_retrieval(c.emb_text @ c.emb_3d.T)
        w1, w5, wm = weights
        return w1 * m["r1"] + w5 * m["r5"] + wm * m["map"]


def compute_reward(s_before: AttentionState, s_after: AttentionState,
                   cfg: RewardConfig, model: RewardContext) -> float:
    """alpha * (loss decrease) + (1 - alpha) * weighted retrieval score."""
    r_int = 0.0
    if cfg.alpha > 0:
        if s_before.logits.tobytes() != s_after.logits.tobytes():
            r_int = model.loss(s_before) - model.loss(s_after)
    r_ext = model.external(s_after, cfg.external_weights) if cfg.alpha < 1 else 0.0
    return cfg.alpha * r_int + (1.0 - cfg.alpha) * r_ext


def mcts_optimize_result(a_initial: AttentionState, cfg: MctsConfig, rcfg: RewardConfig,
                         model: RewardContext, trace_sink=None) -> SearchResult:
    return run_search(a_initial, cfg, lambda s: compute_reward(a_initial, s, rcfg, model), trace_sink)


def mcts_optimize(a_initial: AttentionState, cfg: MctsConfig, rcfg: RewardConfig,
                  model: RewardContext) -> AttentionState:
    return mcts_optimize_result(a_initial, cfg, rcfg, model).state
