"""Index traversal: UCT_Lite best-first search, greedy descent and exact scan."""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .index import HierIndex, IndexNode, ItemStore


@dataclass
class ErsConfig:
    lambda1: float = 0.6
    lambda2: float = 0.2
    lambda3: float = 0.2
    epsilon: float = 1e-6
    i_max: int = 64
    k: int = 10
    success_threshold: float = 0.7
    push_width: int = 2
    reexpand: bool = False
    persistent_stats: bool = False

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("lambdas must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.i_max < 1 or self.k < 1 or self.push_width < 1:
            raise ValueError("i_max, k and push_width must be >= 1")
        if not -1.0 <= self.success_threshold <= 1.0:
            raise ValueError("success_threshold must be in [-1, 1]")


@dataclass
class QueryStats:
    """Visit and success counts keyed by node id and (node id, child index)."""

    node_visits: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    edge_visits: Dict[Tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    edge_success: Dict[Tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))


@dataclass(frozen=True)
class Candidate:
    item_id: int
    similarity: float


@dataclass
class RetrievalResult:
    candidates: List[Candidate]
    items_scored: int = 0        # item and child-centroid similarity evaluations
    nodes_visited: int = 0
    leaves_visited: int = 0
    internal_visited: int = 0
    iterations: int = 0
    status: str = "ok"

    @property
    def ids(self) -> List[int]:
        return [c.item_id for c in self.candidates]


def uct_lite_score(sim: float, n_success: float, n_edge: float, n_parent: float, cfg: ErsConfig) -> float:
    explore = math.sqrt(math.log(max(n_parent, 1)) / (n_edge + cfg.epsilon))
    return cfg.lambda1 * sim + cfg.lambda2 * n_success / (n_edge + cfg.epsilon) + cfg.lambda3 * explore


def _check_query(q, dim: int) -> np.ndarray:
    v = np.asarray(q, dtype=np.float64).reshape(-1)
    if v.size != dim:
        raise ShapeError(f"query dim {v.size} does not match index dim {dim}")
    return v


def _top_k(ids: np.ndarray, sims: np.ndarray, k: int) -> List[Candidate]:
    # similarity descending, ties by ascending id
    order = np.lexsort((ids, -sims))[:k]
    return [Candidate(int(ids[i]), float(sims[i])) for i in order]


def knn_exact(q, items: ItemStore, k: int) -> List[Candidate]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(items) == 0:
        return []
    v = _check_query(q, items.dim)
    return _top_k(items.ids, items.emb @ v, k)


def _score_leaf(index: HierIndex, leaf: IndexNode, v: np.ndarray):
    if leaf.rows is None:
        raise ValueError("index has no item store attached")
    return index.store.emb[leaf.rows] @ v


def greedy_retrieve(q, index: HierIndex, k: int) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    v = _check_query(q, index.dim)
    node = index.root
    res = RetrievalResult([])
    while not node.is_leaf:
        sims = np.array([c.centroid @ v for c in node.children])
        res.items_scored += sims.size
        res.internal_visited += 1
        node = node.children[int(np.argmax(sims))]
    sims = _score_leaf(index, node, v)
    res.items_scored += sims.size
    res.leaves_visited += 1
    res.nodes_visited = res.internal_visited + 1
    res.iterations = res.nodes_visited
    res.candidates = _top_k(node.item_ids, sims, k)
    return res


class ErsSearcher:
    """Holds the index, config and (optionally persistent) success statistics."""

    def __init__(self, index: HierIndex, cfg: ErsConfig = ErsConfig()):
        self.index = index
        self.cfg = cfg
        self.stats = QueryStats()
        self._centroids = {n.node_id: np.stack([c.centroid for c in n.children])
                           for n in index.nodes if not n.is_leaf}

    def retrieve(self, q, k: Optional[int] = None) -> RetrievalResult:
        cfg = self.cfg
        k = cfg.k if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")
        v = _check_query(q, self.index.dim)
        if self.index.n_items == 0:
            return RetrievalResult([], status="empty_index")
        stats = self.stats if cfg.persistent_stats else QueryStats()
        res = RetrievalResult([])
        pool_ids: List[np.ndarray] = []
        pool_sims: List[np.ndarray] = []
        # frontier entries: (-priority, seq, node, path of (node_id, child_idx))
        seq = 0
        frontier = [(-math.inf, seq, self.index.root, ())]
        pushed: Dict[int, set] = defaultdict(set)
        while frontier and res.iterations < cfg.i_max:
            _, _, node, path = heapq.heappop(frontier)
            res.iterations += 1
            res.nodes_visited += 1
            if node.is_leaf:
                sims = _score_leaf(self.index, node, v)
                res.items_scored += sims.size
                res.leaves_visited += 1
                pool_ids.append(node.item_ids)
                pool_sims.append(sims)
                hit = bool(sims.size) and float(sims.max()) >= cfg.success_threshold
                for edge in path:
                    stats.node_visits[edge[0]] += 1
                    stats.edge_visits[edge] += 1
                    stats.edge_success[edge] += hit
                continue
            res.internal_visited += 1
            nid = node.node_id
            sims = self._centroids[nid] @ v
            res.items_scored += sims.size
            n_parent = stats.node_visits[nid]
            scores = np.array([uct_lite_score(float(sims[j]), stats.edge_success[(nid, j)],
                                              stats.edge_visits[(nid, j)], n_parent, cfg)
                               for j in range(sims.size)])
            order = [j for j in np.argsort(-scores, kind="stable") if j not in pushed[nid]]
            if not order:
                continue
            for j in order[:cfg.push_width]:
                pushed[nid].add(j)
                seq += 1
                heapq.heappush(frontier, (-scores[j], seq, node.children[j], path + ((nid, j),)))
            rest = order[cfg.push_width:]
            if cfg.reexpand and rest:
                seq += 1
                heapq.heappush(frontier, (-scores[rest[0]], seq, node, path))
        if pool_ids:
            ids = np.concatenate(pool_ids)
            sims = np.concatenate(pool_sims)
            res.candidates = _top_k(ids, sims, k)
        return res


def ers_retrieve(q, index: HierIndex, cfg: ErsConfig = ErsConfig(),
                 stats: Optional[QueryStats] = None) -> RetrievalResult:
    s = ErsSearcher(index, cfg)
    if stats is not None:
        s.stats = stats
        s.cfg = ErsConfig(**{**cfg.__dict__, "persistent_stats": True})
    return s.retrieve(q)


def item_budget(res: RetrievalResult, max_leaf: int, branching: int) -> int:
    """Upper bound on similarity evaluations for the visited node counts."""
    return res.leaves_visited * max_leaf + res.internal_visited * branching
