"""Retrieval benchmark harness and synthetic scenario generators.

Ground truth is always the exact flat scan. Each query has one relevant item,
the flat-scan nearest neighbour.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, IO, List, Optional, Sequence, Tuple

import numpy as np

from .ers import ErsConfig, ErsSearcher, RetrievalResult, greedy_retrieve, knn_exact
from .errors import ConfigError
from .index import BuildConfig, HierIndex, ItemStore, build_index
from .metrics import mean_ap, ndcg_at_k, percentile, recall_at_k, set_recall_at_k

log = logging.getLogger(__name__)

METHODS = ("knn", "greedy", "ers")


@dataclass
class MetricReport:
    recall_at: Dict[int, float]
    rr_at: Dict[int, float]
    ndcg_at_5: float
    mean_ap: float
    n_queries: int


@dataclass
class LatencyReport:
    mean_query_ms: float
    p50: float
    p95: float
    qps: float
    items_scored_mean: float
    nodes_visited_mean: float = 0.0


# ---------------------------------------------------------------- generators


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def clustered_dataset(n_items: int, dim: int, n_clusters: int, n_queries: int, seed: int = 0,
                      item_noise: float = 0.5, query_noise: float = 0.1):
    """Items scattered around random unit centres; queries are noised copies of
    random items. Noise scales are norms (per-component sigma / sqrt(dim))."""
    rng = np.random.default_rng(seed)
    centers = _unit(rng.normal(size=(n_clusters, dim)))
    labels = rng.integers(n_clusters, size=n_items)
    emb = _unit(centers[labels] + item_noise * rng.normal(size=(n_items, dim)) / np.sqrt(dim))
    src = rng.integers(n_items, size=n_queries)
    queries = _unit(emb[src] + query_noise * rng.normal(size=(n_queries, dim)) / np.sqrt(dim))
    return ItemStore(np.arange(n_items, dtype=np.uint64), emb), queries


def _plane_point(theta_deg: float, basis: np.ndarray, jitter: np.ndarray) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    return _unit(np.cos(t) * basis[0] + np.sin(t) * basis[1] + jitter)


@dataclass
class AdversarialInstance:
    store: ItemStore
    queries: np.ndarray
    build: BuildConfig
    index: HierIndex


def adversarial_instance(seed: int, dim: int = 16, per_cluster: int = 24,
                         n_queries: int = 5) -> AdversarialInstance:
    """Two clusters where the query's nearest item hides in the far cluster.

    In a random plane: cluster A sits tightly at 0 degrees, cluster B tightly at
    90 degrees plus two outliers at 50 and 130 degrees (keeping B's centroid
    near 90). Queries near 40 degrees are closer to A's centroid but their
    nearest item is the 50-degree outlier in B.
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    basis = basis.T
    jit = 0.01 / np.sqrt(dim)
    pts = [_plane_point(rng.normal(0, 2), basis, jit * rng.normal(size=dim)) for _ in range(per_cluster)]
    pts += [_plane_point(90 + rng.normal(0, 2), basis, jit * rng.normal(size=dim)) for _ in range(per_cluster - 2)]
    pts += [_plane_point(50, basis, jit * rng.normal(size=dim)), _plane_point(130, basis, jit * rng.normal(size=dim))]
    ids = rng.permutation(len(pts)).astype(np.uint64) + np.uint64(1000 * seed)
    store = ItemStore(ids, np.stack(pts))
    qs = np.stack([_plane_point(40 + rng.uniform(-3, 3), basis, jit * rng.normal(size=dim))
                   for _ in range(n_queries)])
    cfg = BuildConfig(levels=1, branching=2, leaf_capacity=8, seed=seed)
    return AdversarialInstance(store, qs, cfg, build_index(store, cfg))


def adversarial_query_count(index: HierIndex, queries: np.ndarray) -> int:
    """Queries whose flat-scan nearest item is not under the root child with
    the most similar centroid."""
    count = 0
    for q in queries:
        top = knn_exact(q, index.store, 1)[0].item_id
        kids = index.root.children
        if not kids:
            continue
        best = kids[int(np.argmax([c.centroid @ q for c in kids]))]
        under = {int(i) for leaf in _leaves(best) for i in leaf.item_ids}
        count += top not in under
    return count


def _leaves(node):
    if node.is_leaf:
        return [node]
    return [l for c in node.children for l in _leaves(c)]


# ---------------------------------------------------------------- evaluation


def metric_report(rankings: Sequence[Sequence[int]], truths: Sequence[Sequence[int]],
                  ks: Sequence[int] = (1, 5, 10)) -> MetricReport:
    rel = [[t[0]] for t in truths]
    return MetricReport(
        recall_at={k: float(np.mean([set_recall_at_k(r, t, k) for r, t in zip(rankings, truths)])) for k in ks},
        rr_at={k: float(np.mean([recall_at_k(r, x, k) for r, x in zip(rankings, rel)])) for k in ks},
        ndcg_at_5=float(np.mean([ndcg_at_k(r, {x[0]: 1.0}, 5) for r, x in zip(rankings, rel)])),
        mean_ap=mean_ap(rankings, rel),
        n_queries=len(rankings),
    )


def _runner(method: str, index: HierIndex, ers_cfg: ErsConfig, k: int):
    if method == "knn":
        def run(q):
            cands = knn_exact(q, index.store, k)
            return RetrievalResult(cands, items_scored=len(index.store))
        return run
    if method == "greedy":
        return lambda q: greedy_retrieve(q, index, k)
    if method == "ers":
        searcher = ErsSearcher(index, replace(ers_cfg, k=k))
        return searcher.retrieve
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def evaluate_method(method: str, index: HierIndex, queries: np.ndarray, truths: Sequence[Sequence[int]],
                    ers_cfg: ErsConfig = ErsConfig(), k: int = 10, warmup: int = 10,
                    ks: Sequence[int] = (1, 5, 10), sink: Optional[IO[str]] = None):
    run = _runner(method, index, ers_cfg, k)
    for q in queries[:warmup]:
        run(q)
    times, scored, visited, rankings = [], [], [], []
    t_all = time.perf_counter()
    for qi, q in enumerate(queries):
        t0 = time.perf_counter()
        res = run(q)
        times.append((time.perf_counter() - t0) * 1e3)
        scored.append(res.items_scored)
        visited.append(res.nodes_visited)
        rankings.append(res.ids)
        if sink is not None:
            for rank, c in enumerate(res.candidates, start=1):
                sink.write(json.dumps({"method": method, "query_id": qi, "rank": rank, "item_id": c.item_id,
                                       "similarity": c.similarity, "items_scored": res.items_scored,
                                       "nodes_visited": res.nodes_visited}) + "\n")
    total = time.perf_counter() - t_all
    metrics = metric_report(rankings, truths, ks)
    lat = LatencyReport(float(np.mean(times)), percentile(times, 50), percentile(times, 95),
                        len(queries) / total if total > 0 else float("inf"),
                        float(np.mean(scored)), float(np.mean(visited)))
    return metrics, lat


@dataclass
class Scenario:
    generator: str = "clustered"        # or "adversarial"
    n_items: int = 10000
    dim: int = 64
    n_clusters: int = 256
    n_queries: int = 200
    item_noise: float = 0.5
    query_noise: float = 0.1
    methods: Tuple[str, ...] = ("knn", "greedy", "ers")
    k: int = 10
    levels: int = 3
    branching: int = 8
    leaf_capacity: int = 32
    kmeans_iters: int = 25
    lambda1: float = 0.6
    lambda2: float = 0.2
    lambda3: float = 0.2
    i_max: int = 64
    push_width: int = 2
    instances: int = 1
    warmup: int = 10
    seed: int = 0

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if self.generator not in ("clustered", "adversarial"):
            raise ValueError("generator must be 'clustered' or 'adversarial'")

    def ers_config(self) -> ErsConfig:
        return ErsConfig(self.lambda1, self.lambda2, self.lambda3, i_max=self.i_max, k=self.k,
                         push_width=self.push_width)

    def build_config(self) -> BuildConfig:
        return BuildConfig(self.levels, self.branching, self.leaf_capacity, self.kmeans_iters, self.seed)


def _scenario_data(sc: Scenario):
    if sc.generator == "clustered":
        store, queries = clustered_dataset(sc.n_items, sc.dim, sc.n_clusters, sc.n_queries, sc.seed,
                                           sc.item_noise, sc.query_noise)
        yield build_index(store, sc.build_config()), queries
    else:
        for i in range(sc.instances):
            inst = adversarial_instance(sc.seed + i, sc.dim)
            yield inst.index, inst.queries


def run_benchmark(sc: Scenario, sink: Optional[IO[str]] = None,
                  csv_path: Optional[str] = None) -> Dict[str, Tuple[MetricReport, LatencyReport]]:
    """Run every method on the same queries. With several instances the
    reports are averaged across instances."""
    per: Dict[str, List[Tuple[MetricReport, LatencyReport]]] = {m: [] for m in sc.methods}
    for index, queries in _scenario_data(sc):
        truths = [[c.item_id for c in knn_exact(q, index.store, sc.k)] for q in queries]
        for m in sc.methods:
            per[m].append(evaluate_method(m, index, queries, truths, sc.ers_config(), sc.k,
                                          sc.warmup, ks=tuple(sorted({1, 5, sc.k})), sink=sink))
    out = {m: _average(v) for m, v in per.items()}
    if sink is not None:
        for m, (mr, lr) in out.items():
            sink.write(json.dumps({"summary": True, "method": m, "metrics": asdict(mr),
                                   "latency": asdict(lr)}) + "\n")
    if csv_path:
        write_csv(csv_path, out)
    return out


def _average(reports):
    if len(reports) == 1:
        return reports[0]
    ms = [r[0] for r in reports]
    ls = [r[1] for r in reports]
    mr = MetricReport({k: float(np.mean([m.recall_at[k] for m in ms])) for k in ms[0].recall_at},
                      {k: float(np.mean([m.rr_at[k] for m in ms])) for k in ms[0].rr_at},
                      float(np.mean([m.ndcg_at_5 for m in ms])), float(np.mean([m.mean_ap for m in ms])),
                      sum(m.n_queries for m in ms))
    lr = LatencyReport(*(float(np.mean([getattr(l, f) for l in ls]))
                         for f in ("mean_query_ms", "p50", "p95", "qps", "items_scored_mean",
                                   "nodes_visited_mean")))
    return mr, lr


def write_csv(path: str, reports: Dict[str, Tuple[MetricReport, LatencyReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        ks = sorted(next(iter(reports.values()))[0].recall_at)
        w.writerow(["method"] + [f"R@{k}" for k in ks] + [f"RR@{k}" for k in ks]
                   + ["NDCG@5", "mAP", "avg_query_latency_ms", "p50_ms", "p95_ms", "throughput_qps",
                      "items_scored_mean", "nodes_visited_mean"])
        for m, (mr, lr) in reports.items():
            w.writerow([m] + [f"{mr.recall_at[k]:.4f}" for k in ks] + [f"{mr.rr_at[k]:.4f}" for k in ks]
                       + [f"{mr.ndcg_at_5:.4f}", f"{mr.mean_ap:.4f}", f"{lr.mean_query_ms:.4f}",
                          f"{lr.p50:.4f}", f"{lr.p95:.4f}", f"{lr.qps:.1f}", f"{lr.items_scored_mean:.1f}",
                          f"{lr.nodes_visited_mean:.1f}"])


# ---------------------------------------------------------------- reward ablation grid


@dataclass
class AlphaCell:
    alpha: float
    seeds: List[int]
    planted_mass_ratio: float
    loss: float
    r1: float
    r5: float
    map: float
    per_seed: List[float] = field(default_factory=list)


def alpha_ablation(base, alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                   seeds: Sequence[int] = (0, 1, 2, 3, 4), eval_n: int = 256,
                   sink: Optional[IO[str]] = None) -> List[AlphaCell]:
    """Train one run per (alpha, seed) from `base` (a TrainConfig) and report
    seed-averaged held-out metrics per alpha, one record per cell."""
    from .trainer import Trainer, planted_mass_ratio
    cells = []
    for a in alphas:
        evals = []
        for s in seeds:
            tr = Trainer(replace(base, alpha=float(a), seed=int(s)))
            tr.run()
            ev = tr.evaluate(eval_n)
            ev["planted_mass_ratio"] = planted_mass_ratio(ev["planted_mass"], tr.spec)
            evals.append(ev)
        cell = AlphaCell(float(a), list(seeds),
                         float(np.mean([e["planted_mass_ratio"] for e in evals])),
                         float(np.mean([e["loss"] for e in evals])),
                         float(np.mean([e["r1"] for e in evals])),
                         float(np.mean([e["r5"] for e in evals])),
                         float(np.mean([e["map"] for e in evals])),
                         [e["planted_mass_ratio"] for e in evals])
        cells.append(cell)
        if sink is not None:
            sink.write(json.dumps(asdict(cell)) + "\n")
    return cells
