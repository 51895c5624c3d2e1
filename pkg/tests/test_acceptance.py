"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import time

import numpy as np
import pytest

from daer.align import (AlignModel, AttentionState, LossConfig, ProjectionSet, aggregate, base_logits,
                        infonce_bidirectional, project_qkv)
from daer.bench import (Scenario, adversarial_instance, alpha_ablation, clustered_dataset, run_benchmark)
from daer.errors import DecodeError
from daer.ers import ErsConfig, ErsSearcher, greedy_retrieve, knn_exact
from daer.index import BuildConfig, ItemStore, build_index, deserialize_index, iter_preorder, serialize_index
from daer.mcts import Edge, MctsConfig, RewardConfig, RewardContext, SearchNode, backpropagate, mcts_optimize, \
    select_edge
from daer.synthetic import SyntheticPairSpec, generate_synthetic_batch
from daer.toy import ToyConfig, run_toy
from daer.trainer import TrainConfig, Trainer
from oracles import central_diff, loop_infonce, loop_matmul, loop_softmax_rows, rel_err


@pytest.fixture()
def report(pytestconfig):
    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        pytestconfig.acceptance_lines.append(line)
        return ok
    return emit


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- 1


def test_c1_numerical_core(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_row, worst_lin, worst_grad = 0.0, 0.0, 0.0
    for _ in range(100):
        t, n, d = (int(x) for x in rng.integers(1, 9, size=3))
        ft, f3 = rng.normal(size=(t, d)), rng.normal(size=(n, d))
        logits = rng.normal(scale=10, size=(t, n))
        a = AttentionState.from_logits(logits)
        worst_row = max(worst_row, float(np.max(np.abs(a.attention.sum(axis=1) - 1))))
        worst_lin = max(worst_lin, float(np.max(np.abs(a.attention - loop_softmax_rows(logits)))))
        w = ProjectionSet.random(d, rng)
        q, k, v3, vt = project_qkv(ft, f3, w)
        for got, x, m in ((q, ft, w.w_q), (k, f3, w.w_k_3d), (v3, f3, w.w_v_3d), (vt, ft, w.w_v_text)):
            worst_lin = max(worst_lin, float(np.max(np.abs(got - loop_matmul(x, m)))))
        zt, z3 = aggregate(a, v3, vt)
        worst_lin = max(worst_lin, float(np.max(np.abs(zt - loop_matmul(a.attention, v3)))),
                        float(np.max(np.abs(z3 - loop_matmul(a.attention.T, vt)))))
    for _ in range(100):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        tau = float(rng.uniform(0.05, 1.0))
        et, e3 = _unit_rows(rng.normal(size=(b, d))), _unit_rows(rng.normal(size=(b, d)))
        res = infonce_bidirectional(et, e3, LossConfig(tau=tau))
        worst_lin = max(worst_lin, abs(res.loss - loop_infonce(et, e3, tau)) / max(1.0, abs(res.loss)))
        f = lambda: infonce_bidirectional(et, e3, LossConfig(tau=tau)).loss
        worst_grad = max(worst_grad, rel_err(res.grad_text, central_diff(f, et)),
                         rel_err(res.grad_3d, central_diff(f, e3)))
    dt = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and worst_lin <= 1e-12 and worst_grad <= 1e-4 and dt < 10
    report(1, ok, f"row_err={worst_row:.1e} oracle_err={worst_lin:.1e} grad_rel_err={worst_grad:.1e} t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def _probe_context(seed):
    spec = SyntheticPairSpec(t_tokens=2, n_points=3, dim=8, concept_count=8, noise_sigma=0.3)
    rng = np.random.default_rng(seed)
    b = generate_synthetic_batch(spec, 16, rng)
    model = AlignModel.init(8, 8, rng)
    lg = base_logits(model, b.f_text, b.f_3d)
    root = AttentionState.from_logits(lg[0])
    return root, RewardContext(model, b.f_text, b.f_3d, root, lg)


def test_c2_mcts_mechanics(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    state = AttentionState.from_logits(np.zeros((2, 3)))
    worst = 0.0
    conserved = True
    for _ in range(1000):
        root = SearchNode(state)
        rewards = {}
        for _ in range(int(rng.integers(1, 40))):
            node, path = root, []
            for _ in range(int(rng.integers(1, 5))):
                if not node.edges or rng.random() < 0.3:
                    node.edges.append(Edge(None, SearchNode(state, node.depth + 1)))
                e = node.edges[int(rng.integers(len(node.edges)))]
                path.append((node, e))
                node = e.child
            r = float(rng.uniform(-1, 1))
            backpropagate(path, r, node)
            for _, e in path:
                rewards.setdefault(id(e), []).append(r)
        stack = [root]
        while stack:
            node = stack.pop()
            for e in node.edges:
                worst = max(worst, abs(e.q - float(np.mean(rewards[id(e)]))) if e.n else 0.0)
                conserved &= e.child.visits == e.n
                stack.append(e.child)
        conserved &= root.visits == sum(e.n for e in root.edges)
    unvisited_ok = True
    for _ in range(1000):
        m = int(rng.integers(2, 12))
        ns = rng.integers(0, 50, size=m)
        ns[int(rng.integers(m))] = 0
        node = SearchNode(state, visits=max(2, int(ns.sum())))
        node.edges = [Edge(None, None, int(n), float(rng.uniform(-1, 1)) if n else 0.0) for n in ns]
        i = select_edge(node, MctsConfig(c=1.5, epsilon=1e-6), rng, None)
        unvisited_ok &= node.edges[i].n == 0
    root, ctx = _probe_context(3)
    cfg = MctsConfig(budget=50, seed=11)
    a = mcts_optimize(root, cfg, RewardConfig(), ctx)
    b = mcts_optimize(root, cfg, RewardConfig(), ctx)
    identical = a.attention.tobytes() == b.attention.tobytes()
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and conserved and unvisited_ok and identical and dt < 30
    report(2, ok, f"mean_err={worst:.1e} conserved={conserved} unvisited_first={unvisited_ok} "
                  f"bit_identical={identical} t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_mcts_efficacy(report):
    t0 = time.perf_counter()
    cfg = ToyConfig(budget=100, rollout_depth=5, delta=0.1, mask_fraction=0.1)
    outs = [run_toy(seed, cfg) for seed in range(50)]
    improved = sum(o.improved for o in outs) / 50
    match = sum(o.matches_oracle for o in outs) / 50
    dt = time.perf_counter() - t0
    ok = improved >= 0.9 and match >= 0.8 and dt < 120
    report(3, ok, f"reward_not_worse={improved:.2f} oracle_match={match:.2f} t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_c4_reward_ablation_ordering(report):
    t0 = time.perf_counter()
    base = TrainConfig(total_steps_p1=300, total_steps_p2=300, warmup_steps=30)
    cells = {c.alpha: c.planted_mass_ratio for c in alpha_ablation(base, (0.0, 0.5, 1.0), range(5))}
    dt = time.perf_counter() - t0
    mid = cells[0.5]
    ok = all(mid >= cells[a] * 0.99 for a in (0.0, 1.0)) and dt < 600
    report(4, ok, f"ratio a=0:{cells[0.0]:.4f} a=0.5:{mid:.4f} a=1:{cells[1.0]:.4f} t={dt:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5


def test_c5_ers_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    store = ItemStore(np.arange(1000), _unit_rows(rng.normal(size=(1000, 16))))
    index = build_index(store, BuildConfig())
    searcher = ErsSearcher(index, ErsConfig(i_max=10 ** 9, push_width=2, reexpand=True, k=10))
    hits = 0
    for q in _unit_rows(rng.normal(size=(200, 16))):
        hits += set(searcher.retrieve(q).ids) == {c.item_id for c in knn_exact(q, store, 10)}
    dt = time.perf_counter() - t0
    ok = hits == 200 and dt < 10
    report(5, ok, f"equal_sets={hits}/200 t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6


def test_c6_ers_beats_greedy_on_adversarial_family(report):
    t0 = time.perf_counter()
    cfg = ErsConfig(lambda1=0.6, lambda2=0.2, lambda3=0.2, i_max=64, k=1)
    g_all, e_all, dominated = [], [], True
    for seed in range(50):
        inst = adversarial_instance(seed)
        searcher = ErsSearcher(inst.index, cfg)
        g = e = 0
        for q in inst.queries:
            truth = knn_exact(q, inst.store, 1)[0].item_id
            g += greedy_retrieve(q, inst.index, 1).ids == [truth]
            e += searcher.retrieve(q).ids == [truth]
        g_all.append(g / len(inst.queries))
        e_all.append(e / len(inst.queries))
        dominated &= e >= g
    dt = time.perf_counter() - t0
    g_mean, e_mean = float(np.mean(g_all)), float(np.mean(e_all))
    ok = max(g_all) <= 0.5 and dominated and e_mean >= 0.9 and dt < 60
    report(6, ok, f"greedy_r1_max={max(g_all):.2f} greedy_r1_mean={g_mean:.2f} ers_r1_mean={e_mean:.2f} "
                  f"ers>=greedy_everywhere={dominated} t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_ers_efficiency_at_desk_scale(report):
    t0 = time.perf_counter()
    store, queries = clustered_dataset(100_000, 64, 256, 100, seed=0)
    index = build_index(store, BuildConfig(levels=3, branching=8))
    searcher = ErsSearcher(index, ErsConfig(k=10))
    recall, scored = [], []
    for q in queries:
        res = searcher.retrieve(q)
        truth = {c.item_id for c in knn_exact(q, store, 10)}
        recall.append(len(truth & set(res.ids)) / 10)
        scored.append(res.items_scored / len(store))
    dt = time.perf_counter() - t0
    r, s = float(np.mean(recall)), float(np.mean(scored))
    ok = r >= 0.9 and s <= 0.05 and dt < 300
    report(7, ok, f"recall@10={r:.3f} scored_fraction={s:.4f} flat_fraction=1.0 t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8


def _partition_and_centroids_ok(index, store):
    ids = index.leaf_ids().tolist()
    if sorted(ids) != sorted(store.ids.tolist()) or len(set(ids)) != len(ids):
        return False
    for node in index.nodes:
        sub = [i for n in iter_preorder(node) if n.is_leaf for i in n.item_ids]
        m = store.emb[store.rows_of(sub)].sum(axis=0)
        if np.max(np.abs(node.centroid - m / np.linalg.norm(m))) > 1e-6:
            return False
    return True


def test_c8_index_integrity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    inv_ok = trip_ok = trunc_ok = True
    for b in range(20):
        n, d = int(rng.integers(1, 1500)), int(rng.integers(2, 24))
        store = ItemStore(np.arange(n) * 7 + b, _unit_rows(rng.normal(size=(n, d))))
        cfg = BuildConfig(int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 64)), 10, b)
        index = build_index(store, cfg)
        inv_ok &= _partition_and_centroids_ok(index, store)
        data = serialize_index(index)
        back = deserialize_index(data, store)
        trip_ok &= serialize_index(back) == data
        step = max(1, len(data) // 200)
        for cut in range(0, len(data), step):
            try:
                deserialize_index(data[:cut])
                trunc_ok = False
            except DecodeError:
                pass
    dt = time.perf_counter() - t0
    ok = inv_ok and trip_ok and trunc_ok and dt < 30
    report(8, ok, f"invariants={inv_ok} bitwise_round_trip={trip_ok} truncation_decode_error={trunc_ok} t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_training_plumbing(report, tmp_path):
    t0 = time.perf_counter()
    cfg = TrainConfig(total_steps_p1=60, total_steps_p2=100, warmup_steps=10)
    ref = Trainer(cfg)
    ref.run(60)
    path = str(tmp_path / "c9.ckpt")
    ref.save(path)
    tail_ref = [r["loss"] for r in ref.run(100)]
    tail = [r["loss"] for r in Trainer.load(path).run(100)]
    resume_ok = len(tail) == 100 and tail == tail_ref

    decreasing = 0
    for seed in range(5):
        loss = [r["loss"] for r in Trainer(TrainConfig(total_steps_p1=200, total_steps_p2=0, warmup_steps=20,
                                                       seed=seed)).run()]
        decreasing += np.median(loss[-20:]) < np.median(loss[:20])

    small = dict(warmup_steps=5, seed=4)
    a = Trainer(TrainConfig(total_steps_p1=50, total_steps_p2=0, **small))
    b = Trainer(TrainConfig(total_steps_p1=20, total_steps_p2=30, mcts_enabled=False, **small))
    la, lb = [r["loss"] for r in a.run()], [r["loss"] for r in b.run()]
    same = la == lb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    dt = time.perf_counter() - t0
    ok = resume_ok and decreasing == 5 and same and dt < 300
    report(9, ok, f"resume_identical={resume_ok} phase1_decrease={decreasing}/5 disabled_phase2_identical={same} "
                  f"t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_overhead_instrumentation(report):
    t0 = time.perf_counter()
    desk = dict(total_steps_p1=0, total_steps_p2=40)
    on = Trainer(TrainConfig(**desk)).run()
    off = Trainer(TrainConfig(mcts_enabled=False, **desk)).run()
    on_ms = float(np.mean([r["step_ms"] for r in on]))
    off_ms = float(np.mean([r["step_ms"] for r in off]))
    share = sum(r["mcts_ms"] for r in on) / sum(r["step_ms"] for r in on)
    fields = all("mcts_ms" in r and "step_ms" in r for r in on + off)
    out = run_benchmark(Scenario(n_items=5000, n_queries=20, dim=16, n_clusters=32, warmup=2))
    lat = out["ers"][1]
    counters = lat.items_scored_mean > 0 and lat.nodes_visited_mean > 0 and out["knn"][1].items_scored_mean == 5000
    dt = time.perf_counter() - t0
    ok = fields and counters and 0 < share < 1 and on_ms > off_ms
    report(10, ok, f"step_ms on={on_ms:.1f} off={off_ms:.1f} mcts_share={share:.3f} "
                   f"ers_items_scored={lat.items_scored_mean:.0f} ers_nodes={lat.nodes_visited_mean:.1f} t={dt:.1f}s")
    assert ok
