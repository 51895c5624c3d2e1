"""Compare knn, greedy and ers on the clustered scenario: recall, latency and items scored."""

import argparse
import json

from daer.bench import Scenario, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-items", type=int, default=100_000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--clusters", type=int, default=256)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--i-max", type=int, default=64)
    p.add_argument("--csv")
    args = p.parse_args()
    sc = Scenario(n_items=args.n_items, dim=args.dim, n_clusters=args.clusters, n_queries=args.queries,
                  i_max=args.i_max)
    for method, (m, lat) in run_benchmark(sc, csv_path=args.csv).items():
        print(json.dumps({"method": method, "recall@10": m.recall_at[10], "p50_ms": lat.p50, "p95_ms": lat.p95,
                          "items_scored": lat.items_scored_mean,
                          "scored_fraction": lat.items_scored_mean / args.n_items,
                          "nodes_visited": lat.nodes_visited_mean}))


if __name__ == "__main__":
    main()
