import json

import numpy as np
import pytest

from daer.cli import main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def records(path):
    with open(path) as fh:
        return [json.loads(x) for x in fh]


@pytest.fixture()
def data(tmp_path, capsys):
    items = tmp_path / "items.emb"
    code, _, _ = run(["gen-data", "--out", items, "--seed", 3, "--set", "n_items=1000", "--set", "dim=12",
                      "--set", "n_clusters=16", "--set", "n_queries=20"], capsys)
    assert code == 0
    index = tmp_path / "items.idx"
    assert run(["build-index", "--items", items, "--out", index], capsys)[0] == 0
    return items, index


def test_gen_data_is_deterministic(tmp_path, capsys, data):
    items, _ = data
    again = tmp_path / "again.emb"
    run(["gen-data", "--out", again, "--seed", 3, "--set", "n_items=1000", "--set", "dim=12",
         "--set", "n_clusters=16", "--set", "n_queries=20"], capsys)
    assert again.read_bytes() == items.read_bytes()
    assert (tmp_path / "again.emb.queries").read_bytes() == (tmp_path / "items.emb.queries").read_bytes()


def test_exhaustive_ers_matches_knn(tmp_path, capsys, data):
    items, index = data
    outs = {}
    for method, extra in (("knn", []), ("ers", ["--i-max", 100000, "--reexpand"])):
        path = tmp_path / f"{method}.jsonl"
        code, _, _ = run(["query", "--index", index, "--items", items, "--queries", f"{items}.queries",
                          "--method", method, "--out", path] + extra, capsys)
        assert code == 0
        recs = records(path)
        assert recs[0]["header"] and recs[0]["method"] == method
        outs[method] = {}
        for r in recs[1:]:
            outs[method].setdefault(r["query_id"], set()).add(r["item_id"])
    assert outs["knn"] == outs["ers"] and len(outs["knn"]) == 20


def test_query_hex_and_dimension_mismatch(capsys, data):
    items, index = data
    q = np.zeros(12, dtype="<f4")
    q[0] = 1
    code, out, _ = run(["query", "--index", index, "--items", items, "--query-hex", q.tobytes().hex(),
                        "--method", "greedy", "--k", 3], capsys)
    assert code == 0 and len(out.splitlines()) == 4
    code, _, err = run(["query", "--index", index, "--items", items, "--query-hex", q[:8].tobytes().hex()], capsys)
    assert code == 4 and json.loads(err.splitlines()[-1])["error"] == "dimension"


def test_inspect_and_truncation(tmp_path, capsys, data):
    items, index = data
    for path, fmt in ((items, "DAEREMB1"), (index, "DAERIDX1")):
        code, out, _ = run(["inspect", path], capsys)
        assert code == 0 and json.loads(out)["format"] == fmt
        cut = tmp_path / "cut.bin"
        cut.write_bytes(path.read_bytes()[:-5])
        code, _, err = run(["inspect", cut], capsys)
        assert code == 3 and json.loads(err)["code"] == 3


def test_usage_errors(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", tmp_path / "x", "--set", "no_such_key=1"], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"
    assert run(["frobnicate"], capsys)[0] == 2
    assert run(["gen-data"], capsys)[0] == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("budget = many\n")
    assert run(["train", "--config", cfg], capsys)[0] == 2


def test_missing_file_is_other_error(tmp_path, capsys):
    code, _, err = run(["inspect", tmp_path / "absent"], capsys)
    assert code == 5 and json.loads(err)["error"] == "other"


TINY = ["--set", "d=8", "--set", "d_prime=8", "--set", "t_tokens=4", "--set", "n_points=16", "--set", "batch=8",
        "--set", "total_steps_p1=6", "--set", "total_steps_p2=6", "--set", "warmup_steps=2",
        "--set", "mcts_every_k=3", "--set", "probe_size=8"]


def test_train_resume_and_export(tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    code, out, _ = run(["train", "--out", ck, "--steps", 8, "--budget", 4] + TINY, capsys)
    assert code == 0 and json.loads(out)["step"] == 8
    code, out, _ = run(["train", "--resume", ck, "--out", ck], capsys)
    assert code == 0 and json.loads(out)["step"] == 12
    recs = records(f"{ck}.metrics.jsonl")
    assert [r["step"] for r in recs if not r.get("header")] == list(range(12))
    assert sum(1 for r in recs if r.get("header")) == 2
    code, out, _ = run(["inspect", ck], capsys)
    assert json.loads(out)["step"] == 12
    prefix = tmp_path / "attn"
    code, out, _ = run(["export-attn", "--checkpoint", ck, "--out", prefix, "--budget", 6], capsys)
    assert code == 0
    for name in ("initial", "optimized"):
        a = np.loadtxt(f"{prefix}_{name}.csv", delimiter=",")
        assert a.shape == (4, 16)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-8)


def test_bench_cli_writes_csv(tmp_path, capsys):
    csv = tmp_path / "b.csv"
    out = tmp_path / "b.jsonl"
    code, _, _ = run(["bench", "--out", out, "--csv", csv, "--set", "n_items=800", "--set", "dim=8",
                      "--set", "n_queries=5", "--set", "n_clusters=8", "--set", "warmup=1"], capsys)
    assert code == 0
    assert len(csv.read_text().splitlines()) == 4
    assert records(out)[0]["header"]
