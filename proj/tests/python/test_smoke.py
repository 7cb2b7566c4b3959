import json
import math
import os
import random
import subprocess

import pytest

import diffattn as da


def test_softmax_and_matmul():
    p = da.softmax([1.0, 2.0, 3.0])
    assert math.isclose(sum(p), 1.0, abs_tol=1e-12)
    assert p[2] > p[1] > p[0]
    assert da.matmul([[1, 2], [3, 4]], [[5], [6]]) == [[17.0], [39.0]]
    with pytest.raises(da.ShapeError):
        da.matmul([[1, 2]], [[1, 2]])


def test_projection_identity():
    rng = random.Random(3)
    for _ in range(20):
        s = [rng.random() + 0.01 for _ in range(8)]
        v = [rng.random() for _ in range(8)]
        rebuilt = [a + b for a, b in zip(da.project(v, s), da.reject(v, s))]
        assert all(math.isclose(x, y, abs_tol=1e-12) for x, y in zip(rebuilt, v))


def test_triplet_closed_form():
    s, sp, sm = [0.5, 0.5], [0.6, 0.4], [0.5, 0.5]
    loss = da.triplet_loss(s, sp, sm, 0.2)
    assert math.isclose(loss, 0.02 + 0.2, abs_tol=1e-15)
    target, support, oppose, active = da.triplet_grads(s, sp, sm, 0.2)
    assert active
    assert support == pytest.approx([-2 * (a - b) for a, b in zip(s, sp)], abs=1e-15)
    assert oppose == pytest.approx([2 * (a - b) for a, b in zip(s, sm)], abs=1e-15)
    assert target == pytest.approx([2 * (b - a) for a, b in zip(sp, sm)], abs=1e-15)


def test_metrics():
    assert da.rank_correlation([0.1, 0.5, 0.4], [0.1, 0.5, 0.4]) == 1.0
    assert da.rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert da.normalize_answer("The Dog") == "dog"
    assert da.normalize_answer("two") == "2"
    answers = ["dog"] * 2 + ["cat"] * 8
    assert math.isclose(da.vqa_accuracy("Dog", answers), 2 / 3)
    assert da.vqa_accuracy("cat", answers) == 1.0
    assert da.vqa_accuracy("bird", answers) == 0.0
    pooled = da.downscale_attention([[1.0] * 28 for _ in range(28)], 14)
    assert math.isclose(sum(pooled), 1.0, abs_tol=1e-9)
    assert da.decay_factor(1, 1) == 0.1


def test_knn_matches_brute_force():
    rng = random.Random(11)
    pts = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(200)]
    for q in (0, 17, 123):
        d = sorted((sum((a - b) ** 2 for a, b in zip(pts[q], p)), i)
                   for i, p in enumerate(pts) if i != q)
        assert da.knn(pts, q, 5) == [i for _, i in d[:5]]


def test_grad_check_dcn():
    errors = da.grad_check("dcn-mul-v2", samples=1, seed=4)
    assert set(errors) >= {"W_I", "W_Q", "W_A", "W_1", "W_2"}
    assert max(errors.values()) < 1e-4


def test_short_training_run():
    out = da.train_and_evaluate("dan", n_items=400, epochs=3, seed=2)
    assert len(out["history"]) == 3
    assert 0.0 <= out["accuracy"] <= 1.0
    assert -1.0 <= out["rank_corr"] <= 1.0


def test_cli_roundtrip(tmp_path):
    ds = str(tmp_path / "ds.dfa")
    code, out, _ = da.run_cli(["--json", "gen-data", "--n", "300", "--seed", "5", "--out", ds])
    assert code == 0
    summary = json.loads(out)
    assert summary["items"] == 300
    code, _, err = da.run_cli(["gen-data", "--out", ds, "--bogus"])
    assert code == 1 and "bogus" in err


@pytest.mark.skipif("DIFFATTN_CLI" not in os.environ, reason="CLI binary not provided")
def test_cli_binary_rank_corr(tmp_path):
    cli = os.environ["DIFFATTN_CLI"]
    ds, idx, params, maps = (str(tmp_path / n) for n in ("d.dfa", "i.dfa", "p.dfa", "m.dfa"))
    run = lambda *a: subprocess.run([cli, *a], check=True, capture_output=True, text=True)
    run("gen-data", "--n", "400", "--seed", "1", "--out", ds)
    run("build-index", "--data", ds, "--clusters", "25", "--out", idx)
    run("train", "--data", ds, "--index", idx, "--model", "dcn-mul-v1", "--epochs", "1",
        "--hidden", "8", "--batch", "50", "--out", params)
    run("eval", "--data", ds, "--index", idx, "--params", params, "--maps-out", maps)
    out = run("rank-corr", "--a", maps, "--b", maps).stdout.strip()
    assert out == "1.0"
