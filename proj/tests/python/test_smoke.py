import os
import tempfile

import numpy as np
import pytest

import lowrank


def test_svd_reconstructs():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, (7, 4))
    u, s, v = lowrank.svd(a)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-12)
    np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-12)


def test_ranks_and_distances():
    a = np.diag([3.0, 2.0, 1.0])
    assert lowrank.effective_rank(a, 0.4) == 2
    assert lowrank.effective_rank(a, 0.5) == 2
    assert lowrank.effective_rank(a, 0.1) == 3
    assert lowrank.distance_to_rank(a, 1) == pytest.approx(2.0)
    assert lowrank.distance_to_rank(a, 1, "frobenius") == pytest.approx(np.sqrt(5.0))
    assert lowrank.numerical_rank(lowrank.truncated(a, 2)) == 2


def test_errors_are_translated():
    with pytest.raises(lowrank.LowrankError):
        lowrank.distance_to_rank(np.eye(3), 4)
    with pytest.raises(lowrank.LowrankError):
        lowrank.svd(np.array([[np.nan]]))


def test_synthetic_data():
    d = lowrank.gen_synthetic(8, 40, 4, seed=3)
    assert d["x"].shape == (40, 8)
    assert sorted(d["train"] + d["test"]) == list(range(40))
    assert np.bincount(d["labels"]).tolist() == [10, 10, 10, 10]


def test_mlp_gradients_have_rank_one():
    net = lowrank.Network.mlp([5, 8, 8, 2], seed=1)
    x = np.random.default_rng(1).uniform(-1, 1, (6, 5))
    rep = net.gradient_ranks(x)
    assert rep["ok"] and rep["samples_checked"] > 0
    assert max(e["worst_rank"] for e in rep["edges"]) <= 1


def test_forward_matches_numpy():
    net = lowrank.Network.mlp([3, 4, 2], seed=2)
    w1, w2 = net.weights
    x = np.array([0.3, -0.2, 0.9])
    np.testing.assert_allclose(net.forward(x), w2 @ np.maximum(w1 @ x, 0.0), atol=1e-14)
    net.weights = [np.zeros_like(w1), w2]
    np.testing.assert_allclose(net.forward(x), 0.0)


def test_training_lowers_loss():
    d = lowrank.gen_synthetic(8, 64, 2, seed=5)
    net = lowrank.Network.preset("mlp-2-16", 8, 2, seed=5)
    series = net.train(d["x"], d["labels"], loss="softmax_ce", lr=0.1, batch_size=8, epochs=20)
    assert len(series) == 20
    assert series[-1]["train_loss"] < series[0]["train_loss"]
    assert len(net.effective_ranks()) == 3


def test_json_round_trip():
    net = lowrank.Network.mlp([4, 6, 1], seed=0)
    again = lowrank.Network.from_json(net.to_json())
    assert again.k_out == 1 and again.input_size == 4


def test_run_experiment():
    base = os.environ.get("LOWRANK_TEST_TMP", tempfile.gettempdir())
    os.makedirs(base, exist_ok=True)
    out = tempfile.mkdtemp(dir=base)
    config = f"""
output_dir = "{out}"
[dataset]
kind = "synthetic"
n = 6
m = 32
classes = 2
[network]
preset = "mlp-1-8"
[sgd]
lr = 0.05
weight_decay = 1e-3
batch_size = 4
epochs = 3
"""
    runs = lowrank.run_experiment(config)
    assert len(runs) == 1 and runs[0]["ok"], runs
    assert os.path.exists(os.path.join(out, "metrics.csv"))
