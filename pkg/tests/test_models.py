import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hatesage.graph import from_edges
from hatesage.models import (
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    lr_forward,
    mlp_forward,
    sage_forward,
    save_checkpoint,
)
from hatesage.samplers import RngStream, full_block, sample_neighbors

from conftest import random_graph

AGGS = ["mean", "maxpool", "attention"]


def small_sage(agg, hidden=4, layers=2, fanouts=None):
    return ModelConfig.preset(f"sage-{agg}", hidden_dim=hidden, layers=layers, fanouts=fanouts or (5,) * layers)


def randomize_biases(params, gen):
    # zero biases put many relu inputs at exactly 0; shake them for coverage
    for k, v in params.tensors.items():
        if k.endswith(".b") or k == "b":
            params.tensors[k] = gen.normal(size=v.shape)
    return params


class TestConfig:
    def test_presets(self):
        assert ModelConfig.preset("lr").layers == 0
        m = ModelConfig.preset("mlp")
        assert (m.layers, m.hidden_dim, m.dropout_rate) == (2, 64, 0.5)
        s = ModelConfig.preset("sage-attention")
        assert (s.layers, s.hidden_dim, s.fanouts, s.direction) == (2, 128, (25, 10), "both")

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(kind="sage", layers=2, fanouts=(5,))
        with pytest.raises(ValueError):
            ModelConfig(kind="lr", layers=1)
        with pytest.raises(ValueError):
            ModelConfig.preset("sage-sum")

    def test_dict_round_trip(self):
        for name in ("lr", "mlp", "sage-maxpool"):
            c = ModelConfig.preset(name)
            assert ModelConfig.from_dict(c.as_dict()) == c


class TestInit:
    def test_lr_shapes(self):
        p = init_params(ModelConfig.preset("lr"), 5, RngStream(0))
        assert p["W"].shape == (5, 1)
        assert p["b"].shape == (1,) and p["b"][0] == 0

    def test_deterministic(self):
        c = ModelConfig.preset("sage-maxpool")
        a = init_params(c, 7, RngStream(3))
        b = init_params(c, 7, RngStream(3))
        assert a.names() == b.names()
        for k in a.names():
            assert np.array_equal(a[k], b[k])

    def test_attention_vector_length(self):
        p = init_params(ModelConfig.preset("sage-attention", hidden_dim=64), 10, RngStream(0))
        assert p["sage0.att.a"].size == 128
        assert p["sage1.att.a"].size == 128

    def test_sage_shapes(self):
        p = init_params(ModelConfig.preset("sage-mean"), 10, 0)
        assert p["sage0.W"].shape == (20, 128)
        assert p["sage1.W"].shape == (256, 128)
        assert p["head.W"].shape == (128, 1)

    def test_zero_dim(self):
        with pytest.raises(ValueError):
            init_params(ModelConfig.preset("lr"), 0)
        with pytest.raises(ValueError):
            init_params(ModelConfig.preset("mlp", hidden_dim=0), 4)

    def test_glorot_bounds(self):
        p = init_params(ModelConfig.preset("mlp"), 30, 0)
        lim = np.sqrt(6 / (30 + 64))
        assert np.abs(p["hidden0.W"]).max() <= lim
        assert p.init == "glorot-uniform"


class TestLinearAndMlp:
    def test_lr_zero(self):
        p = ModelParams({"W": np.zeros((3, 1)), "b": np.zeros(1)})
        z = lr_forward(p, np.ones((2, 3)))
        assert np.array_equal(z, [0.0, 0.0])
        assert 1 / (1 + np.exp(-z[0])) == 0.5

    def test_lr_unit(self):
        p = ModelParams({"W": np.array([[1.0], [0.0], [0.0]]), "b": np.zeros(1)})
        assert lr_forward(p, [[2.0, 5.0, -1.0]])[0] == 2.0

    def test_lr_matches_loop_matmul(self):
        gen = np.random.default_rng(0)
        W, b = gen.normal(size=(6, 1)), gen.normal(size=1)
        x = gen.normal(size=(10, 6))
        expected = []
        for i in range(10):
            acc = 0.0
            for j in range(6):
                acc += x[i, j] * W[j, 0]
            expected.append(acc + b[0])
        np.testing.assert_allclose(lr_forward(ModelParams({"W": W, "b": b}), x), expected, rtol=0, atol=1e-12)

    def test_lr_width_mismatch(self):
        with pytest.raises(ValueError):
            lr_forward(ModelParams({"W": np.zeros((3, 1)), "b": np.zeros(1)}), np.ones((1, 4)))

    def test_mlp_zero_weights(self):
        p = init_params(ModelConfig.preset("mlp"), 4, 0)
        for k in p.names():
            p.tensors[k] = np.zeros_like(p[k])
        p.tensors["out.b"] = np.array([0.37])
        np.testing.assert_array_equal(mlp_forward(p, np.ones((3, 4))), [0.37] * 3)

    def test_mlp_hand_example(self):
        # hidden = relu(1*1 + 2*0.5 + 0.5) = 2.5; logit = 2*2.5 - 1 = 4
        p = ModelParams({
            "hidden0.W": np.array([[1.0], [0.5]]),
            "hidden0.b": np.array([0.5]),
            "out.W": np.array([[2.0]]),
            "out.b": np.array([-1.0]),
        })
        assert mlp_forward(p, [[1.0, 2.0]])[0] == 4.0

    def test_mlp_inference_deterministic(self):
        p = init_params(ModelConfig.preset("mlp"), 4, 1)
        x = np.random.default_rng(0).normal(size=(5, 4))
        assert np.array_equal(mlp_forward(p, x), mlp_forward(p, x, rng=9))

    def test_mlp_dropout_changes_output(self):
        p = randomize_biases(init_params(ModelConfig.preset("mlp"), 4, 1), np.random.default_rng(0))
        x = np.random.default_rng(0).normal(size=(5, 4))
        a = mlp_forward(p, x, dropout_active=True, rng=1)
        b = mlp_forward(p, x, dropout_active=True, rng=1)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, mlp_forward(p, x))


def dense_mean_oracle(adj, x, params, layers):
    """Plain numpy message passing with full neighborhoods."""
    deg = adj.sum(1, keepdims=True)
    h = x
    for i in range(layers):
        agg = np.where(deg > 0, adj @ h / np.maximum(deg, 1), 0.0)
        h = np.maximum(np.hstack([h, agg]) @ params[f"sage{i}.W"] + params[f"sage{i}.b"], 0)
        if i < layers - 1:
            norm = np.linalg.norm(h, axis=1, keepdims=True)
            h = np.where(norm > 0, h / np.where(norm > 0, norm, 1), 0.0)
    return (h @ params["head.W"] + params["head.b"]).ravel()


class TestSage:
    def test_empty_neighborhood(self):
        g = from_edges([(1, 2)], 3)
        c = small_sage("mean", hidden=3, layers=1, fanouts=(5,))
        p = randomize_biases(init_params(c, 2, 0), np.random.default_rng(1))
        x = np.array([[0.5, -1.0], [2.0, 2.0], [1.0, 0.0]])
        got = sage_forward(p, full_block(g, [0], 1), x, c)
        h = np.maximum(np.concatenate([x[0], [0.0, 0.0]]) @ p["sage0.W"] + p["sage0.b"], 0)
        np.testing.assert_allclose(got, h @ p["head.W"] + p["head.b"], rtol=0, atol=1e-14)

    def test_hand_computed_two_hop(self):
        # 0-1, 1-2, 2-3 undirected, identity-like weights: W = [I; I]
        g = from_edges([(0, 1), (1, 2), (2, 3)], 4)
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
        c = ModelConfig.preset("sage-mean", hidden_dim=2, layers=2, fanouts=(10, 10))
        eye = np.vstack([np.eye(2), np.eye(2)])
        p = ModelParams({
            "sage0.W": eye, "sage0.b": np.zeros(2),
            "sage1.W": eye, "sage1.b": np.zeros(2),
            "head.W": np.array([[1.0], [2.0]]), "head.b": np.array([0.5]),
        })
        # layer 1: h = x + mean(nbrs), then unit rows
        h1 = np.array([[1.0, 1.0], [1.0, 1.5], [2.0, 1.5], [3.0, 1.0]])
        h1 = h1 / np.linalg.norm(h1, axis=1, keepdims=True)
        h2 = h1 + np.array([h1[1], (h1[0] + h1[2]) / 2, (h1[1] + h1[3]) / 2, h1[2]])
        expected = h2 @ [1.0, 2.0] + 0.5
        got = sage_forward(p, full_block(g, [0, 1, 2, 3], 2), x, c)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
        adj = np.zeros((4, 4), bool)
        for a, b in [(0, 1), (1, 2), (2, 3)]:
            adj[a, b] = adj[b, a] = True
        np.testing.assert_allclose(got, dense_mean_oracle(adj.astype(float), x, p.tensors, 2), rtol=0, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(2, 20))
    def test_dense_oracle_random(self, seed, n):
        gen = np.random.default_rng(seed)
        g, adj = random_graph(gen, n, 0.3)
        c = small_sage("mean", hidden=3, fanouts=(n, n))
        p = randomize_biases(init_params(c, 2, gen), gen)
        x = gen.normal(size=(n, 2))
        got = sage_forward(p, full_block(g, np.arange(n), 2), x, c)
        und = (adj | adj.T).astype(float)
        np.testing.assert_allclose(got, dense_mean_oracle(und, x, p.tensors, 2), rtol=1e-9, atol=1e-11)

    @pytest.mark.parametrize("agg", AGGS)
    def test_param_mismatch(self, agg, diamond):
        other = "mean" if agg != "mean" else "maxpool"
        p = init_params(small_sage(other), 2, 0)
        with pytest.raises(ValueError):
            sage_forward(p, full_block(diamond, [0], 2), np.ones((4, 2)), small_sage(agg))

    @pytest.mark.parametrize("agg", AGGS)
    def test_permutation_invariance(self, agg):
        gen = np.random.default_rng(5)
        g, _ = random_graph(gen, 25, 0.25)
        c = small_sage(agg)
        p = randomize_biases(init_params(c, 3, 0), gen)
        x = gen.normal(size=(25, 3))
        block = sample_neighbors(g, np.arange(8), (5, 5), rng=1)
        a = sage_forward(p, block, x, c)
        for s in range(3):
            np.testing.assert_allclose(sage_forward(p, block.permuted(s), x, c), a, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("agg", AGGS)
    def test_inductive_isolated_node(self, agg):
        gen = np.random.default_rng(2)
        g, _ = random_graph(gen, 15, 0.3)
        c = small_sage(agg)
        p = randomize_biases(init_params(c, 3, 0), gen)
        g2 = g.with_isolated_nodes(1)
        x = gen.normal(size=(16, 3))
        out = sage_forward(p, full_block(g2, [15], 2), x, c)
        x_other = x.copy()
        x_other[:15] = gen.normal(size=(15, 3))
        assert np.isfinite(out).all()
        assert np.array_equal(out, sage_forward(p, full_block(g2, [15], 2), x_other, c))

    @pytest.mark.parametrize("agg", AGGS)
    def test_full_fanout_rng_free(self, agg):
        gen = np.random.default_rng(4)
        g, _ = random_graph(gen, 20, 0.2)
        c = small_sage(agg, fanouts=(50, 50))
        p = init_params(c, 3, 0)
        x = gen.normal(size=(20, 3))
        seeds = np.arange(0, 20, 3)
        a = sage_forward(p, sample_neighbors(g, seeds, c.fanouts, rng=1), x, c)
        b = sage_forward(p, sample_neighbors(g, seeds, c.fanouts, rng=2), x, c)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("agg,exact", [("mean", True), ("maxpool", True), ("attention", False)])
    def test_identical_neighbors(self, agg, exact):
        # k identical leaves aggregate to the same message as one leaf
        k = 6
        star = from_edges([(0, i) for i in range(1, k + 1)], k + 1)
        single = from_edges([(0, 1)], 2)
        c = small_sage(agg, layers=1, fanouts=(10,))
        p = randomize_biases(init_params(c, 3, 0), np.random.default_rng(0))
        x = np.vstack([[0.3, -0.2, 1.0]] + [[1.5, 0.5, -0.7]] * k)
        a = sage_forward(p, full_block(star, [0], 1), x, c)
        b = sage_forward(p, full_block(single, [0], 1), x[:2], c)
        if exact:
            assert np.array_equal(a, b)
        else:
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_depth_mismatch(self, diamond):
        c = small_sage("mean")
        with pytest.raises(ValueError):
            sage_forward(init_params(c, 2, 0), full_block(diamond, [0], 1), np.ones((4, 2)), c)


class TestCheckpoint:
    @pytest.mark.parametrize("name", ["lr", "mlp", "sage-attention"])
    def test_round_trip(self, tmp_path, name):
        c = ModelConfig.preset(name, hidden_dim=8) if name != "lr" else ModelConfig.preset("lr")
        p = init_params(c, 5, 3)
        save_checkpoint(tmp_path, c, p, {"seed": "3"})
        c2, p2, meta = load_checkpoint(tmp_path)
        assert c2 == c and meta["seed"] == "3" and p2.init == p.init
        assert p2.names() == p.names()
        for k in p.names():
            assert p2[k].shape == p[k].shape and np.array_equal(p2[k], p[k])

    def test_blob_layout(self, tmp_path):
        p = ModelParams({"b": np.array([1.5])})
        save_checkpoint(tmp_path, ModelConfig.preset("lr"), p)
        raw = (tmp_path / "b.bin").read_bytes()
        assert raw == (
            (1).to_bytes(4, "little") + b"b" + (1).to_bytes(4, "little")
            + (1).to_bytes(8, "little") + np.array([1.5], "<f8").tobytes()
        )
