import numpy as np
import pytest

from graphmft import tensor as T
from graphmft.gradcheck import layers_gradcheck
from graphmft.graphs import BatchGraph, build_pair_graph
from graphmft.layers import Affine, BiRecurrentEncoder, Embedding, GATLayer, GATStack, LSTMCell
from graphmft.tensor import Tensor
from oracles import gat_oracle, lstm_oracle

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def random_graph(n, p, seed):
    r = rng(seed)
    edges = {(i, i) for i in range(n)}
    edges |= {(i, j) for i in range(n) for j in range(n) if i != j and r.random() < p}
    edges = sorted(edges)
    return BatchGraph(n, np.array([e[0] for e in edges]), np.array([e[1] for e in edges])), edges


class TestAffine:
    def test_identity(self):
        layer = Affine(3, 3, rng(), F64)
        layer.W.data = np.eye(3)
        x = rng(1).standard_normal((4, 3))
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_constant_rows(self):
        layer = Affine(3, 2, rng(), F64)
        layer.W.data[:] = 0
        layer.b.data = np.array([1.5, -2.0])
        np.testing.assert_array_equal(layer(Tensor(np.ones((5, 3)))).data, np.tile([1.5, -2.0], (5, 1)))

    def test_row_by_row_oracle(self):
        layer = Affine(6, 4, rng(2), F64)
        layer.b.data = rng(3).standard_normal(4)
        x = rng(4).standard_normal((5, 6))
        want = np.array([[sum(x[r, k] * layer.W.data[o, k] for k in range(6)) + layer.b.data[o]
                          for o in range(4)] for r in range(5)])
        assert np.abs(layer(Tensor(x)).data - want).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Affine(3, 2, rng())(Tensor(np.ones((2, 4))))

    def test_init_bounds(self):
        layer = Affine(25, 40, rng(5))
        assert np.abs(layer.W.data).max() <= 1 / 5 and np.all(layer.b.data == 0)


class TestEmbedding:
    def test_gather(self):
        emb = Embedding(3, 4, rng(), F64)
        E = emb.E.data
        np.testing.assert_array_equal(emb([0, 1, 0]).data, E[[0, 1, 0]])

    def test_adjoint_counts_rows(self):
        emb = Embedding(4, 3, rng(), F64)
        emb([0, 1, 0]).sum().backward()
        np.testing.assert_array_equal(emb.E.grad[:, 0], [2, 1, 0, 0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            Embedding(2, 3, rng())([0, 2])

    def test_init_scale(self):
        assert abs(Embedding(500, 40, rng(1)).E.data.std() - 0.02) < 1e-3


class TestRecurrent:
    def test_cell_matches_scalar_oracle(self):
        cell = LSTMCell(3, 4, rng(1), F64)
        cell.b.data = rng(9).standard_normal(16) * 0.5
        xs = rng(2).standard_normal((3, 3))
        got = cell.run(Tensor(xs), steps=3, batch=1).data
        assert np.abs(got - lstm_oracle(cell, xs)).max() < 1e-5

    def test_bidirectional_oracle(self):
        enc = BiRecurrentEncoder(3, 4, 5, rng(3), F64)
        xs = rng(4).standard_normal((3, 3))
        hf = lstm_oracle(enc.fwd, xs)
        hb = lstm_oracle(enc.bwd, xs[::-1])[::-1]
        want = np.concatenate([hf, hb], axis=1) @ enc.proj.W.data.T + enc.proj.b.data
        assert np.abs(enc(Tensor(xs)).data - want).max() < 1e-5

    def test_single_step(self):
        enc = BiRecurrentEncoder(2, 3, 4, rng(5), F64)
        out = enc(Tensor(np.ones((1, 2)))).data
        assert out.shape == (1, 4) and np.all(np.isfinite(out))

    def test_closed_gates_project_zeros(self):
        enc = BiRecurrentEncoder(2, 3, 4, rng(6), F64)
        for cell in (enc.fwd, enc.bwd):
            cell.W_ih.data[:] = 0
            cell.W_hh.data[:] = 0
            cell.b.data[:] = -50.0
        enc.proj.b.data = np.array([1.0, 2.0, 3.0, 4.0])
        out = enc(Tensor(rng(7).standard_normal((4, 2)))).data
        np.testing.assert_allclose(out, np.tile(enc.proj.b.data, (4, 1)), atol=1e-12)

    def test_packed_sequences_equal_separate_runs(self):
        enc = BiRecurrentEncoder(3, 4, 5, rng(8), F64)
        a, b, c = (rng(s).standard_normal((n, 3)) for s, n in ((1, 4), (2, 1), (3, 6)))
        packed = enc(Tensor(np.concatenate([a, b, c])), [4, 1, 6]).data
        separate = np.concatenate([enc(Tensor(x)).data for x in (a, b, c)])
        np.testing.assert_allclose(packed, separate, atol=1e-12)

    def test_bad_lengths(self):
        enc = BiRecurrentEncoder(3, 4, 5, rng())
        with pytest.raises(T.ShapeError):
            enc(Tensor(np.ones((4, 3))), [2, 1])


class TestGATLayer:
    def test_matches_oracle_on_random_graph(self):
        layer = GATLayer(6, 2, rng(1), F64)
        g, edges = random_graph(4, 0.5, 2)
        X = rng(3).standard_normal((4, 6))
        out, alpha = layer(Tensor(X), g, return_attention=True)
        want, want_alpha = gat_oracle(layer, X, edges)
        assert np.abs(out.data - want).max() < 1e-5
        for e, (s, d) in enumerate(edges):
            for k in range(2):
                assert abs(alpha.data[e, k] - want_alpha[(s, d, k)]) < 1e-5

    def test_single_neighbour_gets_full_weight(self):
        layer = GATLayer(4, 2, rng(1), F64)
        g = BatchGraph(3, np.array([0, 1, 1, 2]), np.array([1, 0, 2, 2]))
        X = rng(2).standard_normal((3, 4))
        out, alpha = layer(Tensor(X), g, return_attention=True)
        np.testing.assert_array_equal(alpha.data[[0, 3]], 1.0)
        np.testing.assert_allclose(out.data[0], X[1] @ layer.W.data.T, atol=1e-12)

    def test_identical_features_give_uniform_weights(self):
        layer = GATLayer(8, 4, rng(3), F64)
        g = build_pair_graph(5, "VA", 2, 1)
        X = np.tile(rng(4).standard_normal(8), (10, 1))
        out, alpha = layer(Tensor(X), g, return_attention=True)
        src, _ = g.arrays()
        deg = np.bincount(src)
        np.testing.assert_allclose(alpha.data, np.repeat(1 / deg[src], 4).reshape(-1, 4), atol=1e-12)
        np.testing.assert_allclose(out.data, np.tile(out.data[0], (10, 1)), atol=1e-12)

    def test_permutation_equivariance(self):
        layer = GATLayer(6, 3, rng(5), F64)
        g = build_pair_graph(4, "VT", 1, 2)
        src, dst = g.arrays()
        X = rng(6).standard_normal((8, 6))
        perm = rng(7).permutation(8)
        inv = np.argsort(perm)
        pg = BatchGraph(8, inv[src], inv[dst])
        base = layer(Tensor(X), g).data
        permuted = layer(Tensor(X[perm]), pg).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_locality(self):
        layer = GATLayer(4, 2, rng(8), F64)
        g = build_pair_graph(6, "VA", 1, 1)
        X = rng(9).standard_normal((12, 4))
        base = layer(Tensor(X), g).data
        # node 0 (V0) sees V0, V1 and A0; node 5 (V5) is outside that neighbourhood
        X2 = X.copy()
        X2[5] += 10.0
        assert np.array_equal(layer(Tensor(X2), g).data[0], base[0])

    def test_normalisation_on_batched_graphs(self):
        layer = GATLayer(8, 4, rng(10))
        g = build_pair_graph(7, "AT", 3, 2)
        _, alpha = layer(Tensor(rng(11).standard_normal((14, 8)).astype(np.float32)), g, return_attention=True)
        sums = np.zeros((14, 4))
        np.add.at(sums, g.arrays()[0], alpha.data)
        assert np.abs(sums - 1).max() <= 1e-6

    def test_isolated_node_is_an_error(self):
        layer = GATLayer(4, 2, rng())
        g = build_pair_graph(1, "VA", 0, 0, self_loops=False)
        g3 = BatchGraph(3, *g.arrays())
        with pytest.raises(ValueError, match="without neighbours"):
            layer(Tensor(np.ones((3, 4), dtype=np.float32)), g3)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            GATLayer(6, 4, rng())


class TestStacks:
    def setup_method(self):
        self.g = build_pair_graph(4, "VA", 1, 1)
        self.X = Tensor(rng(20).standard_normal((8, 6)))

    def test_depth_zero_is_projection(self):
        stack = GATStack(6, 2, 0, rng(1), F64)
        np.testing.assert_array_equal(stack(self.X, self.g).data, self.X.data @ stack.W_im.W.data.T)

    def test_zero_attention_keeps_input_exactly(self):
        stack = GATStack(6, 2, 3, rng(2), F64)
        for layer in stack.layers:
            layer.W.data[:] = 0
        H, states = stack.improved_forward(self.X, self.g, return_layers=True)
        for s in states:
            assert np.array_equal(s.data, self.X.data)
        np.testing.assert_array_equal(H.data, np.concatenate([self.X.data] * 4, axis=1) @ stack.W_im.W.data.T)

    def test_improved_composition_is_bit_identical(self):
        stack = GATStack(6, 2, 2, rng(3), F64)
        X = self.X
        X1 = X + stack.layers[0](X, self.g)
        X2 = X1 + stack.layers[1](X1, self.g)
        want = T.concat([X, X1, X2], axis=1) @ stack.W_im.W.T
        assert np.array_equal(stack(X, self.g).data, want.data)

    def test_vanilla_single_layer(self):
        stack = GATStack(6, 2, 1, rng(4), F64, improved=False)
        assert np.array_equal(stack(self.X, self.g).data, stack.layers[0](self.X, self.g).data)

    def test_vanilla_zero_weights_give_zero(self):
        stack = GATStack(6, 2, 2, rng(5), F64, improved=False)
        for layer in stack.layers:
            layer.W.data[:] = 0
        assert np.array_equal(stack(self.X, self.g).data, np.zeros((8, 6)))

    def test_vanilla_composition(self):
        stack = GATStack(6, 3, 3, rng(6), F64, improved=False)
        X = self.X
        for layer in stack.layers:
            X = layer(X, self.g)
        assert np.array_equal(stack(self.X, self.g).data, X.data)
        assert not hasattr(stack, "W_im")

    def test_training_dropout_is_seeded(self):
        stack = GATStack(6, 2, 2, rng(7), F64)
        a = stack(self.X, self.g, training=True, dropout=0.5, rng=rng(1)).data
        b = stack(self.X, self.g, training=True, dropout=0.5, rng=rng(1)).data
        c = stack(self.X, self.g, training=False, dropout=0.5).data
        assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("bits,tol", [(64, 1e-6), (32, 1e-4)])
def test_layer_gradients(bits, tol):
    report = layers_gradcheck(seed=0, bits=bits, tol=tol)
    assert report.passed, "\n".join(report.lines())
    assert {n.split(".")[0] for n in report.errors} >= {"affine", "embedding", "birecurrent", "gat",
                                                         "improved_stack", "vanilla_stack"}
