from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacia.autodiff import ShapeError, Tape, finite_diff_check, ops, tensor
from pacia.config import OFF, ModelConfig, Modulation
from pacia.diagnostics import tiny_model
from pacia.encoder import (
    EncoderWeights,
    GraphBatch,
    MissingAdapterError,
    TaskHypernet,
    encode,
    gin_update,
    readout,
)
from pacia.graphdata import MolecularGraph
from pacia.layers import ModelParams

ND = Modulation.parse("ND")


def identity_encoder(d=1, layers=1):
    """GIN and readout MLPs set to the identity (valid on non-negative inputs)."""
    cfg = ModelConfig(d_in=d, d_enc=d, gin_hidden=d, d_rel=d, readout_hidden=d, L_enc=layers, layer_norm=False)
    w = EncoderWeights(cfg)
    params = ModelParams()
    w.init(params, np.random.default_rng(0))
    for k in params:
        if k.endswith(".W"):
            params.assign(k, np.eye(*params[k].shape))
        elif k.endswith(".b") or k.endswith(".eps"):
            params.assign(k, np.zeros(params[k].shape))
    return cfg, w, params


def path_graph(x):
    x = np.asarray(x, dtype=float)
    return MolecularGraph(x, np.array([[i, i + 1] for i in range(len(x) - 1)], dtype=np.int64).reshape(-1, 2))


def test_gin_isolated_node_unchanged():
    _, w, params = identity_encoder()
    out = gin_update(params, w, np.zeros((1, 1)), tensor([[1.5]]), 1)
    assert out.data.tolist() == [[1.5]]


def test_gin_two_nodes_hand_sum():
    _, w, params = identity_encoder()
    b = GraphBatch.from_graphs([path_graph([[1.0], [2.0]])])
    np.testing.assert_array_equal(gin_update(params, w, b.adjacency, tensor([[1.0], [2.0]]), 1).data, [[3.0], [3.0]])


def test_gin_eps_scaling():
    _, w, params = identity_encoder()
    params.assign("enc.gin1.eps", np.ones(1))
    assert gin_update(params, w, np.zeros((1, 1)), tensor([[1.0]]), 1).data.tolist() == [[2.0]]


def test_gin_matches_neighbour_loop():
    cfg = tiny_model(3)
    w = EncoderWeights(cfg)
    params = ModelParams()
    w.init(params, np.random.default_rng(2))
    params.assign("enc.gin1.eps", np.array([0.3]))
    rng = np.random.default_rng(3)
    g = MolecularGraph(rng.normal(size=(5, 3)), np.array([[0, 1], [1, 2], [2, 3], [1, 4]]))
    h = rng.normal(size=(5, cfg.d_enc))
    out = gin_update(params, w, g.adjacency(), tensor(h), 1).data
    # reference: explicit neighbour loop, then the MLP and normalisation in numpy
    nb = g.neighbors()
    z = np.stack([1.3 * h[v] + sum(h[u] for u in nb[v]) for v in range(5)])
    W0, b0, W1, b1 = (params[f"enc.gin1.{i}.{p}"].data for i in (0, 1) for p in ("W", "b"))
    y = np.maximum(z @ W0 + b0, 0) @ W1 + b1
    y = (y - y.mean(-1, keepdims=True)) / np.sqrt(y.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, y, rtol=1e-12, atol=1e-12)


def test_gin_dimension_error():
    _, w, params = identity_encoder(d=2)
    with pytest.raises(ShapeError):
        gin_update(params, w, np.zeros((1, 1)), tensor([[1.0]]), 1)


def test_readout_mean():
    _, w, params = identity_encoder()
    b = GraphBatch.from_graphs([path_graph([[2.0], [4.0]])])
    assert readout(params, w, tensor([[2.0], [4.0]]), b.membership, b.n_atoms).data.tolist() == [[3.0]]
    with pytest.raises(ValueError):
        readout(params, w, tensor([[1.0]]), np.zeros((1, 1)), np.array([0.0]))


def test_readout_identical_atoms():
    cfg = tiny_model(3)
    w = EncoderWeights(cfg)
    params = ModelParams()
    w.init(params, np.random.default_rng(0))
    row = np.random.default_rng(1).normal(size=cfg.d_enc)
    member = np.ones((1, 3))
    a = readout(params, w, tensor(np.tile(row, (3, 1))), member, np.array([3.0])).data
    b = w.readout_mlp(params, tensor(row[None])).data
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_batch_is_block_diagonal():
    g1, g2 = path_graph(np.ones((2, 1))), path_graph(np.ones((3, 1)))
    b = GraphBatch.from_graphs([g1, g2])
    assert b.adjacency.shape == (5, 5)
    assert b.adjacency[:2, 2:].sum() == 0 and b.adjacency[2:, :2].sum() == 0
    assert b.membership.tolist() == [[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]]


@pytest.fixture(scope="module")
def enc_setup():
    cfg = tiny_model(3)
    w = EncoderWeights(cfg)
    hyper = TaskHypernet.build(cfg)
    params = ModelParams()
    rng = np.random.default_rng(0)
    w.init(params, rng)
    hyper.init(params, rng)
    graphs = [MolecularGraph(rng.normal(size=(n, 3)), np.array([[i, i + 1] for i in range(n - 1)])) for n in (3, 4, 5, 3, 6)]
    return cfg, w, hyper, params, graphs


def run(enc_setup, graphs=None, mod=ND, mode="test", rng=None):
    cfg, w, hyper, params, default = enc_setup
    b = GraphBatch.from_graphs(graphs or default)
    return encode(params, w, b, modulation=mod, hypernet=hyper, support_idx=[0, 1, 2, 3], support_labels=[1, 0, 1, 0], mode=mode, rng=rng)


def test_output_dims_and_layers(enc_setup):
    out = run(enc_setup)
    cfg = enc_setup[0]
    assert out.r.shape == (5, cfg.d_rel) and np.all(np.isfinite(out.r.data))
    assert len(out.layers) == cfg.L_enc + 1
    assert 1 <= out.selected_depth <= cfg.L_enc


def test_identity_adapter_equals_plain(enc_setup):
    plain = run(enc_setup, mod=OFF)
    ident = run(enc_setup, mod=Modulation(True, False, identity=True))
    assert plain.r.data.tobytes() == ident.r.data.tobytes()


def test_missing_adapter(enc_setup):
    cfg, w, _, params, graphs = enc_setup
    with pytest.raises(MissingAdapterError):
        encode(params, w, GraphBatch.from_graphs(graphs), modulation=ND, hypernet=None, support_idx=[0, 1], support_labels=[1, 0])


def test_test_mode_deterministic(enc_setup):
    a, b = run(enc_setup), run(enc_setup)
    assert a.r.data.tobytes() == b.r.data.tobytes()


def sharpen_depth_logits(params, gen, factor=1e5):
    """Scale the generator's depth-logit output so the depth softmax saturates."""
    last = f"{gen.name}.{len(gen.dims) - 2}"
    params[f"{last}.W"].data[:, -1] *= factor
    params[f"{last}.b"].data[-1] *= factor


def test_one_hot_depth_train_matches_test(enc_setup):
    cfg, w, hyper, params, graphs = enc_setup
    p = params.copy()
    sharpen_depth_logits(p, hyper.gen)
    setup = (cfg, w, hyper, p, graphs)
    train_out, test_out = run(setup, mode="train"), run(setup, mode="test")
    weights = train_out.adapter.weights.data.reshape(-1)
    assert np.max(np.abs(weights - np.eye(cfg.L_enc)[test_out.selected_depth - 1])) <= 1e-6
    np.testing.assert_allclose(train_out.r.data, test_out.r.data, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_node_permutation_invariance(enc_setup, seed):
    cfg, w, hyper, params, graphs = enc_setup
    rng = np.random.default_rng(seed)
    permuted = [g.permuted(rng.permutation(g.node_count)) for g in graphs]
    a, b = run(enc_setup), run(enc_setup, permuted)
    np.testing.assert_allclose(a.r.data, b.r.data, atol=1e-12)


def test_gradient_through_film_into_hypernet(enc_setup):
    cfg, w, hyper, params, graphs = enc_setup
    p = params.copy()
    batch = GraphBatch.from_graphs(graphs[:4])
    probe = np.random.default_rng(0).normal(size=(4, cfg.d_rel))

    def f():
        out = encode(p, w, batch, modulation=ND, hypernet=hyper, support_idx=[0, 1, 2, 3], support_labels=[1, 0, 1, 0], mode="train")
        return ops.sum(ops.mul(out.r, probe))

    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, p)
    assert any(np.any(grads[k]) for k in p if k.startswith("enc.hyper"))
    hyper_only = {k: p[k] for k in p if k.startswith("enc.hyper") or k.startswith("enc.proto")}
    assert finite_diff_check(f, hyper_only, tol=1e-4, max_entries=6).passed


def test_dropout_only_with_rng(enc_setup):
    cfg, _, hyper, params, graphs = enc_setup
    setup = (cfg, EncoderWeights(replace(cfg, enc_dropout=0.5)), hyper, params, graphs)
    a = run(setup, mode="train")
    b = run(setup, mode="train")
    c = run(setup, mode="train", rng=np.random.default_rng(0))
    assert a.r.data.tobytes() == b.r.data.tobytes()
    assert c.r.data.tobytes() != a.r.data.tobytes()
