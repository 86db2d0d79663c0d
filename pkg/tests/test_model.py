import numpy as np
import pytest

from conftest import max_rel_err, numerical_gradient
from sketchret import losses as L
from sketchret.errors import ConfigurationError, NumericalError, UsageError
from sketchret.model import (DenseLayer, Encoder, Head, Model, grl_apply,
                             load_checkpoint, save_checkpoint, sigmoid, softmax)


def dense_arch(input_shape, hidden, emb):
    return {"input_shape": list(input_shape),
            "layers": [{"kind": "dense", "width": w} for w in hidden],
            "embedding_dim": emb}


# ---------------------------------------------------------------------------
# encode


def test_encode_zero_weights_gives_zero_embedding():
    enc = Encoder.create(dense_arch((2, 2, 1), [], 4), np.random.default_rng(0))
    for _, p in enc.params():
        p[...] = 0.0
    out, _ = enc.forward(np.random.default_rng(1).random((3, 2, 2, 1)))
    assert np.array_equal(out, np.zeros((3, 4)))


def test_encode_identity_linear_layer():
    enc = Encoder.create(dense_arch((2, 2, 1), [], 4), np.random.default_rng(0))
    enc.layers[0].w[...] = np.eye(4)
    enc.layers[0].b[...] = 0.0
    img = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    out, _ = enc.forward(img)
    assert np.array_equal(out[0], [1.0, 2.0, 3.0, 4.0])


def naive_dense_forward(layers, x):
    # straight-line loop reimplementation of the dense stack
    for layer in layers:
        y = np.zeros((x.shape[0], layer.w.shape[1]))
        for b in range(x.shape[0]):
            for j in range(layer.w.shape[1]):
                acc = layer.b[j]
                for i in range(x.shape[1]):
                    acc += x[b, i] * layer.w[i, j]
                y[b, j] = max(acc, 0.0) if layer.activation == "relu" else acc
        x = y
    return x


def test_encode_matches_naive_loop_oracle():
    enc = Encoder.create(dense_arch((3, 3, 1), [5], 4), np.random.default_rng(42))
    imgs = np.random.default_rng(7).random((2, 3, 3, 1))
    out, _ = enc.forward(imgs)
    expect = naive_dense_forward(enc.layers, imgs.reshape(2, -1))
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-12)


def test_encode_shape_mismatch_names_layer():
    enc = Encoder.create(dense_arch((4, 4, 3), [8], 4), np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="encoder input"):
        enc.forward(np.zeros((2, 5, 4, 3)))


def test_encode_deterministic_repeat():
    enc = Encoder.create(dense_arch((4, 4, 3), [8], 4), np.random.default_rng(3))
    imgs = np.random.default_rng(4).random((5, 4, 4, 3))
    a, _ = enc.forward(imgs)
    b, _ = enc.forward(imgs)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# heads


def test_softmax_uniform_on_zero_logits():
    head = Head.create("identity_source", 3, 4, np.random.default_rng(0))
    for _, p in head.params():
        p[...] = 0.0
    probs, _ = head.forward(np.random.default_rng(1).random((2, 3)))
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)


def test_sigmoid_half_on_zero_logit():
    assert sigmoid(np.array([[0.0]]))[0, 0] == 0.5


def test_softmax_closed_form():
    probs = softmax(np.array([[np.log(2.0), 0.0, 0.0]]))
    np.testing.assert_allclose(probs, [[0.5, 0.25, 0.25]], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    z = rng.normal(scale=30, size=(50, 7))
    s = softmax(z)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    p = sigmoid(rng.normal(scale=50, size=(50, 7)))
    assert np.all((p >= 0) & (p <= 1))


def test_head_structure():
    rng = np.random.default_rng(0)
    ident = Head.create("identity_target", 8, 5, rng)
    assert len(ident.layers) == 1
    att = Head.create("attribute", 8, 6, rng)
    dom = Head.create("domain", 8, 3, rng)
    assert len(att.layers) == 3 and len(dom.layers) == 3
    assert att.layers[0].w.shape[1] == 512 and att.layers[1].w.shape[1] == 512
    assert dom.output_dim == 3
    assert att.out_kind == "sigmoid" and dom.out_kind == "softmax"


def test_head_nonfinite_logits_error_names_row():
    head = Head.create("identity_source", 3, 4, np.random.default_rng(0))
    emb = np.ones((3, 3))
    emb[1] = np.inf
    with pytest.raises(NumericalError, match="row 1"):
        head.forward(emb)


# ---------------------------------------------------------------------------
# gradient reversal


def test_grl_forward_identity():
    v = np.array([1.5, -2.0])
    assert np.array_equal(grl_apply(v), v)


def test_grl_backward_sign_flip():
    x = np.zeros(2)
    g = np.array([0.3, -0.7])
    np.testing.assert_array_equal(grl_apply(x, "backward", g), [-0.3, 0.7])
    zeros = np.zeros(4)
    assert np.array_equal(grl_apply(np.ones(4), "backward", zeros), zeros)


def test_grl_requires_upstream_and_shape():
    with pytest.raises(UsageError):
        grl_apply(np.zeros(2), "backward")
    with pytest.raises(ConfigurationError):
        grl_apply(np.zeros(2), "backward", np.zeros(3))


# ---------------------------------------------------------------------------
# backward


def test_backward_linear_layer_gradient():
    # y = W x, loss = sum(y): dL/dW = x broadcast per output row
    layer = DenseLayer(np.random.default_rng(0).random((3, 2)), np.zeros(2), "none")
    x = np.array([[1.0, 2.0, 3.0]])
    y, cache = layer.forward(x, train=True)
    layer.backward(cache, np.ones_like(y))
    np.testing.assert_allclose(layer.dw, np.tile(x.T, (1, 2)))
    np.testing.assert_allclose(layer.db, [1.0, 1.0])


def test_backward_scales_linearly_with_loss():
    enc = Encoder.create(dense_arch((2, 2, 1), [4], 3), np.random.default_rng(1))
    imgs = np.random.default_rng(2).random((4, 2, 2, 1))
    out, tr = enc.forward(imgs, train=True)
    dy = np.random.default_rng(3).normal(size=out.shape)
    enc.backward(tr, dy)
    g1 = {n: a.copy() for n, a in enc.grads()}
    enc.zero_grad()
    out, tr = enc.forward(imgs, train=True)
    enc.backward(tr, 3.0 * dy)
    for n, a in enc.grads():
        np.testing.assert_allclose(a, 3.0 * g1[n], rtol=1e-12)


def test_backward_requires_trace():
    enc = Encoder.create(dense_arch((2, 2, 1), [4], 3), np.random.default_rng(1))
    with pytest.raises(UsageError):
        enc.backward(None, np.zeros((1, 3)))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    enc = Encoder.create(dense_arch((3, 3, 1), [6], 4), rng)
    head = Head.create("identity_source", 4, 3, rng, hidden=8)
    imgs = rng.random((8, 3, 3, 1))
    y = np.eye(3)[rng.integers(0, 3, 8)]

    def loss():
        v, _ = enc.forward(imgs)
        psi, _ = head.forward(v)
        val, _ = L.identity_ce(psi, y)
        return val

    enc.zero_grad()
    head.zero_grad()
    v, tr = enc.forward(imgs, train=True)
    psi, trh = head.forward(v, train=True)
    _, dpsi = L.identity_ce(psi, y)
    enc.backward(tr, head.backward(trh, dpsi))
    for block in (enc, head):
        for (name, p), (_, g) in zip(block.params(), block.grads()):
            num = numerical_gradient(loss, p, h=1e-4)
            assert max_rel_err(g, num) < 1e-4, name


def test_conv_encoder_matches_finite_differences():
    rng = np.random.default_rng(10)
    arch = {"input_shape": [4, 4, 2], "layers": [{"kind": "conv", "channels": 3}],
            "embedding_dim": 4}
    enc = Encoder.create(arch, rng)
    imgs = rng.random((3, 4, 4, 2))
    w = rng.normal(size=4)

    def loss():
        v, _ = enc.forward(imgs)
        return float((v @ w).sum())

    enc.zero_grad()
    v, tr = enc.forward(imgs, train=True)
    enc.backward(tr, np.tile(w, (3, 1)))
    for (name, p), (_, g) in zip(enc.params(), enc.grads()):
        num = numerical_gradient(loss, p, h=1e-5)
        assert max_rel_err(g, num) < 1e-4, name


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    model = Model(
        e1=Encoder.create(dense_arch((4, 4, 3), [8], 6), rng),
        e2=Encoder.create(dense_arch((4, 4, 3), [8], 6), rng),
        c_id_s=Head.create("identity_source", 6, 5, rng, label_space="source-ids"),
        c_att=Head.create("attribute", 6, 4, rng, hidden=16),
        c_d=Head.create("domain", 6, 3, rng, hidden=16),
    )
    model.meta = {"classes_source": [1, 2, 3, 4, 5]}
    rng_state = np.random.default_rng(99).bit_generator.state
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, rng_state=rng_state, epoch=17)
    loaded, meta = load_checkpoint(path)
    assert meta["epoch"] == 17
    assert meta["rng_state"] == rng_state
    p0, p1 = model.params(), loaded.params()
    assert set(p0) == set(p1)
    for k in p0:
        assert np.array_equal(p0[k], p1[k]), k
    assert loaded.c_id_s.label_space == "source-ids"
    # forward equality on the reloaded model
    imgs = np.random.default_rng(5).random((2, 4, 4, 3))
    a, _ = model.e1.forward(imgs)
    b, _ = loaded.e1.forward(imgs)
    assert np.array_equal(a, b)


def test_checkpoint_double_round_trip_identical_bytes(tmp_path):
    rng = np.random.default_rng(13)
    model = Model(e1=Encoder.create(dense_arch((2, 2, 1), [4], 3), rng))
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(pa, model, epoch=1)
    loaded, _ = load_checkpoint(pa)
    save_checkpoint(pb, loaded, epoch=1)
    assert pa.read_bytes() == pb.read_bytes()
