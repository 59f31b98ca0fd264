import numpy as np
import pytest

from fusiontrack.learned import DESK_DIMS, coef_net, feat_dist_net, fusion_net, init_net
from fusiontrack.neuralnet import (
    Adam,
    LayerSpec,
    Net,
    ParamStore,
    ShapeError,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

from helpers import fd_check_params, rel_err


def _dense(n_in, n_out):
    return Net("d", (LayerSpec("dense", (n_in, n_out)),))


def test_zero_dense_gives_zero():
    net = _dense(4, 3)
    store = ParamStore({"0.W": np.zeros((3, 4)), "0.b": np.zeros(3)})
    out, _ = forward(net, store, np.ones((2, 4)))
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


def test_identity_dense_relu_passes_nonnegative_input():
    net = Net("id", (LayerSpec("dense", (5, 5)), LayerSpec("relu")))
    store = ParamStore({"0.W": np.eye(5), "0.b": np.zeros(5)})
    x = np.abs(np.random.default_rng(0).normal(size=(3, 5)))
    out, _ = forward(net, store, x)
    np.testing.assert_array_equal(out, x)


def _conv_loop(x, W, b):
    B, C, H, Wd = x.shape
    out = np.zeros((B, W.shape[0], H - 2, Wd - 2))
    for n in range(B):
        for o in range(W.shape[0]):
            for i in range(H - 2):
                for j in range(Wd - 2):
                    out[n, o, i, j] = b[o] + sum(
                        W[o, c, di, dj] * x[n, c, i + di, j + dj]
                        for c in range(C) for di in range(3) for dj in range(3)
                    )
    return out


def test_forward_matches_straight_line_recompute():
    rng = np.random.default_rng(1)
    net = Net("small", (
        LayerSpec("concat"),
        LayerSpec("conv3x3_valid", (4, 3)),
        LayerSpec("relu"),
        LayerSpec("reshape", (3 * 2 * 2,)),
        LayerSpec("dense", (12, 5)),
        LayerSpec("relu"),
        LayerSpec("dense", (5, 1)),
        LayerSpec("sigmoid"),
    ))
    store = init_params(net, rng)
    for k in store.params:
        store.params[k] += rng.normal(0, 0.1, store.params[k].shape)
    a, b = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    got, _ = forward(net, store, (a, b))
    p = store.params
    h = np.maximum(_conv_loop(np.concatenate([a, b], axis=1), p["1.W"], p["1.b"]), 0)
    flat = h.reshape(3, -1)
    z = np.maximum(np.array([[p["4.b"][o] + sum(p["4.W"][o, i] * row[i] for i in range(12)) for o in range(5)] for row in flat]), 0)
    logit = z @ p["6.W"].T + p["6.b"]
    want = 1 / (1 + np.exp(-logit))
    np.testing.assert_allclose(got, want, rtol=1e-12)
    again, _ = forward(net, store, (a, b))
    np.testing.assert_array_equal(got, again)


def test_shape_mismatch_names_layer():
    net = Net("g", (LayerSpec("dense", (4, 2)), LayerSpec("relu"), LayerSpec("dense", (3, 1))))
    store = init_params(net, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="layer 0"):
        forward(net, store, np.zeros((2, 5)))
    with pytest.raises(ShapeError, match="layer 2"):
        forward(net, store, np.zeros((2, 4)))


def test_backward_before_forward_errors():
    net = _dense(2, 1)
    store = init_params(net, np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        backward(net, store, None, np.ones((1, 1)))


def test_constant_loss_gives_zero_gradients():
    net = init_net(DESK_DIMS)
    store = init_params(net, np.random.default_rng(0))
    out, tape = forward(net, store, np.random.default_rng(1).normal(size=(4,) + DESK_DIMS.feat3d_shape))
    backward(net, store, tape, np.zeros_like(out))
    assert all(not np.any(g) for g in store.grads.values())


def test_linear_regression_gradient():
    rng = np.random.default_rng(2)
    net = _dense(3, 1)
    store = init_params(net, rng)
    X, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 1))
    out, tape = forward(net, store, X)
    backward(net, store, tape, 2 * (out - y))
    W, b = store.params["0.W"], store.params["0.b"]
    np.testing.assert_allclose(store.grads["0.W"], 2 * (X @ W.T + b - y).T @ X, rtol=1e-12)
    np.testing.assert_allclose(store.grads["0.b"], 2 * (X @ W.T + b - y).sum(axis=0), rtol=1e-12)


def _inputs(net, rng, batch=3):
    d = DESK_DIMS
    if net.name == "g1_fusion":
        return rng.normal(size=(batch, d.feat2d_dim))
    if net.layers[0].kind == "concat":
        return rng.normal(size=(batch,) + d.feat3d_shape), rng.normal(size=(batch,) + d.feat3d_shape)
    return rng.normal(size=(batch,) + d.feat3d_shape)


@pytest.mark.parametrize("builder", [fusion_net, feat_dist_net, coef_net, init_net])
def test_architecture_gradients_match_finite_differences(builder):
    rng = np.random.default_rng(3)
    net = builder(DESK_DIMS)
    store = init_params(net, rng)
    x = _inputs(net, rng)
    out0, _ = forward(net, store, x, record=False)
    weights = rng.normal(size=out0.shape)

    def loss():
        out, _ = forward(net, store, x, record=False)
        return float(np.sum(weights * out))

    store.zero_grad()
    out, tape = forward(net, store, x)
    backward(net, store, tape, weights)
    assert fd_check_params(loss, store, rng, n_coords=100) < 1e-4


def test_input_gradient_of_concat_net():
    rng = np.random.default_rng(4)
    net = feat_dist_net(DESK_DIMS)
    store = init_params(net, rng)
    a, b = _inputs(net, rng)
    out, tape = forward(net, store, (a, b))
    ga, gb = backward(net, store, tape, np.ones_like(out))
    h = 1e-6
    for arr, g in ((a, ga), (b, gb)):
        for _ in range(20):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = forward(net, store, (a, b), record=False)[0].sum()
            arr[idx] = old - h
            down = forward(net, store, (a, b), record=False)[0].sum()
            arr[idx] = old
            assert rel_err(g[idx], (up - down) / (2 * h)) < 1e-4


def test_frozen_store_accumulates_nothing():
    net = _dense(2, 1)
    store = init_params(net, np.random.default_rng(0))
    store.frozen = True
    out, tape = forward(net, store, np.ones((1, 2)))
    backward(net, store, tape, np.ones_like(out))
    assert not np.any(store.grads["0.W"])
    with pytest.raises(RuntimeError):
        Adam().step(store)


def test_adam_zero_gradient_leaves_params():
    store = ParamStore({"w": np.array([1.0, -2.0])})
    opt = Adam()
    opt.step(store)
    np.testing.assert_array_equal(store.params["w"], [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step_magnitude_is_lr():
    store = ParamStore({"w": np.zeros(3)})
    store.grads["w"][:] = [0.3, -5.0, 100.0]
    Adam(lr=1e-3).step(store)
    np.testing.assert_allclose(np.abs(store.params["w"]), 1e-3, rtol=1e-4)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.5, -0.7, 0.2])
    store = ParamStore({"w": np.zeros(3)})
    opt = Adam(lr=1e-2)
    for _ in range(2000):
        store.grads["w"] = 2 * (store.params["w"] - target)
        opt.step(store)
    assert np.max(np.abs(store.params["w"] - target)) < 1e-3


def test_small_lr_loss_is_monotone_on_fixed_batch():
    rng = np.random.default_rng(5)
    net = init_net(DESK_DIMS)
    store = init_params(net, rng)
    x = _inputs(net, rng, batch=8)
    y = (rng.random(8) > 0.5).astype(float)[:, None]
    opt = Adam(lr=1e-4)
    losses = []
    for _ in range(11):
        store.zero_grad()
        p, tape = forward(net, store, x)
        losses.append(float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))))
        backward(net, store, tape, (p - y) / (p * (1 - p)) / p.size)
        opt.step(store)
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 1


def test_checkpoint_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    net = coef_net(DESK_DIMS)
    store = init_params(net, rng)
    path = tmp_path / "g3.npz"
    save_checkpoint(path, net, store)
    net2, store2 = load_checkpoint(path)
    assert net2 == net
    for k, v in store.params.items():
        np.testing.assert_array_equal(store2.params[k], v)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_init_scale_only_touches_last_weight():
    net = coef_net(DESK_DIMS)
    a = init_params(net, np.random.default_rng(7))
    b = init_params(net, np.random.default_rng(7), final_scale=0.01)
    last = max((k for k in a.params if k.endswith(".W")), key=lambda k: int(k.split(".")[0]))
    for k in a.params:
        if k == last:
            np.testing.assert_allclose(b.params[k], 0.01 * a.params[k])
        else:
            np.testing.assert_array_equal(a.params[k], b.params[k])
    for k in a.params:
        if k.endswith(".b"):
            assert not np.any(a.params[k])
