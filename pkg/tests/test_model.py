import numpy as np
import pytest

from spira_xai.model import (CheckpointError, ConvBlock, HyperParams, ModelConfig, StaleTapeError,
                             TrainingError, backward, bce_with_logits, bn_backward, bn_forward,
                             conv_backward, conv_forward, forward, init_state, load_state,
                             pool_backward, pool_forward, predict_proba, predict_window, save_state,
                             sgd_step, train)

RTOL = 1e-3


def rel_err(a, b):
    # the floor keeps gradients that are exactly zero in theory (conv bias
    # under batch statistics) from comparing finite-difference noise
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def small_net(shape=(6, 7), blocks=(ConvBlock(3, (3, 3), 1, (2, 2)), ConvBlock(2, (3, 2), 1, (1, 2))),
              dense=4, batchnorm=True, seed=0):
    cfg = ModelConfig(shape, blocks, dense, 0.0, batchnorm, "float64")
    state = init_state(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for k in state.params:
        state.params[k] = np.asarray(state.params[k] + rng.normal(0, 0.3, state.params[k].shape))
    return state


# --- layer-by-layer ----------------------------------------------------------

@pytest.mark.parametrize("stride,kernel", [(1, (3, 3)), (2, (3, 3)), (1, (2, 4)), (1, (1, 1))])
def test_conv_gradients(stride, kernel):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((4, 3, *kernel))
    b = rng.standard_normal(4)
    up = rng.standard_normal(conv_forward(x, w, b, stride)[0].shape)
    loss = lambda: float(np.sum(conv_forward(x, w, b, stride)[0] * up))
    _, cache = conv_forward(x, w, b, stride)
    dx, dw, db = conv_backward(up, cache)
    assert rel_err(dx, numeric_grad(loss, x)) < RTOL
    assert rel_err(dw, numeric_grad(loss, w)) < RTOL
    assert rel_err(db, numeric_grad(loss, b)) < RTOL


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(training):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 5, 2)) * 2 + 1
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    up = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(bn_forward(x.copy(), gamma, beta, rm.copy(), rv.copy(), training)[0] * up))
    _, cache = bn_forward(x.copy(), gamma, beta, rm.copy(), rv.copy(), training)
    dx, dg, db = bn_backward(up, cache)
    assert rel_err(dx, numeric_grad(loss, x)) < RTOL
    assert rel_err(dg, numeric_grad(loss, gamma)) < RTOL
    assert rel_err(db, numeric_grad(loss, beta)) < RTOL


def test_pool_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 6, 7, 3))
    up = rng.standard_normal(pool_forward(x, (2, 2))[0].shape)
    loss = lambda: float(np.sum(pool_forward(x, (2, 2))[0] * up))
    out, cache = pool_forward(x, (2, 2))
    assert out.shape == (2, 3, 3, 3)
    assert rel_err(pool_backward(up, cache), numeric_grad(loss, x)) < RTOL


def test_pool_ties_route_once():
    x = np.ones((1, 2, 2, 1))
    out, cache = pool_forward(x, (2, 2))
    dx = pool_backward(np.ones_like(out), cache)
    assert dx.sum() == 1.0


# --- end to end --------------------------------------------------------------

@pytest.mark.parametrize("batchnorm,mode", [(True, "train"), (True, "eval"), (False, "eval")])
def test_network_gradients(batchnorm, mode):
    state = small_net(batchnorm=batchnorm)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6, 7))
    w = rng.standard_normal(3)

    def loss():
        saved = {k: v.copy() for k, v in state.buffers.items()}
        out = float(np.sum(forward(state, x, mode).logits * w))
        state.buffers.update(saved)
        return out
    saved = {k: v.copy() for k, v in state.buffers.items()}
    grads = backward(forward(state, x, mode), w, input_grad=True)
    state.buffers.update(saved)
    for k, p in state.params.items():
        assert rel_err(grads.params[k], numeric_grad(loss, p)) < RTOL, k
    assert rel_err(grads.inputs, numeric_grad(loss, x)) < RTOL


def test_feature_map_gradients():
    state = small_net(batchnorm=False)
    x = np.random.default_rng(4).standard_normal((1, 6, 7))
    tape = forward(state, x, "eval")
    grads = backward(tape)
    # perturbing the last block's activation through the head only
    a = tape.feature_maps["block1"].copy()
    from spira_xai.model import pool_forward as pf

    def head(act):
        h, _ = pf(act, state.config.conv_blocks[1].pool)
        h = h.mean(axis=(1, 2))
        h = np.maximum(h @ state.params["fc.weight"] + state.params["fc.bias"], 0)
        return float((h @ state.params["out.weight"] + state.params["out.bias"])[0])
    num = numeric_grad(lambda: head(a), a)
    assert rel_err(grads.feature_maps["block1"], num) < RTOL


def test_logit_self_gradient_and_dead_unit():
    state = small_net()
    tape = forward(state, np.ones((6, 7)), "eval")
    assert np.allclose(backward(tape, np.ones(1)).params["out.bias"], 1.0)
    # a dense unit whose bias pins it below zero gets no gradient
    state.params["fc.bias"][0] = -1e6
    g = backward(forward(state, np.ones((6, 7)), "eval")).params
    assert np.all(g["fc.weight"][:, 0] == 0) and g["fc.bias"][0] == 0
    assert g["out.weight"][0] == 0


def test_zero_params_half():
    state = init_state(ModelConfig((8, 8), (ConvBlock(2),), 4), 0)
    for v in state.params.values():
        v[...] = 0
    tape = forward(state, np.random.default_rng(0).standard_normal((8, 8)), "eval")
    assert tape.probability[0] == 0.5
    assert predict_window(state, np.ones((8, 8))) == (0.5, 0.5)


def test_eval_deterministic_and_range():
    state = init_state(ModelConfig((16, 20), (ConvBlock(4), ConvBlock(4)), 8), 1)
    x = np.random.default_rng(1).standard_normal((5, 16, 20))
    a, b = predict_proba(state, x), predict_proba(state, x)
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    p, q = predict_window(state, x[0])
    assert p + q == 1.0 and p == pytest.approx(a[0], abs=0)


def test_shape_mismatch_and_collapse():
    state = init_state(ModelConfig((16, 20), (ConvBlock(4),), 4), 0)
    with pytest.raises(ValueError):
        forward(state, np.zeros((16, 21)))
    with pytest.raises(ValueError):
        ModelConfig((4, 4), (ConvBlock(2), ConvBlock(2), ConvBlock(2)))
    with pytest.raises(ValueError):
        ModelConfig((4, 4), ())


def test_stale_tape():
    state = small_net()
    tape = forward(state, np.ones((6, 7)), "eval")
    sgd_step(state, {"out.bias": np.ones(())}, {}, 0.1, 0.9)
    with pytest.raises(StaleTapeError):
        backward(tape)


def test_dropout_only_in_train():
    cfg = ModelConfig((8, 8), (ConvBlock(4),), 16, 0.5, True, "float64")
    state = init_state(cfg, 0)
    x = np.random.default_rng(0).standard_normal((4, 8, 8))
    e1 = forward(state, x, "eval").logits
    e2 = forward(state, x, "eval").logits
    t1 = forward(state, x, "train", np.random.default_rng(1)).logits
    t2 = forward(state, x, "train", np.random.default_rng(2)).logits
    assert np.array_equal(e1, e2)
    assert not np.array_equal(t1, t2)


# --- training ----------------------------------------------------------------

def _toy(n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 8, 8))
    y = np.array([1.0, 0.0] * (n // 2))
    x[y == 1, :4] += 1.0
    return x, y


def test_initial_loss_near_ln2():
    x, y = _toy(16)
    state = init_state(ModelConfig((8, 8), (ConvBlock(4),), 8), 0)
    assert abs(bce_with_logits(forward(state, x, "eval").logits, y) - np.log(2)) < 0.1


def test_overfit_toy_set():
    x, y = _toy(8)
    state = init_state(ModelConfig((8, 8), (ConvBlock(8), ConvBlock(8)), 16, 0.0, dtype="float64"), 0)
    hp = HyperParams(epochs=200, batch_size=8, lr=0.05, patience=1000)
    report = train(state, lambda e: (x, y), hp, np.random.default_rng(0))
    pred = predict_proba(state, x) > 0.5
    assert np.array_equal(pred, y == 1)
    assert report.train_loss[-1] < report.train_loss[0]


def test_training_deterministic_with_mixup():
    from spira_xai.augment import MixupConfig
    x, y = _toy(12)
    curves = []
    for _ in range(2):
        state = init_state(ModelConfig((8, 8), (ConvBlock(4),), 8), 5)
        hp = HyperParams(epochs=3, batch_size=4, mixup=MixupConfig(0.2))
        curves.append(train(state, lambda e: (x, y), hp, np.random.default_rng(5)).train_loss)
    assert curves[0] == curves[1]


def test_early_stopping_and_best_state():
    x, y = _toy(8)
    state = init_state(ModelConfig((8, 8), (ConvBlock(4),), 8), 0)
    scores = iter([0.5, 0.75, 0.75, 0.5, 0.5, 0.75, 1.0])
    report = train(state, lambda e: (x, y), HyperParams(epochs=7, batch_size=8, patience=3),
                   np.random.default_rng(0), validate=lambda s: (next(scores), 0.1))
    assert len(report.train_loss) == 5
    assert report.best_epoch == 1


def test_training_errors():
    state = init_state(ModelConfig((8, 8), (ConvBlock(2),), 4), 0)
    with pytest.raises(TrainingError, match="empty"):
        train(state, lambda e: (np.zeros((0, 8, 8)), np.zeros(0)), HyperParams(epochs=1),
              np.random.default_rng(0))
    x, y = _toy(4)
    with pytest.raises(TrainingError, match="non-finite"), np.errstate(invalid="ignore"):
        train(state, lambda e: (x * np.inf, y), HyperParams(epochs=1), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    state = small_net()
    state.buffers["bn0.running_mean"][:] = [0.1, 0.2, 0.3]
    save_state(state, tmp_path / "m.ckpt")
    back = load_state(tmp_path / "m.ckpt")
    assert back.config == state.config
    for k in state.params:
        assert np.array_equal(back.params[k], state.params[k])
    for k in state.buffers:
        assert np.array_equal(back.buffers[k], state.buffers[k])
    save_state(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_state(tmp_path / "none.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="magic"):
        load_state(tmp_path / "bad.ckpt")
    save_state(small_net(), tmp_path / "t.ckpt")
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-50])
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(data[:8] + b"\x09\x00\x00\x00" + data[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_state(tmp_path / "v.ckpt")
