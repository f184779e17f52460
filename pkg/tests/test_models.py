import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facestutter import kernels as K
from facestutter.kernels import ShapeError
from facestutter.layers import BatchNorm, Conv2D, Dense, Flatten, Model
from facestutter.models import (ModelConfig, build_cnn_a, build_cnn_b, build_model, grad_check, load_checkpoint,
                                predict_proba, save_checkpoint)
from facestutter.rng import stream

# hand count for the CNN-A layer table:
#   conv 1x29, 8 maps, no bias      8*29          = 232
#   batch norm (8)                  2*8           = 16
#   depthwise 17x1, D=2             8*2*17        = 272
#   batch norm (16)                 2*16          = 32
#   separable 1x16 -> 16            16*16 + 16*16 = 512
#   batch norm (16)                 2*16          = 32
#   dense 32 -> 128                 32*128 + 128  = 4224
#   dense 128 -> 1                  128 + 1       = 129
CNN_A_PARAMS = 5449
# CNN-B, k=4: convs 256 + 8192 + 32768 + 131072, BN 2*(16+32+64+128),
# dense 640*256+256, 256*128+128, 128*64+64, 64+1
CNN_B_PARAMS = 378081


@pytest.fixture(scope="module")
def cnn_a():
    return build_cnn_a(ModelConfig())


def test_cnn_a_parameter_count(cnn_a):
    assert cnn_a.n_params() == CNN_A_PARAMS


def test_cnn_b_parameter_count():
    assert build_cnn_b(ModelConfig(architecture="CNN_B")).n_params() == CNN_B_PARAMS


def test_cnn_a_shape_table(cnn_a):
    assert cnn_a.shapes[0] == (1, 17, 87)
    assert (16, 1, 87) in cnn_a.shapes     # after the depthwise stage
    assert (16, 1, 21) in cnn_a.shapes     # after pool (1,4)
    assert (16, 1, 2) in cnn_a.shapes      # after pool (1,8)
    assert cnn_a.shapes[-1] == (1,)


def test_accepts_trial_shape_and_rejects_others(cnn_a):
    assert cnn_a.forward(np.zeros((17, 87))).shape == (1,)
    with pytest.raises(ShapeError):
        cnn_a.forward(np.zeros((3, 16, 87)))


def test_zero_input_finite(cnn_a):
    p = predict_proba(cnn_a, np.zeros((1, 17, 87)))
    assert np.isfinite(p).all() and 0 < p[0] < 1


@pytest.mark.parametrize("k", [2, 4, 6])
def test_cnn_b_kernel_variants_build(k):
    m = build_model(ModelConfig(architecture="CNN_B", cnn_b_kernel=k))
    assert m.shapes[-1] == (1,)
    assert np.isfinite(m.forward(np.random.default_rng(0).random((2, 17, 87)))).all()


def test_invalid_configs():
    with pytest.raises(ValueError):
        ModelConfig(architecture="CNN_B", cnn_b_kernel=3)
    with pytest.raises(ValueError):
        ModelConfig(input_shape=(16, 87))
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(architecture="resnet")


def test_cnn_b_too_deep_fails_at_build_with_trace():
    cfg = ModelConfig(architecture="CNN_B", cnn_b_filters=(4, 4, 4, 4, 4))
    with pytest.raises(ShapeError, match="trace"):
        build_cnn_b(cfg)


def test_corrupted_layer_chain_fails_at_build():
    layers = [Conv2D(1, 4, (3, 3), "same"), BatchNorm(5), Flatten(), Dense(10, 1)]
    with pytest.raises(ShapeError, match=r"layer 1"):
        Model(layers, (1, 17, 87))


@pytest.mark.parametrize("arch", ["CNN_A", "CNN_B"])
def test_build_determinism(arch):
    X = np.random.default_rng(1).random((3, 17, 87))
    a = build_model(ModelConfig(architecture=arch, seed=42)).forward(X)
    b = build_model(ModelConfig(architecture=arch, seed=42)).forward(X)
    c = build_model(ModelConfig(architecture=arch, seed=43)).forward(X)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_identical_trials_identical_probabilities(cnn_a):
    x = np.random.default_rng(2).random((17, 87))
    p = cnn_a.predict_proba(np.stack([x, x]))
    assert p[0] == p[1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_probability_independent_of_batch(seed, n):
    model = build_cnn_a(ModelConfig(seed=3))
    # give the running stats non-trivial values
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if isinstance(layer, BatchNorm):
            layer.buffers["running_mean"] = rng.normal(size=layer.buffers["running_mean"].shape)
            layer.buffers["running_var"] = rng.random(layer.buffers["running_var"].shape) + 0.1
    X = rng.random((n, 17, 87))
    batch = model.predict_proba(X)
    alone = np.array([model.predict_proba(x[None])[0] for x in X])
    np.testing.assert_allclose(batch, alone, rtol=0, atol=1e-15)
    assert np.all((batch > 0) & (batch < 1))


@pytest.mark.parametrize("row", range(17))
def test_no_dead_au_row(cnn_a, row):
    x = np.zeros((1, 17, 87))
    x[0, row] = 1.0
    assert cnn_a.forward(x)[0] != cnn_a.forward(np.zeros((1, 17, 87)))[0]


def test_sigmoid_of_zero_logit():
    layers = [Flatten(), Dense(17 * 87, 1, rng=np.random.default_rng(0))]
    m = Model(layers, (1, 17, 87))
    m.layers[1].params["w"][:] = 0.0
    assert m.predict_proba(np.ones((1, 17, 87)))[0] == 0.5


def test_grad_check_linear_model_exact():
    rng = stream(0, "test")
    m = Model([Flatten(), Dense(17 * 87, 1, rng=rng)], (1, 17, 87))
    X = rng.random((4, 17, 87))
    y = np.array([0, 1, 1, 0], dtype=float)
    rep = grad_check(m, X, y, n_params=100)
    assert rep.max_error <= 1e-9


def test_grad_check_covers_every_tensor(cnn_a):
    X = np.random.default_rng(0).random((4, 17, 87))
    rep = grad_check(cnn_a, X, np.array([0, 1, 0, 1.0]), n_params=30)
    labels = {n.split("[")[0] for n in rep.names}
    assert labels == {label for label, *_ in cnn_a.named_params()}
    assert rep.max_error <= 1e-4


def test_first_batch_norm_shift_has_zero_train_gradient():
    # depthwise conv is linear and the next batch norm removes per-channel constants
    m = build_cnn_a(ModelConfig(seed=2))
    logits = m.forward(np.random.default_rng(1).random((6, 17, 87)), train=True)
    _, d = K.sigmoid_bce(logits, np.array([0, 1, 0, 1, 1, 0.0]))
    m.backward(d / 6)
    assert np.max(np.abs(m.layers[1].grads["shift"])) < 1e-15
    assert np.max(np.abs(m.layers[3].grads["shift"])) > 1e-6


def test_grad_check_leaves_model_untouched(cnn_a):
    before = cnn_a.state()
    grad_check(cnn_a, np.random.default_rng(0).random((3, 17, 87)), np.array([0, 1, 1.0]), n_params=5)
    after = cnn_a.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_step_updates_running_stats():
    m = build_cnn_a(ModelConfig(seed=1))
    bn = m.layers[1]
    before = bn.buffers["running_mean"].copy()
    m.forward(np.random.default_rng(0).random((4, 17, 87)), train=True)
    assert not np.array_equal(before, bn.buffers["running_mean"])


def test_dropout_only_in_training():
    m = build_cnn_a(ModelConfig(seed=1, dropout_rate=0.5))
    X = np.random.default_rng(0).random((4, 17, 87))
    a = m.forward(X, train=False)
    assert np.array_equal(a, m.forward(X, train=False))


@pytest.mark.parametrize("arch", ["CNN_A", "CNN_B", "RF"])
def test_checkpoint_round_trip(tmp_path, arch):
    rng = np.random.default_rng(0)
    X = rng.random((20, 17, 87))
    cfg = ModelConfig(architecture=arch, rf_trees=5, seed=7)
    model = build_model(cfg)
    if arch == "RF":
        model.fit(X, np.arange(20) % 2)
    else:
        model.forward(X, train=True)  # move running stats off their defaults
    save_checkpoint(tmp_path / "a.npz", model, {"note": "x"})
    save_checkpoint(tmp_path / "b.npz", model, {"note": "x"})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    loaded, meta = load_checkpoint(tmp_path / "a.npz")
    assert meta == {"note": "x"}
    assert np.array_equal(loaded.predict_proba(X), model.predict_proba(X))


def test_checkpoint_rejects_other_versions(tmp_path):
    import json
    import zipfile
    m = build_cnn_a(ModelConfig())
    save_checkpoint(tmp_path / "m.npz", m)
    with np.load(tmp_path / "m.npz") as d:
        arrays = {k: d[k] for k in d.files}
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["version"] = 99
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")
    assert zipfile.is_zipfile(tmp_path / "m.npz")


def test_forward_backward_shapes_consistent(cnn_a):
    X = np.random.default_rng(0).random((5, 17, 87))
    logits = cnn_a.forward(X, train=True)
    _, d = K.sigmoid_bce(logits, np.ones(5))
    cnn_a.backward(d)
    for _, layer, name, arr in cnn_a.named_params():
        assert layer.grads[name].shape == arr.shape
