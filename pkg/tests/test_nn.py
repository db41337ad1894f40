import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskwarp.exceptions import DimensionError, DomainError
from maskwarp.nn import (
    AdamState,
    Discriminator,
    GeneratorParams,
    ParamTensor,
    adam_step,
    disc_backward,
    extract_patches,
    load_checkpoint,
    patches_adjoint,
    save_checkpoint,
    sigmoid,
    softplus,
    softplus_inverse,
)


def test_sigmoid_is_stable_and_bounded():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-15)


def test_softplus_inverse(rng):
    y = rng.uniform(1e-3, 10, 50)
    np.testing.assert_allclose(softplus(softplus_inverse(y)), y, rtol=1e-12)


def test_patches_round_trip(rng):
    img = rng.uniform(size=(16, 24, 3))
    p = extract_patches(img, 8)
    assert p.shape == (6, 192)
    np.testing.assert_array_equal(patches_adjoint(p, img.shape, 8), img)
    np.testing.assert_array_equal(p[1], img[:8, 8:16].reshape(-1))
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((4, 4, 3)), 8)


def test_zero_weights_give_one_half(rng):
    d = Discriminator()
    for p in d.parameters().values():
        p.values[...] = 0.0
    prob, _ = d.forward(rng.uniform(size=(5, 192)))
    np.testing.assert_array_equal(prob, 0.5)


def test_single_layer_is_logistic_regression(rng):
    d = Discriminator((4, 1), seed=3)
    x = rng.normal(size=(6, 4))
    prob, _ = d.forward(x)
    np.testing.assert_allclose(prob, sigmoid(x @ d.weights[0].values[:, 0] + d.biases[0].values[0]), atol=1e-15)


def test_forward_is_deterministic(rng):
    x = rng.uniform(size=(3, 192))
    a, _ = Discriminator(seed=5).forward(x)
    b, _ = Discriminator(seed=5).forward(x)
    np.testing.assert_array_equal(a, b)


def test_input_size_checked():
    with pytest.raises(DimensionError):
        Discriminator().forward(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        Discriminator((4, 2))


def test_backward_matches_finite_differences(rng):
    d = Discriminator((12, 6, 4, 1), seed=1, init_std=0.4)
    x = rng.normal(size=(3, 12))
    up = rng.normal(size=3)
    _, cache = d.forward(x)
    grads, g_in = disc_backward(d, cache, up)
    h = 1e-6

    def f():
        return float(np.sum(up * d.forward(x)[0]))

    for name, p in d.parameters().items():
        flat = p.values.reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 7)):
            old = flat[k]
            flat[k] = old + h
            fp = f()
            flat[k] = old - h
            fm = f()
            flat[k] = old
            assert grads[name].reshape(-1)[k] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)
    for k in range(12):
        e = np.zeros_like(x)
        e[:, k] = h
        num = (np.sum(up * d.forward(x + e)[0]) - np.sum(up * d.forward(x - e)[0])) / (2 * h)
        assert g_in[:, k].sum() == pytest.approx(num, rel=1e-5, abs=1e-9)


# -- Adam -----------------------------------------------------------------------------


def test_adam_first_step_magnitude():
    p = {"x": ParamTensor(np.array([1.0, -2.0, 3.0]), np.array([0.5, -7.0, 1e-3]))}
    upd = adam_step(AdamState(), p)
    np.testing.assert_allclose(upd["x"], [-0.0002, 0.0002, -0.0002], rtol=1e-4)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.integers(1, 6))
def test_adam_step_is_bounded(gvals, n):
    # with beta1^2 < beta2 every step is at most about lr in magnitude per coordinate
    rng = np.random.default_rng(len(gvals) + n)
    p = {"x": ParamTensor(np.zeros(len(gvals)))}
    state = AdamState(lr=0.01)
    for _ in range(n):
        p["x"].grads[...] = np.asarray(gvals) * rng.uniform(0.5, 2.0, len(gvals))
        upd = adam_step(state, p)
        assert np.all(np.abs(upd["x"]) <= 0.01 * 1.7)


def test_adam_odd_symmetry(rng):
    x0 = rng.normal(size=5)
    grads = rng.normal(size=(4, 5))
    a = {"x": ParamTensor(x0.copy())}
    b = {"x": ParamTensor(-x0.copy())}
    sa, sb = AdamState(), AdamState()
    for g in grads:
        a["x"].grads[...] = g
        b["x"].grads[...] = -g
        adam_step(sa, a)
        adam_step(sb, b)
    np.testing.assert_allclose(a["x"].values, -b["x"].values, atol=1e-15)


def test_adam_rejects_non_finite():
    p = {"x": ParamTensor(np.zeros(2), np.array([np.nan, 0.0]))}
    with pytest.raises(DomainError):
        adam_step(AdamState(), p)


def test_adam_lr_override():
    p = {"x": ParamTensor(np.zeros(1), np.ones(1))}
    upd = adam_step(AdamState(), p, lr=0.5)
    assert upd["x"][0] == pytest.approx(-0.5, rel=1e-6)


# -- generator parameters and checkpoints ------------------------------------------------


def test_generator_initialization():
    gp = GeneratorParams.initialize([0, 1, 2], [(1, 0), (1, 2)], (4, 5), init_depth=5.0)
    d, dd = gp.depth(0)
    np.testing.assert_allclose(d, 5.0, rtol=1e-12)
    assert np.all(dd < 0)
    m, _ = gp.mask((1, 0))
    assert np.all((m > 0.98) & (m < 1))
    assert set(gp.named()) == {"depth/0", "depth/1", "depth/2", "pose/1/0", "pose/1/2", "mask/1/0", "mask/1/2"}


def test_depth_clamped_region_has_zero_gradient():
    gp = GeneratorParams({0: np.array([[50.0, -20.0]])}, {}, {})
    d, dd = gp.depth(0)
    assert d[0, 0] == pytest.approx(0.1) and d[0, 1] == pytest.approx(100.0)
    np.testing.assert_array_equal(dd, 0)


def test_checkpoint_round_trip(tmp_path, rng):
    d = Discriminator(seed=2)
    state = AdamState()
    for p in d.parameters().values():
        p.grads[...] = rng.normal(size=p.shape)
    adam_step(state, d.parameters())
    arrays = d.state_dict()
    save_checkpoint(tmp_path / "ck.bin", arrays, {"disc": state}, {"note": "x"})
    loaded, opts, meta = load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"note": "x"}
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
    assert opts["disc"].step == 1
    for k in state.m:
        np.testing.assert_array_equal(opts["disc"].m[k], state.m[k])
        np.testing.assert_array_equal(opts["disc"].v[k], state.v[k])
    d2 = Discriminator(seed=9)
    d2.load_state_dict(loaded)
    x = rng.uniform(size=(2, 192))
    np.testing.assert_array_equal(d2.forward(x)[0], d.forward(x)[0])


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")
