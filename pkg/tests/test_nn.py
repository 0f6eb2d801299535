import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microt import nn
from oracles import conv2d_loops, numeric_grad, softmax_rows


def small_net(seed=0, head=3):
    return nn.seeded_init((2, 6, 6), "conv:3:3 relu conv:4:3:2:1 relu gap dense:5", seed, head_classes=head)


def test_conv_matches_loops():
    rng = np.random.default_rng(0)
    for stride, pad in [(1, 0), (2, 0), (1, 1), (2, 1)]:
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = nn.Conv2D(w, b, stride, pad).forward(x)
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-12)


def test_conv_macs_and_shape():
    conv = nn.Conv2D(np.zeros((8, 3, 3, 3)), np.zeros(8), stride=2, padding=1)
    assert conv.out_shape((3, 16, 16)) == (8, 8, 8)
    assert conv.macs((3, 16, 16)) == 8 * 8 * 8 * 3 * 3 * 3


def test_dense_macs():
    assert nn.Dense(np.zeros((10, 4)), np.zeros(4)).macs((10,)) == 40


def test_softmax_matches_reference():
    z = np.random.default_rng(1).normal(size=(4, 6)) * 5
    for t in (0.1, 1.0, 3.0):
        np.testing.assert_allclose(nn.softmax(z, t), softmax_rows(z, t), atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    p = nn.softmax(np.array([[1e4, -1e4, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("wrt", ["output", "logits", "features"])
def test_backward_matches_finite_differences(wrt):
    net = small_net()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 6, 6))
    out, acts = nn.forward(net, x)
    target = {"output": out, "logits": acts.logits, "features": acts.features}[wrt]
    upstream = rng.normal(size=target.shape)

    def loss_for(param_index):
        def f(value):
            p = net.params()[param_index]
            old = p.copy()
            p[...] = value
            o, a = nn.forward(net, x)
            val = {"output": o, "logits": a.logits, "features": a.features}[wrt]
            p[...] = old
            return float((val * upstream).sum())
        return f

    tape = nn.backward(net, upstream, acts, wrt=wrt)
    for i, p in enumerate(net.params()):
        num = numeric_grad(loss_for(i), p.copy())
        np.testing.assert_allclose(tape.grads[i], num, atol=1e-6, rtol=1e-5)


def test_input_gradient_and_boundary_injection():
    net = small_net(head=None)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 6, 6))
    _, acts = nn.forward(net, x)
    up = rng.normal(size=acts.features.shape)
    extra = rng.normal(size=acts.values[2].shape)

    def f(xv):
        _, a = nn.forward(net, xv)
        return float((a.features * up).sum() + (a.values[2] * extra).sum())

    tape = nn.backward(net, up, acts, wrt="features", boundary_grads={2: extra})
    np.testing.assert_allclose(tape.input_grad, numeric_grad(f, x), atol=1e-6)


def test_stale_activations_rejected():
    net = small_net()
    x = np.zeros((1, 2, 6, 6))
    out, acts = nn.forward(net, x)
    tape = nn.backward(net, np.ones_like(out), acts)
    nn.sgd_step(net, tape, 0.1)
    with pytest.raises(nn.StaleActivationsError):
        nn.backward(net, np.ones_like(out), acts)


def test_sgd_refuses_nonfinite_gradient():
    net = small_net()
    grads = [np.zeros_like(p) for p in net.params()]
    grads[1][0] = np.nan
    before = nn.checksum(net)
    with pytest.raises(nn.NonFiniteGradientError):
        nn.sgd_step(net, grads, 0.1)
    assert nn.checksum(net) == before


def test_shape_error_names_expected_and_actual():
    with pytest.raises(nn.ShapeError) as err:
        nn.forward(small_net(), np.zeros((1, 3, 6, 6)))
    assert "(3, 6, 6)" in str(err.value) or "3, 6, 6" in str(err.value)


def test_mac_count_sums_blocks_and_head():
    net = small_net()
    # conv 3x(2*3*3) on 4x4, conv 4x(3*3*3) on 2x2 after pad, dense 4x5, head 5x3
    expected = 3 * 4 * 4 * 18 + 4 * 2 * 2 * 27 + 4 * 5 + 5 * 3
    assert nn.mac_count(net) == expected
    assert nn.mac_count(net, include_head=False) == expected - 15


def test_parse_arch_tokens():
    assert nn.parse_arch("conv:8:3 relu conv:16:3:2:1, gap dense:10 softmax:2") == [
        ("conv", 8, 3, 1, 0), ("relu",), ("conv", 16, 3, 2, 1), ("gap",), ("dense", 10), ("softmax", 2.0)]
    with pytest.raises(ValueError):
        nn.parse_arch("pool:2")


def test_seeded_init_is_deterministic():
    assert nn.checksum(small_net(7)) == nn.checksum(small_net(7))
    assert nn.checksum(small_net(7)) != nn.checksum(small_net(8))


def test_he_init_bound():
    net = nn.seeded_init((4,), "dense:1000", 0, init="he")
    assert np.abs(net.blocks[0].weight).max() <= np.sqrt(6 / 4)
    with pytest.raises(ValueError):
        nn.seeded_init((4,), "dense:3", 0, init="lecun")


def test_copy_is_independent():
    net = small_net()
    dup = net.copy()
    dup.params()[0][...] += 1
    assert nn.checksum(dup) != nn.checksum(net)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_forward_batch_rows_independent(batch, seed):
    net = small_net(seed % 100)
    x = np.random.default_rng(seed).normal(size=(batch, 2, 6, 6))
    out, _ = nn.forward(net, x)
    for i in range(batch):
        np.testing.assert_allclose(nn.forward(net, x[i : i + 1])[0][0], out[i], atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


def test_readout_backward_is_adjoint():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 4))
    d = rng.normal(size=(2, 3))
    assert np.sum(nn.readout(x) * d) == pytest.approx(np.sum(x * nn.readout_backward(x, d)))
