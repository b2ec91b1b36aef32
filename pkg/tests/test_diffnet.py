import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmodseg import diffnet as dn
from xmodseg.errors import FormatError, ValidationError


def _t(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@given(arrays(np.float64, (2, 1, 3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (2, 1, 3, 4), elements=st.floats(-10, 10)))
@settings(max_examples=30, deadline=None)
def test_mse_matches_loop(a, b):
    expected = 0.0
    for v, w in zip(a.ravel(), b.ravel()):
        expected += (v - w) ** 2
    expected /= a.size
    assert float(dn.mse(_t(a), _t(b))) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_mse_scalar_target_and_shape_check():
    assert float(dn.mse(_t([0.0, 1.0]), _t([1.0, 1.0]))) == 0.5
    assert float(dn.mse(_t([0.0, 1.0]), 1.0)) == 0.5
    with pytest.raises(ValidationError):
        dn.mse(_t([0.0, 1.0]), _t([1.0, 1.0, 1.0]))


def test_bce_half_is_ln2():
    p = torch.full((4,), 0.5, dtype=torch.float64)
    assert float(dn.bce(p, _t([0.0, 1.0, 0.0, 1.0]))) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_saturated_is_finite():
    v = dn.bce(_t([0.0, 1.0]), _t([1.0, 0.0]))
    assert torch.isfinite(v) and float(v) == pytest.approx(-math.log(dn.BCE_EPS), rel=1e-6)


def test_soft_dice_perfect_and_disjoint():
    m = _t(np.eye(4)[None, None])
    assert float(dn.soft_dice(m, m)) == pytest.approx(1.0)
    assert float(dn.soft_dice(m, 1 - m, eps=0.0)) == 0.0


def test_backward_scalar_quadratic():
    p = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    (g,) = dn.backward(p * p, [p])
    assert float(g) == 6.0 and float(p.grad) == 6.0


def test_backward_unused_param_gets_zero_and_rejects_bad_loss():
    a = torch.ones(2, dtype=torch.float64, requires_grad=True)
    b = torch.ones(3, dtype=torch.float64, requires_grad=True)
    ga, gb = dn.backward((a * 2).sum(), [a, b])
    assert torch.equal(gb, torch.zeros(3, dtype=torch.float64)) and torch.equal(ga, torch.full((2,), 2.0, dtype=torch.float64))
    with pytest.raises(ValidationError):
        dn.backward(a * 2, [a])
    with pytest.raises(ValidationError):
        dn.backward(torch.tensor(1.0), [a])


def test_adam_zero_grad_and_zero_lr_leave_params():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    st_ = dn.AdamState.for_params([p])
    dn.adam_step([p], [torch.zeros(2, dtype=torch.float64)], st_, lr=0.1)
    assert torch.equal(p, _t([1.0, -2.0]))
    dn.adam_step([p], [_t([5.0, 5.0])], st_, lr=0.0)
    assert torch.equal(p, _t([1.0, -2.0])) and st_.step == 2


def test_adam_first_step_is_lr_times_sign():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    dn.adam_step([p], [_t([4.0, -0.5])], dn.AdamState.for_params([p]), lr=0.1)
    assert torch.allclose(p, _t([0.9, -1.9]), atol=1e-7)


def test_adam_decreases_quadratic():
    p = torch.tensor([3.0, -4.0], dtype=torch.float64, requires_grad=True)
    st_ = dn.AdamState.for_params([p])
    values = []
    for _ in range(200):
        loss = (p**2).sum()
        values.append(float(loss.detach()))
        dn.adam_step([p], dn.backward(loss, [p]), st_, lr=0.05)
    assert values[-1] < 0.01 * values[0]


def test_adam_rejects_nonfinite_without_writing():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64)
    st_ = dn.AdamState.for_params([p])
    with pytest.raises(ValidationError):
        dn.adam_step([p], [_t([1.0, float("nan")])], st_, lr=0.1)
    assert torch.equal(p, _t([1.0, 2.0])) and st_.step == 0


def test_identity_and_constant_networks():
    x = torch.rand(2, 1, 16, 16)
    assert torch.equal(dn.identity_network()(x), x)
    out = dn.constant_network(0.5)(x)
    assert torch.allclose(out, torch.full_like(out, 0.5))
    assert torch.all(dn.constant_network(1.0)(x) == 1.0)


def test_shapes_and_channel_checks():
    net = dn.Network([dn.conv(1, 4, stride=2), dn.inorm(4), dn.act("relu"), dn.UPSAMPLE, dn.conv(4, 1, pad_mode="reflect")])
    assert net(torch.rand(1, 1, 64, 64)).shape == (1, 1, 64, 64)
    with pytest.raises(ValidationError):
        dn.Network([dn.conv(1, 4), dn.conv(3, 1)])
    with pytest.raises(ValidationError):
        dn.Network([dn.PUSH, dn.conv(1, 1)])
    with pytest.raises(ValidationError):
        net(torch.rand(1, 2, 64, 64))
    with pytest.raises(ValidationError):
        dn.Layer("dense")


def test_skip_and_residual_stack():
    unet = dn.Network([dn.conv(1, 2), dn.PUSH, dn.MAXPOOL, dn.conv(2, 2), dn.conv_t(2, 2), dn.CONCAT, dn.conv(4, 1)])
    assert unet(torch.rand(1, 1, 8, 8)).shape == (1, 1, 8, 8)
    with pytest.raises(ValidationError):
        unet(torch.rand(1, 1, 7, 8))
    res = dn.Network([dn.RES_BEGIN, dn.conv(1, 1), dn.RES_ADD])
    with torch.no_grad():
        for p in res.params:
            p.zero_()
    x = torch.rand(1, 1, 8, 8)
    assert torch.equal(res(x), x)


def test_param_count_matches_layer_specs():
    layers = [dn.conv(1, 4, k=3), dn.inorm(4), dn.conv_t(4, 2, k=2), dn.conv(2, 1, k=1)]
    expected = (4 * 1 * 9 + 4) + (4 + 4) + (4 * 2 * 4 + 2) + (2 + 1)
    assert dn.count_params(layers) == expected == dn.Network(layers).param_count()


def test_reflect_padding_differs_from_zero_padding():
    x = torch.rand(1, 1, 8, 8) + 1.0
    z = dn.Network([dn.conv(1, 1)], seed=3)
    r = dn.Network([dn.conv(1, 1, pad_mode="reflect")], seed=3)
    assert torch.equal(z(x)[..., 1:-1, 1:-1], r(x)[..., 1:-1, 1:-1])
    assert not torch.equal(z(x), r(x))


def test_frozen_forward_detaches():
    net = dn.Network([dn.conv(1, 1)])
    assert not net(torch.rand(1, 1, 8, 8), frozen=True).requires_grad
    assert net(torch.rand(1, 1, 8, 8)).requires_grad


def test_gradcheck_toy_float64():
    torch.manual_seed(0)
    net = dn.Network([dn.conv(1, 3), dn.inorm(3), dn.act("tanh"), dn.conv(3, 1), dn.act("sigmoid")], seed=1, dtype=torch.float64)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    y = (torch.rand(2, 1, 8, 8, dtype=torch.float64) > 0.5).to(torch.float64)
    err = dn.gradcheck(lambda: dn.bce(net(x), y) + dn.mse(net(x), y), net.params, n_probes=30, h=1e-3)
    assert err <= 1e-6


def test_gradcheck_detects_wrong_gradient():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return (t**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(2, dtype=torch.float64)

    assert dn.gradcheck(lambda: Wrong.apply(p), [p], n_probes=2) > 0.1


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = dn.Network([dn.conv(1, 2, pad_mode="reflect"), dn.inorm(2), dn.UPSAMPLE, dn.conv(2, 1)], seed=5)
    path = tmp_path / "n.ckpt"
    dn.save_checkpoint(path, {"g": net}, {"note": "x"})
    nets, meta = dn.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert np.array_equal(nets["g"].flat_params(), net.flat_params())
    assert nets["g"].layers == net.layers
    dn.save_checkpoint(tmp_path / "m.ckpt", nets, meta)
    assert (tmp_path / "m.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "n.ckpt"
    dn.save_checkpoint(path, {"g": dn.Network([dn.conv(1, 1)])})
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"JUNK" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    for name in ("bad.ckpt", "short.ckpt", "missing.ckpt"):
        with pytest.raises(FormatError):
            dn.load_checkpoint(tmp_path / name)


def test_flat_params_roundtrip():
    net = dn.Network([dn.conv(1, 2), dn.conv(2, 1)], seed=2)
    flat = net.flat_params()
    other = dn.Network([dn.conv(1, 2), dn.conv(2, 1)], seed=9)
    other.load_flat(flat)
    assert np.array_equal(other.flat_params(), flat)
    with pytest.raises(ValidationError):
        other.load_flat(flat[:-1])


def test_gradcheck_skips_probes_straddling_a_kink():
    net = dn.Network([dn.conv(1, 1, k=1), dn.act("relu")], dtype=torch.float64)
    x = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    w, b = net.params
    with torch.no_grad():
        w.fill_(1.0)
        b.fill_(-1.0 + 5e-4)  # pre-activation h / 2 from the kink for both scalars
    stats = {}
    dn.gradcheck(lambda: net(x).sum(), net.params, n_probes=2, h=1e-3, stats=stats)
    assert stats == {"checked": 0, "skipped": 2}
    with torch.no_grad():
        b.fill_(-0.5)
    err = dn.gradcheck(lambda: net(x).sum(), net.params, n_probes=2, h=1e-3, stats=stats)
    assert stats == {"checked": 2, "skipped": 0} and err <= 1e-9
