import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dcenav import neural
from helpers import layer_gradient_errors


def test_all_layer_gradients_match_finite_differences():
    errs = layer_gradient_errors(0)
    assert set(errs) == {"dense", "conv", "transpose_conv", "elu", "gru", "gaussian_sample", "dce_loss"}
    for name, e in errs.items():
        assert e <= 1e-3, (name, e)


def test_finite_difference_on_closed_form():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    (g,) = neural.finite_difference_grad(lambda x: (x ** 3).sum(), [x.clone()], h=1e-4)
    np.testing.assert_allclose(g.numpy(), 3 * x.numpy() ** 2, rtol=1e-6)


def test_gradient_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # wrong: should be 2x g

    x = torch.tensor([1.5, -0.7], dtype=torch.float64)
    assert neural.gradient_check(lambda x: Bad.apply(x).sum(), [x]) > 0.1


def test_dense_and_conv_match_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = neural.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride=2, padding=1).numpy()
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-10)
    xd, wd = rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(neural.dense(torch.tensor(xd), torch.tensor(wd)).numpy(), xd @ wd.T)


def test_transpose_conv_is_adjoint_of_conv():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 2, 6, 6, generator=g, dtype=torch.float64)
    y = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
    w = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
    lhs = (neural.conv2d(x, w, stride=2, padding=1) * y).sum()
    rhs = (x * neural.transpose_conv2d(y, w, stride=2, padding=1, output_padding=1)).sum()
    assert lhs.item() == pytest.approx(rhs.item(), rel=1e-10)


def test_elu_values():
    x = torch.tensor([-2.0, 0.0, 3.0], dtype=torch.float64)
    np.testing.assert_allclose(neural.elu(x).numpy(), [np.exp(-2.0) - 1.0, 0.0, 3.0])


def test_gru_cell_matches_equations_and_torch():
    g = torch.Generator().manual_seed(2)
    cell = torch.nn.GRUCell(5, 4).double()
    x = torch.randn(3, 5, generator=g, dtype=torch.float64)
    h = torch.randn(3, 4, generator=g, dtype=torch.float64)
    ours = neural.gru_cell(x, h, cell.weight_ih, cell.weight_hh, cell.bias_ih, cell.bias_hh)
    torch.testing.assert_close(ours, cell(x, h))
    Wi, Wh = cell.weight_ih.detach().numpy(), cell.weight_hh.detach().numpy()
    bi, bh = cell.bias_ih.detach().numpy(), cell.bias_hh.detach().numpy()
    xn, hn = x.numpy(), h.numpy()
    sig = lambda v: 1 / (1 + np.exp(-v))
    r = sig(xn @ Wi[:4].T + bi[:4] + hn @ Wh[:4].T + bh[:4])
    z = sig(xn @ Wi[4:8].T + bi[4:8] + hn @ Wh[4:8].T + bh[4:8])
    n = np.tanh(xn @ Wi[8:].T + bi[8:] + r * (hn @ Wh[8:].T + bh[8:]))
    np.testing.assert_allclose(ours.detach().numpy(), (1 - z) * n + z * hn, rtol=1e-12)


def test_shape_errors():
    with pytest.raises(ValueError):
        neural.dense(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ValueError):
        neural.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 2, 3, 3))
    with pytest.raises(ValueError):
        neural.gaussian_sample(torch.zeros(2), torch.zeros(3), torch.zeros(2))
    with pytest.raises(ValueError):
        neural.gru_cell(torch.zeros(1, 2), torch.zeros(1, 3), torch.zeros(6, 2), torch.zeros(9, 3),
                        None, None)


@given(st.floats(-10, 10), st.floats(1e-3, 10), st.floats(1e-5, 1e-1))
def test_adam_first_step_closed_form(p0, grad, lr):
    p = torch.tensor([p0], dtype=torch.float64)
    g = torch.tensor([grad], dtype=torch.float64)
    state = neural.AdamState(lr=lr)
    neural.adam_step([p], [g], state)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    assert p.item() == pytest.approx(p0 - lr * grad / (abs(grad) + 1e-8), rel=1e-12, abs=1e-15)


def test_adam_matches_torch_trajectory():
    g = torch.Generator().manual_seed(3)
    target = torch.randn(5, generator=g, dtype=torch.float64)
    a = torch.zeros(5, dtype=torch.float64)
    b = torch.zeros(5, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([b], lr=0.05)
    state = neural.AdamState(lr=0.05)
    for _ in range(50):
        neural.adam_step([a], [2 * (a - target)], state)
        opt.zero_grad()
        ((b - target) ** 2).sum().backward()
        opt.step()
    torch.testing.assert_close(a, b.detach(), rtol=1e-10, atol=1e-12)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    tensors = {"w": torch.randn(3, 4), "b": torch.randn(4), "s": torch.tensor(2.5)}
    path = tmp_path / "m.ckpt"
    digest = neural.save_checkpoint(path, tensors, {"kind": "test", "n": 3})
    back, meta = neural.load_checkpoint(path)
    assert meta == {"kind": "test", "n": 3}
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    assert len(digest) == 64
    data = bytearray(path.read_bytes())
    data[40] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(neural.CheckpointError):
        neural.load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"x" * 100)
    with pytest.raises(neural.CheckpointError):
        neural.load_checkpoint(tmp_path / "junk")


def test_checkpoint_is_byte_deterministic(tmp_path):
    t = {"a": torch.arange(6.0).reshape(2, 3)}
    d1 = neural.save_checkpoint(tmp_path / "1", t, {"x": 1})
    d2 = neural.save_checkpoint(tmp_path / "2", t, {"x": 1})
    assert d1 == d2
