import numpy as np
import pytest
import torch

from mraug import nncore
from mraug.errors import CheckpointError, MissingGradient, ShapeError
from mraug.nncore import AdamConfig, ParamSet

from conftest import finite_difference, rel_error

D = torch.float64


def brute_conv(x, k, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    window = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(window * k[o])
    return out


def scatter_add_transpose(y, k, stride):
    n, cout, h, w = y.shape
    _, cin, kh, kw = k.shape
    out = np.zeros((n, cin, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    out[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += y[b, o, i, j] * k[o]
    return out


class TestConv:
    def test_identity_kernel(self, rng):
        x = torch.tensor(rng.normal(size=(1, 1, 4, 4)))
        y = nncore.conv2d(x, torch.ones(1, 1, 1, 1, dtype=D))
        assert torch.equal(y, x)

    def test_average_kernel_stride2(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        k = np.full((1, 1, 3, 3), 1 / 9)
        y = nncore.conv2d(torch.tensor(x), torch.tensor(k), stride=2, padding=1)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(y.numpy(), brute_conv(x, k, 2, 1), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_sliding_window(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        y = nncore.conv2d(torch.tensor(x), torch.tensor(k), stride=stride, padding=pad)
        assert y.shape[2] == (7 + 2 * pad - 3) // stride + 1
        np.testing.assert_allclose(y.numpy(), brute_conv(x, k, stride, pad), atol=1e-12)

    def test_kernel_gradient_fd(self, rng):
        x = torch.tensor(rng.normal(size=(1, 2, 5, 5)))
        k = torch.tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        nncore.conv2d(x, k, stride=2, padding=1).sum().backward()
        fd = finite_difference(lambda kk: nncore.conv2d(x, kk, stride=2, padding=1).sum(), k)
        assert rel_error(k.grad, fd) < 1e-4

    def test_input_gradient_fd(self, rng):
        x = torch.tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        k = torch.tensor(rng.normal(size=(2, 2, 3, 3)))
        (nncore.conv2d(x, k, padding=1) ** 2).sum().backward()
        fd = finite_difference(lambda xx: (nncore.conv2d(xx, k, padding=1) ** 2).sum(), x)
        assert rel_error(x.grad, fd) < 1e-4

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError) as exc:
            nncore.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 1, 1))
        assert exc.value.dim == "channels"

    def test_rank_and_stride_errors(self):
        with pytest.raises(ShapeError):
            nncore.conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 2, 1, 1))
        with pytest.raises(ShapeError) as exc:
            nncore.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 1, 1), stride=0)
        assert exc.value.dim == "stride"


class TestConvTranspose:
    def test_unit_kernel_identity(self, rng):
        y = torch.tensor(rng.normal(size=(1, 1, 5, 5)))
        assert torch.equal(nncore.conv2d_transpose(y, torch.ones(1, 1, 1, 1, dtype=D)), y)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0), (3, 1)])
    def test_adjoint_identity(self, seed, stride, pad):
        r = np.random.default_rng(seed)
        h = 3 * stride + 3 - 2 * pad  # exact tiling: no rows dropped by the stride
        x = torch.tensor(r.normal(size=(2, 3, h, h)))
        k = torch.tensor(r.normal(size=(4, 3, 3, 3)))
        cx = nncore.conv2d(x, k, stride=stride, padding=pad)
        y = torch.tensor(r.normal(size=cx.shape))
        lhs = float((cx * y).sum())
        ty = nncore.conv2d_transpose(y, k, stride=stride, padding=pad)
        assert ty.shape == x.shape
        rhs = float((x * ty).sum())
        assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))

    def test_scatter_add(self, rng):
        y = rng.normal(size=(1, 1, 2, 2))
        k = rng.normal(size=(1, 1, 2, 2))
        out = nncore.conv2d_transpose(torch.tensor(y), torch.tensor(k), stride=2)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(out.numpy(), scatter_add_transpose(y, k, 2), atol=1e-12)

    def test_output_size(self):
        out = nncore.conv2d_transpose(torch.zeros(1, 2, 8, 8), torch.zeros(2, 3, 4, 4), stride=2, padding=1)
        assert out.shape == (1, 3, 16, 16)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nncore.conv2d_transpose(torch.zeros(1, 2, 4, 4), torch.zeros(3, 1, 2, 2))


def block_params(channels, gen, zero=False):
    p = {}
    nncore.resnet_block_params(p, "", channels, gen, dtype=D)
    if zero:
        p = {k: torch.zeros_like(v) for k, v in p.items()}
    return p


class TestResnetBlock:
    def test_zero_residual(self, rng, tgen):
        x = torch.tensor(rng.normal(size=(1, 4, 6, 6)))
        assert torch.equal(nncore.resnet_block(x, block_params(4, tgen, zero=True)), x)

    def test_shape(self, tgen):
        x = torch.zeros(1, 8, 16, 16, dtype=D)
        assert nncore.resnet_block(x, block_params(8, tgen)).shape == (1, 8, 16, 16)

    def test_channel_mismatch(self, tgen):
        with pytest.raises(ShapeError):
            nncore.resnet_block(torch.zeros(1, 3, 8, 8, dtype=D), block_params(4, tgen))

    def test_gradient_fd(self, rng, tgen):
        p = {k: v * 25 for k, v in block_params(2, tgen).items()}
        x = torch.tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        w = p["conv1.w"].clone().requires_grad_(True)

        def f(xx, ww):
            q = dict(p, **{"conv1.w": ww})
            return (nncore.resnet_block(xx, q) * torch.linspace(-1, 1, 50, dtype=D).view(1, 2, 5, 5)).sum()

        f(x, w).backward()
        assert rel_error(x.grad, finite_difference(lambda xx: f(xx, w.detach()), x)) < 1e-4
        assert rel_error(w.grad, finite_difference(lambda ww: f(x.detach(), ww), w)) < 1e-4

    def test_deterministic(self, rng, tgen):
        p = block_params(3, tgen)
        x = torch.tensor(rng.normal(size=(2, 3, 8, 8)))
        assert torch.equal(nncore.resnet_block(x, p), nncore.resnet_block(x, p))


class TestActivations:
    def test_relu(self):
        assert nncore.relu(torch.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]

    def test_leaky(self):
        assert nncore.leaky_relu(torch.tensor([-1.0, 2.0]), 0.2).tolist() == pytest.approx([-0.2, 2.0])

    def test_softmax_equal_logits(self):
        out = nncore.softmax_channel(torch.zeros(1, 2, 3, 3))
        assert torch.allclose(out, torch.full_like(out, 0.5))

    def test_sigmoid_gradient_fd(self, rng):
        x = torch.tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        nncore.sigmoid(x).sum().backward()
        fd = finite_difference(lambda xx: nncore.sigmoid(xx).sum(), x)
        assert float((x.grad - fd).abs().max()) < 1e-6

    @pytest.mark.parametrize("fn", [nncore.tanh, nncore.softmax_channel,
                                    lambda t: nncore.leaky_relu(t, 0.2), nncore.instance_norm])
    def test_gradients_fd(self, rng, fn):
        x = torch.tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
        weights = torch.tensor(rng.normal(size=(1, 3, 3, 3)))
        (fn(x) * weights).sum().backward()
        fd = finite_difference(lambda xx: (fn(xx) * weights).sum(), x)
        assert rel_error(x.grad, fd) < 1e-4


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        ps = ParamSet({"w": torch.tensor([1.0, -2.0], dtype=D)},
                      m={"w": torch.tensor([0.4, 0.2], dtype=D)},
                      v={"w": torch.tensor([0.1, 0.3], dtype=D)})
        cfg = AdamConfig(lr=0.1)
        out = nncore.adam_step(ps, {"w": torch.zeros(2, dtype=D)}, cfg)
        assert out.step == 1
        # first moment decays, second too; with nonzero old moments the param moves,
        # so check the true fixed point: zero moments and zero gradients
        assert torch.allclose(out.m["w"], 0.5 * ps.m["w"])
        assert torch.allclose(out.v["w"], 0.999 * ps.v["w"])
        fresh = ParamSet({"w": torch.tensor([1.0, -2.0], dtype=D)})
        again = nncore.adam_step(fresh, {"w": torch.zeros(2, dtype=D)}, cfg)
        assert torch.equal(again.params["w"], fresh.params["w"])

    @pytest.mark.parametrize("g", [3.0, -0.25])
    def test_first_step_moves_by_lr(self, g):
        # hand recurrence: m=(1-b1)g, v=(1-b2)g^2 -> mhat=g, vhat=g^2 -> step = lr*g/(|g|+eps)
        cfg = AdamConfig(lr=0.01, beta1=0.5, beta2=0.999, epsilon=1e-8)
        ps = ParamSet({"x": torch.tensor([0.0], dtype=D)})
        out = nncore.adam_step(ps, {"x": torch.tensor([g], dtype=D)}, cfg)
        expected = -0.01 * g / (abs(g) + 1e-8)
        assert float(out.params["x"]) == pytest.approx(expected, rel=1e-12)

    def test_quadratic_decreases(self):
        cfg = AdamConfig(lr=0.1)
        ps = ParamSet({"x": torch.tensor([2.0, -1.5], dtype=D)})
        losses = []
        for _ in range(3):
            x = ps.params["x"]
            losses.append(float((x ** 2).sum()))
            ps = nncore.adam_step(ps, {"x": 2 * x}, cfg)
        assert losses[0] > losses[1] > losses[2]

    def test_missing_gradient(self):
        ps = ParamSet({"a": torch.zeros(1), "b": torch.zeros(1)})
        with pytest.raises(MissingGradient):
            nncore.adam_step(ps, {"a": torch.zeros(1)}, AdamConfig())

    def test_gradient_shape(self):
        ps = ParamSet({"a": torch.zeros(2)})
        with pytest.raises(ShapeError):
            nncore.adam_step(ps, {"a": torch.zeros(3)}, AdamConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdamConfig(beta1=1.0)
        with pytest.raises(ValueError):
            AdamConfig(lr=0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tgen):
        ps = ParamSet({"a.w": torch.randn(2, 3, 4, 4, generator=tgen), "a.b": torch.randn(2, generator=tgen)})
        ps = nncore.adam_step(ps, {k: torch.ones_like(v) for k, v in ps.params.items()}, AdamConfig())
        path = nncore.save_checkpoint(tmp_path / "c.dsfg", {"g": ps}, {"mode": "label2image"})
        sets, meta = nncore.load_checkpoint(path)
        assert meta == {"mode": "label2image"}
        back = sets["g"]
        assert back.step == 1
        for k in ps.params:
            assert torch.equal(back.params[k], ps.params[k])
            assert torch.equal(back.m[k], ps.m[k])
            assert torch.equal(back.v[k], ps.v[k])

    def test_layout(self, tmp_path):
        ps = ParamSet({"w": torch.tensor([[1.5, -2.0]])})
        raw = nncore.checkpoint_bytes({"s": ps})
        assert raw[:4] == b"DSFG"
        assert int.from_bytes(raw[4:8], "little") == 1
        # the first float record carries the values verbatim as little-endian f32
        assert np.frombuffer(np.array([1.5, -2.0], dtype="<f4").tobytes(), "<f4").tobytes() in raw

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            nncore.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        raw = nncore.checkpoint_bytes({"s": ParamSet({"w": torch.ones(10)})})
        p = tmp_path / "x"
        p.write_bytes(raw[:-7])
        with pytest.raises(CheckpointError):
            nncore.load_checkpoint(p)
