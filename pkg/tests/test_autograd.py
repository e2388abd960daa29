import numpy as np
import pytest

from rirflow.autograd import (GradcheckResult, Tensor, attention, concat, conv1d,
                              embedding, gelu, gradcheck, gradients, layer_norm,
                              repeat_interleave, softmax)
from rirflow.checkpoint import load_checkpoint, save_checkpoint
from rirflow.nn import (ChannelNorm, Conv1d, LayerNorm, Linear, Mlp, Module,
                        SelfAttention)
from rirflow.optim import Adam, AdamState, adam_step

rng = np.random.default_rng(42)


def t(shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


class TestForward:
    def test_identity(self):
        x = rng.standard_normal((3, 4))
        assert np.array_equal(Tensor(x).data, x)

    def test_matmul_hand_product(self):
        a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = Tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
        out = (a @ b).data
        assert np.array_equal(out, [[58.0, 64.0], [139.0, 154.0]])

    def test_softmax_symmetry(self):
        out = softmax(Tensor([0.0, 0.0])).data
        assert np.allclose(out, [0.5, 0.5], atol=1e-15)

    def test_softmax_sums_to_one(self):
        x = t((5, 7), scale=3.0)
        s = softmax(x).data.sum(axis=-1)
        assert np.max(np.abs(s - 1.0)) < 1e-12

    def test_layer_norm_moments(self):
        x = t((6, 32))
        out = layer_norm(x).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-9
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-6

    def test_ops_do_not_mutate_inputs(self):
        x = t((4, 4))
        before = x.data.copy()
        _ = gelu(softmax(x @ x) + x * 2.0 - x).sum()
        assert np.array_equal(x.data, before)

    def test_deterministic_forward(self):
        x = Tensor(rng.standard_normal((3, 3)))
        y1 = gelu(x @ x).data
        y2 = gelu(x @ x).data
        assert np.array_equal(y1, y2)

    def test_broadcast_rules(self):
        ok = Tensor(np.ones((2, 3, 4))) + Tensor(np.ones(4))
        assert ok.shape == (2, 3, 4)
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 1, 4))) + Tensor(np.ones((2, 3, 4)))


class TestGradients:
    def test_product_rule(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = Tensor(np.array(3.0), requires_grad=True)
        gx, gy = gradients(x * y, [x, y])
        assert gx == 3.0 and gy == 2.0

    def test_disconnected_parameter_zero(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        z = Tensor(np.array([5.0]), requires_grad=True)
        (gx, gz) = gradients((x * x).sum(), [x, z])
        assert np.array_equal(gz, [0.0])
        assert np.array_equal(gx, [2.0, 4.0])

    def test_non_scalar_output_rejected(self):
        x = t((3,))
        with pytest.raises(ValueError):
            gradients(x * 2.0, [x])


PRIMITIVE_CASES = [
    ("add", lambda a, b: (a + b).sum(), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: (a + b).mean(), [(2, 5, 3), (3,)]),
    ("mul", lambda a, b: (a * b).sum(), [(4,), (4,)]),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3, 2), (3, 2)]),
    ("matmul", lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: (a @ b).mean(), [(2, 3, 4), (4, 2)]),
    ("pow", lambda a: (a * a * a).sum() + a.pow(2.0).mean(), [(5,)]),
    ("exp", lambda a: a.exp().sum(), [(4,)]),
    ("log", lambda a: (a * a + 1.0).log().sum(), [(4,)]),
    ("sqrt", lambda a: (a * a + 0.5).sqrt().sum(), [(4,)]),
    ("abs", lambda a: (a + 0.3).abs().sum(), [(7,)]),
    ("maximum", lambda a, b: a.maximum(b).sum(), [(6,), (6,)]),
    ("reshape", lambda a: a.reshape(6, 2).sum(), [(3, 4)]),
    ("transpose", lambda a: (a.transpose(1, 0, 2) * 2.0).sum(), [(2, 3, 4)]),
    ("slice", lambda a: a[:, 1:3].sum(), [(3, 5)]),
    ("expand", lambda a: a.expand(4, 3).mean(), [(1, 3)]),
    ("sum_axis", lambda a: (a.sum(axis=1) * 2.0).sum(), [(3, 4)]),
    ("mean_expand", lambda a: (a * a.mean(axis=-1, keepdims=True).expand(3, 4)).sum(), [(3, 4)]),
    ("gelu", lambda a: gelu(a).sum(), [(5, 3)]),
    ("softmax", lambda a: (softmax(a) * softmax(a)).sum(), [(4, 5)]),
    ("layer_norm", lambda a, g, b: (layer_norm(a, g, b) ** 2.0).sum(), [(3, 8), (8,), (8,)]),
    ("conv1d", lambda x, w, b: conv1d(x, w, b, stride=2, padding=2).sum(), [(2, 3, 9), (4, 3, 5), (4,)]),
    ("conv1d_wide", lambda x, w: (conv1d(x, w, stride=4) ** 2.0).sum(), [(1, 1, 40), (2, 1, 8)]),
    ("repeat", lambda a: (repeat_interleave(a, 3, axis=1) * 0.5).sum(), [(2, 3)]),
]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,fn,shapes", PRIMITIVE_CASES,
                             ids=[c[0] for c in PRIMITIVE_CASES])
    def test_finite_difference(self, name, fn, shapes):
        local = np.random.default_rng(hash(name) % 2 ** 31)
        inputs = [Tensor(local.standard_normal(s), requires_grad=True) for s in shapes]
        result = gradcheck(fn, inputs, tol=1e-4)
        assert result.passed, f"{name}: max rel error {result.max_rel_error}"

    def test_concat(self):
        a, b = t((2, 3)), t((2, 2))
        result = gradcheck(lambda x, y: (concat([x, y], axis=1) ** 2.0).sum(), [a, b])
        assert result.passed

    def test_embedding(self):
        table = t((6, 4))
        ids = np.array([0, 2, 2, 5])
        result = gradcheck(lambda tb: (embedding(tb, ids) * 0.7).sum(), [table])
        assert result.passed

    def test_attention_block(self):
        # 2 heads, seq 4, dim 8
        local = np.random.default_rng(7)
        x = Tensor(local.standard_normal((1, 4, 8)), requires_grad=True)
        ws = [Tensor(local.standard_normal((8, 8)) / 3, requires_grad=True) for _ in range(4)]
        result = gradcheck(lambda xx, q, k, v, o: (attention(xx, q, k, v, o, 2) ** 2.0).sum(),
                           [x, *ws])
        assert result.passed, result.max_rel_error

    def test_negative_control_detects_bad_rule(self):
        # a deliberately corrupted backward must be flagged
        def bad_square(a):
            out = Tensor(a.data ** 2, requires_grad=True)
            out._parents = (a,)
            out._backward = lambda g: a._accumulate(g * 3.0 * a.data)  # wrong factor
            return out

        x = t((4,))
        result = gradcheck(lambda a: bad_square(a).sum(), [x])
        assert not result.passed


class TestCompositeLayers:
    @pytest.mark.parametrize("layer_fn", [
        lambda r: Linear(6, 3, r),
        lambda r: Mlp(6, 12, r),
    ], ids=["linear", "mlp"])
    def test_layers_gradcheck(self, layer_fn):
        local = np.random.default_rng(3)
        layer = layer_fn(local)
        x = Tensor(local.standard_normal((2, 6)), requires_grad=True)
        params = list(layer.parameters().values())
        result = gradcheck(lambda xx, *ps: (layer(xx) ** 2.0).sum(), [x, *params])
        assert result.passed

    def test_conv_stack_gradcheck(self):
        local = np.random.default_rng(4)
        conv = Conv1d(2, 3, 5, local, stride=2)
        norm = ChannelNorm(3)
        x = Tensor(local.standard_normal((1, 2, 8)), requires_grad=True)
        params = list(conv.parameters().values()) + list(norm.parameters().values())
        result = gradcheck(lambda xx, *ps: (norm(conv(xx)) ** 2.0).sum(), [x, *params])
        assert result.passed

    def test_self_attention_module(self):
        local = np.random.default_rng(5)
        attn = SelfAttention(8, 2, local)
        x = Tensor(local.standard_normal((1, 3, 8)), requires_grad=True)
        params = list(attn.parameters().values())
        result = gradcheck(lambda xx, *ps: (attn(xx) ** 2.0).sum(), [x, *params])
        assert result.passed


class TestModule:
    def test_parameter_discovery_and_state_roundtrip(self):
        local = np.random.default_rng(6)

        class Net(Module):
            def __init__(self):
                self.fc = Linear(4, 4, local)
                self.blocks = [Linear(4, 4, local) for _ in range(2)]

        net = Net()
        params = net.parameters()
        assert set(params) == {"fc.w", "fc.b", "blocks.0.w", "blocks.0.b",
                               "blocks.1.w", "blocks.1.b"}
        state = net.state_dict()
        net2 = Net()
        net2.load_state_dict(state)
        for k in params:
            assert np.array_equal(net2.parameters()[k].data, params[k].data)

    def test_load_rejects_mismatch(self):
        local = np.random.default_rng(7)
        net = Linear(3, 3, local)
        with pytest.raises(ValueError):
            net.load_state_dict({"w": np.zeros((3, 3))})  # missing b


class TestAdam:
    def test_zero_gradient_keeps_params_advances_t(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(p["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        # with constant unit gradient, bias correction gives a step of ~lr
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
        assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_determinism_over_100_steps(self):
        def run():
            local = np.random.default_rng(0)
            params = {"w": Tensor(local.standard_normal(8), requires_grad=True)}
            opt = Adam(params, lr=1e-2)
            for _ in range(100):
                loss = ((params["w"] - 3.0) ** 2.0).sum()
                opt.zero_grad()
                loss.backward()
                opt.step()
            return params["w"].data.copy()

        assert np.array_equal(run(), run())

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="w"):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState())


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        local = np.random.default_rng(8)
        tensors = {
            "enc.w": local.standard_normal((3, 4, 5)).astype(np.float32),
            "scalar": np.array(2.5, dtype=np.float32),
            "dec.b": local.standard_normal(7).astype(np.float32),
        }
        p1 = tmp_path / "a.rvfg"
        p2 = tmp_path / "b.rvfg"
        save_checkpoint(p1, tensors)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        for k, v in tensors.items():
            assert np.array_equal(loaded[k], v)
            assert loaded[k].dtype == np.float32

    def test_header_format(self, tmp_path):
        p = tmp_path / "c.rvfg"
        save_checkpoint(p, {"x": np.zeros(2, dtype=np.float32)})
        blob = p.read_bytes()
        assert blob[:4] == b"RVFG"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.rvfg"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(p)
