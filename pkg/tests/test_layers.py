import numpy as np
import pytest

from ftk import layers as L
from ftk import tensor as T
from ftk.tensor import Tensor

from oracles import finite_diff_grad, max_rel_err


class TestParamTree:
    def test_duplicate_name_rejected(self):
        tree = L.ParamTree()
        tree.register("a", Tensor([1.0]))
        with pytest.raises(ValueError, match="duplicate"):
            tree.register("a", Tensor([2.0]))

    def test_definition_order_preserved(self):
        tree = L.ParamTree()
        for name in ["z", "a", "m"]:
            tree.register(name, Tensor([0.0]))
        assert tree.names() == ["z", "a", "m"]

    def test_trainable_syncs_requires_grad(self):
        tree = L.ParamTree()
        p = tree.register("w", Tensor([1.0], requires_grad=True))
        assert p.tensor.requires_grad
        tree.set_trainable("w", False)
        assert not p.tensor.requires_grad

    def test_set_trainable_prefix_counts(self):
        tree = L.ParamTree()
        for name in ["features.0.weight", "features.0.bias", "head.weight"]:
            tree.register(name, Tensor([0.0]))
        assert tree.set_trainable("features.", False) == 2
        assert [p.name for p in tree.trainable_params()] == ["head.weight"]
        assert tree.set_trainable("", True) == 3
        assert len(tree.trainable_params()) == 3
        assert tree.set_trainable("nonexistent.", False) == 0
        assert len(tree.trainable_params()) == 3

    def test_buffers_invisible_to_set_trainable(self):
        tree = L.ParamTree()
        tree.register("bn.running_mean", Tensor(np.zeros(3)), buffer=True)
        assert tree.set_trainable("", True) == 0
        assert tree.trainable_params() == []
        assert len(tree.entries()) == 1

    def test_snapshot_is_deep(self):
        tree = L.ParamTree()
        tree.register("w", Tensor(np.ones(3), requires_grad=True))
        snap = tree.snapshot()
        tree["w"].tensor.data += 5
        assert np.array_equal(snap["w"], np.ones(3))
        tree.load_state(snap)
        assert np.array_equal(tree["w"].tensor.data, np.ones(3))


class TestDropout:
    def test_eval_identity_bitwise(self, rng):
        x = Tensor(rng.random((4, 8)).astype(np.float32))
        out = T.dropout(x, 0.9, "eval", 1)
        assert out.data.tobytes() == x.data.tobytes()

    def test_p_zero_train_identity(self, rng):
        x = Tensor(rng.random((4, 8)).astype(np.float32))
        out = T.dropout(x, 0.0, "train", 1)
        assert out.data.tobytes() == x.data.tobytes()

    def test_p_one_rejected(self, rng):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 1.0, "train", 1)

    def test_half_rate_mean_concentration(self):
        x = Tensor(np.ones(10000, dtype=np.float32))
        out = T.dropout(x, 0.5, "train", seed=42)
        # mean of inverted dropout over 10k elements: binomial concentration,
        # sd of the mean = 1/sqrt(10000) = 0.01, so [0.94, 1.06] is 6 sigma
        assert 0.94 <= float(out.data.mean()) <= 1.06

    def test_expectation_over_seeds(self, rng):
        x_val = rng.random(50).astype(np.float32)
        x = Tensor(x_val)
        acc = np.zeros(50, dtype=np.float64)
        n_seeds = 1000
        for s in range(n_seeds):
            acc += T.dropout(x, 0.3, "train", seed=s).data
        mean = acc / n_seeds
        # per-element sd of inverted dropout is x*sqrt(p/(1-p)); 3 standard errors
        se = x_val * np.sqrt(0.3 / 0.7) / np.sqrt(n_seeds)
        assert np.all(np.abs(mean - x_val) <= 3 * se + 1e-7)

    def test_grad_masks_match_forward(self, rng):
        x = Tensor(rng.random(100).astype(np.float32), requires_grad=True)
        out = T.dropout(x, 0.5, "train", seed=7)
        T.tsum(out).backward()
        dropped = out.data == 0
        assert np.all(x.grad[dropped] == 0)
        assert np.all(x.grad[~dropped] == 2.0)


class TestBatchNorm:
    def test_normalizes_per_channel(self, rng):
        bn = L.BatchNorm2d(3)
        x = Tensor(rng.normal(2.0, 3.0, (4, 3, 5, 5)).astype(np.float32))
        out = bn.forward(x, L.ForwardCtx("train"))
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-3

    def test_constant_channel_gives_zeros(self):
        bn = L.BatchNorm2d(2)
        x = Tensor(np.full((2, 2, 3, 3), 7.0, dtype=np.float32))
        out = bn.forward(x, L.ForwardCtx("train"))
        assert np.abs(out.data).max() < 1e-4

    def test_running_stats_update_rule(self, rng):
        bn = L.BatchNorm2d(2, momentum=0.1)
        x_data = rng.normal(1.0, 2.0, (3, 2, 4, 4)).astype(np.float32)
        batch_mean = x_data.mean(axis=(0, 2, 3))
        m = 3 * 4 * 4
        batch_var_unbiased = x_data.var(axis=(0, 2, 3)) * m / (m - 1)
        bn.forward(Tensor(x_data), L.ForwardCtx("train"))
        assert np.allclose(bn.running_mean, 0.9 * 0 + 0.1 * batch_mean, atol=1e-6)
        assert np.allclose(bn.running_var, 0.9 * 1 + 0.1 * batch_var_unbiased, atol=1e-5)

    def test_eval_uses_running_stats_and_leaves_them_alone(self, rng):
        bn = L.BatchNorm2d(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 0.25]
        before = (bn.running_mean.copy(), bn.running_var.copy())
        x = rng.random((2, 2, 3, 3)).astype(np.float32)
        out = bn.forward(Tensor(x), L.ForwardCtx("eval"))
        expect = (x - np.array([1.0, -1.0], np.float32).reshape(1, 2, 1, 1)) / np.sqrt(
            np.array([4.0, 0.25], np.float32).reshape(1, 2, 1, 1) + 1e-5)
        assert np.allclose(out.data, expect, atol=1e-6)
        assert np.array_equal(bn.running_mean, before[0])
        assert np.array_equal(bn.running_var, before[1])

    def test_single_element_batch_rejected_in_train(self):
        bn = L.BatchNorm2d(1)
        with pytest.raises(ValueError, match=">= 2"):
            bn.forward(Tensor(np.ones((1, 1, 1, 1))), L.ForwardCtx("train"))

    def test_gradients_match_finite_differences(self, rng):
        x_data = rng.uniform(-1, 1, (2, 3, 4, 4))
        g_data = rng.uniform(0.5, 1.5, 3)
        b_data = rng.uniform(-0.5, 0.5, 3)
        wsum = rng.uniform(-1, 1, (2, 3, 4, 4))

        def run():
            x = Tensor(x_data, requires_grad=True)
            g = Tensor(g_data, requires_grad=True)
            b = Tensor(b_data, requires_grad=True)
            rm = np.zeros(3)
            rv = np.ones(3)
            out = T.batch_norm2d(x, g, b, rm, rv, 0.1, 1e-5, training=True)
            return x, g, b, T.tsum(T.mul(out, Tensor(wsum)))

        x, g, b, loss = run()
        loss.backward()
        for t, data in [(x, x_data), (g, g_data), (b, b_data)]:
            numeric = finite_diff_grad(lambda: run()[3].item(), data, 1e-5)
            assert max_rel_err(t.grad, numeric) < 1e-5


class TestStack:
    def _small_stack(self, rng, p=0.0):
        tree = L.ParamTree()
        gen = np.random.default_rng(0)
        stack = L.Stack(
            [
                ("0", L.Conv2d(1, 2, 3, padding=1, rng=gen)),
                ("1", L.ReLU()),
                ("2", L.MaxPool2d(2, 2)),
                ("3", L.Flatten()),
                ("4", L.Linear(2 * 2 * 2, 4, rng=gen)),
                ("5", L.Dropout(p)),
                ("6", L.LogSoftmax()),
            ],
            tree,
            "net.",
        )
        return stack, tree

    def test_forward_and_param_names(self, rng):
        stack, tree = self._small_stack(rng)
        assert tree.names() == ["net.0.weight", "net.0.bias", "net.4.weight", "net.4.bias"]
        x = Tensor(rng.random((3, 1, 4, 4)).astype(np.float32))
        out = stack.forward(x, "eval")
        assert out.shape == (3, 4)
        assert np.allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-6)

    def test_shape_error_reports_layer(self, rng):
        stack, _ = self._small_stack(rng)
        with pytest.raises(ValueError, match=r"layer 0 \(net\.0\)"):
            stack.forward(Tensor(rng.random((3, 2, 4, 4)).astype(np.float32)), "eval")

    def test_eval_deterministic_and_consumes_no_rng(self, rng):
        stack, _ = self._small_stack(rng, p=0.5)
        x = Tensor(rng.random((2, 1, 4, 4)).astype(np.float32))
        a = stack.forward(x, "eval")  # no dropout_seed given: eval needs none
        b = stack.forward(x, "eval")
        assert a.data.tobytes() == b.data.tobytes()

    def test_train_dropout_requires_seed(self, rng):
        stack, _ = self._small_stack(rng, p=0.5)
        x = Tensor(rng.random((2, 1, 4, 4)).astype(np.float32))
        with pytest.raises(ValueError, match="dropout_seed"):
            stack.forward(x, "train")
        out = stack.forward(x, "train", dropout_seed=3)
        assert out.shape == (2, 4)

    def test_parameter_count_closed_form(self, rng):
        stack, tree = self._small_stack(rng)
        total = sum(p.tensor.data.size for p in tree.params())
        # conv: 2*1*3*3 + 2, linear: 8*4 + 4
        assert total == (2 * 1 * 3 * 3 + 2) + (8 * 4 + 4)


class TestResidualBlock:
    def test_zero_conv_path_passes_shortcut(self, rng):
        gen = np.random.default_rng(1)
        block = L.BasicBlock(4, 4, stride=1, rng=gen)
        block.conv1.weight.data[...] = 0.0
        block.conv2.weight.data[...] = 0.0
        # nonnegative input: the post-add relu is then the identity
        x_data = rng.random((2, 4, 6, 6)).astype(np.float32)
        out = block.forward(Tensor(x_data), L.ForwardCtx("train"))
        assert np.allclose(out.data, x_data, atol=1e-6)

    def test_projection_shortcut_when_shape_changes(self, rng):
        gen = np.random.default_rng(2)
        block = L.BasicBlock(4, 8, stride=2, rng=gen)
        x = Tensor(rng.random((2, 4, 8, 8)).astype(np.float32))
        out = block.forward(x, L.ForwardCtx("train"))
        assert out.shape == (2, 8, 4, 4)
        names = [n for n, _, _ in block.named_params()]
        assert "downsample.0.weight" in names
