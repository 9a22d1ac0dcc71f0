import math

import numpy as np
import pytest

from ftk import tensor as T
from ftk.layers import ParamTree
from ftk.optim import Adam, ClipConfig, EarlyStopper, PlateauScheduler, clip_global_norm
from ftk.tensor import Tensor

from oracles import plateau_oracle


def make_tree(values):
    tree = ParamTree()
    for i, v in enumerate(values):
        tree.register(f"p{i}", Tensor(np.asarray(v, dtype=np.float32), requires_grad=True))
    return tree


class TestClip:
    def test_three_four_five(self):
        g = [np.array([3.0, 4.0], dtype=np.float32)]
        factor = clip_global_norm(g, ClipConfig(0.1))
        assert abs(factor - 0.02) < 1e-12
        assert np.allclose(g[0], [0.06, 0.08])

    def test_below_threshold_untouched(self):
        g = [np.array([0.03, 0.04], dtype=np.float32)]
        before = g[0].tobytes()
        assert clip_global_norm(g, ClipConfig(0.1)) == 1.0
        assert g[0].tobytes() == before

    def test_collective_norm_over_tensors(self):
        single = [np.array([3.0, 4.0], dtype=np.float32)]
        split = [np.array([3.0], dtype=np.float32), np.array([4.0], dtype=np.float32)]
        f1 = clip_global_norm(single, ClipConfig(0.1))
        f2 = clip_global_norm(split, ClipConfig(0.1))
        assert f1 == f2
        assert np.concatenate(split).tobytes() == single[0].tobytes()

    def test_nonfinite_rejected(self):
        with pytest.raises(FloatingPointError):
            clip_global_norm([np.array([np.nan], dtype=np.float32)], ClipConfig(0.1))

    def test_direction_preserved_and_idempotent(self, rng):
        for _ in range(200):
            grads = [rng.standard_normal(rng.integers(1, 20)).astype(np.float32) for _ in range(3)]
            orig = np.concatenate([g.copy() for g in grads]).astype(np.float64)
            clip_global_norm(grads, ClipConfig(0.1))
            flat = np.concatenate(grads).astype(np.float64)
            norm = np.linalg.norm(flat)
            assert norm <= 0.1 * (1 + 1e-6)
            if np.linalg.norm(orig) > 0.1:
                cos = flat @ orig / (np.linalg.norm(flat) * np.linalg.norm(orig))
                assert abs(cos - 1.0) < 1e-6
            once = [g.copy() for g in grads]
            clip_global_norm(grads, ClipConfig(0.1))
            for a, b in zip(grads, once):
                assert a.tobytes() == b.tobytes()


class TestAdam:
    def test_first_step_closed_form(self):
        tree = make_tree([[1.0]])
        tree["p0"].tensor.grad = np.array([2.0], dtype=np.float32)
        opt = Adam(tree, lr=1e-4)
        opt.step()
        expect = 1.0 - 1e-4 * (2.0 / (2.0 + 1e-8))
        # param is f32; one ulp at 1.0 is ~1.2e-7
        assert abs(float(tree["p0"].tensor.data[0]) - expect) < 2e-7

    def test_zero_grad_no_move(self):
        tree = make_tree([[1.5, -2.0]])
        before = tree["p0"].tensor.data.tobytes()
        tree["p0"].tensor.grad = np.zeros(2, dtype=np.float32)
        Adam(tree, lr=1e-2).step()
        assert tree["p0"].tensor.data.tobytes() == before

    def test_constant_gradient_monotone_decrease(self):
        # direct recurrence as oracle
        tree = make_tree([[1.0]])
        opt = Adam(tree, lr=1e-2)
        m = v = 0.0
        p_ref = 1.0
        prev = 1.0
        for t in range(1, 8):
            tree["p0"].tensor.grad = np.array([0.5], dtype=np.float32)
            opt.step()
            m = 0.9 * m + 0.1 * 0.5
            v = 0.999 * v + 0.001 * 0.25
            p_ref -= 1e-2 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            cur = float(tree["p0"].tensor.data[0])
            assert cur < prev
            assert abs(cur - p_ref) < 1e-6
            prev = cur

    def test_missing_gradient_rejected(self):
        tree = make_tree([[1.0]])
        with pytest.raises(ValueError, match="no gradient"):
            Adam(tree).step()

    def test_frozen_param_untouched_but_t_advances(self):
        tree = make_tree([[1.0], [2.0]])
        tree.set_trainable("p1", False)
        frozen_before = tree["p1"].tensor.data.tobytes()
        tree["p0"].tensor.grad = np.array([1.0], dtype=np.float32)
        opt = Adam(tree, lr=0.0)
        p0_before = tree["p0"].tensor.data.tobytes()
        opt.step()
        assert opt.t == 1
        assert tree["p0"].tensor.data.tobytes() == p0_before  # lr 0 moves nothing
        assert tree["p1"].tensor.data.tobytes() == frozen_before


class TestPlateauScheduler:
    def test_worked_sequence(self):
        sched = PlateauScheduler(lr=1e-4, factor=0.1, patience=2, mode="min")
        lrs = [sched.step(m) for m in [1.0, 0.9, 0.95, 0.96, 0.97]]
        assert lrs == [1e-4, 1e-4, 1e-4, 1e-4, pytest.approx(1e-5)]

    def test_strictly_decreasing_never_reduces(self):
        sched = PlateauScheduler(lr=1e-4, patience=2)
        for i in range(50):
            assert sched.step(1.0 / (i + 1)) == 1e-4

    def test_min_lr_floor(self):
        sched = PlateauScheduler(lr=1e-6, factor=0.1, patience=0, min_lr=1e-7)
        lr = 1e-6
        for _ in range(10):
            lr = sched.step(5.0)
        assert lr == 1e-7

    def test_nonfinite_metric_rejected(self):
        with pytest.raises(ValueError):
            PlateauScheduler(lr=1e-4).step(float("nan"))

    def test_matches_simulation_oracle(self, rng):
        for _ in range(500):
            n = int(rng.integers(1, 40))
            metrics = rng.uniform(0, 2, n).round(2).tolist()
            patience = int(rng.integers(0, 4))
            mode = "min" if rng.random() < 0.5 else "max"
            sched = PlateauScheduler(lr=1e-4, factor=0.1, patience=patience, mode=mode)
            got = [sched.step(m) for m in metrics]
            want = plateau_oracle(metrics, 0.1, patience, mode, 1e-4, 1e-7)
            assert got == want


class TestEarlyStopper:
    def test_worked_sequence_stops_at_eighth(self):
        tree = make_tree([[0.0]])
        stopper = EarlyStopper(patience=5, mode="max")
        metrics = [0.90, 0.92, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91]
        decisions = []
        for i, m in enumerate(metrics):
            tree["p0"].tensor.data[0] = i  # distinct weights each epoch
            decisions.append(stopper.update(m, tree))
        assert decisions == ["continue"] * 7 + ["stop"]
        assert stopper.best_epoch == 2
        assert stopper.best_weights["p0"][0] == 1.0

    def test_strictly_improving_never_stops(self):
        tree = make_tree([[0.0]])
        stopper = EarlyStopper(patience=0, mode="max")
        for i in range(100):
            assert stopper.update(float(i), tree) == "continue"

    def test_patience_zero_boundary(self):
        tree = make_tree([[0.0]])
        stopper = EarlyStopper(patience=0, mode="max")
        assert stopper.update(0.9, tree) == "continue"
        assert stopper.update(0.8, tree) == "stop"

    def test_update_after_stopped_rejected(self):
        tree = make_tree([[0.0]])
        stopper = EarlyStopper(patience=0, mode="max")
        stopper.update(0.9, tree)
        stopper.update(0.8, tree)
        with pytest.raises(RuntimeError):
            stopper.update(0.7, tree)

    def test_restore_bitwise_and_snapshot_isolation(self):
        tree = make_tree([[1.0, 2.0]])
        stopper = EarlyStopper(patience=5, mode="max")
        stopper.update(0.9, tree)
        best = tree["p0"].tensor.data.tobytes()
        tree["p0"].tensor.data += 10.0  # later training mutates the model
        assert stopper.best_weights["p0"].tobytes() == best  # snapshot immune
        stopper.restore_best(tree)
        assert tree["p0"].tensor.data.tobytes() == best

    def test_restore_without_snapshot_rejected(self):
        with pytest.raises(RuntimeError):
            EarlyStopper().restore_best(make_tree([[1.0]]))

    def test_restore_then_step_diverges_from_snapshot(self):
        tree = make_tree([[1.0]])
        stopper = EarlyStopper(patience=5, mode="max")
        stopper.update(0.9, tree)
        stopper.restore_best(tree)
        tree["p0"].tensor.grad = np.array([1.0], dtype=np.float32)
        Adam(tree, lr=0.1).step()
        assert tree["p0"].tensor.data.tobytes() != stopper.best_weights["p0"].tobytes()


class TestFreezingWithRealLoss:
    def test_frozen_params_receive_no_gradient(self, rng):
        tree = ParamTree()
        w1 = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        w2 = Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True)
        tree.register("features.w", w1)
        tree.register("head.w", w2)
        tree.set_trainable("features.", False)

        x = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
        loss = T.nll_loss(T.log_softmax(T.matmul(T.matmul(x, w1), w2)), [0, 1, 0, 1])
        loss.backward()
        assert w1.grad is None
        assert w2.grad is not None
