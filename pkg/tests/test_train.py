import struct

import numpy as np
import pytest

from aceseg import (
    CorruptCheckpointError,
    DivergenceError,
    FormatError,
    GradientError,
    ScheduleError,
    Tensor,
)
from aceseg import ops
from aceseg.data import SceneDataset, SceneSpec, write_dataset
from aceseg.layers import BatchNorm2d, Conv2d, Module
from aceseg.model import SegModel
from aceseg.tensor import Tape
from aceseg.train import (
    SGD,
    SegBatch,
    TrainConfig,
    adjusted_base_lr,
    load_checkpoint,
    load_model_checkpoint,
    poly_lr,
    run_training,
    save_checkpoint,
    save_model_checkpoint,
    sgd_update,
    train_step,
)


class TestSchedules:
    def test_adjusted_lr_reference_batch(self):
        assert adjusted_base_lr(TrainConfig(base_lr=0.001, batch_size=16)) == 0.001

    def test_adjusted_lr_small_batch(self):
        assert adjusted_base_lr(TrainConfig(base_lr=0.001, batch_size=4)) == \
            pytest.approx(0.00025, abs=1e-12)

    def test_adjusted_lr_large_base(self):
        assert adjusted_base_lr(TrainConfig(base_lr=0.01, batch_size=16)) == 0.01

    def test_poly_boundaries(self):
        assert poly_lr(0.02, 0, 100, 0.9) == 0.02
        assert poly_lr(0.02, 100, 100, 0.9) == 0.0

    def test_poly_midpoint_hand_value(self):
        got = poly_lr(0.01, 50, 100, 0.9)
        assert got == pytest.approx(0.01 * 0.5 ** 0.9, abs=1e-12)
        assert got == pytest.approx(0.005359, abs=1e-6)

    def test_poly_strictly_decreasing(self):
        values = [poly_lr(1.0, i, 50, 0.9) for i in range(51)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_poly_overrun_rejected(self):
        with pytest.raises(ScheduleError):
            poly_lr(0.01, 101, 100, 0.9)


class TestSgd:
    def test_vanilla_descent(self):
        p = np.array([2.0], dtype=np.float64)
        v = np.zeros(1)
        sgd_update(p, np.array([0.5]), v, lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p, [1.95])

    def test_weight_decay_hand_value(self):
        p = np.array([1.0])
        v = np.zeros(1)
        sgd_update(p, np.array([1.0]), v, lr=0.1, momentum=0.0, weight_decay=0.0001)
        np.testing.assert_allclose(p, [0.89999], atol=1e-12)

    def test_momentum_two_steps(self):
        p = np.array([0.0])
        v = np.zeros(1)
        sgd_update(p, np.array([1.0]), v, lr=1.0, momentum=0.9, weight_decay=0.0)
        sgd_update(p, np.array([1.0]), v, lr=1.0, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p, [-2.9], atol=1e-12)

    def test_missing_grad_rejected(self):
        class Tiny(Module):
            def __init__(self):
                super().__init__()
                self.w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32),
                                requires_grad=True)

        model = Tiny()
        opt = SGD(model)
        with pytest.raises(GradientError):
            opt.step(0.1)

    def test_bn_params_exempt_from_decay(self):
        class WithBn(Module):
            def __init__(self):
                super().__init__()
                self.conv = Conv2d(2, 2, 1, np.random.default_rng(0), bias=False)
                self.bn = BatchNorm2d(2)

        model = WithBn()
        opt = SGD(model, momentum=0.0, weight_decay=0.01)
        for p in model.parameters():
            p.grad = np.zeros_like(p.data)
        conv_before = model.conv.weight.data.copy()
        gamma_before = model.bn.gamma.data.copy()
        opt.step(1.0)
        np.testing.assert_array_equal(model.bn.gamma.data, gamma_before)
        assert np.abs(model.conv.weight.data - conv_before * 0.99).max() < 1e-7


class TestTrainStep:
    def _batch_and_model(self, seed=0):
        rng = np.random.default_rng(seed)
        model = SegModel("ace", num_classes=4, backbone_channels=32, seed=seed)
        images = rng.uniform(0, 1, size=(2, 3, 32, 32)).astype(np.float32)
        labels = rng.integers(0, 4, size=(2, 32, 32))
        return SegBatch(Tensor(images), labels), model

    def test_zero_aux_weight_means_total_is_main(self):
        batch, model = self._batch_and_model()
        opt = SGD(model)
        main, aux, total = train_step(batch, model, opt, lr=0.0, aux_weight=0.0)
        assert total == main
        assert aux > 0.0  # raw auxiliary loss is logged unweighted

    def test_weighted_total(self):
        main = ops.softmax_cross_entropy  # direct arithmetic check instead
        a = Tensor(np.full((1, 1, 1, 1), 1.0))
        b = Tensor(np.full((1, 1, 1, 1), 0.5))
        total = ops.add(a, ops.scale(b, 0.2))
        assert total.item() == pytest.approx(1.1, abs=1e-7)

    def test_descent_on_frozen_batch(self):
        batch, model = self._batch_and_model(seed=3)
        opt = SGD(model, momentum=0.9, weight_decay=0.0)

        def loss_now():
            with Tape() as tape:
                out = model(batch.images)
                loss = ops.softmax_cross_entropy(out.main, batch.labels)
            return loss.item()

        before = loss_now()
        _, _, _ = train_step(batch, model, opt, lr=1e-5, aux_weight=0.0)
        after = loss_now()
        assert after <= before

    def test_determinism_across_runs(self):
        a = []
        for _ in range(2):
            batch, model = self._batch_and_model(seed=5)
            opt = SGD(model)
            losses = [train_step(batch, model, opt, lr=0.01, aux_weight=0.2)[2]
                      for _ in range(3)]
            a.append(losses)
        assert a[0] == a[1]


class TestCheckpointFormat:
    def test_hand_encoded_bytes(self, tmp_path):
        path = str(tmp_path / "one.ckpt")
        save_checkpoint(path, {"w": np.ones((1, 1, 1, 1), dtype=np.float32)})
        raw = open(path, "rb").read()
        expected = (b"ACESEG01"
                    + struct.pack("<I", 1)
                    + struct.pack("<I", 1) + b"w"
                    + struct.pack("<I", 4)
                    + struct.pack("<IIII", 1, 1, 1, 1)
                    + struct.pack("<f", 1.0))
        assert raw == expected
        assert raw.endswith(bytes.fromhex("0000803f"))

    def test_roundtrip_bit_exact_with_signed_zero(self, tmp_path):
        path = str(tmp_path / "z.ckpt")
        values = np.array([[-0.0, 0.0], [1.5, -7.25]], dtype=np.float32).reshape(1, 1, 2, 2)
        save_checkpoint(path, {"a": values, "b": np.float32(np.pi) * np.ones((2, 3, 1, 1), dtype=np.float32)})
        loaded = load_checkpoint(path)
        assert loaded["a"].tobytes() == values.tobytes()
        assert np.signbit(loaded["a"].reshape(-1)[0])

    def test_flipped_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        save_checkpoint(path, {"w": np.zeros((1, 1, 1, 1), dtype=np.float32)})
        raw = bytearray(open(path, "rb").read())
        raw[0] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(path, {"w": np.zeros((1, 2, 3, 4), dtype=np.float32)})
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-3])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = str(tmp_path / "g.ckpt")
        save_checkpoint(path, {"w": np.zeros((1, 1, 1, 1), dtype=np.float32)})
        with open(path, "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


class TestModelCheckpoint:
    def test_save_load_reproduces_eval_forward(self, tmp_path):
        model = SegModel("ace", num_classes=4, backbone_channels=32, seed=7)
        path = str(tmp_path / "m.ckpt")
        save_model_checkpoint(path, model)
        restored = load_model_checkpoint(path)
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)).astype(np.float32))
        model.eval()
        restored.eval()
        assert model(x).main.data.tobytes() == restored(x).main.data.tobytes()

    def test_optimizer_state_stored_with_prefix(self, tmp_path):
        model = SegModel("ppm", num_classes=4, backbone_channels=32, seed=1)
        opt = SGD(model)
        path = str(tmp_path / "o.ckpt")
        save_model_checkpoint(path, model, opt)
        tensors = load_checkpoint(path)
        assert any(k.startswith("opt.") for k in tensors)
        restored = load_model_checkpoint(path)  # opt.* entries must not break load
        assert restored.head_kind == "ppm"


class TestRunTraining:
    @pytest.fixture()
    def small_dataset(self, tmp_path):
        root = str(tmp_path / "data")
        write_dataset(root, SceneSpec(canvas=32, classes=4, shapes=3,
                                      min_size=4, max_size=20, seed=3), 12)
        return SceneDataset(root)

    def test_iteration_count_and_lr_trajectory(self, small_dataset):
        cfg = TrainConfig(base_lr=0.01, batch_size=4, epochs=2, crop=32, seed=0)
        model = SegModel("ace", num_classes=4, backbone_channels=32, seed=0)
        records = run_training(model, small_dataset, list(range(10)), cfg)
        # ceil(10/4) = 3 iterations per epoch, twice
        assert [r.iteration for r in records] == list(range(6))
        base = adjusted_base_lr(cfg)
        for r in records:
            assert r.lr == pytest.approx(poly_lr(base, r.iteration, 6, 0.9), abs=1e-15)

    def test_loss_trajectory_reproducible(self, small_dataset):
        cfg = TrainConfig(base_lr=0.02, batch_size=4, epochs=1, crop=32, seed=1)

        def run():
            model = SegModel("ace", num_classes=4, backbone_channels=32, seed=1)
            return [r.total for r in run_training(model, small_dataset,
                                                  list(range(8)), cfg)]

        assert run() == run()

    def test_non_finite_loss_raises_divergence(self, small_dataset):
        cfg = TrainConfig(base_lr=0.01, batch_size=4, epochs=1, crop=32, seed=2)
        model = SegModel("ace", num_classes=4, backbone_channels=32, seed=2)
        model.classifier.conv.weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as exc:
            run_training(model, small_dataset, list(range(8)), cfg)
        assert exc.value.iteration == 0
