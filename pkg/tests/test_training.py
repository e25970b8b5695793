"""Losses, optimizers, schedules, training regimes, and checkpoints."""

import numpy as np
import pytest

from shiftprobe.nnet import HeadArch, NetworkParams, init_params
from shiftprobe.training import (
    AdamState,
    Model,
    SgdState,
    TrainConfig,
    TrainData,
    adam_step,
    build_model,
    cyclic_lr,
    grad,
    load_params,
    loss_bce,
    loss_smooth_l1,
    make_dropout_mask,
    multistep_lr,
    save_history,
    save_params,
    sgd_cyclic_step,
    train,
)


class TestLosses:
    def test_bce_golden_values(self):
        assert loss_bce(0.5, 1.0) == pytest.approx(np.log(2.0), abs=1e-12)
        assert loss_bce(0.9, 0.0) == pytest.approx(-np.log(0.1), abs=1e-12)
        assert loss_bce(1.0, 1.0) <= 1e-6  # clamped perfect prediction

    def test_smooth_l1_golden_values(self):
        assert loss_smooth_l1(0.0, 0.0) == 0.0
        assert loss_smooth_l1(0.5, 0.0) == pytest.approx(0.125, abs=1e-12)
        assert loss_smooth_l1(2.0, 0.0) == pytest.approx(1.5, abs=1e-12)

    def test_smooth_l1_bad_beta(self):
        with pytest.raises(ValueError):
            loss_smooth_l1(1.0, 0.0, beta=0.0)


class TestSchedules:
    def test_adam_multistep_halves_at_milestones(self):
        assert multistep_lr(1, 1e-3) == pytest.approx(1e-3, abs=1e-15)
        assert multistep_lr(29, 1e-3) == pytest.approx(1e-3, abs=1e-15)
        assert multistep_lr(30, 1e-3) == pytest.approx(5e-4, abs=1e-12)
        assert multistep_lr(80, 1e-3) == pytest.approx(2.5e-4, abs=1e-12)
        assert multistep_lr(450, 1e-3) == pytest.approx(1e-3 * 0.5**9, abs=1e-15)

    def test_cyclic_lr_golden_points(self):
        assert cyclic_lr(0) == pytest.approx(1e-5, abs=1e-12)
        assert cyclic_lr(2000) == pytest.approx(1e-2, abs=1e-12)
        # second cycle peak halves the amplitude
        assert cyclic_lr(6000) == pytest.approx(1e-5 + 0.5 * (1e-2 - 1e-5), abs=1e-12)
        assert cyclic_lr(4000) == pytest.approx(1e-5, abs=1e-12)

    def test_cyclic_lr_triangular_between_knots(self):
        assert cyclic_lr(1000) == pytest.approx(1e-5 + 0.5 * (1e-2 - 1e-5), abs=1e-12)
        assert cyclic_lr(3000) == pytest.approx(1e-5 + 0.5 * (1e-2 - 1e-5), abs=1e-12)


class TestOptimizers:
    def _params(self, value=1.0):
        return NetworkParams({"w": np.array([value])})

    def test_adam_zero_gradient_zero_decay_is_noop(self):
        params = self._params(0.7)
        state = AdamState()
        out = adam_step(params, {"w": np.zeros(1)}, state, lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(out.tensors["w"], params.tensors["w"])

    def test_adam_descends_scalar_quadratic(self):
        # loss = 0.5 x^2, gradient = x; from x = 1, |x| < 1e-3 within 500 steps
        params = self._params(1.0)
        state = AdamState()
        for _ in range(500):
            g = params.tensors["w"].copy()
            params = adam_step(params, {"w": g}, state, lr=1e-2, weight_decay=0.0)
        assert abs(params.tensors["w"][0]) < 1e-3

    def test_sgd_cyclic_uses_scheduled_lr(self):
        params = self._params(0.0)
        state = SgdState()
        out = sgd_cyclic_step(params, {"w": np.ones(1)}, state, step=0, weight_decay=0.0)
        assert out.tensors["w"][0] == pytest.approx(-1e-5, abs=1e-15)
        out2 = sgd_cyclic_step(out, {"w": np.zeros(1)}, state, step=1, weight_decay=0.0)
        # momentum keeps moving even with zero gradient
        assert out2.tensors["w"][0] < out.tensors["w"][0]

    def test_weight_decay_enters_gradient(self):
        params = self._params(10.0)
        out = adam_step(params, {"w": np.zeros(1)}, AdamState(), lr=1e-3, weight_decay=1e-5)
        assert out.tensors["w"][0] < 10.0


def _toy_feature_task(n=120, d=8, seed=0, task="grade"):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, d))
    w = gen.normal(size=d)
    logits = x @ w
    if task == "grade":
        y = (logits > 0).astype(float)
    else:
        y = 30.0 + 2.0 * logits
    rec_ids = [f"r{i//4}" for i in range(n)]
    return TrainData(x, y, rec_ids)


class TestTrainLoop:
    def test_frozen_regime_keeps_encoder_bit_identical(self):
        td = _toy_feature_task(seed=1)
        vd = _toy_feature_task(seed=2)
        model = build_model("neural_frozen", "grade", seed=3)
        before = {k: v.copy() for k, v in model.params.tensors.items() if k.startswith("enc.")}
        cfg = TrainConfig(task="grade", regime="frozen_encoder", max_epochs=3, seed=4)
        # features stand in for precomputed embeddings
        td128 = TrainData(np.pad(td.inputs, ((0, 0), (0, 120))), td.targets, td.rec_ids)
        vd128 = TrainData(np.pad(vd.inputs, ((0, 0), (0, 120))), vd.targets, vd.rec_ids)
        trained, _ = train(cfg, model, td128, vd128)
        for name, arr in before.items():
            np.testing.assert_array_equal(trained.params.tensors[name], arr)

    def test_head_learns_separable_task(self):
        td = _toy_feature_task(n=240, seed=5)
        vd = _toy_feature_task(n=80, seed=6)
        model = build_model("psde", "grade", seed=7, feature_dim=8)
        cfg = TrainConfig(task="grade", regime="frozen_encoder", max_epochs=120, seed=8)
        trained, history = train(cfg, model, td, vd)
        assert history[-1].val_loss < history[0].val_loss
        preds = trained.predict(vd.inputs)
        acc = np.mean((preds > 0.5) == (vd.targets > 0.5))
        assert acc >= 0.85

    def test_regression_head_learns(self):
        td = _toy_feature_task(n=240, seed=9, task="age")
        vd = _toy_feature_task(n=80, seed=10, task="age")
        model = build_model("psde", "age", seed=11, feature_dim=8)
        cfg = TrainConfig(task="age", regime="frozen_encoder", max_epochs=150, seed=12)
        trained, history = train(cfg, model, td, vd)
        assert history[-1].val_loss < history[0].val_loss * 0.5

    def test_history_is_finite_and_complete(self):
        td = _toy_feature_task(seed=13)
        vd = _toy_feature_task(seed=14)
        model = build_model("psde", "grade", seed=15, feature_dim=8)
        cfg = TrainConfig(task="grade", regime="frozen_encoder", max_epochs=10, seed=16)
        _, history = train(cfg, model, td, vd)
        assert len(history) == 10
        for row in history:
            assert np.isfinite(row.train_loss) and np.isfinite(row.val_loss)

    def test_early_stopping_triggers_on_plateau(self):
        # constant targets with far-off init: head saturates quickly
        td = TrainData(np.zeros((40, 4)), np.zeros(40), [])
        vd = TrainData(np.zeros((16, 4)), np.zeros(16), [])
        model = build_model("psde", "grade", seed=17, feature_dim=4)
        cfg = TrainConfig(task="grade", regime="frozen_encoder", max_epochs=500,
                          patience=5, seed=18)
        _, history = train(cfg, model, td, vd)
        assert len(history) < 500

    def test_deterministic_given_seeds(self):
        td = _toy_feature_task(seed=19)
        vd = _toy_feature_task(seed=20)
        cfg = TrainConfig(task="grade", regime="frozen_encoder", max_epochs=5, seed=21)
        results = []
        for _ in range(2):
            model = build_model("psde", "grade", seed=22, feature_dim=8)
            trained, _ = train(cfg, model, td, vd)
            results.append(trained.params.tensors)
        for name in results[0]:
            np.testing.assert_array_equal(results[0][name], results[1][name])

    def test_empty_split_rejected(self):
        model = build_model("psde", "grade", seed=0, feature_dim=4)
        cfg = TrainConfig(task="grade", regime="frozen_encoder")
        empty = TrainData(np.zeros((0, 4)), np.zeros(0), [])
        full = TrainData(np.zeros((4, 4)), np.zeros(4), [])
        with pytest.raises(ValueError):
            train(cfg, model, empty, full)

    def test_task_mismatch_rejected(self):
        model = build_model("psde", "age", seed=0, feature_dim=4)
        cfg = TrainConfig(task="grade", regime="frozen_encoder")
        data = TrainData(np.zeros((4, 4)), np.zeros(4), [])
        with pytest.raises(ValueError, match="task"):
            train(cfg, model, data, data)

    def test_nonfinite_loss_rejected_with_layer_name(self):
        model = build_model("psde", "age", seed=1, feature_dim=2)
        model.params.tensors["head.out.w"][:] = np.inf
        with pytest.raises(FloatingPointError):
            grad(model, np.ones((2, 2)), np.zeros(2), None, 0.0,
                 set(model.params.names()))


class TestDropoutMask:
    def test_reproducible_from_key(self):
        a = make_dropout_mask({"head": 16}, 4, 0.5, 7, 1, 0)
        b = make_dropout_mask({"head": 16}, 4, 0.5, 7, 1, 0)
        np.testing.assert_array_equal(a.layers["head"], b.layers["head"])
        c = make_dropout_mask({"head": 16}, 4, 0.5, 7, 1, 1)
        assert not np.array_equal(a.layers["head"], c.layers["head"])

    def test_keep_probability(self):
        mask = make_dropout_mask({"head": 1000}, 64, 0.5, 3, 0, 0)
        keep = mask.layers["head"].mean()
        assert 0.47 <= keep <= 0.53


class TestCheckpoints:
    def test_spp_round_trip(self, tmp_path):
        params = init_params(HeadArch(in_dim=5, task="grade", hidden=3).param_specs(), seed=2)
        path = tmp_path / "model.spp1"
        save_params(path, params)
        back = load_params(path)
        assert back.names() == params.names()
        for name in params.tensors:
            np.testing.assert_allclose(
                back.tensors[name], params.tensors[name].astype(np.float32), rtol=1e-7
            )

    def test_spp_magic(self, tmp_path):
        path = tmp_path / "model.spp1"
        save_params(path, NetworkParams({"w": np.zeros((2, 2))}))
        assert path.read_bytes()[:4] == b"SPP1"
        with pytest.raises(ValueError):
            bad = tmp_path / "bad.spp1"
            bad.write_bytes(b"XXXX")
            load_params(bad)

    def test_history_csv(self, tmp_path):
        from shiftprobe.training import HistoryRow

        path = tmp_path / "history.csv"
        save_history(path, [HistoryRow(1, 0.5, 0.6, 1e-3)])
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert lines[1].startswith("1,0.5,0.6,")
