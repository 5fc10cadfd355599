import numpy as np
import pytest

import stormcast.tensor_engine as te
from stormcast.checkpoint import read_checkpoint
from stormcast.data_pipeline import SynthConfig, synth_generate
from stormcast.diffusion import build_schedule
from stormcast.errors import ConfigError, ContractError, DataError, NumericalError
from stormcast.networks import ArchConfig, init_params, predictor_forward
from stormcast.trainer import (
    TrainConfig,
    adam_step,
    combined_loss,
    ema_update,
    init_optimizer,
    pack_arrays,
    train,
    unpack_params,
)

from helpers import spot_gradcheck

TOY = ArchConfig(
    widths=(4, 6, 8, 10),
    unet_widths=(4, 6, 8, 10),
    history_len=2,
    forecast_len=3,
    time_embed_dim=8,
)


def toy_dataset(n=3, seed=5, size=16):
    cfg = SynthConfig(height=size, width=size, n_frames=TOY.history_len + TOY.forecast_len, seed=seed)
    return synth_generate(cfg, n)


def toy_models(seed=0):
    return init_params(TOY, seed)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4
        assert cfg.precision == 32

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"batch_size": 0},
            {"learning_rate": 0.0},
            {"learning_rate": -1e-4},
            {"loss_lambda": -1.0},
            {"ema_decay": 1.0},
            {"ema_decay": -0.1},
            {"max_batches": -1},
            {"precision": 16},
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestAdam:
    def params_of(self, *values):
        return {f"p{i}": te.Tensor(np.array([v]), requires_grad=True) for i, v in enumerate(values)}

    def test_first_step_hand_computed(self):
        params = self.params_of(1.0)
        state = init_optimizer(params)
        adam_step(params, {"p0": np.array([0.5])}, state, lr=0.1)
        # bias correction makes m_hat = g, v_hat = g^2 on step one
        expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
        assert params["p0"].data[0] == pytest.approx(expected, rel=1e-12)
        assert state.step == 1

    def test_first_step_magnitude_is_lr_for_any_grad_scale(self):
        for g in (1e3, 1.0, 1e-3):
            params = self.params_of(0.0)
            adam_step(params, {"p0": np.array([g])}, init_optimizer(params), lr=0.01)
            assert abs(params["p0"].data[0]) == pytest.approx(0.01, rel=1e-4)

    def test_zero_gradient_is_a_no_op(self):
        params = self.params_of(3.5)
        adam_step(params, {"p0": np.zeros(1)}, init_optimizer(params), lr=0.1)
        assert params["p0"].data[0] == 3.5

    def test_three_steps_match_closed_form(self):
        b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
        grads = [0.4, -1.2, 0.7]
        params = self.params_of(0.0)
        state = init_optimizer(params)
        p_ref = 0.0
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            adam_step(params, {"p0": np.array([g])}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert params["p0"].data[0] == pytest.approx(p_ref, rel=1e-12)

    def test_nan_gradient_aborts_naming_parameter(self):
        params = self.params_of(1.0, 2.0)
        grads = {"p0": np.zeros(1), "p1": np.array([np.nan])}
        state = init_optimizer(params)
        with pytest.raises(NumericalError, match="p1"):
            adam_step(params, grads, state, lr=0.1)
        # abort happened before any update was applied
        assert params["p0"].data[0] == 1.0
        assert state.step == 0

    def test_missing_gradient_rejected(self):
        params = self.params_of(1.0)
        with pytest.raises(ContractError, match="p0"):
            adam_step(params, {}, init_optimizer(params), lr=0.1)

    def test_minimizes_a_quadratic(self):
        params = self.params_of(8.0)
        state = init_optimizer(params)
        for _ in range(300):
            g = 2.0 * (params["p0"].data - 3.0)
            adam_step(params, {"p0": g}, state, lr=0.05)
        assert params["p0"].data[0] == pytest.approx(3.0, abs=0.05)


class TestEma:
    def test_decay_zero_copies(self):
        params = {"a": te.Tensor(np.array([2.0, -1.0]), requires_grad=True)}
        ema = {"a": np.zeros(2)}
        ema_update(ema, params, 0.0)
        assert np.array_equal(ema["a"], params["a"].data)

    def test_single_step_from_zero(self):
        params = {"a": te.Tensor(np.array([1.0]), requires_grad=True)}
        ema = {"a": np.zeros(1)}
        ema_update(ema, params, 0.99)
        assert ema["a"][0] == pytest.approx(0.01)

    def test_geometric_convergence_to_constant_params(self):
        params = {"a": te.Tensor(np.array([5.0]), requires_grad=True)}
        ema = {"a": np.array([1.0])}
        for n in range(1, 40):
            ema_update(ema, params, 0.9)
            assert ema["a"][0] == pytest.approx(5.0 - 4.0 * 0.9**n, rel=1e-12)

    def test_stays_in_convex_hull_of_history(self):
        rng = np.random.default_rng(0)
        params = {"a": te.Tensor(np.zeros(4), requires_grad=True)}
        ema = {"a": params["a"].data.copy()}
        lo = params["a"].data.copy()
        hi = params["a"].data.copy()
        for _ in range(50):
            params["a"].data[...] = rng.normal(size=4)
            lo = np.minimum(lo, params["a"].data)
            hi = np.maximum(hi, params["a"].data)
            ema_update(ema, params, 0.95)
            assert np.all(ema["a"] >= lo - 1e-12)
            assert np.all(ema["a"] <= hi + 1e-12)

    def test_bad_decay_rejected(self):
        params = {"a": te.Tensor(np.zeros(1), requires_grad=True)}
        with pytest.raises(ConfigError):
            ema_update({"a": np.zeros(1)}, params, 1.0)


class TestCombinedLoss:
    def test_perfect_prediction_gives_zero_mae(self):
        pred, mot, den = toy_models()
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.5, 0.5, (TOY.history_len, 16, 16))
        y = predictor_forward(x, pred).data
        loss, mae_term, diff_term = combined_loss(
            x, y, pred, mot, den, build_schedule(10), rng, loss_lambda=0.0
        )
        assert mae_term == pytest.approx(0.0, abs=1e-12)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert diff_term == 0.0

    def test_lambda_zero_skips_diffusion_entirely(self):
        pred, mot, den = toy_models()
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        x = np.zeros((TOY.history_len, 16, 16))
        y = np.full((TOY.forecast_len, 16, 16), 0.25)
        loss, mae_term, diff_term = combined_loss(
            x, y, pred, mot, den, build_schedule(10), rng_a, loss_lambda=0.0
        )
        # the generator was never consumed
        assert rng_a.bit_generator.state == rng_b.bit_generator.state
        y_hat = predictor_forward(x, pred).data
        expected = TOY.forecast_len * np.mean(np.abs(y_hat - y))
        assert loss.item() == pytest.approx(expected, rel=1e-6)
        assert diff_term == 0.0

    def test_total_is_mae_plus_lambda_diff(self):
        pred, mot, den = toy_models()
        rng = np.random.default_rng(1)
        x = np.random.default_rng(2).uniform(-0.5, 0.5, (TOY.history_len, 16, 16))
        y = np.random.default_rng(3).uniform(-0.5, 0.5, (TOY.forecast_len, 16, 16))
        loss, mae_term, diff_term = combined_loss(
            x, y, pred, mot, den, build_schedule(10), rng, loss_lambda=2.5
        )
        assert loss.item() == pytest.approx(mae_term + 2.5 * diff_term, rel=1e-5)
        assert diff_term > 0.0

    def grad_table(self, stop):
        pred, mot, den = toy_models()
        x = np.random.default_rng(2).uniform(-0.5, 0.5, (TOY.history_len, 16, 16))
        y = np.random.default_rng(3).uniform(-0.5, 0.5, (TOY.forecast_len, 16, 16))
        with te.Tape() as tape:
            loss, _, _ = combined_loss(
                x, y, pred, mot, den, build_schedule(10),
                np.random.default_rng(7), loss_lambda=1.0, stop_residual_grad=stop,
            )
            table = te.backward(loss, tape)
        return pred, mot, table

    def test_residual_stop_gradient_changes_predictor_grads(self):
        pred_a, _, table_a = self.grad_table(stop=True)
        pred_b, _, table_b = self.grad_table(stop=False)
        name = "pred.head.w"
        ga = table_a.get(pred_a.tensors[name])
        gb = table_b.get(pred_b.tensors[name])
        assert not np.allclose(ga, gb)

    def test_motion_encoder_receives_gradient(self):
        _, mot, table = self.grad_table(stop=True)
        total = sum(np.abs(table.get(p)).sum() for p in mot.tensors.values())
        assert total > 0.0

    def test_gradient_matches_finite_differences(self):
        pred, mot, den = toy_models(seed=4)
        x = np.random.default_rng(5).uniform(-0.5, 0.5, (TOY.history_len, 8, 8))
        y = np.random.default_rng(6).uniform(-0.5, 0.5, (TOY.forecast_len, 8, 8))
        sched = build_schedule(10)

        # stop_residual_grad off: with the stop active the analytic gradient
        # deliberately drops the residual-target path, so it cannot match a
        # numeric derivative of the full evaluation.
        def fn():
            loss, _, _ = combined_loss(
                x, y, pred, mot, den, sched, np.random.default_rng(11),
                loss_lambda=1.0, stop_residual_grad=False,
            )
            return loss

        probe = [
            pred.tensors["pred.head.w"],
            pred.tensors["pred.enc0.gru.wz.w"],
            mot.tensors["mot.enc1.res.c1.w"],
            den.tensors["den.down0.c1.w"],
            den.tensors["den.up0.temb.w"],
        ]
        spot_gradcheck(fn, probe, np.random.default_rng(8), per_tensor=2, eps=1e-5)


class TestTrainLoop:
    def small_cfg(self, **kwargs):
        base = dict(
            batch_size=2,
            learning_rate=2e-3,
            loss_lambda=1.0,
            ema_decay=0.9,
            max_batches=6,
            seed=1,
            precision=32,
        )
        base.update(kwargs)
        return TrainConfig(**base)

    def test_deterministic_given_seed(self):
        data = toy_dataset()
        a = train(data, self.small_cfg(), TOY, sched=build_schedule(10))
        b = train(data, self.small_cfg(), TOY, sched=build_schedule(10))
        assert a.log == b.log
        for name, p in a.predictor.tensors.items():
            assert np.array_equal(p.data, b.predictor.tensors[name].data)
        for name in a.ema:
            assert np.array_equal(a.ema[name], b.ema[name])

    def test_loss_log_structure(self):
        res = train(toy_dataset(), self.small_cfg(), TOY, sched=build_schedule(10))
        assert [row[0] for row in res.log] == list(range(6))
        for _, mae_v, diff_v, total in res.log:
            assert np.isfinite(total)
            assert total == pytest.approx(mae_v + 1.0 * diff_v, rel=1e-4)

    def test_loss_decreases_with_mae_only_objective(self):
        cfg = self.small_cfg(loss_lambda=0.0, max_batches=25, learning_rate=3e-3)
        res = train(toy_dataset(), cfg, TOY, sched=build_schedule(10))
        assert res.final_loss < 0.7 * res.initial_loss

    def test_max_batches_zero_keeps_init(self, tmp_path):
        cfg = self.small_cfg(max_batches=0)
        res = train(toy_dataset(), cfg, TOY, sched=build_schedule(10), out_dir=tmp_path)
        with te.using_dtype(np.float32):
            pred0, _, _ = init_params(TOY, cfg.seed)
        for name, p in res.predictor.tensors.items():
            assert np.array_equal(p.data, pred0.tensors[name].data)
            assert np.array_equal(res.ema[name], p.data)
        arrays, _ = read_checkpoint(tmp_path / "checkpoint_final.sckp")
        for name, p in res.predictor.tensors.items():
            assert np.array_equal(arrays[name], p.data)

    def test_checkpoint_and_log_files(self, tmp_path):
        cfg = self.small_cfg(max_batches=4)
        res = train(
            toy_dataset(), cfg, TOY, sched=build_schedule(10), out_dir=tmp_path, checkpoint_every=2
        )
        assert (tmp_path / "checkpoint_latest.sckp").exists()
        assert (tmp_path / "checkpoint_final.sckp").exists()
        lines = (tmp_path / "loss_log.csv").read_text().strip().splitlines()
        assert lines[0] == "batch,mae_term,diff_term,total"
        assert len(lines) == 5
        arrays, cfg_text = read_checkpoint(tmp_path / "checkpoint_final.sckp")
        assert "learning_rate=0.002" in cfg_text
        assert set(arrays) == set(pack_arrays(res))

    def test_checkpoint_round_trips_through_unpack(self, tmp_path):
        cfg = self.small_cfg(max_batches=3)
        res = train(toy_dataset(), cfg, TOY, sched=build_schedule(10), out_dir=tmp_path)
        arrays, _ = read_checkpoint(tmp_path / "checkpoint_final.sckp")
        pred_raw, _, _ = unpack_params(arrays, TOY, use_ema=False)
        pred_ema, _, _ = unpack_params(arrays, TOY, use_ema=True)
        for name, p in res.predictor.tensors.items():
            assert np.array_equal(pred_raw.tensors[name].data, p.data)
            assert np.array_equal(pred_ema.tensors[name].data, res.ema[name])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_run_aborts_with_numerical_error(self):
        cfg = self.small_cfg(learning_rate=1e12, max_batches=10, precision=32)
        with pytest.raises(NumericalError):
            train(toy_dataset(), cfg, TOY, sched=build_schedule(10))

    def test_short_sequences_rejected(self):
        cfg = SynthConfig(height=16, width=16, n_frames=TOY.history_len + TOY.forecast_len - 1, seed=0)
        data = synth_generate(cfg, 2)
        with pytest.raises(DataError):
            train(data, self.small_cfg(), TOY, sched=build_schedule(10))

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train([], self.small_cfg(), TOY, sched=build_schedule(10))

    def test_precision_64_produces_float64_params(self):
        cfg = self.small_cfg(max_batches=1, precision=64)
        res = train(toy_dataset(), cfg, TOY, sched=build_schedule(10))
        assert res.predictor.tensors["pred.head.w"].data.dtype == np.float64

    def test_ema_tracks_parameters(self):
        cfg = self.small_cfg(max_batches=5, ema_decay=0.5)
        res = train(toy_dataset(), cfg, TOY, sched=build_schedule(10))
        name = "pred.head.w"
        p = res.predictor.tensors[name].data
        assert not np.array_equal(res.ema[name], p)
        assert np.abs(res.ema[name] - p).max() < 1.0
