import dataclasses

import numpy as np
import pytest

from cellseg import model, ops
from cellseg.model import ArchConfig, CellGrid, ConfigError, Environment
from cellseg.rng import RngStream, StreamSet
from cellseg.tensor import Tensor

from helpers import analytic_grads, f64, numeric_grad, rel_err


def tiny_cfg(**kw):
    base = dict(cell_size=4, hidden_size=6, norm_kind="none",
                resettable=False, residual=True)
    base.update(kw)
    return ArchConfig(**base)


def zero_params(cfg):
    params = model.init_params(cfg, RngStream(0, 1))
    for _, t in params.manifest():
        t.data[...] = 0.0
    return params


class TestConfig:
    def test_validate_rejects_bad_values(self):
        for kw in (dict(cell_size=0), dict(update_prob=0.0), dict(update_prob=1.5),
                   dict(first_layer="5x5"), dict(norm_kind="group"),
                   dict(resolution_factor=3), dict(num_classes=1)):
            with pytest.raises(ConfigError):
                ArchConfig(**kw).validate()

    def test_env_channels_by_resolution(self):
        assert ArchConfig(resolution_factor=1).env_channels == 3
        assert ArchConfig(resolution_factor=2).env_channels == 8


class TestInitState:
    def test_gaussian_moments(self):
        g = model.init_state(1, 48, 48, 48, RngStream(3, 1))
        assert abs(g.state.data.mean()) < 0.02
        assert abs(g.state.data.std() - 1.0) < 0.02

    def test_same_stream_identical(self):
        a = model.init_state(1, 8, 8, 4, RngStream(5, 1))
        b = model.init_state(1, 8, 8, 4, RngStream(5, 1))
        assert np.array_equal(a.state.data, b.state.data)

    def test_different_streams_differ(self):
        a = model.init_state(1, 8, 8, 4, RngStream(5, 1))
        b = model.init_state(1, 8, 8, 4, RngStream(5, 2))
        assert not np.allclose(a.state.data, b.state.data)

    def test_positive_extents_required(self):
        with pytest.raises(ValueError):
            model.init_state(0, 8, 8, 4, RngStream(0, 1))


class TestParamCount:
    # Core update-rule counts from the published size/accuracy table.
    TABLE = [
        ("full3x3", 32, 48, 21440, 21400),
        ("full3x3", 48, 72, 47136, 47000),
        ("full3x3", 64, 96, 82816, 82000),
        ("depthwise", 32, 48, 8350, 8400),
        ("depthwise", 48, 72, 18270, 18300),
        ("depthwise", 64, 96, 32030, 32300),
    ]

    @pytest.mark.parametrize("first,d,hid,exact,published", TABLE)
    def test_core_counts_match_published_within_2pct(self, first, d, hid, exact, published):
        cfg = ArchConfig(cell_size=d, hidden_size=hid, first_layer=first,
                         norm_kind="none", resettable=False)
        br = model.param_breakdown(cfg)
        assert br["update"] == exact
        assert abs(br["update"] - published) / published < 0.02
        assert abs(br["total"] - published) / published < 0.02

    @pytest.mark.parametrize("kw", [
        {}, dict(norm_kind="instance"), dict(resettable=True),
        dict(first_layer="depthwise"), dict(resolution_factor=2),
        dict(norm_kind="channel", resettable=True, first_layer="depthwise"),
        dict(resolution_factor=2, resettable=True, norm_kind="batch_live"),
    ])
    def test_closed_form_matches_manifest_enumeration(self, kw):
        cfg = ArchConfig(cell_size=5, hidden_size=7, **kw)
        params = model.init_params(cfg, RngStream(0, 1))
        assert model.param_count(cfg) == params.count()

    def test_gate_and_norm_sizes(self):
        cfg = ArchConfig(cell_size=8, hidden_size=10, norm_kind="instance", resettable=True)
        br = model.param_breakdown(cfg)
        assert br["gate"] == 11
        assert br["norm"] == 60


class TestStep:
    def test_zero_network_residual_is_identity(self):
        cfg = tiny_cfg(update_prob=1.0)
        params = zero_params(cfg)
        s = StreamSet(1)
        grid = model.init_state(2, 6, 6, cfg.cell_size, s.init)
        env = Environment(Tensor(np.zeros((2, 6, 6, 3), dtype=np.float32)))
        out, diag = model.step(grid, env, params, cfg, s.mask, s.noise)
        assert np.array_equal(out.state.data, grid.state.data)
        assert diag.mean_gate is None

    def test_zero_network_resettable_is_half_noise_mix(self):
        cfg = tiny_cfg(resettable=True, update_prob=1.0)
        params = zero_params(cfg)
        s = StreamSet(2)
        grid = model.init_state(1, 5, 5, cfg.cell_size, s.init)
        env = Environment(Tensor(np.zeros((1, 5, 5, 3), dtype=np.float32)))
        out, diag = model.step(grid, env, params, cfg, s.mask, s.noise)
        z = StreamSet(2).noise.normal((1, 5, 5, cfg.cell_size))
        want = 0.5 * z + 0.5 * grid.state.data
        assert np.allclose(out.state.data, want, atol=1e-6)
        assert np.allclose(diag.mean_gate, 0.5)

    def test_update_probability_half_changes_half_the_cells(self):
        cfg = tiny_cfg(resettable=True, update_prob=0.5)
        params = zero_params(cfg)
        s = StreamSet(3)
        grid = model.init_state(1, 48, 48, cfg.cell_size, s.init)
        env = Environment(Tensor(np.zeros((1, 48, 48, 3), dtype=np.float32)))
        out, _ = model.step(grid, env, params, cfg, s.mask, s.noise)
        changed = np.any(out.state.data != grid.state.data, axis=-1)
        assert abs(changed.mean() - 0.5) < 0.02

    def test_masked_cells_bitwise_unchanged(self):
        cfg = tiny_cfg(norm_kind="instance", resettable=True, update_prob=0.3)
        s = StreamSet(4)
        params = model.init_params(cfg, s.init)
        for _, t in params.manifest():
            t.data += 0.1 * RngStream(9, 1).normal(t.shape)
        grid = model.init_state(1, 16, 16, cfg.cell_size, s.init)
        env = Environment(Tensor(s.init.normal((1, 16, 16, 3)) * 0.3))
        mask = StreamSet(4).mask.bernoulli(0.3, (1, 16, 16, 1))
        out, _ = model.step(grid, env, params, cfg, s.mask, s.noise)
        frozen = mask[..., 0] == 0.0
        assert np.array_equal(out.state.data[frozen], grid.state.data[frozen])
        assert np.any(out.state.data[~frozen] != grid.state.data[~frozen])

    def test_gate_strictly_inside_unit_interval(self):
        cfg = tiny_cfg(resettable=True)
        s = StreamSet(5)
        params = model.init_params(cfg, s.init)
        params["gate/kernel"].data += 1.0
        grid = model.init_state(1, 8, 8, cfg.cell_size, s.init)
        env = Environment(Tensor(s.init.normal((1, 8, 8, 3))))
        _, diag = model.step(grid, env, params, cfg, s.mask, s.noise)
        assert diag.mean_gate is not None
        assert 0.0 < diag.mean_gate.min() and diag.mean_gate.max() < 1.0

    def test_translation_equivariance_in_interior(self):
        # deterministic variant (p=1, no gate, no norm): shifting state and
        # environment together shifts the result away from the borders
        cfg = tiny_cfg(update_prob=1.0)
        s = StreamSet(6)
        params = model.init_params(cfg, s.init)
        params["layer4/kernel"].data += 0.1 * RngStream(11, 1).normal(
            params["layer4/kernel"].shape)
        b, h, w = 1, 12, 12
        grid = model.init_state(b, h, w, cfg.cell_size, s.init)
        env_arr = s.init.normal((b, h, w, 3))
        dy, dx = 2, 3

        def shift(a):
            out = np.zeros_like(a)
            out[:, dy:, dx:] = a[:, :h - dy, :w - dx]
            return out

        out1, _ = model.step(grid, Environment(Tensor(env_arr)), params, cfg,
                             s.mask, s.noise)
        out2, _ = model.step(CellGrid(Tensor(shift(grid.state.data))),
                             Environment(Tensor(shift(env_arr))), params, cfg,
                             StreamSet(6).mask, StreamSet(6).noise)
        shifted = shift(out1.state.data)
        margin = 4
        assert np.allclose(out2.state.data[:, margin:-margin, margin:-margin],
                           shifted[:, margin:-margin, margin:-margin], atol=1e-5)

    def test_environment_shape_mismatch(self):
        cfg = tiny_cfg()
        params = zero_params(cfg)
        s = StreamSet(0)
        grid = model.init_state(1, 6, 6, cfg.cell_size, s.init)
        env = Environment(Tensor(np.zeros((1, 8, 8, 3), dtype=np.float32)))
        with pytest.raises(ValueError):
            model.step(grid, env, params, cfg, s.mask, s.noise)


class TestPrediction:
    def test_bias_only_head(self):
        cfg = tiny_cfg()
        params = zero_params(cfg)
        params["head/bias"].data[:] = [1.0, 0.0, -1.0]
        grid = model.init_state(1, 4, 4, cfg.cell_size, RngStream(1, 1))
        logits = model.predict_logits(grid, params, cfg)
        assert np.allclose(logits.data, np.array([1.0, 0.0, -1.0]))

    def test_resolution_factor_2_upsamples(self):
        cfg = tiny_cfg(resolution_factor=2)
        params = model.init_params(cfg, RngStream(2, 1))
        grid = model.init_state(1, 6, 6, cfg.cell_size, RngStream(1, 1))
        logits = model.predict_logits(grid, params, cfg)
        assert logits.shape == (1, 12, 12, 3)

    def test_encode_env_shape(self):
        cfg = tiny_cfg(resolution_factor=2)
        params = model.init_params(cfg, RngStream(2, 1))
        img = Tensor(np.zeros((1, 96, 96, 3), dtype=np.float32))
        assert model.encode_env(img, params).shape == (1, 48, 48, 8)

    def test_encode_env_zero_kernel_gives_bias(self):
        cfg = tiny_cfg(resolution_factor=2)
        params = zero_params(cfg)
        params["encoder/bias"].data[:] = 0.25
        img = Tensor(np.ones((1, 8, 8, 3), dtype=np.float32))
        out = model.encode_env(img, params)
        assert np.allclose(out.data, 0.25)

    def test_encode_env_rejects_odd_extent(self):
        cfg = tiny_cfg(resolution_factor=2)
        params = model.init_params(cfg, RngStream(2, 1))
        with pytest.raises(ValueError):
            model.encode_env(Tensor(np.zeros((1, 7, 8, 3), dtype=np.float32)), params)

    def test_head_and_decoder_gradients(self):
        g = np.random.default_rng(30)
        cfg = tiny_cfg(resolution_factor=2, cell_size=3)
        params = model.init_params(cfg, RngStream(3, 1))
        for _, t in params.manifest():
            t.data = t.data.astype(np.float64) + 0.02 * g.normal(size=t.shape)
        state = f64(g.normal(size=(1, 3, 3, 3)))
        u = g.normal(size=(1, 6, 6, 3))

        def build():
            logits = model.predict_logits(CellGrid(state), params, cfg)
            return ops.tsum(ops.mul(logits, Tensor(u, dtype=np.float64)))

        for t in (params["decoder/kernel"], params["decoder/bias"], state):
            (ga,) = analytic_grads(build(), [t])
            want = numeric_grad(lambda: build().item(), t)
            assert rel_err(ga, want) < 1e-4


class TestStateRgb:
    def test_constant_state_is_mid_gray(self):
        grid = CellGrid(Tensor(np.full((1, 4, 4, 4), 2.0, dtype=np.float32)))
        assert np.allclose(model.state_rgb(grid), 0.5)

    def test_output_in_unit_range_and_deterministic(self):
        grid = CellGrid(Tensor(np.random.default_rng(0).normal(
            size=(2, 6, 6, 5)).astype(np.float32)))
        a = model.state_rgb(grid)
        b = model.state_rgb(grid)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert np.array_equal(a, b)

    def test_needs_three_channels(self):
        grid = CellGrid(Tensor(np.zeros((1, 4, 4, 2), dtype=np.float32)))
        with pytest.raises(ValueError):
            model.state_rgb(grid)
