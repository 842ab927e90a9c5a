import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downscale.numerics import AdamState, Tensor, backward, no_grad, upsample_bilinear, with_flop_ledger
from downscale.numerics.gradcheck import numerical_grad
from downscale.reslim import (PRESETS, ConfigError, LatWeights, NonFiniteLoss, ReslimConfig, TvPrior,
                              add_resolution_embedding, aggregate_variables, bayesian_loss, count_parameters,
                              count_tokens, embed_variables, from_ini, from_preset, init_model,
                              neighbor_pair_count, predict, reslim_forward, sincos_position, to_ini,
                              token_count, train_step)
from downscale.reslim.loss import data_term, tv_term


def micro_config(**kw):
    base = dict(embed_dim=8, num_layers=1, num_heads=1, in_channels=2, out_channels=1, scale_factor=2,
                decoder_hidden=3, residual_hidden=3, dtype="float64")
    base.update(kw)
    return ReslimConfig(**base)


def randomize(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data[...] += rng.normal(scale=scale, size=p.shape)


class TestTokens:
    def test_anchors(self):
        assert count_tokens(128, 256, 3, 2) == 24_576
        assert count_tokens(5760, 11520, 18, 2) == 298_598_400
        assert count_tokens(2, 2, 1, 2) == 1

    def test_formula_not_reported_figure(self):
        assert count_tokens(720, 1440, 3, 2) == 777_600

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            count_tokens(7, 8, 1, 2)


class TestConfig:
    def test_ini_roundtrip(self):
        cfg = ReslimConfig(in_channels=4, out_channels=2, residual_channel_map=(3, 1), compression=(1, 4, 0.05),
                           norm_mean=(0.5, 1.0, -2.0, 3.25), norm_std=(1.0, 2.0, 0.5, 4.0), tv_weight=0.01)
        assert from_ini(to_ini(cfg)) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_ini("[model]\nembed_dim = 64\nwarp_drive = 9\n")

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ReslimConfig(embed_dim=30, num_heads=4)
        with pytest.raises(ConfigError):
            ReslimConfig(out_channels=2, residual_channel_map=(0,))
        with pytest.raises(ConfigError):
            ReslimConfig(scale_factor=3)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets(self, name):
        cfg = from_preset(name)
        assert (cfg.embed_dim, cfg.num_layers, cfg.num_heads) == PRESETS[name]
        assert count_parameters(cfg) > 0

    def test_parameter_count_matches_instance(self):
        cfg = micro_config(compression=(1, 2, 0.1))
        assert init_model(cfg).parameter_count() == count_parameters(cfg)


class TestEmbedding:
    def test_shape(self):
        model = init_model(micro_config(in_channels=1))
        assert embed_variables(np.zeros((1, 8, 12)), model).shape == (1, 24, 8)

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            embed_variables(np.zeros((3, 8, 8)), init_model(micro_config()))

    def test_variable_permutation(self):
        model = init_model(micro_config(in_channels=3))
        x = np.random.default_rng(0).normal(size=(3, 8, 8))
        a = embed_variables(x, model).data
        perm = [2, 0, 1]
        swapped = model.copy()
        for name in ("embed.w", "embed.b", "var_embed"):
            swapped.params[name].data[...] = model[name].data[perm]
        b = embed_variables(x[perm], swapped).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_shared_position_component(self):
        model = init_model(micro_config(in_channels=2))
        model["embed.w"].data[...] = 0.0
        emb = embed_variables(np.random.default_rng(1).normal(size=(2, 8, 8)), model).data
        offsets = (model["embed.b"].data + model["var_embed"].data)[:, None, :]
        pos = emb - offsets
        np.testing.assert_allclose(pos[0], pos[1], atol=1e-12)
        np.testing.assert_allclose(pos[0], sincos_position(4, 4, 8), atol=1e-12)


class TestAggregation:
    def test_single_variable_is_value_projection(self):
        model = init_model(micro_config(in_channels=1))
        emb = np.random.default_rng(0).normal(size=(1, 5, 8))
        out = aggregate_variables(Tensor(emb), model).data
        np.testing.assert_allclose(out, emb[0] @ model["agg.wv"].data, atol=1e-12)

    def test_identical_variables(self):
        model = init_model(micro_config(in_channels=3))
        one = np.random.default_rng(1).normal(size=(1, 5, 8))
        a = aggregate_variables(Tensor(np.repeat(one, 3, axis=0)), model).data
        b = aggregate_variables(Tensor(one), model).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("c", [2, 18, 23])
    def test_collapses_variable_axis(self, c):
        model = init_model(micro_config(in_channels=c))
        emb = embed_variables(np.zeros((c, 8, 8)), model)
        assert aggregate_variables(emb, model).shape == (16, 8)


class TestResolutionEmbedding:
    def test_zero_table_identity(self):
        model = init_model(micro_config())
        t = Tensor(np.random.default_rng(0).normal(size=(4, 8)))
        np.testing.assert_array_equal(add_resolution_embedding(t, model, 2).data, t.data)

    def test_factors_differ_by_constant(self):
        model = init_model(micro_config())
        randomize(model)
        t = Tensor(np.random.default_rng(1).normal(size=(6, 8)))
        diff = add_resolution_embedding(t, model, 2).data - add_resolution_embedding(t, model, 4).data
        assert np.ptp(diff, axis=0).max() < 1e-12 and np.abs(diff).max() > 0

    def test_unknown_factor(self):
        with pytest.raises(ValueError):
            add_resolution_embedding(Tensor(np.zeros((2, 8))), init_model(micro_config()), 3)

    def test_training_separates_factors(self):
        cfg = micro_config(in_channels=1, scale_factor=4)
        model = init_model(cfg, 0)
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(1, 8, 8)), rng.normal(size=(1, 32, 32))
        opt = AdamState(lr=1e-2)
        for _ in range(3):
            train_step([(x, y)], model, opt)
        t = Tensor(np.zeros((4, 8)))
        a = add_resolution_embedding(t, model, 4).data
        b = add_resolution_embedding(t, model, 2).data
        assert np.abs(a - b).max() > 1e-4


class TestForward:
    def test_initialisation_contract(self):
        cfg = ReslimConfig(embed_dim=16, num_heads=2, in_channels=3, out_channels=2,
                           residual_channel_map=(2, 0), dtype="float64")
        x = np.random.default_rng(0).normal(size=(3, 16, 24))
        with no_grad():
            pred, aux = reslim_forward(x, init_model(cfg, 5))
        assert aux is None
        np.testing.assert_array_equal(pred.data, upsample_bilinear(x[[2, 0]], 4).data)

    def test_initialisation_contract_with_compression(self):
        cfg = ReslimConfig(embed_dim=16, num_heads=2, in_channels=1, out_channels=1, compression=(1, 4, 0.05))
        x = np.random.default_rng(1).normal(size=(1, 16, 16)).astype(np.float32)
        with no_grad():
            pred, aux = reslim_forward(x, init_model(cfg, 0))
        np.testing.assert_array_equal(pred.data, upsample_bilinear(x, 4).data)
        aux.rasterize()

    def test_datasets_row_shape(self):
        cfg = ReslimConfig(embed_dim=8, num_layers=1, num_heads=1, in_channels=23, out_channels=3,
                           scale_factor=4, decoder_hidden=2, residual_hidden=2)
        with no_grad():
            pred, _ = reslim_forward(np.zeros((23, 32, 64), np.float32), init_model(cfg))
        assert pred.shape == (3, 128, 256)

    def test_probe_records_stages(self):
        probe = {}
        with no_grad():
            reslim_forward(np.ones((2, 8, 8)), init_model(micro_config()), probe)
        assert {"embed", "aggregate", "block0", "decoder", "residual", "pred"} <= set(probe)

    @pytest.mark.parametrize("compression", [None, (1, 2, 0.0)])
    def test_composite_gradient(self, compression):
        cfg = micro_config(compression=compression)
        model = init_model(cfg, 1)
        randomize(model, 1)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 8, 8))
        y = rng.normal(size=(1, 16, 16))
        latw = LatWeights.from_latitudes(np.linspace(-60, 60, 16))
        prior = TvPrior(0.1, 0.05)

        def loss_value():
            with no_grad():
                pred, _ = reslim_forward(x, model)
                return float(bayesian_loss(pred, y, latw, prior).data)

        pred, _ = reslim_forward(x, model)
        backward(bayesian_loss(pred, y, latw, prior))
        for name, p in model.params.items():
            if name == "comp.feat.w":
                continue
            flat = p.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(flat.size, 4), replace=False)
            num = numerical_grad(loss_value, p.data, h=1e-6, indices=idx).reshape(-1)[idx]
            ana = p.grad.reshape(-1)[idx]
            scale = np.maximum(np.abs(num), 1e-3 * max(1.0, np.abs(ana).max()))
            assert np.all(np.abs(ana - num) / scale < 1e-4), name


class TestAttentionScaling:
    def test_doubling_height_quadruples_attention(self):
        cfg = ReslimConfig(embed_dim=16, num_layers=2, num_heads=2, in_channels=1, out_channels=1,
                           decoder_hidden=2, residual_hidden=2)
        model = init_model(cfg)
        with no_grad():
            _, a = with_flop_ledger(reslim_forward, np.zeros((1, 16, 32), np.float32), model)
            _, b = with_flop_ledger(reslim_forward, np.zeros((1, 32, 32), np.float32), model)
        assert b.attention == 4 * a.attention

    def test_compression_reduces_tokens_by_ratio(self):
        from downscale.compress import compression_ratio
        cfg = ReslimConfig(embed_dim=16, num_layers=1, num_heads=2, in_channels=1, out_channels=1,
                           compression=(1, 4, 0.05), decoder_hidden=2, residual_hidden=2)
        model = init_model(cfg)
        x = np.zeros((1, 32, 32), np.float32)
        x[:, :, 13:] = 1.0
        with no_grad():
            (_, layout), led = with_flop_ledger(reslim_forward, x, model)
        plain = 16 * 16
        assert token_count(model, x) == len(layout)
        assert plain / len(layout) == pytest.approx(compression_ratio(layout))
        assert led.attention == 2 * len(layout) ** 2 * 16


# ---------------------------------------------------------------- loss

def huber_ref(a, delta):
    a = abs(a)
    return a * a / (2 * delta) if a <= delta else a - delta / 2


def tv_oracle(field, lam, delta):
    k, h, w = field.shape
    total, count = 0.0, 0
    for c in range(k):
        for r in range(h):
            for q in range(w):
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        if (dr, dc) == (0, 0) or not (0 <= r + dr < h and 0 <= q + dc < w):
                            continue
                        b = 1.0 / math.hypot(dr, dc)
                        total += b * huber_ref(field[c, r, q] - field[c, r + dr, q + dc], delta)
                        count += 1
    return lam * total / count


class TestLoss:
    def test_hand_case(self):
        pred = np.zeros((1, 3, 3))
        pred[0, 1, 1] = 1.0
        truth = np.zeros((1, 3, 3))
        terms = {}
        bayesian_loss(pred, truth, LatWeights.uniform(3), TvPrior(1.0, 1e-12), terms)
        assert abs(terms["data"] - 1 / 9) < 1e-12
        assert abs(terms["tv"] - tv_oracle(pred, 1.0, 1e-12)) < 1e-9
        assert abs(terms["tv"] - (8 + 4 * math.sqrt(2)) / 40) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_random_vs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.normal(scale=0.01, size=(2, 4, 5))
        truth = rng.normal(size=(2, 4, 5))
        w = rng.uniform(0.5, 1.5, size=4)
        latw = LatWeights(w)
        ref1 = np.mean(w[:, None] * (pred - truth) ** 2)
        assert abs(float(data_term(pred, truth, latw).data) - ref1) < 1e-12
        assert abs(float(tv_term(pred, TvPrior(0.7, 0.01)).data) - tv_oracle(pred, 0.7, 0.01)) < 1e-12

    def test_pair_count(self):
        assert neighbor_pair_count(1, 3, 3) == 20

    def test_constant_exact_zero(self):
        f = np.full((2, 5, 5), 3.7)
        assert float(bayesian_loss(f, f, LatWeights.uniform(5), TvPrior(5.0, 1e-3)).data) == 0.0

    def test_equator_beats_pole(self):
        lat = LatWeights.from_latitudes(np.linspace(-80, 80, 9))
        assert abs(lat.weights.mean() - 1) < 1e-12
        truth = np.zeros((1, 9, 4))
        polar, equator = truth.copy(), truth.copy()
        polar[0, 0, 1] = 1.0
        equator[0, 4, 1] = 1.0
        assert float(data_term(equator, truth, lat).data) > float(data_term(polar, truth, lat).data)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
    def test_shift_invariance_and_sign(self, seed, shift):
        rng = np.random.default_rng(seed)
        pred, truth = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
        latw, prior = LatWeights(rng.uniform(0.5, 2, 4)), TvPrior(0.3, 1e-3)
        t = {}
        s = {}
        base = float(bayesian_loss(pred, truth, latw, prior, t).data)
        moved = float(bayesian_loss(pred + shift, truth + shift, latw, prior, s).data)
        assert base >= 0
        assert abs(t["data"] - s["data"]) < 1e-8 * max(1, abs(shift)) ** 2
        assert abs(t["tv"] - s["tv"]) < 1e-9 * max(1, abs(shift))
        assert moved >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bayesian_loss(np.zeros((1, 3, 3)), np.zeros((1, 3, 4)), LatWeights.uniform(3), TvPrior())

    def test_loss_gradient(self):
        rng = np.random.default_rng(7)
        pred = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
        truth = rng.normal(size=(2, 4, 5))
        latw, prior = LatWeights(rng.uniform(0.5, 2, 4)), TvPrior(0.5, 0.1)
        backward(bayesian_loss(pred, truth, latw, prior))
        num = numerical_grad(lambda: float(bayesian_loss(pred.data, truth, latw, prior).data), pred.data)
        np.testing.assert_allclose(pred.grad, num, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- training

class TestTrainStep:
    def test_zero_lr_keeps_parameters(self):
        model = init_model(micro_config())
        before = model.state_hash()
        rng = np.random.default_rng(0)
        loss, flops = train_step([(rng.normal(size=(2, 8, 8)), rng.normal(size=(1, 16, 16)))], model,
                                 AdamState(lr=0.0))
        assert model.state_hash() == before
        assert loss > 0 and flops.attention > 0

    def test_constant_field_task(self):
        cfg = ReslimConfig(embed_dim=16, num_layers=1, num_heads=2, in_channels=1, out_channels=1,
                           decoder_hidden=4, residual_hidden=4)
        model = init_model(cfg, 0)
        opt = AdamState(lr=1e-3)
        pairs = [(np.full((1, 16, 16), v), np.full((1, 64, 64), v)) for v in (-1.0, 0.5, 2.0)]
        for step in range(200):
            loss, _ = train_step([pairs[step % 3]], model, opt)
        assert loss < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        batch = [(rng.normal(size=(2, 8, 8)), rng.normal(size=(1, 16, 16))) for _ in range(2)]
        hashes = []
        for _ in range(2):
            model = init_model(micro_config(), 3)
            opt = AdamState()
            for _ in range(3):
                train_step(batch, model, opt)
            hashes.append(model.state_hash())
        assert hashes[0] == hashes[1]

    def test_non_finite_reports_activations(self):
        model = init_model(micro_config())
        model["embed.w"].data[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteLoss) as info:
            train_step([(np.ones((2, 8, 8)), np.ones((1, 16, 16)))], model, AdamState())
        assert "embed" in info.value.activations
        assert "max |activation|" in info.value.diagnostics()

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step([], init_model(micro_config()), AdamState())

    def test_predict_units(self):
        cfg = micro_config(in_channels=1, norm_mean=(10.0,), norm_std=(2.0,))
        x = np.random.default_rng(4).normal(10, 2, size=(1, 8, 8))
        np.testing.assert_allclose(predict(init_model(cfg), x), upsample_bilinear(x, 2).data, atol=1e-12)
