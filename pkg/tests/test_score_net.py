import io

import numpy as np
import pytest

from scorevc import tensor as T
from scorevc.errors import ParseError, ShapeError, ValidationError
from scorevc.score_net import (
    ScoreNetConfig,
    _layer_shapes,
    conditional_batch_norm,
    crop_time,
    init_params,
    load_checkpoint,
    one_hot_condition,
    pad_time,
    save_checkpoint,
    score_array,
    score_forward,
)
from scorevc.tensor import Tensor


@pytest.fixture
def small_cfg():
    return ScoreNetConfig(feature_dim=8, noise_levels=3, speakers=2, base_channels=4, depth=2, max_channels=16)


@pytest.fixture
def params(small_cfg):
    p = init_params(small_cfg, np.random.default_rng(0))
    # untrained affine tables are all ones/zeros; randomize so conditioning is visible
    r = np.random.default_rng(1)
    for name, t in p.tensors.items():
        if name.endswith(("gamma", "beta")):
            t.data = t.data + 0.5 * r.standard_normal(t.shape)
    return p


class TestOneHot:
    def test_planes(self):
        out = one_hot_condition(np.zeros((1, 0, 2, 3)), 1, 2, 2, 2)
        assert out.shape == (1, 4, 2, 3)
        np.testing.assert_array_equal(out.data[0, :, 0, 0], [1, 0, 0, 1])
        assert np.all(out.data == out.data[:, :, :1, :1])

    def test_channel_law_and_pixel_sum(self, rng):
        for c, L, K in [(1, 11, 4), (3, 2, 5), (0, 1, 1)]:
            x = rng.standard_normal((2, c, 4, 5))
            out = one_hot_condition(x, L, 1, L, K)
            assert out.shape[1] == c + L + K
            np.testing.assert_array_equal(out.data[:, :c], x)
            np.testing.assert_array_equal(out.data[:, c:].sum(axis=1), 2.0)

    @pytest.mark.parametrize("l,k", [(0, 1), (3, 1), (1, 0), (1, 3)])
    def test_out_of_range(self, l, k):
        with pytest.raises(ValidationError):
            one_hot_condition(np.zeros((1, 1, 2, 2)), l, k, 2, 2)


class TestConditionalBatchNorm:
    def test_identity_affine_standardizes(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 6)) * 2 + 3)
        y = conditional_batch_norm(x, 1, 1, Tensor(np.ones((2, 2, 3))), Tensor(np.zeros((2, 2, 3)))).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        var = y.var(axis=(0, 2, 3))
        np.testing.assert_allclose(var, x.data.var(axis=(0, 2, 3)) / (x.data.var(axis=(0, 2, 3)) + T.BN_EPS),
                                   rtol=1e-12)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.standard_normal((2, 2, 3))
        y = conditional_batch_norm(Tensor(rng.standard_normal((2, 3, 4, 4))), 2, 1, Tensor(np.zeros((2, 2, 3))),
                                   Tensor(beta)).data
        np.testing.assert_array_equal(y, np.broadcast_to(beta[1, 0][None, :, None, None], y.shape))

    def test_speaker_rows_matter_only_when_different(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        g = rng.standard_normal((2, 2, 3))
        b = rng.standard_normal((2, 2, 3))
        y1 = conditional_batch_norm(x, 1, 1, Tensor(g), Tensor(b)).data
        y2 = conditional_batch_norm(x, 1, 2, Tensor(g), Tensor(b)).data
        assert not np.allclose(y1, y2)
        g[0, 1], b[0, 1] = g[0, 0], b[0, 0]
        y2 = conditional_batch_norm(x, 1, 2, Tensor(g), Tensor(b)).data
        np.testing.assert_array_equal(y1, y2)

    def test_missing_row(self, rng):
        with pytest.raises(ValidationError):
            conditional_batch_norm(Tensor(np.ones((1, 3, 2, 2))), 3, 1, Tensor(np.ones((2, 2, 3))),
                                   Tensor(np.zeros((2, 2, 3))))


class TestPadTime:
    def test_next_multiple(self):
        x, m = pad_time(np.zeros((28, 120)), 4)
        assert x.shape == (28, 128) and m == 120

    def test_already_multiple(self):
        a = np.arange(32.0).reshape(2, 16)
        x, m = pad_time(a, 4)
        assert x.shape == a.shape and m == 16
        np.testing.assert_array_equal(x, a)

    def test_round_trip_and_edge_values(self, rng):
        a = rng.standard_normal((3, 37))
        x, m = pad_time(a, 3)
        assert x.shape[1] == 40
        np.testing.assert_array_equal(crop_time(x, m), a)
        np.testing.assert_array_equal(x[:, 37:], np.repeat(a[:, -1:], 3, axis=1))


class TestScoreForward:
    def test_shape_preserved(self, params, rng):
        for b, w in [(1, 4), (2, 8), (3, 20)]:
            x = rng.standard_normal((b, 1, 8, w))
            assert score_forward(params, x, 1, 2).shape == x.shape

    def test_deterministic(self, params, rng):
        x = rng.standard_normal((2, 1, 8, 16))
        a = score_forward(params, x, 2, 1).data
        b = score_forward(params, x, 2, 1).data
        assert np.array_equal(a, b)

    def test_levels_give_distinct_outputs(self, params, rng):
        x = rng.standard_normal((1, 1, 8, 16))
        outs = [score_forward(params, x, l, 1).data for l in range(1, 4)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.allclose(outs[i], outs[j])

    def test_unpadded_length(self, params):
        with pytest.raises(ShapeError, match="multiple of 4"):
            score_forward(params, np.zeros((1, 1, 8, 10)), 1, 1)

    def test_wrong_feature_dim(self, params):
        with pytest.raises(ShapeError):
            score_forward(params, np.zeros((1, 1, 7, 8)), 1, 1)

    def test_per_item_conditioning(self, params, rng):
        x = rng.standard_normal((2, 1, 8, 8))
        out = score_forward(params, x, [1, 3], [2, 1])
        assert out.shape == x.shape
        with pytest.raises(ValidationError):
            score_forward(params, x, [1, 2, 3], 1)

    @pytest.mark.parametrize("drop", [0, 1])
    def test_skip_connections_are_wired(self, params, rng, drop):
        x = rng.standard_normal((2, 1, 8, 16))
        full = score_forward(params, x, 1, 1).data
        cut = score_forward(params, x, 1, 1, drop_skips=(drop,)).data
        assert not np.allclose(full, cut)

    def test_every_conv_input_carries_conditioning(self, small_cfg):
        c = small_cfg.n_cond
        widths = small_cfg.widths()
        shapes = dict(_layer_shapes(small_cfg))
        assert shapes["enc0.weight"][1] == 1 + c
        assert shapes["enc1.weight"][1] == widths[0] + c
        assert shapes["mid.weight"][1] == widths[1] + c
        assert shapes["dec1.weight"][0] == widths[1] + c
        assert shapes["dec0.weight"][0] == widths[0] + widths[0] + c
        assert shapes["out.weight"][1] == small_cfg.base_channels + 1 + c
        for name, shape in shapes.items():
            if name.endswith("gamma"):
                assert shape[:2] == (small_cfg.noise_levels, small_cfg.speakers)

    def test_gradients_reach_every_parameter(self, params, rng):
        x = rng.standard_normal((4, 1, 8, 8))
        loss = T.square(score_forward(params, x, [1, 2, 3, 1], [1, 2, 1, 2])).mean()
        T.backward(loss)
        for name, t in params.tensors.items():
            assert t.grad is not None and np.any(t.grad != 0), name

    def test_score_array_handles_any_length(self, params, rng):
        x = rng.standard_normal((8, 13))
        out = score_array(params, x, 1, 1)
        assert out.shape == x.shape
        xp, _ = pad_time(x[None, None], params.config.depth)
        np.testing.assert_array_equal(out, score_forward(params, xp, 1, 1).data[0, 0, :, :13])


class TestInit:
    def test_fan_in_scaling(self):
        cfg = ScoreNetConfig(feature_dim=4, noise_levels=2, speakers=2, base_channels=32, depth=1)
        p = init_params(cfg, np.random.default_rng(0))
        w = p["mid.weight"].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert abs(w.std() * np.sqrt(fan_in) - 1.0) < 0.05
        assert np.all(p["enc0.gamma"].data == 1) and np.all(p["enc0.beta"].data == 0)

    @pytest.mark.parametrize("field", ["feature_dim", "noise_levels", "speakers", "depth"])
    def test_config_validation(self, field):
        with pytest.raises(ValidationError):
            ScoreNetConfig(**{field: 0})


class TestCheckpoint:
    def test_round_trip(self, params):
        buf = io.BytesIO()
        save_checkpoint(buf, params, {"speakers": ["a", "b"]})
        buf.seek(0)
        loaded, extra = load_checkpoint(buf)
        assert extra == {"speakers": ["a", "b"]}
        assert loaded.config == params.config
        for name in params.names():
            np.testing.assert_array_equal(loaded[name].data, params[name].data.astype(np.float32))

    def test_layout(self, params):
        buf = io.BytesIO()
        save_checkpoint(buf, params)
        data = buf.getvalue()
        assert data[:8] == b"SCORNET1"
        n_floats = params.num_parameters()
        assert len(data) > 4 * n_floats

    def test_bad_magic_and_truncation(self, params):
        buf = io.BytesIO()
        save_checkpoint(buf, params)
        data = buf.getvalue()
        with pytest.raises(ParseError):
            load_checkpoint(io.BytesIO(b"XXXXXXXX" + data[8:]))
        with pytest.raises(ParseError, match="offset"):
            load_checkpoint(io.BytesIO(data[:-7]))
