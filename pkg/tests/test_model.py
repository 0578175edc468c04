import numpy as np
import pytest

from prefact.losses import combined_loss
from prefact.model import (
    LOG_CLAMP,
    HypothesisSet,
    ModelConfig,
    ModelFormatError,
    backward,
    deserialize,
    forward,
    forward_with_cache,
    init_model,
    serialize,
)
from prefact.numerics import ShapeError, grad_check, make_rng

SMALL = dict(input_dim=8, num_actions=3, num_objects=4, hidden=[6, 5], num_hypotheses=2)


def _model(seed=0, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    return init_model(cfg, make_rng(seed))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(16, 6, 6)
        assert cfg.hidden == [1024, 512] and cfg.num_hypotheses == 8 and cfg.dropout == 0.3

    def test_single_hypothesis_modes(self):
        for mode in ("c", "r", "rc"):
            assert ModelConfig(4, 2, 2, num_hypotheses=8, mode=mode).num_hypotheses == 1

    @pytest.mark.parametrize("kw", [dict(num_hypotheses=0), dict(hidden=[0]), dict(dropout=1.0), dict(mode="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(4, 2, 2, **kw)


class TestInit:
    def test_deterministic(self):
        a, b = _model(3), _model(3)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.value, q.value)

    def test_parameter_count(self):
        m = _model()
        D, T, A, O = 8, 2, 3, 4
        trunk = (8 + 1) * 6 + (6 + 1) * 5
        head = (5 + 1) * T * (2 * D + A + O + 2)
        assert m.num_parameters() == trunk + head
        assert m.head[0].shape == (5, T * (2 * D + A + O + 2))

    def test_glorot_bounds_and_zero_bias(self):
        m = _model()
        W0 = m.trunk[0][0].value
        assert np.abs(W0).max() <= np.sqrt(6 / (8 + 6))
        assert all(not b.value.any() for _, b in m.trunk)
        assert not m.head[1].value.any()

    def test_single_hypothesis(self):
        m = _model(num_hypotheses=1)
        assert forward(m, np.zeros(8)).num_hypotheses == 1

    def test_initial_scales(self):
        hs = forward(_model(), np.zeros(8))
        # zero input and zero biases: logscale and log-sigma start at 0 (b = sigma = 1)
        assert not hs.logscale.any() and not hs.action_log_sigma.any()


class TestForward:
    def test_inference_deterministic(self, rng):
        m, x = _model(), rng.standard_normal(8)
        assert forward(m, x).equals(forward(m, x))

    def test_dropout_reproducible(self, rng):
        m, x = _model(dropout=0.5), rng.standard_normal((4, 8))
        a = forward(m, x, train_mode=True, rng=make_rng(1))
        b = forward(m, x, train_mode=True, rng=make_rng(1))
        c = forward(m, x, train_mode=False)
        assert a.equals(b)
        assert not a.equals(c)

    def test_train_mode_needs_rng(self, rng):
        with pytest.raises(ValueError):
            forward(_model(dropout=0.5), rng.standard_normal(8), train_mode=True)

    def test_zero_weights_give_bias(self, rng):
        m = _model()
        for p in m.parameters():
            p.value[...] = 0.0
        K = m.config.head_width
        bias = np.arange(m.head[1].shape[0], dtype=float) / 100
        m.head[1].value[:] = bias
        hs = forward(m, rng.standard_normal(8))
        for k in range(2):
            np.testing.assert_array_equal(hs.median[0, k], bias[k * K : k * K + 8])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward(_model(), np.zeros(7))

    def test_output_shapes(self, rng):
        hs = forward(_model(), rng.standard_normal((5, 8)))
        assert hs.median.shape == (5, 2, 8) and hs.logscale.shape == (5, 2, 8)
        assert hs.action_logits.shape == (5, 2, 3) and hs.object_logits.shape == (5, 2, 4)
        assert hs.action_log_sigma.shape == (5, 2)

    def test_logscale_clamped(self, rng):
        m = _model()
        m.head[1].value[:] = 50.0
        hs = forward(m, rng.standard_normal(8))
        assert hs.logscale.max() == LOG_CLAMP and hs.action_log_sigma.max() == LOG_CLAMP

    def test_indexing(self, rng):
        hs = forward(_model(), rng.standard_normal((3, 8)))
        one = hs[1]
        assert one.num_samples == 1
        np.testing.assert_array_equal(one.median[0], hs.median[1])


class TestBackward:
    @pytest.mark.parametrize("mode", ["c", "r", "rc", "mh"])
    def test_full_loss_gradient(self, mode, rng):
        """Whole-network loss on a 3-sample batch, noise frozen, checked by finite differences."""
        m = _model(mode=mode, dropout=0.0)
        x = rng.standard_normal((3, 8))
        gt = rng.standard_normal((3, 8))
        ya, yo = np.array([0, 2, 1]), np.array([3, 1, 0])
        T = m.config.num_hypotheses
        noise = (rng.standard_normal((3, T, T, 3)), rng.standard_normal((3, T, T, 4)))

        def f():
            m.zero_grad()
            hs, cache = forward_with_cache(m, x)
            val, g, _ = combined_loss(mode, hs, gt, ya, yo, 0.7, noise=noise)
            backward(m, cache, g)
            return val, [p.grad for p in m.parameters()]

        assert grad_check(f, [p.value for p in m.parameters()]) < 1e-4

    def test_input_gradient(self, rng):
        m = _model(mode="r", dropout=0.0)
        x = rng.standard_normal((2, 8))
        gt = rng.standard_normal((2, 8))

        def f():
            m.zero_grad()
            hs, cache = forward_with_cache(m, x)
            val, g, _ = combined_loss("r", hs, gt, [-1, -1], [-1, -1])
            return val, [backward(m, cache, g)]

        assert grad_check(f, [x]) < 1e-4

    def test_clamped_outputs_get_no_gradient(self, rng):
        m = _model(dropout=0.0)
        m.head[1].value[:] = 50.0
        hs, cache = forward_with_cache(m, rng.standard_normal((1, 8)))
        g = HypothesisSet.zeros_like(hs)
        g.logscale[:] = 1.0
        m.zero_grad()
        backward(m, cache, g)
        assert not m.head[1].grad.any()


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        m = _model(5)
        m.metadata["delta"] = 2
        serialize(m, tmp_path / "m.bin")
        back = deserialize(tmp_path / "m.bin")
        assert back.config == m.config and back.metadata == {"delta": 2}
        for (n1, p), (n2, q) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2
            assert p.value.tobytes() == q.value.tobytes()
        x = rng.standard_normal((10, 8))
        assert forward(m, x).equals(forward(back, x))

    def test_magic(self, tmp_path):
        serialize(_model(), tmp_path / "m.bin")
        assert (tmp_path / "m.bin").read_bytes()[:8] == b"PFMODEL1"

    def test_truncated(self, tmp_path):
        serialize(_model(), tmp_path / "m.bin")
        data = (tmp_path / "m.bin").read_bytes()
        for cut in (4, 20, len(data) // 2, len(data) - 1):
            (tmp_path / "t.bin").write_bytes(data[:cut])
            with pytest.raises(ModelFormatError):
                deserialize(tmp_path / "t.bin")

    def test_trailing_bytes(self, tmp_path):
        serialize(_model(), tmp_path / "m.bin")
        (tmp_path / "x.bin").write_bytes((tmp_path / "m.bin").read_bytes() + b"\0")
        with pytest.raises(ModelFormatError):
            deserialize(tmp_path / "x.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"NOTMODEL" + bytes(64))
        with pytest.raises(ModelFormatError, match="magic"):
            deserialize(tmp_path / "b.bin")

    def test_shape_table_mismatch(self, tmp_path):
        m = _model()
        serialize(m, tmp_path / "m.bin")
        data = bytearray((tmp_path / "m.bin").read_bytes())
        # rewrite the first trunk dimension (8 -> 9) in the shape table
        name = b"trunk0.W"
        pos = data.index(name) + len(name) + 1
        assert int.from_bytes(data[pos : pos + 8], "little") == 8
        data[pos : pos + 8] = (9).to_bytes(8, "little")
        (tmp_path / "s.bin").write_bytes(bytes(data))
        with pytest.raises(ModelFormatError):
            deserialize(tmp_path / "s.bin")
