import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st_h

from helpers import GRAD_ARCH, finite_difference_check, kink_free_instance
from selftaught import student as st
from selftaught.metrics import dsc

SMALL = st.StudentArch(input_size=16, channels=(2, 3, 4))


class TestArch:
    def test_defaults(self):
        arch = st.StudentArch()
        assert (arch.input_size, arch.channels, arch.kernel_size) == (64, (8, 16, 32), 3)

    @pytest.mark.parametrize("kwargs", [dict(input_size=30), dict(channels=(1, 2)), dict(kernel_size=2),
                                        dict(channels=(0, 1, 1))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            st.StudentArch(**kwargs)

    def test_shapes(self):
        shapes = st.StudentArch().param_shapes()
        assert list(shapes) == list(st.PARAM_NAMES)
        assert shapes["dec2.w"] == (16, 48, 3, 3)
        assert shapes["dec1.w"] == (8, 24, 3, 3)
        assert shapes["head.w"] == (1, 8, 1, 1)


class TestInit:
    def test_deterministic(self):
        a, b = st.init_params(SMALL, 4), st.init_params(SMALL, 4)
        for name in st.PARAM_NAMES:
            np.testing.assert_array_equal(a[name], b[name])

    def test_biases_zero(self):
        params = st.init_params(st.StudentArch(), 0)
        for name in st.PARAM_NAMES:
            if name.endswith(".b"):
                assert np.all(params[name] == 0)

    def test_uniform_scale(self):
        w = st.init_params(st.StudentArch(), 1)["dec2.w"]
        fan_in = np.prod(w.shape[1:])
        expected = 1.0 / np.sqrt(fan_in) / np.sqrt(3.0)
        assert abs(w.std() - expected) <= 0.2 * expected
        assert np.abs(w).max() <= 1.0 / np.sqrt(fan_in)


class TestForward:
    def test_probabilities(self):
        params = st.init_params(SMALL, 0)
        probs, _ = st.forward(params, np.random.default_rng(0).normal(size=(16, 16)), SMALL)
        assert probs.shape == (16, 16, 2)
        assert np.all((probs > 0) & (probs < 1))
        assert np.all(probs.sum(axis=-1) == 1.0)

    def test_zero_network(self):
        probs, _ = st.forward(st.zero_params(SMALL), np.random.default_rng(1).random((16, 16)), SMALL)
        assert np.all(probs == 0.5)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            st.forward(st.init_params(SMALL, 0), np.zeros((12, 12)), SMALL)

    def test_sides_must_pool_twice(self):
        with pytest.raises(ValueError):
            st.forward_batch(st.init_params(SMALL, 0), np.zeros((1, 10, 10)))


class TestDiceLoss:
    def test_hand_value(self):
        # sum(p t) = 2, sum(p) = sum(t) = 4
        p = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
        t = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 1.0])
        assert st.dice_loss(p, t, smooth=0.0) == pytest.approx(0.5)

    def test_limits(self):
        t = np.array([[1, 0], [0, 1]])
        assert st.dice_loss(t.astype(float), t, smooth=1e-12) == pytest.approx(0.0, abs=1e-12)
        assert st.dice_loss(1.0 - t, t, smooth=1e-12) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            st.dice_loss(np.zeros(3), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st_h.integers(0, 2**31 - 1), st_h.floats(1e-3, 10.0))
    def test_range(self, seed, smooth):
        rng = np.random.default_rng(seed)
        p, t = rng.random((5, 5)), rng.integers(0, 2, (5, 5))
        assert 0.0 <= st.dice_loss(p, t, smooth) < 1.0

    def test_grad_matches_differences(self):
        rng = np.random.default_rng(0)
        p, t = rng.random(12), rng.integers(0, 2, 12)
        g = st.dice_loss_grad(p, t, 1.0)
        h = 1e-6
        for i in range(12):
            e = np.zeros(12)
            e[i] = h
            num = (st.dice_loss(p + e, t) - st.dice_loss(p - e, t)) / (2 * h)
            assert g[i] == pytest.approx(num, rel=1e-6, abs=1e-10)


class TestBackward:
    def test_finite_differences_full(self):
        params, img, target = kink_free_instance()
        worst, count, switched = finite_difference_check(params, img, target, h=1e-3)
        assert count == sum(np.prod(s) for s in GRAD_ARCH.param_shapes().values())
        assert switched == 0
        assert worst <= 1e-4

    def test_dead_path(self):
        # enc1 channel 0 never fires, so its weights cannot influence the loss
        params = st.init_params(SMALL, 2)
        params["enc1.b"] = params["enc1.b"].copy()
        params["enc1.b"][0] = -1e3
        img = np.random.default_rng(2).normal(size=(16, 16))
        _, cache = st.forward_batch(params, img[None])
        grads = st.backward(params, cache, np.ones((16, 16), np.uint8))
        assert np.all(grads["enc1.w"][0] == 0) and grads["enc1.b"][0] == 0

    def test_duplicate_sample_doubles(self):
        params = st.init_params(SMALL, 3)
        rng = np.random.default_rng(3)
        img, t = rng.normal(size=(16, 16)), (rng.random((16, 16)) > 0.5).astype(np.uint8)
        _, one = st.forward_batch(params, img[None])
        _, two = st.forward_batch(params, np.stack([img, img]))
        g1 = st.backward(params, one, t)
        g2 = st.backward(params, two, np.stack([t, t]))
        for name in st.PARAM_NAMES:
            np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=1e-15)

    def test_stale_cache(self):
        params = st.init_params(SMALL, 0)
        _, cache = st.forward_batch(params, np.zeros((1, 16, 16)))
        with pytest.raises(ValueError):
            st.backward(st.init_params(SMALL, 1), cache, np.zeros((16, 16)))

    def test_target_shape(self):
        params = st.init_params(SMALL, 0)
        _, cache = st.forward_batch(params, np.zeros((1, 16, 16)))
        with pytest.raises(ValueError):
            st.backward(params, cache, np.zeros((8, 8)))


class TestSgd:
    def _one(self, value):
        return {"w": np.array([value])}

    def test_plain(self):
        cfg = st.TrainConfig(learning_rate=0.1, momentum=0.0)
        params, _ = st.sgd_step(self._one(1.0), self._one(2.0), None, cfg)
        assert params["w"][0] == 1.0 - 0.1 * 2.0

    def test_fixed_point(self):
        cfg = st.TrainConfig()
        params, vel = st.sgd_step(self._one(0.3), self._one(0.0), self._one(0.0), cfg)
        assert params["w"][0] == 0.3 and vel["w"][0] == 0.0

    def test_two_momentum_steps(self):
        cfg = st.TrainConfig(learning_rate=0.05, momentum=0.9)
        params, vel = st.sgd_step(self._one(0.0), self._one(1.5), None, cfg)
        params, vel = st.sgd_step(params, self._one(1.5), vel, cfg)
        assert params["w"][0] == pytest.approx(-0.05 * 1.5 * (1 + 1.9), rel=1e-15)

    def test_does_not_mutate(self):
        p = self._one(1.0)
        st.sgd_step(p, self._one(1.0), None, st.TrainConfig())
        assert p["w"][0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            st.sgd_step(self._one(1.0), {"w": np.zeros(2)}, None, st.TrainConfig())


def _separable():
    rng = np.random.default_rng(0)
    return [(rng.random((16, 16)), np.ones((16, 16), np.uint8))]


class TestTrain:
    def test_zero_lr(self):
        params = st.init_params(SMALL, 0)
        cfg = st.TrainConfig(learning_rate=0.0, epochs=3)
        out, history = st.train(params, _separable(), cfg)
        assert len(history) == 3
        for name in st.PARAM_NAMES:
            np.testing.assert_array_equal(out[name], params[name])

    def test_separable_instance(self):
        params = st.init_params(SMALL, 0)
        cfg = st.TrainConfig(learning_rate=0.05, epochs=5, augment_online=False)
        out, history = st.train(params, _separable(), cfg)
        assert all(b < a for a, b in zip(history, history[1:]))
        img, target = _separable()[0]
        assert dsc(st.predict(out, img, SMALL)[1], target) >= 0.95

    def test_deterministic(self):
        data = [(np.random.default_rng(i).random((16, 16)),
                 (np.random.default_rng(i + 9).random((16, 16)) > 0.6).astype(np.uint8)) for i in range(5)]
        cfg = st.TrainConfig(epochs=2, batch_size=2, seed=3)
        a = st.train(st.init_params(SMALL, 0), data, cfg)
        b = st.train(st.init_params(SMALL, 0), data, cfg)
        assert a[1] == b[1]
        for name in st.PARAM_NAMES:
            np.testing.assert_array_equal(a[0][name], b[0][name])

    def test_empty(self):
        with pytest.raises(ValueError):
            st.train(st.init_params(SMALL, 0), [], st.TrainConfig())

    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(momentum=1.0),
                                        dict(dice_smooth=0.0)])
    def test_config_bounds(self, kwargs):
        with pytest.raises(ValueError):
            st.TrainConfig(**kwargs)


class TestPredict:
    def test_zero_params_all_foreground(self):
        probs, mask = st.predict(st.zero_params(SMALL), np.random.default_rng(0).random((16, 16)), SMALL)
        assert np.all(probs[..., 1] == 0.5) and np.all(mask == 1)

    def test_confident_net(self):
        params = st.zero_params(SMALL)
        params["head.b"] = np.array([-8.0])
        probs, mask = st.predict(params, np.zeros((16, 16)), SMALL)
        np.testing.assert_array_equal(mask, np.argmax(probs, axis=-1))
        assert np.all(mask == 0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = st.init_params(SMALL, 5)
        st.save_checkpoint(params, SMALL, tmp_path / "m.ckpt")
        assert st.is_checkpoint(tmp_path / "m.ckpt")
        arch, loaded = st.load_checkpoint(tmp_path / "m.ckpt")
        assert arch == SMALL
        for name in st.PARAM_NAMES:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_layout(self, tmp_path):
        st.save_checkpoint(st.init_params(SMALL, 0), SMALL, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:8] == st.CHECKPOINT_MAGIC
        n_values = sum(np.prod(s) for s in SMALL.param_shapes().values())
        n_dims = sum(len(s) for s in SMALL.param_shapes().values())
        assert len(raw) == 8 + 20 + 4 + 4 * (12 + n_dims) + 8 * n_values

    def test_wrong_arch_shape(self, tmp_path):
        with pytest.raises(ValueError):
            st.save_checkpoint(st.init_params(SMALL, 0), st.StudentArch(), tmp_path / "m.ckpt")

    @pytest.mark.parametrize("cut", [4, 30, 100])
    def test_truncated(self, tmp_path, cut):
        st.save_checkpoint(st.init_params(SMALL, 0), SMALL, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(st.CheckpointError):
            st.load_checkpoint(tmp_path / "t.ckpt")

    def test_trailing_bytes(self, tmp_path):
        st.save_checkpoint(st.init_params(SMALL, 0), SMALL, tmp_path / "m.ckpt")
        with open(tmp_path / "m.ckpt", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(st.CheckpointError):
            st.load_checkpoint(tmp_path / "m.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"P5\n1 1\n255\n\0")
        assert not st.is_checkpoint(tmp_path / "x.bin")
        assert not st.is_checkpoint(tmp_path / "missing")
        with pytest.raises(st.CheckpointError):
            st.load_checkpoint(tmp_path / "x.bin")


class TestEstimator:
    def _data(self, n=6):
        rng = np.random.default_rng(0)
        X = rng.random((n, 16, 16))
        return X, (X > 0.5).astype(np.uint8)

    def test_fit_predict(self):
        X, y = self._data()
        est = st.UNetSegmenter(input_size=16, channels=(2, 3, 4), epochs=2).fit(X, y)
        assert est.predict(X).shape == X.shape
        assert est.predict_proba(X).shape == X.shape + (2,)
        assert 0.0 <= est.score(X, y) <= 1.0
        assert len(est.loss_history_) == 2

    def test_matches_functional_train(self):
        X, y = self._data()
        est = st.UNetSegmenter(input_size=16, channels=(2, 3, 4), epochs=2, random_state=7).fit(X, y)
        cfg = st.TrainConfig(epochs=2, seed=7)
        params, _ = st.train(st.init_params(SMALL, 7), list(zip(X, y)), cfg)
        for name in st.PARAM_NAMES:
            np.testing.assert_array_equal(est.params_[name], params[name])

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            st.UNetSegmenter().predict(np.zeros((1, 64, 64)))

    def test_clone_and_params(self):
        from sklearn.base import clone

        est = st.UNetSegmenter(epochs=3, learning_rate=0.01)
        assert clone(est).get_params() == est.get_params()

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            st.UNetSegmenter(input_size=16).fit(np.zeros((2, 8, 8)), np.zeros((2, 8, 8), np.uint8))
