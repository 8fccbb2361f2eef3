import numpy as np
import pytest

from bnnlab import tensor as T
from bnnlab.models import (
    MEAN_ONLY,
    CheckpointError,
    LayerSpec,
    Model,
    ModelSpec,
    SamplingMode,
    arch_spec,
    build_model,
    load_checkpoint,
    mini_dense_spec,
    plain_cnn_spec,
    predict_ensemble,
    save_checkpoint,
)
from bnnlab.tensor import ShapeError, Tensor


def _batch(n=4, shape=(1, 8, 8), seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, *shape))


def _linear_spec(bayesian=False):
    return ModelSpec(
        layers=(LayerSpec("linear", width=3, bayesian=bayesian),),
        input_shape=(4, 1, 1),
        class_count=3,
    )


class TestLayerSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            LayerSpec("dropout")

    def test_bayesian_only_on_weighted_layers(self):
        with pytest.raises(ValueError, match="bayesian"):
            LayerSpec("relu", bayesian=True)
        with pytest.raises(ValueError, match="bayesian"):
            LayerSpec("pool", pool=2, bayesian=True)
        # weight-bearing kinds accept it
        LayerSpec("conv", width=4, kernel=3, bayesian=True)
        LayerSpec("norm", bayesian=True)
        LayerSpec("linear", width=2, bayesian=True)
        LayerSpec("dense_block", depth=2, growth=4, bayesian=True)

    def test_conv_needs_geometry(self):
        with pytest.raises(ValueError):
            LayerSpec("conv", width=4)

    def test_round_trip_dict(self):
        ls = LayerSpec("conv", width=8, kernel=3, pad=1, bayesian=True)
        assert LayerSpec.from_dict(ls.to_dict()) == ls


class TestBuildModel:
    def test_bayesian_linear_parameter_count(self):
        # in=4, out=3: (4*3 + 3) weights, doubled by (mu, rho)
        model = build_model(_linear_spec(bayesian=True), seed=1)
        assert model.parameter_count() == 30

    def test_deterministic_linear_parameter_count(self):
        assert build_model(_linear_spec(), seed=1).parameter_count() == 15

    def test_init_deterministic_in_seed(self):
        spec = plain_cnn_spec()
        a = build_model(spec, seed=5)
        b = build_model(spec, seed=5)
        c = build_model(spec, seed=6)
        for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(ta.data, tb.data)
        assert any(
            not np.array_equal(ta.data, tc.data)
            for (_, ta), (_, tc) in zip(a.named_parameters(), c.named_parameters())
        )

    def test_fan_in_scaled_init(self):
        spec = ModelSpec(
            layers=(
                LayerSpec("conv", width=64, kernel=3),
                LayerSpec("pool"),
                LayerSpec("linear", width=3),
            ),
            input_shape=(8, 8, 8),
            class_count=3,
        )
        model = build_model(spec, seed=3)
        w = dict(model.named_parameters())["L0.w"].data
        fan_in = 8 * 3 * 3
        assert abs(w.std() - np.sqrt(2.0 / fan_in)) < 0.15 * np.sqrt(2.0 / fan_in)

    def test_bayesian_sigma_initialized_to_spec(self):
        model = build_model(_linear_spec(bayesian=True), seed=0)
        rho = dict(model.named_parameters())["L0.w.rho"].data
        np.testing.assert_allclose(np.logaddexp(0, rho), 0.15, atol=1e-12)

    def test_stack_must_end_in_logits(self):
        spec = ModelSpec(
            layers=(LayerSpec("conv", width=4, kernel=3),),
            input_shape=(1, 8, 8),
            class_count=3,
        )
        with pytest.raises(ShapeError):
            build_model(spec)

    def test_pool_window_must_tile_named_layer(self):
        spec = ModelSpec(
            layers=(LayerSpec("pool", pool=2), LayerSpec("pool"), LayerSpec("linear", width=2)),
            input_shape=(1, 5, 5),
            class_count=2,
        )
        with pytest.raises(ShapeError, match="layer 0"):
            build_model(spec)


class TestForward:
    def test_logits_shape_and_zero_kl_for_deterministic(self):
        model = build_model(plain_cnn_spec(), seed=0)
        logits, kl = model.forward(_batch())
        assert logits.shape == (4, 3)
        assert kl.item() == 0.0

    def test_bayesian_kl_positive(self):
        model = build_model(plain_cnn_spec(bayesian=True), seed=0)
        _, kl = model.forward(_batch())
        assert kl.item() > 0.0

    def test_mean_only_is_deterministic(self):
        model = build_model(mini_dense_spec(), seed=2)
        a, _ = model.forward(_batch(), MEAN_ONLY)
        b, _ = model.forward(_batch(), MEAN_ONLY)
        np.testing.assert_array_equal(a.data, b.data)

    def test_sample_mode_seed_contract(self):
        model = build_model(plain_cnn_spec(bayesian=True), seed=2)
        a, _ = model.forward(_batch(), SamplingMode.sample(10))
        b, _ = model.forward(_batch(), SamplingMode.sample(10))
        c, _ = model.forward(_batch(), SamplingMode.sample(11))
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_sampling_mode_ignored_by_deterministic_model(self):
        model = build_model(plain_cnn_spec(), seed=2)
        a, _ = model.forward(_batch(), MEAN_ONLY)
        b, _ = model.forward(_batch(), SamplingMode.sample(99))
        np.testing.assert_array_equal(a.data, b.data)

    def test_wrong_input_shape_rejected(self):
        model = build_model(plain_cnn_spec(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((2, 1, 9, 9)))

    def test_forward_finite(self):
        model = build_model(mini_dense_spec(bayesian=True), seed=1)
        logits, kl = model.forward(_batch(), SamplingMode.sample(3))
        assert np.isfinite(logits.data).all() and np.isfinite(kl.item())


class TestDenseConnectivity:
    def test_block_grows_channels_by_depth_times_growth(self):
        spec = ModelSpec(
            layers=(
                LayerSpec("conv", width=6, kernel=3),
                LayerSpec("dense_block", depth=3, growth=5),
                LayerSpec("pool"),
                LayerSpec("linear", width=2),
            ),
            input_shape=(1, 6, 6),
            class_count=2,
        )
        model = build_model(spec, seed=0)
        assert model.layers[1].out_ch == 6 + 3 * 5

    def test_block_output_carries_input_channels_through(self):
        # channel concat: the first slice of the block output is its input
        spec = ModelSpec(
            layers=(
                LayerSpec("conv", width=4, kernel=3),
                LayerSpec("dense_block", depth=2, growth=3),
                LayerSpec("pool"),
                LayerSpec("linear", width=2),
            ),
            input_shape=(1, 6, 6),
            class_count=2,
        )
        model = build_model(spec, seed=4)
        x = Tensor(_batch(2, (1, 6, 6)))
        h = model.layers[0].forward(x, _ctx(model))
        out = model.layers[1].forward(h, _ctx(model))
        np.testing.assert_array_equal(out.data[:, :4], h.data)

    def test_earlier_features_reach_every_step(self):
        # gradient of the block output w.r.t. block input must be dense
        spec = mini_dense_spec(stem=4, growth=3, depth=2)
        model = build_model(spec, seed=0)
        x = Tensor(_batch(1), requires_grad=True)
        logits, _ = model.forward(x)
        g = T.backward(T.tensor_sum(logits))[x]
        assert np.abs(g).max() > 0


def _ctx(model):
    from bnnlab.models import _Ctx

    return _Ctx(mode=MEAN_ONLY, train=False, prior=model.prior)


class TestNormLayer:
    def _spec(self):
        return ModelSpec(
            layers=(
                LayerSpec("norm"),
                LayerSpec("pool"),
                LayerSpec("linear", width=2),
            ),
            input_shape=(3, 4, 4),
            class_count=2,
        )

    def test_train_uses_batch_statistics(self):
        model = build_model(self._spec(), seed=0)
        x = np.random.default_rng(0).normal(5.0, 2.0, size=(16, 3, 4, 4))
        norm = model.layers[0]
        y = norm.forward(Tensor(x), _ctx_train(model)).data
        # batch-stat normalization with identity affine: near zero mean, unit var
        assert abs(y.mean()) < 1e-10
        assert abs(y.std() - 1.0) < 1e-2

    def test_running_stats_move_during_training(self):
        model = build_model(self._spec(), seed=0)
        norm = model.layers[0]
        before = norm.running_mean.copy()
        x = np.random.default_rng(1).normal(3.0, 1.0, size=(8, 3, 4, 4))
        norm.forward(Tensor(x), _ctx_train(model))
        assert not np.array_equal(before, norm.running_mean)

    def test_eval_uses_running_stats(self):
        model = build_model(self._spec(), seed=0)
        norm = model.layers[0]
        norm.running_mean = np.array([1.0, 2.0, 3.0])
        norm.running_var = np.array([4.0, 4.0, 4.0])
        x = np.ones((2, 3, 4, 4)) * np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
        y = norm.forward(Tensor(x), _ctx(model)).data
        np.testing.assert_allclose(y, 0.0, atol=1e-3)

    def test_eval_forward_does_not_touch_stats(self):
        model = build_model(self._spec(), seed=0)
        norm = model.layers[0]
        before = norm.running_mean.copy()
        norm.forward(Tensor(np.random.default_rng(2).normal(size=(4, 3, 4, 4))), _ctx(model))
        np.testing.assert_array_equal(before, norm.running_mean)


def _ctx_train(model):
    from bnnlab.models import _Ctx

    return _Ctx(mode=MEAN_ONLY, train=True, prior=model.prior)


class TestPredictEnsemble:
    def test_rows_are_distributions(self):
        model = build_model(mini_dense_spec(bayesian=True), seed=1)
        probs = predict_ensemble(model, _batch(6), n_samples=5, seed=3)
        assert probs.shape == (6, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs >= 0).all()

    def test_deterministic_model_equals_plain_softmax(self):
        model = build_model(plain_cnn_spec(), seed=1)
        x = _batch(5)
        probs = predict_ensemble(model, x, n_samples=7, seed=3)
        logits, _ = model.forward(x)
        np.testing.assert_array_equal(probs, T.softmax(logits, axis=1).data)

    def test_seed_reproducible(self):
        model = build_model(plain_cnn_spec(bayesian=True), seed=1)
        a = predict_ensemble(model, _batch(3), n_samples=4, seed=9)
        b = predict_ensemble(model, _batch(3), n_samples=4, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_sample_count_validated(self):
        model = build_model(plain_cnn_spec(), seed=1)
        with pytest.raises(ValueError):
            predict_ensemble(model, _batch(1), n_samples=0, seed=0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(mini_dense_spec(bayesian=True), seed=7)
        # dirty the running stats so buffers are nontrivial
        model.forward(_batch(8), SamplingMode.sample(1), train=True)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, meta={"epochs": 3, "seed": 7})
        clone, meta = load_checkpoint(path)
        assert meta == {"epochs": 3, "seed": 7}
        for (na, ta), (nb, tb) in zip(model.named_parameters(), clone.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        for (na, ba), (nb, bb) in zip(model.named_buffers(), clone.named_buffers()):
            assert na == nb
            np.testing.assert_array_equal(ba, bb)
        x = _batch(3)
        a, _ = model.forward(x)
        b, _ = clone.forward(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_save_is_deterministic(self, tmp_path):
        model = build_model(plain_cnn_spec(bayesian=True), seed=2)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1, meta={"k": 1})
        save_checkpoint(model, p2, meta={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_two_tensors_per_bayesian_weight(self, tmp_path):
        model = build_model(plain_cnn_spec(bayesian=True), seed=0)
        names = [n for n, _ in model.named_parameters()]
        assert all(n.endswith(".mu") or n.endswith(".rho") for n in names)
        mus = {n[:-3] for n in names if n.endswith(".mu")}
        rhos = {n[:-4] for n in names if n.endswith(".rho")}
        assert mus == rhos and len(names) == 2 * len(mus)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        model = build_model(plain_cnn_spec(), seed=0)
        p = tmp_path / "t.ckpt"
        save_checkpoint(model, p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_unsupported_version(self, tmp_path):
        model = build_model(plain_cnn_spec(), seed=0)
        p = tmp_path / "v.ckpt"
        save_checkpoint(model, p)
        blob = bytearray(p.read_bytes())
        blob[4] = 99
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")


class TestRoster:
    @pytest.mark.parametrize("arch", ["plain_cnn", "mini_dense"])
    @pytest.mark.parametrize("bayesian", [False, True])
    def test_archs_build_and_run(self, arch, bayesian):
        model = build_model(arch_spec(arch, (1, 8, 8), 3, bayesian), seed=0)
        mode = SamplingMode.sample(0) if bayesian else MEAN_ONLY
        logits, kl = model.forward(_batch(2), mode)
        assert logits.shape == (2, 3)
        assert model.bayesian == bayesian
        assert (kl.item() > 0) == bayesian

    def test_mini_dense_defaults(self):
        spec = mini_dense_spec()
        blocks = [l for l in spec.layers if l.kind == "dense_block"]
        assert len(blocks) == 2
        assert all(b.depth == 4 and b.growth == 12 for b in blocks)

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="arch"):
            arch_spec("resnet", (1, 8, 8), 3, False)
