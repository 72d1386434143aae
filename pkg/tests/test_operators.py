import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ampost.flow import condition_vector
from ampost.operators import (
    MeasurementSet,
    PointCloudSignal,
    blur_operator,
    composite,
    downsample_operator,
    gen_toy_dataset,
    identity,
    ingest_dataset,
    load_dataset,
    load_measurements,
    mask_operator,
    measure,
    measure_dataset,
    parse_operator,
    random_mask,
    save_dataset,
    save_measurements,
    sphere_grid,
)
from ampost.tensorcore import ContainerError, Tensor, grad
from ampost.tensorcore import tensor as T
from ampost.tensorcore.container import write_container

LINEAR_OPS = [
    identity(16),
    mask_operator(np.tile([1.0, 0.0, 1.0, 1.0], 4)),
    blur_operator((4, 4), 1.0),
    downsample_operator((4, 4), 2),
    composite(blur_operator((16,), 0.7), downsample_operator((16,), 4)),
]


class TestApply:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(identity(3).apply(x), x)

    def test_mask_example(self):
        np.testing.assert_array_equal(mask_operator([0.0, 1.0]).apply(np.array([5.0, 7.0])), [0.0, 7.0])

    def test_downsample_example(self):
        np.testing.assert_array_equal(downsample_operator((2,), 2).apply(np.array([1.0, 3.0])), [2.0])

    def test_downsample_2d_block_means(self):
        x = np.arange(16.0).reshape(4, 4)
        got = downsample_operator((4, 4), 2).apply(x.reshape(-1))
        np.testing.assert_allclose(got, x.reshape(2, 2, 2, 2).mean(axis=(1, 3)).reshape(-1))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            identity(3).apply(np.zeros(4))

    def test_mask_idempotent(self):
        op = mask_operator(random_mask(20, 0.4, np.random.default_rng(0)))
        x = np.random.default_rng(1).standard_normal(20)
        np.testing.assert_array_equal(op.apply(op.apply(x)), op.apply(x))

    @pytest.mark.parametrize("shape", [(12,), (6, 5)])
    def test_blur_preserves_constants(self, shape):
        op = blur_operator(shape, 1.3)
        x = np.full(int(np.prod(shape)), 0.37)
        np.testing.assert_allclose(op.apply(x), x, rtol=1e-15)

    def test_blur_kernel_truncated_at_two_sigma(self):
        op = blur_operator((11,), 1.0)
        impulse = np.zeros(11)
        impulse[5] = 1.0
        out = op.apply(impulse)
        assert np.count_nonzero(out) == 5 and out[5] == out.max()

    @pytest.mark.parametrize("op", LINEAR_OPS, ids=lambda o: o.kind)
    def test_dense_matches_apply(self, op):
        x = np.random.default_rng(2).standard_normal(op.in_dim)
        np.testing.assert_allclose(op.dense() @ x, op.apply(x), atol=1e-14)
        assert op.is_linear

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(LINEAR_OPS), arrays(np.float64, 16, elements=st.floats(-10, 10)),
           arrays(np.float64, 16, elements=st.floats(-10, 10)), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, op, x, y, a, b):
        lhs = op.apply(a * x + b * y)
        rhs = a * op.apply(x) + b * op.apply(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.max(np.abs(x)) + np.max(np.abs(y))) * 10)

    def test_tensor_apply_is_differentiable(self):
        op = blur_operator((5,), 1.0)
        x = Tensor(np.random.default_rng(3).standard_normal(5), requires_grad=True)
        w = np.arange(5.0)
        (g,) = grad(T.sum_(T.mul(op.apply(x), w)), [x])
        np.testing.assert_allclose(g, op.dense().T @ w, rtol=1e-13)

    def test_batched_rows(self):
        op = downsample_operator((4,), 2)
        xs = np.arange(8.0).reshape(2, 4)
        np.testing.assert_array_equal(op.apply(xs), [[0.5, 2.5], [4.5, 6.5]])

    def test_composite_dims_must_chain(self):
        with pytest.raises(ValueError):
            composite(identity(4), identity(3))

    def test_bad_mask_values(self):
        with pytest.raises(ValueError):
            mask_operator([0.5, 1.0])


class TestParse:
    def test_grammar(self):
        assert parse_operator("id", 4).sample(np.random.default_rng(0)).kind == "identity"
        assert parse_operator("blur:sigma=1.0", (4, 4)).sample(None).kind == "blur"
        down = parse_operator("down:f=2", (4, 4)).sample(None)
        assert (down.in_dim, down.out_dim) == (16, 4)
        fac = parse_operator("mask:p=0.3", 10)
        assert fac.p_min == fac.p_max == 0.3
        assert fac.sample(np.random.default_rng(0)).mask.sum() == 7

    def test_mask_level_range(self):
        fac = parse_operator("mask:p=0.3-0.6", 100)
        rng = np.random.default_rng(1)
        observed = [fac.sample(rng).mask.sum() for _ in range(200)]
        assert min(observed) >= 40 and max(observed) <= 70
        assert max(observed) - min(observed) > 20

    def test_unknown(self):
        with pytest.raises(ValueError):
            parse_operator("warp:k=1", 4)

    def test_random_mask_bounds(self):
        with pytest.raises(ValueError):
            random_mask(4, 1.5, np.random.default_rng(0))


class TestMeasure:
    def test_noiseless_identity(self):
        x = np.array([0.2, 0.4])
        m = measure(identity(2), x, 0.0, np.random.default_rng(0), id=7)
        np.testing.assert_array_equal(m.y, x)
        assert m.id == 7 and not m.blind
        assert not hasattr(m, "x")

    def test_noise_level(self):
        n = 100_000
        sigma = 0.25
        m = measure(identity(n), np.zeros(n), sigma, np.random.default_rng(1))
        assert abs(m.y.std(ddof=1) - sigma) < 3 * sigma / math.sqrt(2 * n)
        assert abs(m.y.mean()) < 3 * sigma / math.sqrt(n)

    def test_sixty_percent_mask_count(self):
        op = parse_operator("mask:p=0.6", 4160).sample(np.random.default_rng(2))
        assert op.mask.sum() == math.ceil(0.4 * 4160) == 1664

    def test_hidden_entries_carry_no_signal(self):
        fac = parse_operator("mask:p=0.5", 32)
        rng = np.random.default_rng(3)
        xs = np.random.default_rng(4).uniform(size=(20, 32))
        mset = measure_dataset(fac, xs, 0.1, rng)
        hidden = mset.masks == 0
        assert np.all(mset.y[hidden] == 0.0)
        for mode in ("masked_signal", "masked_signal_plus_mask"):
            cond = condition_vector(mset.y[0], mset.masks[0], mode)
            assert np.all(cond[:32][hidden[0]] == 0.0)

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            measure(identity(2), np.zeros(2), -1.0, np.random.default_rng(0))

    def test_fresh_mask_per_row(self):
        mset = measure_dataset(parse_operator("mask:p=0.3", 16), np.ones((5, 16)), 0.0, np.random.default_rng(5))
        assert len({m.tobytes() for m in mset.masks}) > 1
        np.testing.assert_array_equal(mset.operator(2).apply(np.ones(16)), mset.y[2])

    def test_container_roundtrip(self, tmp_path):
        xs = np.random.default_rng(6).uniform(size=(4, 16))
        mset = measure_dataset(parse_operator("blur:sigma=1.0", (4, 4)), xs, 0.1, np.random.default_rng(7))
        save_measurements(tmp_path / "train.amp", mset)
        save_measurements(tmp_path / "eval.amp", mset, truth=xs)
        back, truth = load_measurements(tmp_path / "train.amp")
        assert truth is None
        assert back.y.tobytes() == mset.y.tobytes() and back.op_spec == "blur:sigma=1.0"
        np.testing.assert_array_equal(back.operator().dense(), mset.operator().dense())
        _, truth = load_measurements(tmp_path / "eval.amp")
        assert truth.tobytes() == xs.tobytes()

    def test_item(self):
        mset = MeasurementSet(np.ones((3, 2)), 0.1, "id", 2)
        m = mset.item(1)
        assert m.id == 1 and m.op.kind == "identity" and m.sigma_y == 0.1


class TestDatasets:
    def test_gauss2d_covariance(self):
        n = 100_000
        xs = gen_toy_dataset("gauss2d", n, np.random.default_rng(0))
        cov = np.cov(xs.T)
        # variance of a sample covariance entry: (s_ii s_jj + s_ij^2) / n
        se = np.sqrt((1 + np.eye(2)) / n)
        assert np.all(np.abs(cov - np.eye(2)) < 3 * se)

    def test_blobs_range_and_shape(self):
        xs = gen_toy_dataset("blobs8x8", 50, np.random.default_rng(1))
        assert xs.shape == (50, 64) and xs.min() >= 0.0 and xs.max() <= 1.0

    def test_sphere_field_is_periodic(self):
        xs = gen_toy_dataset("sphere_field", 5, np.random.default_rng(2), wrap=True)
        grid = xs.reshape(5, 8, 9)
        np.testing.assert_allclose(grid[:, :, 0], grid[:, :, -1], atol=1e-12)
        assert xs.min() >= 0.0 and xs.max() <= 1.0

    def test_sphere_grid_shape(self):
        theta, phi = sphere_grid(4, 6)
        assert theta.shape == phi.shape == (4, 6)

    @pytest.mark.parametrize("kind", ["mixture2d", "moons"])
    def test_two_dimensional_kinds(self, kind):
        xs = gen_toy_dataset(kind, 100, np.random.default_rng(3))
        assert xs.shape == (100, 2) and np.all(np.isfinite(xs))

    def test_fixed_seed(self):
        a = gen_toy_dataset("blobs8x8", 3, np.random.Generator(np.random.Philox(4)))
        b = gen_toy_dataset("blobs8x8", 3, np.random.Generator(np.random.Philox(4)))
        assert a.tobytes() == b.tobytes()

    def test_bad_requests(self):
        with pytest.raises(ValueError):
            gen_toy_dataset("gauss2d", 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            gen_toy_dataset("faces", 3, np.random.default_rng(0))


class TestIngest:
    def test_roundtrip_bit_identical(self, tmp_path):
        xs = np.random.default_rng(5).standard_normal((7, 3))
        save_dataset(tmp_path / "d.amp", xs)
        assert load_dataset(tmp_path / "d.amp").tobytes() == xs.tobytes()

    def test_empty_container(self, tmp_path):
        write_container(tmp_path / "e.amp", {})
        assert ingest_dataset(tmp_path / "e.amp") == []

    def test_bunny_sized_point_cloud(self, tmp_path):
        v = np.random.default_rng(6).uniform(size=1888)
        write_container(tmp_path / "b.amp", {"signal": v})
        (sample,) = ingest_dataset(tmp_path / "b.amp")
        pc = PointCloudSignal.from_flat(sample)
        assert (pc.V, pc.C) == (1888, 1)
        assert pc.flat().tobytes() == v.tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.amp").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(ContainerError):
            ingest_dataset(tmp_path / "x.amp")

    def test_point_cloud_validation(self):
        with pytest.raises(ValueError):
            PointCloudSignal(np.array([[np.nan]]))
        with pytest.raises(ValueError):
            PointCloudSignal.from_flat(np.zeros(5), channels=2)
        pc = PointCloudSignal.from_flat(np.arange(6.0), channels=3)
        assert (pc.V, pc.C) == (2, 3)
