import numpy as np
import pytest

from jbfnet import autodiff as ad
from jbfnet.autodiff import ShapeError, Tensor
from jbfnet.blocks import (
    BLOCK_FILTER_PARAM_COUNT,
    bilateral_aggregate,
    classic_gaussian_jbf,
    distance_matrix,
    domain_kernel,
    filter_net_param_shapes,
    gaussian_domain_kernel,
    init_filter_net,
    init_mix,
    mix_noise_map,
    range_features,
)
from jbfnet.volume_io import Volume

from oracles import bilateral_loops, conv3d_loops


def t(arr, req=False):
    return Tensor(np.asarray(arr), requires_grad=req)


def filter_leaves(seed, prefix="f"):
    rng = np.random.default_rng(seed)
    arrays = init_filter_net(rng, prefix)
    return arrays, {k: Tensor(v) for k, v in arrays.items()}


class TestDistanceMatrix:
    def test_center_zero_max_sqrt27(self):
        d = distance_matrix()
        assert d.shape == (7, 7, 7)
        assert d[3, 3, 3] == 0.0
        assert d.max() == pytest.approx(np.sqrt(27.0))

    def test_reflection_symmetric(self):
        d = distance_matrix()
        np.testing.assert_array_equal(d, d[::-1])
        np.testing.assert_array_equal(d, d[:, ::-1])
        np.testing.assert_array_equal(d, d[:, :, ::-1])


class TestParamCounts:
    def test_block_filter_params_112(self):
        shapes = {}
        shapes.update(filter_net_param_shapes("f"))
        shapes.update(filter_net_param_shapes("g"))
        total = sum(int(np.prod(s)) for s in shapes.values())
        assert total == BLOCK_FILTER_PARAM_COUNT == 112


class TestRangeFeatures:
    def test_shape_70_to_66(self):
        _, lv = filter_leaves(0)
        out = range_features(t(np.zeros((70, 70, 7), dtype=np.float32)), lv, "f")
        assert out.shape == (66, 66, 3)

    def test_zero_params_zero_features(self):
        arrays, _ = filter_leaves(1)
        lv = {k: Tensor(np.zeros_like(v)) for k, v in arrays.items()}
        g = t(np.random.default_rng(0).normal(size=(22, 22, 7)).astype(np.float32))
        out = range_features(g, lv, "f")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_nonnegative(self):
        _, lv = filter_leaves(2)
        g = t(np.random.default_rng(1).normal(size=(22, 22, 7)).astype(np.float32))
        assert range_features(g, lv, "f").data.min() >= 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        arrays, _ = filter_leaves(3)
        arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
        lv = {k: Tensor(v) for k, v in arrays.items()}
        g = rng.normal(size=(12, 13, 7))
        out = range_features(t(g), lv, "f")
        x = g.transpose(2, 0, 1)[None]
        r1 = np.maximum(conv3d_loops(x, arrays["f.l1.w"], arrays["f.l1.b"], (0, 0, 0)), 0)
        r2 = np.maximum(conv3d_loops(r1, arrays["f.l2.w"], arrays["f.l2.b"], (0, 0, 0)), 0)
        ref = r2[0].transpose(1, 2, 0)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_wrong_shape_rejected(self):
        _, lv = filter_leaves(4)
        with pytest.raises(ShapeError):
            range_features(t(np.zeros((22, 22, 5), dtype=np.float32)), lv, "f")


class TestDomainKernel:
    def test_shape(self):
        _, lv = filter_leaves(5, "g")
        out = domain_kernel(t(distance_matrix()), lv, "g")
        assert out.shape == (3, 3, 3)

    def test_zero_params_zero_kernel(self):
        arrays, _ = filter_leaves(6, "g")
        lv = {k: Tensor(np.zeros_like(v)) for k, v in arrays.items()}
        out = domain_kernel(t(distance_matrix()), lv, "g")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_averaging_params_match_oracle(self):
        avg = np.full((1, 1, 3, 3, 3), 1.0 / 27.0)
        lv = {
            "g.l1.w": Tensor(avg),
            "g.l1.b": Tensor(np.zeros(1)),
            "g.l2.w": Tensor(avg),
            "g.l2.b": Tensor(np.zeros(1)),
        }
        d = distance_matrix().astype(np.float64)
        out = domain_kernel(t(d), lv, "g")
        x = d.transpose(2, 0, 1)[None]
        r1 = conv3d_loops(x, avg, np.zeros(1), (0, 0, 0))  # all positive, ReLU no-op
        r2 = conv3d_loops(r1, avg, np.zeros(1), (0, 0, 0))
        ref = r2[0].transpose(1, 2, 0)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


class TestBilateralAggregate:
    def test_constant_block_weighted_average(self):
        rng = np.random.default_rng(7)
        v = 42.0
        noisy = np.full((10, 10, 3), v)
        rw = rng.uniform(0.5, 2.0, size=(10, 10, 3))
        dk = rng.uniform(0.5, 2.0, size=(3, 3, 3))
        eps = 1e-6
        out = bilateral_aggregate(t(noisy), t(rw), t(dk), eps=eps)
        min_wsum = 27 * 0.25
        assert np.abs(out.data - v).max() < v * eps / min_wsum

    def test_center_delta_kernel_returns_center(self):
        rng = np.random.default_rng(8)
        noisy = rng.uniform(0, 100, size=(8, 9, 3))
        rw = np.ones((8, 9, 3))
        dk = np.zeros((3, 3, 3))
        dk[1, 1, 1] = 1.0
        out = bilateral_aggregate(t(noisy), t(rw), t(dk), eps=1e-9)
        np.testing.assert_allclose(out.data, noisy[1:7, 1:8, 1], rtol=1e-6)

    @pytest.mark.parametrize("mode", ["response", "difference"])
    def test_matches_eq_oracle(self, mode):
        rng = np.random.default_rng(9)
        noisy = rng.normal(50, 20, size=(12, 11, 3))
        rw = rng.uniform(0, 2, size=(12, 11, 3))
        dk = rng.uniform(0, 1, size=(3, 3, 3))
        out = bilateral_aggregate(t(noisy), t(rw), t(dk), eps=1e-6, mode=mode, diff_scale=0.7)
        ref = bilateral_loops(noisy, rw, dk, 1e-6, mode=mode, diff_scale=0.7)
        np.testing.assert_allclose(out.data, ref, atol=1e-6, rtol=1e-6)

    def test_convexity_bound_response_mode(self):
        rng = np.random.default_rng(10)
        noisy = rng.normal(100, 30, size=(10, 10, 3))
        rw = rng.uniform(0.1, 1.0, size=(10, 10, 3))
        dk = rng.uniform(0.1, 1.0, size=(3, 3, 3))
        out = bilateral_aggregate(t(noisy), t(rw), t(dk), eps=1e-9).data
        for y in range(8):
            for x in range(8):
                win = noisy[y : y + 3, x : x + 3, :]
                assert out[y, x] <= win.max() + 1e-6
                assert out[y, x] >= min(win.min(), 0.0) - 1e-6

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            bilateral_aggregate(
                t(np.zeros((5, 5, 3))), t(np.zeros((5, 5, 3))), t(np.zeros((3, 3, 3))), eps=0.0
            )

    def test_gradients_flow(self):
        rng = np.random.default_rng(11)
        noisy = t(rng.normal(size=(6, 6, 3)), req=True)
        rw = t(rng.uniform(0.2, 1, size=(6, 6, 3)), req=True)
        dk = t(rng.uniform(0.2, 1, size=(3, 3, 3)), req=True)
        out = bilateral_aggregate(noisy, rw, dk, eps=1e-6)
        ad.backward(ad.tsum(ad.square(out)))
        for x in (noisy, rw, dk):
            assert x.grad is not None and np.abs(x.grad).sum() > 0


class TestMixNoiseMap:
    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        filtered = rng.normal(50, 10, size=(8, 8))
        center = filtered + rng.normal(0, 5, size=(8, 8))
        arrays = init_mix(rng, "m", "pixelwise")
        lv = {k: Tensor(v.astype(np.float64)) for k, v in arrays.items()}
        return filtered, center, arrays, lv

    def test_off_mode_identity(self):
        filtered, center, _, _ = self._setup(0)
        out = mix_noise_map(t(filtered), t(center), {}, "m", mode="off")
        np.testing.assert_array_equal(out.data, filtered)

    def test_sigmoid_limits(self):
        filtered, center, _, _ = self._setup(1)
        lv_lo = {
            "m.w": Tensor(np.zeros((1, 1, 3, 3))),
            "m.b": Tensor(np.full(1, -50.0)),
        }
        lv_hi = {
            "m.w": Tensor(np.zeros((1, 1, 3, 3))),
            "m.b": Tensor(np.full(1, 50.0)),
        }
        out_lo = mix_noise_map(t(filtered), t(center), lv_lo, "m", mode="pixelwise")
        out_hi = mix_noise_map(t(filtered), t(center), lv_hi, "m", mode="pixelwise")
        np.testing.assert_allclose(out_lo.data, filtered, atol=1e-8)
        np.testing.assert_allclose(out_hi.data, center, atol=1e-8)

    def test_matches_composed_oracle(self):
        filtered, center, arrays, lv = self._setup(2)
        out = mix_noise_map(t(filtered), t(center), lv, "m", mode="pixelwise")
        nm = center - filtered
        w = arrays["m.w"].astype(np.float64)
        conv = conv3d_loops(nm[None, None], w.reshape(1, 1, 1, 3, 3), arrays["m.b"].astype(np.float64), (0, 1, 1))
        coeff = 1.0 / (1.0 + np.exp(-conv[0, 0]))
        ref = filtered + coeff * nm
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_single_mode(self):
        filtered, center, _, _ = self._setup(3)
        lv = {"m.w": Tensor(np.zeros(1))}
        out = mix_noise_map(t(filtered), t(center), lv, "m", mode="single")
        np.testing.assert_allclose(out.data, filtered + 0.5 * (center - filtered), rtol=1e-12)


class TestClassicJbf:
    def test_constant_volume_unchanged(self):
        vol = Volume(nx=20, ny=20, nz=8, data=np.full((8, 20, 20), 70.0, dtype=np.float32))
        out = classic_gaussian_jbf(vol, sigma_s=1.5, sigma_r=30.0)
        np.testing.assert_allclose(out.data, 70.0, rtol=1e-5)

    def test_large_sigma_r_reduces_to_spatial_smoothing(self):
        rng = np.random.default_rng(12)
        data = rng.normal(0, 20, size=(6, 16, 16)).astype(np.float32)
        vol = Volume(nx=16, ny=16, nz=6, data=data)
        out = classic_gaussian_jbf(vol, sigma_s=1.5, sigma_r=1e9)
        # oracle: plain Gaussian-weighted window average, borders renormalized
        d = data.astype(np.float64)
        num = np.zeros_like(d)
        den = np.zeros_like(d)
        nz, ny, nx = d.shape
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    wgt = np.exp(-(dz**2 + dy**2 + dx**2) / (2 * 1.5**2))
                    for z in range(nz):
                        for y in range(ny):
                            for x in range(nx):
                                zz, yy, xx = z + dz, y + dy, x + dx
                                if 0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx:
                                    num[z, y, x] += wgt * d[zz, yy, xx]
                                    den[z, y, x] += wgt
        np.testing.assert_allclose(out.data, (num / den).astype(np.float32), atol=1e-5)

    def test_denoises_piecewise_constant(self):
        rng = np.random.default_rng(13)
        clean = np.zeros((8, 32, 32), dtype=np.float64)
        clean[:, 8:24, 8:24] = 60.0
        noisy = clean + rng.normal(0, 17.0, size=clean.shape)
        vol = Volume(nx=32, ny=32, nz=8, data=noisy.astype(np.float32))
        out = classic_gaussian_jbf(vol, sigma_s=1.5, sigma_r=30.0)
        err_before = np.sqrt(np.mean((noisy - clean) ** 2))
        err_after = np.sqrt(np.mean((out.data - clean) ** 2))
        assert err_after < 0.7 * err_before

    def test_bad_sigma(self):
        vol = Volume(nx=20, ny=20, nz=8, data=np.zeros((8, 20, 20), dtype=np.float32))
        with pytest.raises(ValueError):
            classic_gaussian_jbf(vol, sigma_s=0.0)


class TestGaussianDomainKernel:
    def test_center_one_symmetric(self):
        k = gaussian_domain_kernel(1.5)
        assert k[1, 1, 1] == pytest.approx(1.0)
        np.testing.assert_allclose(k, k[::-1], rtol=1e-6)
        assert (k > 0).all()
