"""One trainable joint-bilateral-filter block, plus the classic Gaussian JBF.

A block owns two 2-layer single-filter 3x3x3 conv nets: F turns the padded
guidance stack into per-voxel range weights, G turns the precomputed 7x7x7
voxel-distance matrix into a 3x3x3 domain kernel. The normalized window
aggregation then filters the central 3 noisy slices down to one slice, and a
learned fraction of the removed noise map is mixed back in.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

EPS_DEFAULT = 1e-6
WINDOW = 3

# F (range) net + G (domain) net: (27 + 1) * 2 layers * 2 nets
BLOCK_FILTER_PARAM_COUNT = 112


def filter_net_param_shapes(prefix):
    return {
        f"{prefix}.l1.w": (1, 1, 3, 3, 3),
        f"{prefix}.l1.b": (1,),
        f"{prefix}.l2.w": (1, 1, 3, 3, 3),
        f"{prefix}.l2.b": (1,),
    }


def init_filter_net(rng, prefix):
    """Positive-uniform weights so initial kernels form a plausible smoother."""
    params = {}
    for name, shape in filter_net_param_shapes(prefix).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.uniform(0.0, 0.1, size=shape).astype(np.float32)
    return params


def init_mix(rng, prefix, mode):
    """Noise-map mixing weights; bias starts at -2 so mixing begins small."""
    if mode == "pixelwise":
        return {
            f"{prefix}.w": rng.uniform(-0.01, 0.01, size=(1, 1, 3, 3)).astype(np.float32),
            f"{prefix}.b": np.full((1,), -2.0, dtype=np.float32),
        }
    if mode == "single":
        return {f"{prefix}.w": np.full((1,), -2.0, dtype=np.float32)}
    if mode == "off":
        return {}
    raise ValueError(f"unknown mixing mode {mode!r}")


def distance_matrix():
    """7x7x7 Euclidean voxel distances from the center, indexed (dy, dx, dz)."""
    r = np.arange(-3, 4, dtype=np.float64)
    dy, dx, dz = np.meshgrid(r, r, r, indexing="ij")
    return np.sqrt(dy * dy + dx * dx + dz * dz).astype(np.float32)


def gaussian_domain_kernel(sigma_s, dtype=np.float32):
    """Fixed 3x3x3 spatial Gaussian exp(-|o|^2 / 2 sigma_s^2), (dy, dx, dz)."""
    r = np.arange(-1, 2, dtype=np.float64)
    dy, dx, dz = np.meshgrid(r, r, r, indexing="ij")
    k = np.exp(-(dy * dy + dx * dx + dz * dz) / (2.0 * sigma_s * sigma_s))
    return k.astype(dtype)


def _two_layer_valid(x, leaves, prefix):
    """Two valid 3x3x3 single-filter convs, ReLU after each; x is (h, w, d)."""
    h, w, d = x.shape
    t = ad.reshape(ad.transpose(x, (2, 0, 1)), (1, d, h, w))
    t = ad.relu(ad.conv3d(t, leaves[f"{prefix}.l1.w"], leaves[f"{prefix}.l1.b"], pad=0))
    t = ad.relu(ad.conv3d(t, leaves[f"{prefix}.l2.w"], leaves[f"{prefix}.l2.b"], pad=0))
    do, ho, wo = t.shape[1], t.shape[2], t.shape[3]
    return ad.transpose(ad.reshape(t, (do, ho, wo)), (1, 2, 0))


def range_features(guidance_padded, leaves, prefix):
    """(h+6, w+6, 7) padded guidance -> (h+2, w+2, 3) nonnegative range weights."""
    if guidance_padded.data.ndim != 3 or guidance_padded.shape[2] != 7:
        raise ShapeError(
            f"range_features: expected (h+6, w+6, 7) guidance, got {guidance_padded.shape}"
        )
    return _two_layer_valid(guidance_padded, leaves, prefix)


def domain_kernel(dist, leaves, prefix):
    """7x7x7 distance matrix -> constant 3x3x3 nonnegative domain kernel."""
    if dist.shape != (7, 7, 7):
        raise ShapeError(f"domain_kernel: expected (7,7,7) distances, got {dist.shape}")
    return _two_layer_valid(dist, leaves, prefix)


def bilateral_aggregate(noisy_p, range_w, domain_k, eps=EPS_DEFAULT,
                        mode="response", diff_scale=1.0):
    """Normalized 3x3x3 window aggregation -> (h, w), ReLU applied.

    mode "response": weight(x, o) = domain_k(o) * range_w(x + o).
    mode "difference": weight(x, o) = domain_k(o) *
        exp(-diff_scale * (range_w(x_c) - range_w(x + o))^2), x_c the center.
    """
    if eps <= 0:
        raise ValueError("bilateral_aggregate: eps must be > 0")
    if mode not in ("response", "difference"):
        raise ValueError(f"bilateral_aggregate: unknown mode {mode!r}")
    if noisy_p.data.ndim != 3 or noisy_p.shape[2] != WINDOW:
        raise ShapeError(f"bilateral_aggregate: noisy block must be (h+2, w+2, 3), got {noisy_p.shape}")
    if noisy_p.shape != range_w.shape:
        raise ShapeError(
            f"bilateral_aggregate: range weights {range_w.shape} != noisy block {noisy_p.shape}"
        )
    if domain_k.shape != (WINDOW, WINDOW, WINDOW):
        raise ShapeError(f"bilateral_aggregate: domain kernel must be (3,3,3), got {domain_k.shape}")
    hp, wp = noisy_p.shape[0], noisy_p.shape[1]
    h, w = hp - 2, wp - 2

    if mode == "difference":
        rw_center = ad.reshape(ad.crop(range_w, ((1, 1 + h), (1, 1 + w), (1, 2))), (h, w))

    num = None
    den = None
    for dy in range(WINDOW):
        for dx in range(WINDOW):
            for dz in range(WINDOW):
                rw = ad.reshape(
                    ad.crop(range_w, ((dy, dy + h), (dx, dx + w), (dz, dz + 1))), (h, w)
                )
                if mode == "difference":
                    d = ad.sub(rw_center, rw)
                    rw = ad.exp(ad.scale(ad.square(d), -diff_scale))
                wgt = ad.mul(rw, ad.index_scalar(domain_k, (dy, dx, dz)))
                nz = ad.reshape(
                    ad.crop(noisy_p, ((dy, dy + h), (dx, dx + w), (dz, dz + 1))), (h, w)
                )
                term = ad.mul(nz, wgt)
                num = term if num is None else ad.add(num, term)
                den = wgt if den is None else ad.add(den, wgt)
    return ad.relu(ad.div_guarded(num, den, eps))


def mix_noise_map(filtered, center_in, leaves, prefix, mode="pixelwise"):
    """Mix a learned fraction of the noise map back into the filtered slice.

    NM = center_in - filtered; coefficients are sigmoid-bounded to (0, 1).
    """
    if filtered.shape != center_in.shape:
        raise ShapeError(
            f"mix_noise_map: filtered {filtered.shape} != center {center_in.shape}"
        )
    if mode == "off":
        return filtered
    nm = ad.sub(center_in, filtered)
    if mode == "pixelwise":
        h, w = nm.shape
        nm3 = ad.reshape(nm, (1, h, w))
        conv = ad.conv2d(nm3, leaves[f"{prefix}.w"], leaves[f"{prefix}.b"], pad=1)
        coeff = ad.sigmoid(ad.reshape(conv, (h, w)))
    elif mode == "single":
        coeff = ad.sigmoid(ad.reshape(leaves[f"{prefix}.w"], ()))
    else:
        raise ValueError(f"mix_noise_map: unknown mode {mode!r}")
    return ad.add(filtered, ad.mul(coeff, nm))


def _gaussian_1d(sigma, radius=None):
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _smooth_volume(data, sigma):
    """Separable Gaussian smoothing with edge-clamped normalization."""
    out = data.astype(np.float64)
    for axis in range(3):
        k = _gaussian_1d(sigma)
        r = len(k) // 2
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def classic_gaussian_jbf(noisy, sigma_s=1.5, sigma_r=30.0, guidance_sigma=1.0):
    """Classic joint bilateral filter over a whole volume, 3x3x3 window.

    Guidance is a Gaussian-smoothed copy of the noisy volume. Out-of-volume
    neighbors are excluded (zero weight), so borders stay normalized.
    """
    if sigma_s <= 0 or sigma_r <= 0:
        raise ValueError("classic_gaussian_jbf: sigmas must be > 0")
    from .volume_io import Volume

    data = noisy.data.astype(np.float64)
    guide = _smooth_volume(data, guidance_sigma)
    nz, ny, nx = data.shape
    num = np.zeros_like(data)
    den = np.zeros_like(data)
    inv2ss = 1.0 / (2.0 * sigma_s * sigma_s)
    inv2sr = 1.0 / (2.0 * sigma_r * sigma_r)
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                sw = math.exp(-(dz * dz + dy * dy + dx * dx) * inv2ss)
                zs = slice(max(0, dz), nz + min(0, dz))
                ys = slice(max(0, dy), ny + min(0, dy))
                xs = slice(max(0, dx), nx + min(0, dx))
                zd = slice(max(0, -dz), nz + min(0, -dz))
                yd = slice(max(0, -dy), ny + min(0, -dy))
                xd = slice(max(0, -dx), nx + min(0, -dx))
                gdiff = guide[zd, yd, xd] - guide[zs, ys, xs]
                wgt = sw * np.exp(-(gdiff * gdiff) * inv2sr)
                num[zd, yd, xd] += wgt * data[zs, ys, xs]
                den[zd, yd, xd] += wgt
    out = num / den
    return Volume(nx=nx, ny=ny, nz=nz, spacing=noisy.spacing, data=out.astype(np.float32))
