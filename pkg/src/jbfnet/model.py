"""Full model assembly: prior + four sequential JBF blocks with noise-map
mixing, plus tiled whole-volume inference and ablation wiring."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import blocks as bk
from . import prior as pr
from .autodiff import ShapeError, Tensor
from .volume_io import Volume

N_BLOCKS = 4

RANGE_MODES = ("response", "difference")
MIXING_MODES = ("pixelwise", "single", "off")
ABLATIONS = ("none", "frozen-prior", "no-pretrain", "no-nm", "single-nm", "gaussian")

# slab geometry: depth indices of the central 3 and central 7 slices
CENTER3 = (6, 9)
CENTER7 = (4, 11)
CENTER = 7


@dataclass(frozen=True)
class ModelConfig:
    range_mode: str = "response"
    mixing_mode: str = "pixelwise"
    ablation: str = "none"
    gaussian_sigma_s: float = 1.5
    gaussian_sigma_r: float = 30.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.range_mode not in RANGE_MODES:
            raise ValueError(f"unknown range mode {self.range_mode!r}")
        if self.mixing_mode not in MIXING_MODES:
            raise ValueError(f"unknown mixing mode {self.mixing_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    @property
    def gaussian_kernels(self):
        return self.ablation == "gaussian"


@dataclass
class ForwardOutputs:
    """Guidance (h, w, 7) plus the four block outputs (h, w) each."""

    guidance: Tensor
    block_outputs: list


def config_for_ablation(flag, range_mode="response"):
    """Translate an ablation flag into a model configuration."""
    if flag in (None, "", "none"):
        return ModelConfig(range_mode=range_mode)
    if flag == "no-nm":
        return ModelConfig(range_mode=range_mode, mixing_mode="off", ablation="no-nm")
    if flag == "single-nm":
        return ModelConfig(range_mode=range_mode, mixing_mode="single", ablation="single-nm")
    if flag in ("frozen-prior", "no-pretrain"):
        return ModelConfig(range_mode=range_mode, ablation=flag)
    if flag == "gaussian":
        return ModelConfig(range_mode=range_mode, ablation="gaussian")
    raise ValueError(f"unknown ablation flag {flag!r}")


class ModelParams:
    """Named parameter arrays plus the mode flags that shape the graph."""

    def __init__(self, arrays, config):
        self.arrays = dict(arrays)
        self.config = config
        self.validate()

    @classmethod
    def init(cls, seed, config=None):
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        arrays = pr.init_prior(int(rng.integers(2**63)))
        for k in range(1, N_BLOCKS + 1):
            if not config.gaussian_kernels:
                arrays.update(bk.init_filter_net(rng, f"block{k}.f"))
                arrays.update(bk.init_filter_net(rng, f"block{k}.g"))
            arrays.update(bk.init_mix(rng, f"block{k}.mix", config.mixing_mode))
        return cls(arrays, config)

    def validate(self):
        expected = self.expected_names(self.config)
        got = set(self.arrays)
        missing = expected - got
        extra = got - expected
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:4]}")
        if extra:
            raise ValueError(f"unexpected parameters: {sorted(extra)[:4]}")
        if not self.config.gaussian_kernels:
            for k in range(1, N_BLOCKS + 1):
                n = sum(
                    self.arrays[name].size
                    for name in self.arrays
                    if name.startswith((f"block{k}.f.", f"block{k}.g."))
                )
                if n != bk.BLOCK_FILTER_PARAM_COUNT:
                    raise ValueError(
                        f"block {k} filter nets have {n} values, expected {bk.BLOCK_FILTER_PARAM_COUNT}"
                    )
        for name, arr in self.arrays.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} contains non-finite values")

    @staticmethod
    def expected_names(config):
        names = set(pr.prior_param_shapes())
        for k in range(1, N_BLOCKS + 1):
            if not config.gaussian_kernels:
                names.update(bk.filter_net_param_shapes(f"block{k}.f"))
                names.update(bk.filter_net_param_shapes(f"block{k}.g"))
            if config.mixing_mode == "pixelwise":
                names.update({f"block{k}.mix.w", f"block{k}.mix.b"})
            elif config.mixing_mode == "single":
                names.add(f"block{k}.mix.w")
        return names

    def trainable_names(self, phase):
        """Phase 1 trains the prior only; phase 2 honors the freeze mask."""
        if phase == 1:
            return [n for n in self.arrays if n.startswith("prior.")]
        names = []
        for n in self.arrays:
            if n.startswith("prior.") and self.config.ablation == "frozen-prior":
                continue
            names.append(n)
        return names

    def leaves(self, trainable=(), dtype=np.float32):
        trainable = set(trainable)
        return {
            name: Tensor(arr.astype(dtype, copy=True), requires_grad=name in trainable)
            for name, arr in self.arrays.items()
        }

    def param_count(self):
        return sum(a.size for a in self.arrays.values())


def apply_ablation(params, flag):
    """Return params reconfigured for an ablation flag; trained arrays that
    still apply are kept, newly needed ones are freshly initialized."""
    config = config_for_ablation(flag, range_mode=params.config.range_mode)
    rng = np.random.default_rng(0)
    arrays = {n: a.copy() for n, a in params.arrays.items() if n.startswith("prior.")}
    for k in range(1, N_BLOCKS + 1):
        if not config.gaussian_kernels:
            for net in ("f", "g"):
                prefix = f"block{k}.{net}"
                old = {n: params.arrays[n].copy() for n in bk.filter_net_param_shapes(prefix) if n in params.arrays}
                arrays.update(old if old else bk.init_filter_net(rng, prefix))
        prefix = f"block{k}.mix"
        if config.mixing_mode == params.config.mixing_mode:
            arrays.update({n: params.arrays[n].copy() for n in params.arrays if n.startswith(prefix)})
        else:
            arrays.update(bk.init_mix(rng, prefix, config.mixing_mode))
    return ModelParams(arrays, config)


def forward(slab, leaves, config):
    """Run the full model on one (h, w, 15) slab.

    Shape pipeline per block: guidance (h, w, 7) -> zero-padded (h+6, w+6, 7)
    -> range weights (h+2, w+2, 3); noisy central 3 slices (h, w, 3) ->
    zero-padded (h+2, w+2, 3) -> filtered slice (h, w).
    """
    if not isinstance(slab, Tensor):
        slab = Tensor(np.asarray(slab))
    if slab.data.ndim != 3 or slab.shape[2] != pr.DEPTH_IN:
        raise ShapeError(f"forward: slab must be (h, w, 15), got {slab.shape}")
    h, w = slab.shape[0], slab.shape[1]

    guidance = pr.prior_forward(slab, leaves)
    igp = ad.pad_zero(guidance, ((3, 3), (3, 3), (0, 0)))

    slice_lo = ad.reshape(ad.crop(slab, ((0, h), (0, w), (6, 7))), (h, w))
    slice_hi = ad.reshape(ad.crop(slab, ((0, h), (0, w), (8, 9))), (h, w))

    if config.gaussian_kernels:
        gauss_dk = Tensor(bk.gaussian_domain_kernel(config.gaussian_sigma_s, slab.dtype))
        diff_scale = 1.0 / (2.0 * config.gaussian_sigma_r**2)
    else:
        dist = Tensor(bk.distance_matrix().astype(slab.dtype))

    outputs = []
    prev = None
    for k in range(1, N_BLOCKS + 1):
        if config.gaussian_kernels:
            domain_k = gauss_dk
            range_field = ad.crop(igp, ((2, h + 4), (2, w + 4), (2, 5)))
            mode, scale = "difference", diff_scale
        else:
            range_field = bk.range_features(igp, leaves, f"block{k}.f")
            domain_k = bk.domain_kernel(dist, leaves, f"block{k}.g")
            mode, scale = config.range_mode, 1.0
        if k == 1:
            in3 = ad.crop(slab, ((0, h), (0, w), CENTER3))
        else:
            in3 = ad.stack_slices([slice_lo, prev, slice_hi], axis=2)
        noisy_p = ad.pad_zero(in3, ((1, 1), (1, 1), (0, 0)))
        filtered = bk.bilateral_aggregate(
            noisy_p, range_field, domain_k, eps=config.eps, mode=mode, diff_scale=scale
        )
        center_in = ad.reshape(ad.crop(in3, ((0, h), (0, w), (1, 2))), (h, w))
        out_k = bk.mix_noise_map(filtered, center_in, leaves, f"block{k}.mix", config.mixing_mode)
        outputs.append(out_k)
        prev = out_k
    return ForwardOutputs(guidance=guidance, block_outputs=outputs)


def _reflect_index(i, n):
    """Mirror-without-repeat boundary indexing."""
    if n == 1:
        return 0
    period = 2 * n - 2
    i = abs(i) % period
    return period - i if i >= n else i


def _tile_starts(extent, tile, stride):
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, stride))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)
    return starts


def denoise_volume(noisy, params, tile=256, progress=None):
    """Tiled whole-volume inference; overlaps are uniformly averaged.

    Each output slice z gets a 15-slice depth context, reflect-padded at the
    volume ends; in-plane tiles of extent min(tile, volume) slide with
    stride tile // 2.
    """
    if noisy.nx < 64 or noisy.ny < 64:
        raise ShapeError(
            f"denoise_volume: spatial extents must be >= 64, got {noisy.nx}x{noisy.ny}"
        )
    if noisy.nz < pr.DEPTH_IN:
        raise ShapeError(
            f"denoise_volume: volume must have >= {pr.DEPTH_IN} slices, got {noisy.nz}"
        )
    leaves = params.leaves(trainable=())
    config = params.config
    data = noisy.data
    nz, ny, nx = data.shape
    ty, tx = min(tile, ny), min(tile, nx)
    ys = _tile_starts(ny, ty, max(1, ty // 2))
    xs = _tile_starts(nx, tx, max(1, tx // 2))
    half = pr.DEPTH_IN // 2

    out_sum = np.zeros((nz, ny, nx), dtype=np.float64)
    out_cnt = np.zeros((nz, ny, nx), dtype=np.int32)
    for z in range(nz):
        ctx_idx = [_reflect_index(z + dz, nz) for dz in range(-half, half + 1)]
        context = data[ctx_idx]  # (15, ny, nx)
        for y0 in ys:
            for x0 in xs:
                sub = context[:, y0 : y0 + ty, x0 : x0 + tx]
                slab = Tensor(np.ascontiguousarray(sub.transpose(1, 2, 0)))
                outs = forward(slab, leaves, config)
                out_sum[z, y0 : y0 + ty, x0 : x0 + tx] += outs.block_outputs[-1].data
                out_cnt[z, y0 : y0 + ty, x0 : x0 + tx] += 1
        if progress is not None:
            progress(z + 1, nz)
    if (out_cnt == 0).any():
        raise RuntimeError("denoise_volume: tiling left uncovered voxels")
    result = (out_sum / out_cnt).astype(np.float32)
    return Volume(nx=nx, ny=ny, nz=nz, spacing=noisy.spacing, data=result)
