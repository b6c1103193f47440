"""Guidance-image estimator: hybrid 3D/2D encoder-decoder.

Four 3D conv layers (3x3x3, depth-valid, spatially same-padded) shrink a
15-slice slab to 7 slices; four 2D layers (3x3, same-padded, shared across
the 7 slices) decode to a single-channel guidance stack. Leaky ReLU follows
every layer including the last.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LEAKY_SLOPE = 0.01

# (name, c_in, c_out) per stage; conv* are 3x3x3, deconv* are 3x3
CONV3D_LAYERS = [
    ("prior.conv1", 1, 32),
    ("prior.conv2", 32, 32),
    ("prior.conv3", 32, 32),
    ("prior.conv4", 32, 32),
]
CONV2D_LAYERS = [
    ("prior.deconv1", 32, 32),
    ("prior.deconv2", 32, 32),
    ("prior.deconv3", 32, 32),
    ("prior.deconv4", 32, 1),
]

# 896 + 3*27680 + 3*9248 + 289
PRIOR_PARAM_COUNT = 111_969

DEPTH_IN = 15
DEPTH_OUT = 7


def prior_param_shapes():
    shapes = {}
    for name, ci, co in CONV3D_LAYERS:
        shapes[f"{name}.w"] = (co, ci, 3, 3, 3)
        shapes[f"{name}.b"] = (co,)
    for name, ci, co in CONV2D_LAYERS:
        shapes[f"{name}.w"] = (co, ci, 3, 3)
        shapes[f"{name}.b"] = (co,)
    return shapes


def init_prior(seed):
    """Fan-in-scaled uniform init; deterministic per seed; |values| <= 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in prior_param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            lim = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(np.float32)
    total = sum(a.size for a in params.values())
    assert total == PRIOR_PARAM_COUNT, total
    return params


def prior_forward(slab, leaves):
    """Map a (h, w, 15) slab tensor to the (h, w, 7) guidance tensor."""
    if slab.data.ndim != 3 or slab.shape[2] != DEPTH_IN:
        raise ShapeError(f"prior_forward: slab must be (h, w, {DEPTH_IN}), got {slab.shape}")
    h, w = slab.shape[0], slab.shape[1]
    if h < 16 or w < 16:
        raise ShapeError(f"prior_forward: spatial extents must be >= 16, got {h}x{w}")

    x = ad.reshape(ad.transpose(slab, (2, 0, 1)), (1, DEPTH_IN, h, w))
    for name, ci, co in CONV3D_LAYERS:
        x = ad.conv3d(x, leaves[f"{name}.w"], leaves[f"{name}.b"], pad=(0, 1, 1))
        x = ad.leaky_relu(x, LEAKY_SLOPE)
    # x: (32, 7, h, w); 2D stage shares weights across the 7 depth slices,
    # which is a depth-1-kernel 3D conv
    for name, ci, co in CONV2D_LAYERS:
        w5 = ad.reshape(leaves[f"{name}.w"], (co, ci, 1, 3, 3))
        x = ad.conv3d(x, w5, leaves[f"{name}.b"], pad=(0, 1, 1))
        x = ad.leaky_relu(x, LEAKY_SLOPE)
    # (1, 7, h, w) -> (h, w, 7)
    return ad.transpose(ad.reshape(x, (DEPTH_OUT, h, w)), (1, 2, 0))
