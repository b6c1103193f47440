"""MSE loss, Sobel edge-filtration loss, and the phase-scheduled composite.

The edge loss applies the three axis-aligned 3x3x3 Sobel operators
(smoothing [1,2,1] x [1,2,1] times derivative [-1,0,1]) with valid extent.
Since a block emits a single 2D slice, the predicted slice is sandwiched
between its reference neighbor slices before filtering, mirroring how the
model itself re-pads between blocks.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

EDGE_WEIGHT = 0.1

PHASE1_WEIGHTS = (0.0, 1.0, 0.0)
PHASE2_WEIGHTS = (1.0, 0.1, 0.1)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float

    @classmethod
    def for_phase(cls, phase):
        if phase == 1:
            return cls(*PHASE1_WEIGHTS)
        if phase == 2:
            return cls(*PHASE2_WEIGHTS)
        raise ValueError(f"unknown training phase {phase}")


def _sobel_kernel_stack(dtype):
    """(3, 1, 3, 3, 3) kernel bank: derivative along z, y, x respectively."""
    d = np.array([-1.0, 0.0, 1.0])
    s = np.array([1.0, 2.0, 1.0])
    bank = np.empty((3, 1, 3, 3, 3), dtype=dtype)
    bank[0, 0] = np.einsum("i,j,k->ijk", d, s, s)
    bank[1, 0] = np.einsum("i,j,k->ijk", s, d, s)
    bank[2, 0] = np.einsum("i,j,k->ijk", s, s, d)
    return bank


def mse_loss(a, b):
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes differ: {a.shape} vs {b.shape}")
    return ad.tmean(ad.square(ad.sub(a, b)))


def _sobel_response(stack):
    """(h, w, 3) stack -> (3, h-2, w-2) gradient components, valid extent."""
    h, w = stack.shape[0], stack.shape[1]
    t = ad.reshape(ad.transpose(stack, (2, 0, 1)), (1, 3, h, w))
    bank = Tensor(_sobel_kernel_stack(stack.dtype))
    out = ad.conv3d(t, bank, pad=0)
    return ad.reshape(out, (3, h - 2, w - 2))


def edge_loss(pred_slice, ref_stack):
    """Mean squared Sobel-response difference between prediction and reference.

    pred_slice: (h, w) tensor; ref_stack: (h, w, 3) ndarray carrying the
    reference center slice between its two reference neighbors.
    """
    ref_stack = np.asarray(ref_stack, dtype=pred_slice.dtype)
    if ref_stack.ndim != 3 or ref_stack.shape[2] != 3:
        raise ShapeError(f"edge_loss: ref_stack must be (h, w, 3), got {ref_stack.shape}")
    if pred_slice.shape != ref_stack.shape[:2]:
        raise ShapeError(
            f"edge_loss: pred slice {pred_slice.shape} does not match reference {ref_stack.shape[:2]}"
        )
    below = Tensor(ref_stack[:, :, 0])
    above = Tensor(ref_stack[:, :, 2])
    pred_stack = ad.stack_slices([below, pred_slice, above], axis=2)
    pred_resp = _sobel_response(pred_stack)
    ref_resp = _sobel_response(Tensor(ref_stack))
    return ad.tmean(ad.square(ad.sub(pred_resp, ref_resp)))


def composite_loss(outputs, ref7, weights):
    """Weighted sum over guidance and block-output terms.

    outputs: ForwardOutputs (guidance (h,w,7) + four (h,w) block outputs);
    ref7: (h, w, 7) reference ndarray; weights: LossWeights or 3-tuple.
    Terms with zero weight are skipped entirely.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    ref7 = np.asarray(ref7, dtype=outputs.guidance.dtype)
    if ref7.ndim != 3 or ref7.shape[2] != 7:
        raise ShapeError(f"composite_loss: reference must be (h, w, 7), got {ref7.shape}")
    center = Tensor(np.ascontiguousarray(ref7[:, :, 3]))
    nstack = np.ascontiguousarray(ref7[:, :, 2:5])

    def filter_term(pred):
        return ad.add(
            mse_loss(pred, center), ad.scale(edge_loss(pred, nstack), EDGE_WEIGHT)
        )

    total = None

    def acc(term, lam):
        nonlocal total
        scaled = ad.scale(term, lam)
        total = scaled if total is None else ad.add(total, scaled)

    if weights.lambda1 != 0.0:
        acc(filter_term(outputs.block_outputs[3]), weights.lambda1)
    if weights.lambda2 != 0.0:
        acc(mse_loss(outputs.guidance, Tensor(ref7)), weights.lambda2)
    if weights.lambda3 != 0.0:
        inner = None
        for pred in outputs.block_outputs[:3]:
            t = filter_term(pred)
            inner = t if inner is None else ad.add(inner, t)
        acc(inner, weights.lambda3)
    if total is None:
        raise ValueError("composite_loss: all weights zero")
    return total
