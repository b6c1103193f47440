"""Full-model gradient verification against central finite differences.

Checking ~112k parameters with two loss evaluations each is only tractable
with aggressive reuse, so the harness stages the forward pass:

- all stage pre-activations/activations are cached once;
- perturbing one parameter of stage L re-evaluates stage L locally (the
  perturbed pre-activation is the cached one plus a shifted copy of the
  stage input, exactly), feeds the delta through stage L+1 restricted to the
  one affected channel (convolution is linear in its input, so this is
  exact), and only then runs the remaining stages densely;
- perturbations are processed in batches so the tail work runs as a few
  cache-resident GEMMs instead of per-parameter python;
- the prior tails are independent of range/mixing modes, so one pass over
  the prior parameters serves every requested mode, and modes with
  identical loss semantics share the loss evaluations outright.

The check runs at a kink-free point: parameters with positive margins on a
strictly positive slab keep every pre-activation away from its activation
kink, where central differences measure the true derivative (the negative
branches are exercised by the operator-level checks, which place values on
either side of the kink explicitly).

Everything here evaluates the same arithmetic as the tape forward (asserted
at setup); the finite differences themselves never touch the tape's
backward rules, which is the point of the check.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import blocks as bk
from .autodiff import Tensor, backward
from .losses import LossWeights, composite_loss
from .model import CENTER3, CENTER7, ModelConfig, ModelParams, forward
from .phantom import PhantomSpec, generate_phantom, simulate_low_dose
from .prior import CONV2D_LAYERS, CONV3D_LAYERS

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4
LEAKY = 0.01


def _leaky(x):
    # max(x, 0.01 x) == leaky relu for slopes < 1, with no boolean temp
    return np.maximum(x, LEAKY * x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# channel-first grid pipeline for the batched conv tails
#
# A "grid" is (ci, B*d*hp*wp + guard) float64 with each batch block holding a
# (d, hp, wp) spatially padded plane stack whose valid content sits at
# [1:1+h, 1:1+w] with zero gutters. Constant per-block strides make a kernel
# tap a constant flat offset, so a conv is 27 GEMMs on strided views.

class _Grid:
    __slots__ = ("buf", "ci", "B", "d", "h", "w", "hp", "wp", "blk")

    def __init__(self, ci, B, d, h, w, dtype=np.float64):
        self.ci, self.B, self.d, self.h, self.w = ci, B, d, h, w
        self.hp, self.wp = h + 2, w + 2
        self.blk = d * self.hp * self.wp
        guard = 2 * self.hp * self.wp + 2 * self.wp + 2
        self.buf = np.zeros((ci, B * self.blk + guard), dtype=dtype)

    def valid(self):
        g = self.buf[:, : self.B * self.blk].reshape(self.ci, self.B, self.d, self.hp, self.wp)
        return g[:, :, :, 1 : 1 + self.h, 1 : 1 + self.w]

    def fill(self, act_cf):
        """act_cf: (ci, B, d, h, w) dense activations."""
        self.valid()[:] = act_cf


def _stage_gemm(grid, wk, kd):
    """All-taps GEMM; returns raw flat (co, B*blk) on the input grid coords."""
    ci = grid.ci
    co = wk.shape[0]
    n = grid.B * grid.blk
    out = np.empty((co, n), dtype=grid.buf.dtype)
    tmp = np.empty((co, n), dtype=grid.buf.dtype)
    sz = grid.hp * grid.wp
    first = True
    for dz in range(kd):
        for dy in range(3):
            for dx in range(3):
                off = dz * sz + dy * grid.wp + dx
                wt = np.ascontiguousarray(wk[:, :, dz, dy, dx])
                v = grid.buf[:, off : off + n]
                if first:
                    np.matmul(wt, v, out=out)
                    first = False
                else:
                    np.matmul(wt, v, out=tmp)
                    out += tmp
    return out


def _advance(raw, grid, bias, kd, extra=None):
    """raw (co, B*blk) -> next grid with leaky(raw_valid + bias [+ extra]).

    extra, if given, broadcasts against the dense valid block (co, B, do, h, w).
    """
    co = raw.shape[0]
    do = grid.d - kd + 1
    og = raw.reshape(co, grid.B, grid.d, grid.hp, grid.wp)[:, :, :do, : grid.h, : grid.w]
    nxt = _Grid(co, grid.B, do, grid.h, grid.w, dtype=grid.buf.dtype)
    t = og + bias[:, None, None, None, None]
    if extra is not None:
        t += extra
    np.maximum(t, LEAKY * t, out=nxt.valid())
    return nxt


# ---------------------------------------------------------------------------
# batched block-stage loss with cached mode-independent pieces

class BlockLossEval:
    """Evaluates the phase-2 composite loss for batches of guidance stacks.

    One instance per loss-equivalent mode group; kernels derived from block
    parameters are cached unless cache_kernels=False (used when the block
    parameters themselves are being perturbed).
    """

    def __init__(self, arrays, config, slab, ref7, weights, cache_kernels=True):
        self.arrays = arrays
        self.config = config
        self.weights = weights if isinstance(weights, LossWeights) else LossWeights(*weights)
        self.slab = slab
        self.ref7 = ref7
        self.h, self.w = slab.shape[0], slab.shape[1]
        self.center_ref = np.ascontiguousarray(ref7[:, :, 3])
        self.nstack = np.ascontiguousarray(ref7[:, :, 2:5])
        self.ref_sob = self._sobel(self.nstack[None])[0]
        self.in3_first = np.ascontiguousarray(slab[:, :, CENTER3[0] : CENTER3[1]])[None]
        self.lo = slab[:, :, 6]
        self.hi = slab[:, :, 8]
        self.cache_kernels = cache_kernels
        self._dk = {}
        if config.gaussian_kernels:
            self.gauss_dk = bk.gaussian_domain_kernel(config.gaussian_sigma_s, np.float64)
            self.diff_scale = 1.0 / (2.0 * config.gaussian_sigma_r**2)
        else:
            self.dist = bk.distance_matrix().astype(np.float64)

    @staticmethod
    def _sobel(stack):
        """(B, h, w, 3) -> (B, 3, h-2, w-2)."""
        d = np.array([-1.0, 0.0, 1.0])
        s = np.array([1.0, 2.0, 1.0])
        bank = np.stack(
            [
                np.einsum("i,j,k->ijk", d, s, s),
                np.einsum("i,j,k->ijk", s, d, s),
                np.einsum("i,j,k->ijk", s, s, d),
            ]
        )  # (3, dz, dy, dx)
        bank_t = bank.transpose(0, 2, 3, 1)  # (a, dy, dx, dz)
        win = sliding_window_view(stack, (3, 3, 3), axis=(1, 2, 3))[:, :, :, 0]
        return np.einsum("byxuvt,auvt->bayx", win, bank_t, optimize=True)

    def _valid_netpair(self, x, prefix, arrays):
        """Two valid single-filter 3x3x3 convs with ReLU; x (B, H, W, D)."""
        for layer in ("l1", "l2"):
            wt = arrays[f"{prefix}.{layer}.w"][0, 0].transpose(1, 2, 0)  # (dy, dx, dz)
            bb = arrays[f"{prefix}.{layer}.b"][0]
            win = sliding_window_view(x, (3, 3, 3), axis=(1, 2, 3))
            x = np.einsum("byxzuvt,uvt->byxz", win, wt, optimize=True) + bb
            np.maximum(x, 0.0, out=x)
        return x

    def _domain_kernel(self, k, arrays):
        if self.config.gaussian_kernels:
            return self.gauss_dk
        if self.cache_kernels and k in self._dk:
            return self._dk[k]
        dk = self._valid_netpair(self.dist[None], f"block{k}.g", arrays)[0]
        if self.cache_kernels:
            self._dk[k] = dk
        return dk

    def losses(self, gb):
        """gb: (B, h, w, 7) guidance batch -> (B,) composite losses."""
        B = gb.shape[0]
        h, w = self.h, self.w
        weights = self.weights
        arrays = self.arrays
        igp = np.pad(gb, ((0, 0), (3, 3), (3, 3), (0, 0)))
        total = np.zeros(B, dtype=gb.dtype)
        prev = None
        for k in range(1, 5):
            if self.config.gaussian_kernels:
                rf = igp[:, 2 : h + 4, 2 : w + 4, 2:5]
                mode, scale = "difference", self.diff_scale
            else:
                rf = self._valid_netpair(igp, f"block{k}.f", arrays)
                mode, scale = self.config.range_mode, 1.0
            dk = self._domain_kernel(k, arrays)
            if k == 1:
                in3 = self.in3_first
            else:
                in3 = np.stack(
                    [np.broadcast_to(self.lo, (B, h, w)), prev,
                     np.broadcast_to(self.hi, (B, h, w))],
                    axis=3,
                )
            filt = self._aggregate(in3, rf, dk, mode, scale)
            center_in = in3[..., 1]
            out = self._mix(filt, center_in, k, arrays)
            if k == 4 and weights.lambda1 != 0.0:
                total += weights.lambda1 * self._filter_term(out)
            elif k < 4 and weights.lambda3 != 0.0:
                total += weights.lambda3 * self._filter_term(out)
            prev = np.broadcast_to(out, (B, h, w))
        if weights.lambda2 != 0.0:
            d = gb - self.ref7[None]
            total += weights.lambda2 * np.mean(d * d, axis=(1, 2, 3))
        return total

    def _aggregate(self, in3, rf, dk, mode, scale):
        h, w = self.h, self.w
        noisy_p = np.pad(in3, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # window dims come out (dy, dx, dz), matching dk's indexing
        win_n = sliding_window_view(noisy_p, (3, 3, 3), axis=(1, 2, 3))[:, :, :, 0]
        win_r = sliding_window_view(rf, (3, 3, 3), axis=(1, 2, 3))[:, :, :, 0]
        dk_win = dk[None, None, None]
        if mode == "difference":
            rc = rf[:, 1 : 1 + h, 1 : 1 + w, 1]
            wgt = np.exp((win_r - rc[..., None, None, None]) ** 2 * (-scale)) * dk_win
        else:
            wgt = win_r * dk_win
        den = wgt.sum(axis=(3, 4, 5))
        num = np.einsum(
            "byxuvt,byxuvt->byx", np.broadcast_to(win_n, wgt.shape), wgt, optimize=True
        )
        return np.maximum(num / (den + self.config.eps), 0.0)

    def _mix(self, filt, center_in, k, arrays):
        cfg = self.config
        if cfg.mixing_mode == "off":
            return filt
        nm = center_in - filt
        if cfg.mixing_mode == "pixelwise":
            wk = arrays[f"block{k}.mix.w"].reshape(3, 3)
            bb = arrays[f"block{k}.mix.b"][0]
            nmp = np.pad(nm, ((0, 0), (1, 1), (1, 1)))
            win = sliding_window_view(nmp, (3, 3), axis=(1, 2))
            conv = np.einsum("byxuv,uv->byx", win, wk, optimize=True) + bb
            return filt + _sigmoid(conv) * nm
        return filt + _sigmoid(arrays[f"block{k}.mix.w"].reshape(())[()]) * nm

    def _filter_term(self, pred):
        B = pred.shape[0]
        mse = np.mean((pred - self.center_ref[None]) ** 2, axis=(1, 2))
        ps = np.empty((B, self.h, self.w, 3), dtype=pred.dtype)
        ps[..., 0] = self.nstack[:, :, 0]
        ps[..., 1] = pred
        ps[..., 2] = self.nstack[:, :, 2]
        d = self._sobel(ps) - self.ref_sob[None]
        return mse + 0.1 * np.mean(d * d, axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# staged prior with cached activations

class StagedPrior:
    """Float64 staged forward through the prior with per-stage caches."""

    def __init__(self, arrays, slab):
        self.stages = []
        for name, ci, co in CONV3D_LAYERS:
            self.stages.append((arrays[f"{name}.w"], arrays[f"{name}.b"], 3))
        for name, ci, co in CONV2D_LAYERS:
            w = arrays[f"{name}.w"]
            self.stages.append(
                (w.reshape(w.shape[0], w.shape[1], 1, 3, 3), arrays[f"{name}.b"], 1)
            )
        h, w = slab.shape[0], slab.shape[1]
        self.h, self.w = h, w
        x = np.ascontiguousarray(slab.transpose(2, 0, 1)).reshape(1, 15, h, w)
        self.inputs = [x]  # (ci, d, h, w) per stage
        self.pre = []
        self.act = []
        cur = x
        for wk, bs, kd in self.stages:
            g = _Grid(cur.shape[0], 1, cur.shape[1], h, w)
            g.fill(cur[:, None])
            raw = _stage_gemm(g, wk, kd)
            do = cur.shape[1] - kd + 1
            pre = np.ascontiguousarray(
                raw.reshape(-1, 1, cur.shape[1], g.hp, g.wp)[:, 0, :do, :h, :w]
            )
            pre += bs[:, None, None, None]
            act = _leaky(pre)
            self.pre.append(pre)
            self.act.append(act)
            self.inputs.append(act)
            cur = act
        self.guidance = np.ascontiguousarray(self.act[-1][0].transpose(1, 2, 0))

    def n_stages(self):
        return len(self.stages)

    def _finish(self, grid):
        """Terminal grid (1, B, 7, hp, wp) -> guidance batch (B, h, w, 7)."""
        v = grid.valid()[0]  # (B, 7, h, w)
        return np.ascontiguousarray(v.transpose(0, 2, 3, 1))

    def tail_from(self, stage_idx, grid):
        """Run stages after stage_idx on a batched channel-first grid."""
        for m in range(stage_idx + 1, len(self.stages)):
            wk, bs, kd = self.stages[m]
            raw = _stage_gemm(grid, wk, kd)
            grid = _advance(raw, grid, bs, kd)
        return self._finish(grid)

    def tail_with_sparse_step(self, stage_idx, chan, act_chan_batch):
        """Perturbed activations differ from the cache only in channel
        `chan` of stage `stage_idx`; the next stage goes through the exact
        single-channel delta path."""
        B = act_chan_batch.shape[0]
        if stage_idx == len(self.stages) - 1:
            # low-effort path: final stage has a single channel
            out = act_chan_batch  # (B, 7, h, w)
            return np.ascontiguousarray(out.transpose(0, 2, 3, 1))
        delta = act_chan_batch - self.act[stage_idx][chan][None]
        wk, bs, kd = self.stages[stage_idx + 1]
        dg = _Grid(1, B, delta.shape[1], self.h, self.w)
        dg.fill(delta[None])
        # K = kd*9 GEMM against the kernel column for this channel
        n = B * dg.blk
        taps = kd * 9
        rows = np.empty((taps, n), dtype=np.float64)
        sz = dg.hp * dg.wp
        t = 0
        for dz in range(kd):
            for dy in range(3):
                for dx in range(3):
                    off = dz * sz + dy * dg.wp + dx
                    np.copyto(rows[t], dg.buf[0, off : off + n])
                    t += 1
        wmat = np.ascontiguousarray(wk[:, chan].reshape(-1, taps))
        raw = wmat @ rows
        extra = self.pre[stage_idx + 1][:, None]  # broadcast over batch
        grid = _advance(raw, dg, np.zeros(raw.shape[0]), kd, extra=extra)
        return self.tail_from(stage_idx + 1, grid)


# ---------------------------------------------------------------------------
# the driver

@dataclass
class ModeReport:
    label: str
    config: ModelConfig
    n_params: int = 0
    max_rel_err: float = 0.0
    worst: list = field(default_factory=list)
    n_guarded: int = 0
    loss: float = 0.0
    elapsed: float = 0.0

    @property
    def passed(self):
        return self.max_rel_err < DEFAULT_TOL

    def record(self, name, idx, analytic, numeric, floor):
        denom = max(abs(analytic), abs(numeric))
        if denom < floor:
            self.n_guarded += 1
            return
        rel = abs(analytic - numeric) / denom
        if rel > self.max_rel_err:
            self.max_rel_err = rel
        if len(self.worst) < 5 or rel > self.worst[-1][0]:
            self.worst.append((rel, name, idx))
            self.worst.sort(key=lambda t: -t[0])
            del self.worst[5:]


def make_check_problem(size=16, seed=0):
    """Deterministic slab + reference pair for gradient checking.

    Values are shifted to a strictly positive O(1) range: together with the
    positive-margin parameters below this keeps every pre-activation away
    from its kink, so central differences measure the true derivative.
    """
    spec = PhantomSpec(seed=seed, nx=max(32, size), ny=max(32, size), nz=16)
    ref_vol = generate_phantom(spec)
    noisy_vol = simulate_low_dose(ref_vol, 0.25, seed=seed + 1)
    y0 = (spec.ny - size) // 2
    x0 = (spec.nx - size) // 2
    slab = noisy_vol.data[0:15, y0 : y0 + size, x0 : x0 + size].transpose(1, 2, 0)
    ref7 = ref_vol.data[CENTER7[0] : CENTER7[1], y0 : y0 + size, x0 : x0 + size].transpose(1, 2, 0)
    slab = (slab.astype(np.float64) + 1100.0) / 1000.0
    ref7 = (ref7.astype(np.float64) + 1100.0) / 1000.0
    return np.ascontiguousarray(slab), np.ascontiguousarray(ref7)


def make_check_params(seed, config):
    """Model parameters whose pre-activations stay strictly positive.

    Prior weights are drawn uniform in (0, 2/fan_in) (mean transfer ~1) with
    +0.05 biases; filter-net weights get positive biases so their ReLUs are
    cleared even on all-padding windows, and slightly larger weights keep
    the normalization denominator away from strong curvature.
    """
    params = ModelParams.init(seed, config)
    rng = np.random.default_rng(seed + 104729)
    for name, arr in params.arrays.items():
        if name.startswith("prior."):
            if name.endswith(".w"):
                fan = int(np.prod(arr.shape[1:]))
                params.arrays[name] = rng.uniform(0.0, 2.0 / fan, size=arr.shape).astype(np.float32)
            else:
                params.arrays[name] = np.full(arr.shape, 0.05, dtype=np.float32)
        elif ".f.l" in name or ".g.l" in name:
            if name.endswith(".w"):
                params.arrays[name] = rng.uniform(0.05, 0.15, size=arr.shape).astype(np.float32)
            else:
                params.arrays[name] = np.full(arr.shape, 0.02, dtype=np.float32)
    return params


def _analytic_grads(arrays, config, slab, ref7, trainable, weights):
    leaves = {
        name: Tensor(arr.copy(), requires_grad=name in trainable)
        for name, arr in arrays.items()
    }
    outs = forward(Tensor(slab), leaves, config)
    loss = composite_loss(outs, ref7, weights)
    backward(loss)
    grads = {
        n: (leaves[n].grad.copy() if leaves[n].grad is not None else np.zeros_like(arrays[n]))
        for n in trainable
    }
    return float(loss.data), grads


def _loss_key(config):
    return (
        config.range_mode,
        config.mixing_mode,
        config.gaussian_kernels,
        config.gaussian_sigma_s,
        config.gaussian_sigma_r,
        config.eps,
    )


def model_grad_check(mode_configs=None, size=16, seed=0, step=DEFAULT_STEP,
                     tol=DEFAULT_TOL, chunk=12, progress=None, channel_limit=None):
    """Check every trainable parameter of the full model in each mode.

    mode_configs: list of (label, ModelConfig); defaults to the default
    configuration only. channel_limit restricts each prior layer to its
    first N output channels (smoke mode); None checks everything.
    Returns a list of ModeReport.
    """
    if mode_configs is None:
        mode_configs = [("default", ModelConfig())]
    weights = LossWeights.for_phase(2)
    slab, ref7 = make_check_problem(size=size, seed=seed)

    modes = []
    for label, config in mode_configs:
        params = make_check_params(seed, config)
        arrays = {k: v.astype(np.float64) for k, v in params.arrays.items()}
        trainable = set(params.trainable_names(phase=2))
        loss, grads = _analytic_grads(arrays, config, slab, ref7, trainable, weights)
        gmax = max((np.abs(g).max() for g in grads.values()), default=1.0)
        floor = 1e-7 * max(1.0, gmax)
        report = ModeReport(label=label, config=config, loss=loss)
        modes.append(
            {"label": label, "config": config, "arrays": arrays,
             "trainable": trainable, "grads": grads, "floor": floor,
             "report": report,
             "prior_trainable": any(n.startswith("prior.") for n in trainable)}
        )

    # all modes share identical prior arrays (same init seed); the staged
    # cache and every FD tail through the prior are therefore shared
    prior_arrays = modes[0]["arrays"]
    for m in modes[1:]:
        for n in prior_arrays:
            if n.startswith("prior."):
                assert np.array_equal(m["arrays"][n], prior_arrays[n])

    staged = StagedPrior(prior_arrays, slab)

    # group modes whose losses are identical functions of the guidance
    groups = {}
    for m in modes:
        key = _loss_key(m["config"])
        if key not in groups:
            groups[key] = {
                "eval": BlockLossEval(m["arrays"], m["config"], slab, ref7, weights),
                "modes": [],
            }
        else:
            ref_arrays = groups[key]["eval"].arrays
            for n in m["arrays"]:
                assert np.array_equal(m["arrays"][n], ref_arrays[n])
        groups[key]["modes"].append(m)

    # consistency: the staged evaluator computes the same loss as the tape
    for g in groups.values():
        staged_loss = g["eval"].losses(staged.guidance[None])[0]
        for m in g["modes"]:
            if not np.isclose(staged_loss, m["report"].loss, rtol=1e-9, atol=1e-12):
                raise AssertionError(
                    f"staged/tape loss mismatch in mode {m['label']}: "
                    f"{staged_loss!r} vs {m['report'].loss!r}"
                )

    t0 = time.time()
    prior_groups = [
        g for g in groups.values() if any(m["prior_trainable"] for m in g["modes"])
    ]
    if prior_groups:
        _check_prior_params(staged, prior_groups, step, chunk, progress, channel_limit)
    for g in groups.values():
        _check_block_params(staged, g, slab, ref7, weights, step)
    for m in modes:
        m["report"].n_params = sum(m["arrays"][n].size for n in m["trainable"])
        m["report"].elapsed = time.time() - t0
    return [m["report"] for m in modes]


def _stage_names():
    return [name for name, _, _ in CONV3D_LAYERS] + [name for name, _, _ in CONV2D_LAYERS]


def _check_prior_params(staged, groups, step, chunk, progress, channel_limit=None):
    names = _stage_names()
    for si, sname in enumerate(names):
        wk, bs, kd = staged.stages[si]
        co, ci = wk.shape[0], wk.shape[1]
        if channel_limit is not None:
            co = min(co, channel_limit)
        src = staged.inputs[si]  # (ci, d_in, h, w)
        d_in = src.shape[1]
        d_out = d_in - kd + 1
        src_pad = np.pad(src, ((0, 0), (0, 0), (1, 1), (1, 1)))
        pre = staged.pre[si]
        fan = ci * kd * 9
        for o in range(co):
            jobs = [("w", j) for j in range(fan)] + [("b", 0)]
            for c0 in range(0, len(jobs), chunk):
                batch_jobs = jobs[c0 : c0 + chunk]
                B = 2 * len(batch_jobs)
                pert = np.empty((B, d_out, staged.h, staged.w), dtype=np.float64)
                base = pre[o]
                for s, (kind, j) in enumerate(batch_jobs):
                    if kind == "w":
                        i, rem = divmod(j, kd * 9)
                        dz, rem2 = divmod(rem, 9)
                        dy, dx = divmod(rem2, 3)
                        field = src_pad[i, dz : dz + d_out, dy : dy + staged.h, dx : dx + staged.w]
                        np.maximum(base + step * field, LEAKY * (base + step * field), out=pert[2 * s])
                        np.maximum(base - step * field, LEAKY * (base - step * field), out=pert[2 * s + 1])
                    else:
                        hi = base + step
                        lo = base - step
                        np.maximum(hi, LEAKY * hi, out=pert[2 * s])
                        np.maximum(lo, LEAKY * lo, out=pert[2 * s + 1])
                gb = staged.tail_with_sparse_step(si, o, pert)
                for g in groups:
                    losses = g["eval"].losses(gb)
                    for m in g["modes"]:
                        if not m["prior_trainable"]:
                            continue
                        grads = m["grads"]
                        report = m["report"]
                        floor = m["floor"]
                        for s, (kind, j) in enumerate(batch_jobs):
                            fd = (losses[2 * s] - losses[2 * s + 1]) / (2.0 * step)
                            if kind == "w":
                                name = f"{sname}.w"
                                flat = o * fan + j
                            else:
                                name = f"{sname}.b"
                                flat = o
                            ana = grads[name].reshape(-1)[flat]
                            report.record(name, flat, ana, fd, floor)
            if progress is not None:
                progress(sname, o, co)


def _check_block_params(staged, group, slab, ref7, weights, step):
    """Block/mix parameters never influence the guidance, so their FD uses
    the cached unperturbed guidance and only re-runs the block stage."""
    gb = staged.guidance[None]
    arrays = group["eval"].arrays
    config = group["eval"].config
    block_names = sorted(
        n for m in group["modes"] for n in m["trainable"] if not n.startswith("prior.")
    )
    block_names = sorted(set(block_names))
    ev = BlockLossEval(arrays, config, slab, ref7, weights, cache_kernels=False)
    for name in block_names:
        base = arrays[name]
        flat = base.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            lp = ev.losses(gb)[0]
            flat[j] = keep - step
            lm = ev.losses(gb)[0]
            flat[j] = keep
            fd = (lp - lm) / (2.0 * step)
            for m in group["modes"]:
                if name not in m["trainable"]:
                    continue
                ana = m["grads"][name].reshape(-1)[j]
                m["report"].record(name, j, ana, fd, m["floor"])


def default_mode_set(range_mode=None):
    """The mode matrix the acceptance gate runs: every ablation plus both
    range modes for the default architecture."""
    modes = [
        ("default-response", ModelConfig(range_mode="response")),
        ("default-difference", ModelConfig(range_mode="difference")),
        ("no-nm", ModelConfig(mixing_mode="off", ablation="no-nm")),
        ("single-nm", ModelConfig(mixing_mode="single", ablation="single-nm")),
        ("frozen-prior", ModelConfig(ablation="frozen-prior")),
        ("no-pretrain", ModelConfig(ablation="no-pretrain")),
        ("gaussian", ModelConfig(ablation="gaussian")),
    ]
    if range_mode:
        modes = [m for m in modes if m[1].range_mode == range_mode]
    return modes
