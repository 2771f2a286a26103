"""Learned group convolution with staged connection pruning.

A layer's N filters are split into M equal filter-groups. Every group starts
connected to all h input channels; over C-1 condensing stages each group drops
its least important connections until only ceil(h/C) per group survive. A
group-lasso penalty pushes whole (group, channel) weight blocks toward zero so
the pruning decision is cheap to make. After the last stage the layer can be
converted to a compact gather + grouped convolution for inference.
"""

import numpy as np

from .tensor import (
    INFERENCE_MATCH_TOL,
    ShapeError,
    Tensor,
    _conv_core,
    _result,
    conv2d,
)

__all__ = [
    "StageError",
    "LGConvLayer",
    "CondensationSchedule",
    "InferenceLGConv",
    "lg_forward",
    "importance_scores",
    "condense",
    "group_lasso_penalty",
    "schedule_stage",
    "to_inference",
]


class StageError(RuntimeError):
    """Raised when an operation is invalid for the layer's condensation stage."""


def _alive_per_group(h, C, stage):
    """Connections each filter-group keeps after `stage` completed stages."""
    return int(np.ceil(h * (C - stage) / C))


class LGConvLayer:
    """Group-structured convolution weights plus a per-connection alive mask.

    kernel has shape (N, h, kh, kw): N filters over h input channels. mask has
    shape (N, h) with entries in {0, 1}; rows belonging to the same
    filter-group are always identical, so pruning removes an input channel
    from an entire group at once. `stage` counts completed condensing stages.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, groups=1,
                 condensation_factor=1, rng=None, scale=None, name="lgconv",
                 dtype=np.float64):
        if out_channels % groups != 0:
            raise ShapeError(
                "out_channels %d not divisible by groups %d" % (out_channels, groups))
        if condensation_factor < 1:
            raise ValueError("condensation_factor must be >= 1")
        if condensation_factor > 1 and _alive_per_group(
                in_channels, condensation_factor, condensation_factor - 1) < 1:
            raise ValueError("condensation_factor too large for %d input channels"
                             % in_channels)
        self.groups = groups
        self.condensation_factor = condensation_factor
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.name = name
        self.stage = 0
        if rng is None:
            rng = np.random.default_rng()
        # He-style scaling over the receptive field
        if scale is None:
            scale = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        w = rng.normal(0.0, scale, size=(out_channels, in_channels,
                                         kernel_size, kernel_size))
        self.kernel = Tensor(w.astype(dtype), requires_grad=True,
                             name=name + ".kernel")
        self.mask = np.ones((out_channels, in_channels), dtype=dtype)
        self.history = []  # one report dict per completed condensing stage

    @property
    def filters_per_group(self):
        return self.out_channels // self.groups

    def group_rows(self, g):
        """Filter index range (start, stop) of filter-group g."""
        n = self.filters_per_group
        return g * n, (g + 1) * n

    def alive_per_group(self):
        """Alive input-channel count of each filter-group (they all agree)."""
        return [int(self.mask[self.group_rows(g)[0]].sum())
                for g in range(self.groups)]

    def apply_mask(self):
        """Force pruned weights back to exactly zero (after optimizer steps)."""
        self.kernel.data *= self.mask[:, :, None, None]

    def parameters(self):
        return [self.kernel]


def lg_forward(layer: LGConvLayer, x: Tensor, stride: int = 1,
               padding: int = 0) -> Tensor:
    """Masked dense convolution; pruned connections contribute nothing."""
    if x.shape[1] != layer.in_channels:
        raise ShapeError("expected %d input channels, got %d"
                         % (layer.in_channels, x.shape[1]))
    k = layer.kernel
    mask4 = np.broadcast_to(layer.mask[:, :, None, None], k.shape)
    masked = k * Tensor(np.ascontiguousarray(mask4, dtype=k.data.dtype))
    return conv2d(x, masked, stride=stride, padding=padding)


def importance_scores(layer: LGConvLayer) -> np.ndarray:
    """Mean |weight| per (filter-group, input channel); pruned entries -inf.

    Averaging runs over the group's filters and all kernel positions, so the
    score of channel j answers: how strongly does this group use channel j?
    """
    n = layer.filters_per_group
    w = layer.kernel.data.reshape(layer.groups, n, layer.in_channels,
                                  layer.kernel_size, layer.kernel_size)
    scores = np.abs(w).mean(axis=(1, 3, 4)).astype(np.float64)
    group_mask = layer.mask[::n]  # first row of each group speaks for all
    scores[group_mask == 0] = -np.inf
    return scores


def condense(layer: LGConvLayer):
    """Prune each group's least important alive channels; advance the stage.

    After completing stage s every group keeps ceil(h*(C-s)/C) channels, so
    the C-1 stages together remove a (C-1)/C fraction of the connections.
    Returns a report dict (stage, per-group pruned channel lists, alive count).
    """
    C = layer.condensation_factor
    if layer.stage >= C - 1:
        raise StageError("layer %r is fully condensed (stage %d of factor %d)"
                         % (layer.name, layer.stage, C))
    h = layer.in_channels
    target = _alive_per_group(h, C, layer.stage + 1)
    scores = importance_scores(layer)
    pruned = []
    for g in range(layer.groups):
        alive = np.flatnonzero(layer.mask[layer.group_rows(g)[0]])
        n_drop = len(alive) - target
        # stable ascending sort: ties fall to the lower channel index
        order = alive[np.argsort(scores[g, alive], kind="stable")]
        drop = np.sort(order[:n_drop])
        lo, hi = layer.group_rows(g)
        layer.mask[lo:hi, drop] = 0
        layer.kernel.data[lo:hi, drop] = 0.0
        pruned.append([int(j) for j in drop])
    layer.stage += 1
    report = {"stage": layer.stage, "pruned": pruned, "alive_per_group": target}
    layer.history.append(report)
    return report


def group_lasso_penalty(layer: LGConvLayer) -> Tensor:
    """Sum over (group, channel) blocks of the block's weight L2 norm.

    Differentiable scalar: the gradient of each block is w/||w||, taken as 0
    for an all-zero block, so pruned connections stay untouched.
    """
    k = layer.kernel
    n = layer.filters_per_group
    M, h = layer.groups, layer.in_channels
    w = k.data.reshape(M, n, h, layer.kernel_size, layer.kernel_size)
    norms = np.sqrt((w * w).sum(axis=(1, 3, 4)))  # (M, h)
    out = _result(np.asarray(norms.sum()), (k,))
    if out.requires_grad:
        def backward(g):
            safe = np.where(norms > 0, norms, 1.0)
            d = (w / safe[:, None, :, None, None]).reshape(k.shape)
            k._accumulate(d * float(g))

        out._backward = backward
    return out


class CondensationSchedule:
    """Stage boundaries: C-1 equal condensing stages fill the first half of
    training and the second half is plain optimization."""

    def __init__(self, total_epochs: int, C: int):
        if total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if C < 1:
            raise ValueError("condensation factor must be >= 1")
        self.total_epochs = total_epochs
        self.C = C
        self.stage_boundaries = [total_epochs * k // (2 * (C - 1))
                                 for k in range(1, C)]
        if any(b >= c for b, c in zip(self.stage_boundaries,
                                      self.stage_boundaries[1:])) or \
                (self.stage_boundaries and self.stage_boundaries[0] < 1):
            raise ValueError("total_epochs %d too small for %d condensing stages"
                             % (total_epochs, C - 1))


def schedule_stage(sched: CondensationSchedule, epoch: int) -> int:
    """Stage the epoch belongs to; C-1 means the optimization phase."""
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError("epoch %d outside [0, %d)" % (epoch, sched.total_epochs))
    stage = 0
    for b in sched.stage_boundaries:
        if epoch >= b:
            stage += 1
    return stage


class InferenceLGConv:
    """Compact inference form: per-group channel gather plus grouped conv."""

    def __init__(self, index, grouped_kernel):
        self.index = index                    # (M, alive) int
        self.grouped_kernel = grouped_kernel  # (M, N/M, alive, kh, kw)

    def forward(self, x: np.ndarray, stride: int = 1,
                padding: int = 0) -> np.ndarray:
        outs = [_conv_core(np.ascontiguousarray(x[:, idx]), k, stride, padding)
                for idx, k in zip(self.index, self.grouped_kernel)]
        return np.concatenate(outs, axis=1)

    def weight_count(self):
        return int(self.grouped_kernel.size)


def to_inference(layer: LGConvLayer) -> InferenceLGConv:
    """Gather surviving channels into a compact grouped kernel.

    Requires the layer to be fully condensed; the compact forward matches the
    masked dense forward within INFERENCE_MATCH_TOL.
    """
    C = layer.condensation_factor
    if layer.stage != C - 1:
        raise StageError("layer %r not fully condensed: stage %d, need %d"
                         % (layer.name, layer.stage, C - 1))
    index = []
    kernels = []
    for g in range(layer.groups):
        lo, hi = layer.group_rows(g)
        alive = np.flatnonzero(layer.mask[lo])
        index.append(alive)
        kernels.append(layer.kernel.data[lo:hi, alive])
    return InferenceLGConv(np.stack(index), np.stack(kernels))
