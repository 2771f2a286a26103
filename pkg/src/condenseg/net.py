"""Encoder/decoder segmentation network built from condense blocks.

The encoder is a stack of densely connected condense blocks separated by
1x1-conv + max-pool transitions; the decoder mirrors it with strided
transposed convolutions and element-wise-add skip connections. Every conv
inside a condense block is a learned group convolution, so the whole network
participates in staged condensation. A small separable-conv stem with two
filter sizes feeds the first block and a 1x1 + softmax head emits per-pixel
class probabilities.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .lgconv import (
    CondensationSchedule,
    LGConvLayer,
    condense,
    group_lasso_penalty,
    lg_forward,
    schedule_stage,
)
from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    conv2d_transpose,
    max_pool2d,
    relu,
    scale_shift,
    softmax_channels,
)

CHECKPOINT_MAGIC = "condenseg-net"


class ConfigError(ValueError):
    """Invalid network configuration; message lists every violation."""


@dataclass
class NetConfig:
    input_size: int = 128
    num_classes: int = 4  # background, RV, myocardium, LV
    growth_rate: int = 16
    groups: int = 4
    condensation_factor: int = 4
    layers_per_block: tuple = (2, 3, 4, 5, 4, 3, 2)
    initial_features: int = 32
    pool_layers: int = 3

    def violations(self):
        v = []
        lb = list(self.layers_per_block)
        if len(lb) < 3 or len(lb) % 2 == 0:
            v.append("layers_per_block needs an odd number of entries >= 3, got %d" % len(lb))
        if lb != lb[::-1]:
            v.append("layers_per_block must be palindromic, got %s" % (lb,))
        if any(n < 1 for n in lb):
            v.append("layers_per_block entries must be positive")
        if self.pool_layers != len(lb) // 2:
            v.append("pool_layers must be %d for %d blocks, got %d"
                     % (len(lb) // 2, len(lb), self.pool_layers))
        if self.input_size < 1 or self.input_size % (2 ** max(self.pool_layers, 0)):
            v.append("input_size %d not divisible by 2^%d"
                     % (self.input_size, self.pool_layers))
        if self.num_classes < 2:
            v.append("num_classes must be >= 2")
        if self.growth_rate < 1 or self.groups < 1 or self.growth_rate % self.groups:
            v.append("growth_rate %d must be a positive multiple of groups %d"
                     % (self.growth_rate, self.groups))
        if self.condensation_factor < 1:
            v.append("condensation_factor must be >= 1")
        if self.initial_features < 2 or self.initial_features % 2:
            v.append("initial_features must be even and >= 2 (two stem branches)")
        return v

    def to_dict(self):
        d = asdict(self)
        d["layers_per_block"] = list(self.layers_per_block)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["layers_per_block"] = tuple(d["layers_per_block"])
        return NetConfig(**d)


def _kernel(rng, cout, cin, kh, kw, dtype, name):
    scale = np.sqrt(2.0 / (cin * kh * kw))
    w = rng.normal(0.0, scale, size=(cout, cin, kh, kw)).astype(dtype)
    return Tensor(w, requires_grad=True, name=name)


class BatchNorm:
    def __init__(self, channels, dtype, name):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=name + ".gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=name + ".beta")
        self.stats = RunningStats(channels, dtype=dtype)

    def __call__(self, x, training):
        return scale_shift(x, self.gamma, self.beta, training=training,
                           running=self.stats)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_entries(self, name):
        return [(name + ".gamma", self.gamma.data),
                (name + ".beta", self.beta.data),
                (name + ".running_mean", self.stats.mean),
                (name + ".running_var", self.stats.var)]


class Stem:
    """Two stacked separable convolutions (3x3 and 5x5 receptive fields),
    concatenated channel-wise."""

    def __init__(self, out_channels, rng, dtype, name="stem"):
        half = out_channels // 2
        self.dw3 = _kernel(rng, 1, 1, 3, 3, dtype, name + ".dw3")
        self.pw3 = _kernel(rng, half, 1, 1, 1, dtype, name + ".pw3")
        self.dw5 = _kernel(rng, 1, 1, 5, 5, dtype, name + ".dw5")
        self.pw5 = _kernel(rng, half, 1, 1, 1, dtype, name + ".pw5")
        self.res = None

    def forward(self, x, training):
        a = conv2d(conv2d(x, self.dw3, padding=1), self.pw3)
        b = conv2d(conv2d(x, self.dw5, padding=2), self.pw5)
        return concat_channels([a, b])

    def parameters(self):
        return [self.dw3, self.pw3, self.dw5, self.pw5]

    def state_entries(self, name):
        return [(name + "." + k.name.split(".")[-1], k.data)
                for k in self.parameters()]

    def macs(self, mode):
        n = sum(k.data.size for k in self.parameters())
        return n * self.res * self.res


class DenseLayer:
    """Pre-activation unit: norm -> relu -> 3x3 learned group conv."""

    def __init__(self, in_channels, cfg: NetConfig, rng, dtype, name):
        self.bn = BatchNorm(in_channels, dtype, name + ".bn")
        self.lg = LGConvLayer(in_channels, cfg.growth_rate, kernel_size=3,
                              groups=cfg.groups,
                              condensation_factor=cfg.condensation_factor,
                              rng=rng, dtype=dtype, name=name + ".lg")

    def forward(self, x, training):
        return lg_forward(self.lg, relu(self.bn(x, training)), padding=1)

    def parameters(self):
        return self.bn.parameters() + [self.lg.kernel]

    def state_entries(self, name):
        return self.bn.state_entries(name + ".bn") + [(name + ".lg.kernel",
                                                       self.lg.kernel.data)]


class CondenseBlock:
    """Densely connected stack: layer i sees the block input plus every
    earlier layer's output and appends growth_rate feature maps."""

    def __init__(self, in_channels, n_layers, cfg, rng, dtype, name):
        self.layers = []
        c = in_channels
        for i in range(n_layers):
            self.layers.append(DenseLayer(c, cfg, rng, dtype,
                                          "%s.layer%d" % (name, i)))
            c += cfg.growth_rate
        self.out_channels = c
        self.res = None

    def forward(self, x, training):
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            feats.append(layer.forward(inp, training))
        return concat_channels(feats)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def state_entries(self, name):
        return [e for i, l in enumerate(self.layers)
                for e in l.state_entries("%s.layer%d" % (name, i))]

    def lg_layers(self):
        return [l.lg for l in self.layers]

    def macs(self, mode):
        total = 0
        for l in self.layers:
            if mode == "dense":
                w = l.lg.kernel.data.size
            else:
                w = int(l.lg.mask.sum()) * l.lg.kernel_size ** 2
            total += w * self.res * self.res
        return total


class Transition:
    """norm -> relu -> channel-halving 1x1 conv -> 2x2 max pool."""

    def __init__(self, in_channels, rng, dtype, name):
        self.out_channels = (in_channels + 1) // 2
        self.bn = BatchNorm(in_channels, dtype, name + ".bn")
        self.kernel = _kernel(rng, self.out_channels, in_channels, 1, 1, dtype,
                              name + ".kernel")
        self.res = None

    def forward(self, x, training):
        return max_pool2d(conv2d(relu(self.bn(x, training)), self.kernel))

    def parameters(self):
        return self.bn.parameters() + [self.kernel]

    def state_entries(self, name):
        return self.bn.state_entries(name + ".bn") + [(name + ".kernel",
                                                       self.kernel.data)]

    def macs(self, mode):
        return self.kernel.data.size * self.res * self.res


class UpBlock:
    """norm -> relu -> 1x1 reduce -> stride-2 transposed conv, plus a 1x1
    projection of the encoder skip; the two branches are added element-wise."""

    def __init__(self, in_channels, skip_channels, rng, dtype, name):
        self.out_channels = (skip_channels + 1) // 2
        d = self.out_channels
        self.bn = BatchNorm(in_channels, dtype, name + ".bn")
        self.reduce = _kernel(rng, d, in_channels, 1, 1, dtype, name + ".reduce")
        # transposed-conv layout: (in, out, kh, kw)
        scale = np.sqrt(2.0 / (d * 9))
        self.up = Tensor(rng.normal(0.0, scale, size=(d, d, 3, 3)).astype(dtype),
                         requires_grad=True, name=name + ".up")
        self.skip_proj = _kernel(rng, d, skip_channels, 1, 1, dtype,
                                 name + ".skip_proj")
        self.res = None  # input resolution; output is 2x

    def forward(self, x, skip, training):
        h = conv2d(relu(self.bn(x, training)), self.reduce)
        h = conv2d_transpose(h, self.up, stride=2)  # (2H+1, 2W+1)
        h = h.crop_spatial(2 * x.shape[2], 2 * x.shape[3])
        return h + conv2d(skip, self.skip_proj)

    def parameters(self):
        return self.bn.parameters() + [self.reduce, self.up, self.skip_proj]

    def state_entries(self, name):
        return self.bn.state_entries(name + ".bn") + [
            (name + ".reduce", self.reduce.data),
            (name + ".up", self.up.data),
            (name + ".skip_proj", self.skip_proj.data)]

    def macs(self, mode):
        r_in, r_out = self.res, self.res * 2
        return (self.reduce.data.size * r_in * r_in
                + (self.up.data.size + self.skip_proj.data.size) * r_out * r_out)


class Head:
    """norm -> relu -> 1x1 conv to class logits -> per-pixel softmax."""

    def __init__(self, in_channels, num_classes, rng, dtype, name="head"):
        self.bn = BatchNorm(in_channels, dtype, name + ".bn")
        self.kernel = _kernel(rng, num_classes, in_channels, 1, 1, dtype,
                              name + ".kernel")
        self.res = None

    def forward(self, x, training):
        return softmax_channels(conv2d(relu(self.bn(x, training)), self.kernel))

    def parameters(self):
        return self.bn.parameters() + [self.kernel]

    def state_entries(self, name):
        return self.bn.state_entries(name + ".bn") + [(name + ".kernel",
                                                       self.kernel.data)]

    def macs(self, mode):
        return self.kernel.data.size * self.res * self.res


class Network:
    def __init__(self, config, stem, encoders, transitions, bottleneck,
                 up_blocks, decoders, head, dtype):
        self.config = config
        self.stem = stem
        self.encoders = encoders
        self.transitions = transitions
        self.bottleneck = bottleneck
        self.up_blocks = up_blocks
        self.decoders = decoders
        self.head = head
        self.dtype = dtype

    # -- wiring ---------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ShapeError("expected input (B,1,%d,%d), got %s" % (s, s, x.shape))
        h = self.stem.forward(x, training)
        skips = []
        for enc, tr in zip(self.encoders, self.transitions):
            h = enc.forward(h, training)
            skips.append(h)
            h = tr.forward(h, training)
        h = self.bottleneck.forward(h, training)
        for up, dec, skip in zip(self.up_blocks, self.decoders, reversed(skips)):
            h = up.forward(h, skip, training)
            h = dec.forward(h, training)
        return self.head.forward(h, training)

    def named_modules(self):
        mods = [("stem", self.stem)]
        for i, (enc, tr) in enumerate(zip(self.encoders, self.transitions)):
            mods.append(("enc%d" % i, enc))
            mods.append(("trans%d" % i, tr))
        mods.append(("bottleneck", self.bottleneck))
        for i, (up, dec) in enumerate(zip(self.up_blocks, self.decoders)):
            mods.append(("up%d" % i, up))
            mods.append(("dec%d" % i, dec))
        mods.append(("head", self.head))
        return mods

    def parameters(self):
        return [p for _, m in self.named_modules() for p in m.parameters()]

    def lg_layers(self):
        out = []
        for _, m in self.named_modules():
            if isinstance(m, CondenseBlock):
                out.extend(m.lg_layers())
        return out

    def apply_masks(self):
        for lg in self.lg_layers():
            lg.apply_mask()

    def lasso_penalty(self):
        total = None
        for lg in self.lg_layers():
            term = group_lasso_penalty(lg)
            total = term if total is None else total + term
        return total

    # -- accounting -------------------------------------------------------

    def param_count(self, mode: str = "dense") -> int:
        if mode not in ("dense", "alive"):
            raise ValueError("mode must be 'dense' or 'alive'")
        total = sum(p.data.size for p in self.parameters())
        if mode == "alive":
            for lg in self.lg_layers():
                dead = lg.mask.size - int(lg.mask.sum())
                total -= dead * lg.kernel_size ** 2
        return int(total)

    def flop_count(self, mode: str = "dense") -> int:
        """Forward multiply-accumulates, counted as weights x output positions."""
        return int(sum(m.macs(mode) for _, m in self.named_modules()))

    # -- checkpoint state -------------------------------------------------

    def state_entries(self):
        """(name, array) pairs: weights and running stats in declaration
        order, then all condensation masks."""
        entries = []
        for name, m in self.named_modules():
            entries.extend(m.state_entries(name))
        for lg in self.lg_layers():
            entries.append((lg.name + ".mask", lg.mask))
        return entries

    def bn_modules(self):
        out = []
        for _, m in self.named_modules():
            if isinstance(m, (Transition, UpBlock, Head)):
                out.append(m.bn)
            elif isinstance(m, CondenseBlock):
                out.extend(l.bn for l in m.layers)
        return out


def build(config: NetConfig, rng=None, dtype=np.float64) -> Network:
    bad = config.violations()
    if bad:
        raise ConfigError("invalid network config:\n  " + "\n  ".join(bad))
    if rng is None:
        rng = np.random.default_rng()
    p = config.pool_layers
    lb = list(config.layers_per_block)
    res = config.input_size

    stem = Stem(config.initial_features, rng, dtype)
    stem.res = res
    c = config.initial_features
    encoders, transitions, skip_ch = [], [], []
    for i in range(p):
        enc = CondenseBlock(c, lb[i], config, rng, dtype, "enc%d" % i)
        enc.res = res
        c = enc.out_channels
        skip_ch.append(c)
        tr = Transition(c, rng, dtype, "trans%d" % i)
        tr.res = res
        encoders.append(enc)
        transitions.append(tr)
        c = tr.out_channels
        res //= 2

    bottleneck = CondenseBlock(c, lb[p], config, rng, dtype, "bottleneck")
    bottleneck.res = res
    c = bottleneck.out_channels

    up_blocks, decoders = [], []
    for j in range(p):
        skip = skip_ch[p - 1 - j]
        up = UpBlock(c, skip, rng, dtype, "up%d" % j)
        up.res = res
        res *= 2
        dec = CondenseBlock(up.out_channels, lb[p + 1 + j], config, rng, dtype,
                            "dec%d" % j)
        dec.res = res
        up_blocks.append(up)
        decoders.append(dec)
        c = dec.out_channels

    head = Head(c, config.num_classes, rng, dtype)
    head.res = res
    return Network(config, stem, encoders, transitions, bottleneck,
                   up_blocks, decoders, head, dtype)


def apply_condensation(net: Network, epoch: int, sched: CondensationSchedule):
    """Advance every LG-Conv layer to the stage the schedule dictates.

    Returns a list of (layer_name, report) events; empty off boundaries.
    """
    stage = schedule_stage(sched, epoch)
    events = []
    for lg in net.lg_layers():
        while lg.stage < min(stage, lg.condensation_factor - 1):
            events.append((lg.name, condense(lg)))
    return events


# -- checkpoint i/o ----------------------------------------------------


def save_checkpoint(net: Network, path, epoch: int = 0, extra=None):
    """Single binary file: one JSON header line, then raw little-endian
    buffers in manifest order."""
    entries = net.state_entries()
    manifest = [{"name": n, "shape": list(a.shape),
                 "dtype": np.dtype(a.dtype).newbyteorder("<").str}
                for n, a in entries]
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "config": net.config.to_dict(),
        "epoch": epoch,
        "stage": max([lg.stage for lg in net.lg_layers()], default=0),
        "lg_stages": {lg.name: lg.stage for lg in net.lg_layers()},
        "history": {lg.name: lg.history for lg in net.lg_layers()},
        "bn_initialized": [bn.stats.initialized for bn in net.bn_modules()],
        "manifest": manifest,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True,
                           separators=(",", ":")).encode() + b"\n")
        for _, a in entries:
            f.write(np.ascontiguousarray(a, dtype=np.dtype(a.dtype)
                                         .newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Rebuild a Network from a checkpoint file; returns (net, header)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except ValueError:
            raise ValueError("checkpoint %s: header is not valid JSON" % path)
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError("checkpoint %s: unrecognized format %r"
                             % (path, header.get("format")))
        blob = f.read()
    config = NetConfig.from_dict(header["config"])
    manifest = header["manifest"]
    dtype = np.dtype(manifest[0]["dtype"]) if manifest else np.float64
    net = build(config, rng=np.random.default_rng(0), dtype=dtype)
    arrays = dict(net.state_entries())
    offset = 0
    for item in manifest:
        dt = np.dtype(item["dtype"])
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        end = offset + n * dt.itemsize
        if end > len(blob):
            raise ValueError("checkpoint %s: truncated buffer for %s"
                             % (path, item["name"]))
        buf = np.frombuffer(blob[offset:end], dtype=dt).reshape(item["shape"])
        offset = end
        if item["name"] not in arrays:
            raise ValueError("checkpoint %s: unknown buffer %s"
                             % (path, item["name"]))
        dst = arrays[item["name"]]
        if dst.shape != buf.shape:
            raise ValueError("checkpoint %s: %s has shape %s, expected %s"
                             % (path, item["name"], buf.shape, dst.shape))
        dst[...] = buf
    if offset != len(blob):
        raise ValueError("checkpoint %s: %d trailing bytes" % (path, len(blob) - offset))
    for lg in net.lg_layers():
        lg.stage = header["lg_stages"][lg.name]
        lg.history = header["history"].get(lg.name, [])
    for bn, flag in zip(net.bn_modules(), header["bn_initialized"]):
        bn.stats.initialized = flag
    return net, header
