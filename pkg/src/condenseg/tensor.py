"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operations the segmentation network needs: 2-D
convolution and its transpose, max pooling, pointwise ops, a
batch-statistics scale/shift, channel softmax, reductions, and the small
elementwise algebra the losses are written in.  Each forward op records a
backward closure; ``Tensor.backward`` replays them in reverse topological
order.  The Adam optimizer and a central finite-difference gradient
checker live here as well.

Convolutions are im2col + GEMM so the heavy lifting stays inside BLAS.
No general broadcasting: tensor-tensor arithmetic requires identical
shapes, scalars are the only exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Tolerance constants, defined once and shared by the test suite.
GRAD_TOL = 1e-4            # composite ops / full network, double precision
GRAD_TOL_POINTWISE = 1e-6  # pointwise ops
CONV_ORACLE_TOL = 1e-10    # conv vs direct-loop oracle
ADJOINT_TOL = 1e-8         # <conv(x),y> == <x, conv_T(y)>
SOFTMAX_SUM_TOL = 1e-9     # per-pixel probability normalization
INFERENCE_MATCH_TOL = 1e-5 # compact vs masked-dense forward


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class NumericsError(ArithmeticError):
    """Raised when a value that must be finite is NaN or Inf."""


class Tensor:
    """Dense N-D array with an optional gradient slot.

    ``data`` is a row-major numpy array; ``grad`` stays ``None`` until a
    backward pass reaches this tensor.  Tensors built by ops keep
    references to their parents plus a closure that scatters the incoming
    gradient; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @staticmethod
    def param(data, name=""):
        return Tensor(data, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def require_finite(self, context=""):
        """Raise NumericsError if data contains NaN/Inf (error state)."""
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in tensor {self.name or context!r}")
        return self

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, name={self.name!r})"

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar; fills .grad on reachable leaves."""
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise algebra -------------------------------------------

    def _binary(self, other, fwd, bwd_self, bwd_other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.shape != () and self.shape != ():
                raise ShapeError(f"shape mismatch {self.shape} vs {other.shape}")
            out = _result(fwd(self.data, other.data), (self, other))
            if out.requires_grad:
                a, b = self, other

                def backward(g):
                    if a.requires_grad:
                        a._accumulate(_reduce_to(bwd_self(g, a.data, b.data), a.shape))
                    if b.requires_grad:
                        b._accumulate(_reduce_to(bwd_other(g, a.data, b.data), b.shape))

                out._backward = backward
            return out
        # python scalar
        c = float(other)
        out = _result(fwd(self.data, c), (self,))
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accumulate(bwd_self(g, a.data, c))
        return out

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        out = _result(-self.data, (self,))
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accumulate(-g)
        return out

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, lambda a, b: a / b,
                            lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        recip = self._binary(float(other), lambda a, c: c / a,
                             lambda g, a, c: -g * c / (a * a), None)
        return recip

    def log(self):
        out = _result(np.log(self.data), (self,))
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accumulate(g / a.data)
        return out

    def clamp_min(self, lo: float):
        out = _result(np.maximum(self.data, lo), (self,))
        if out.requires_grad:
            a = self
            mask = self.data >= lo
            out._backward = lambda g: a._accumulate(g * mask)
        return out

    def sum(self, axis=None):
        out = _result(np.asarray(np.sum(self.data, axis=axis)), (self,))
        if out.requires_grad:
            a = self
            shp = self.shape

            def backward(g):
                if axis is None:
                    a._accumulate(np.broadcast_to(g, shp))
                else:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g_exp = np.expand_dims(g, axes)
                    a._accumulate(np.broadcast_to(g_exp, shp))

            out._backward = backward
        return out

    # -- structural ops -------------------------------------------------

    def channel_slice(self, start, stop):
        """View channels [start:stop) of a (B,C,...) tensor."""
        out = _result(np.ascontiguousarray(self.data[:, start:stop]), (self,))
        if out.requires_grad:
            a = self

            def backward(g):
                full = np.zeros_like(a.data)
                full[:, start:stop] = g
                a._accumulate(full)

            out._backward = backward
        return out

    def crop_spatial(self, h, w):
        """Keep the top-left h x w window of a (B,C,H,W) tensor."""
        out = _result(np.ascontiguousarray(self.data[:, :, :h, :w]), (self,))
        if out.requires_grad:
            a = self

            def backward(g):
                full = np.zeros_like(a.data)
                full[:, :, :h, :w] = g
                a._accumulate(full)

            out._backward = backward
        return out


def _result(data, parents):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
    return out


def _reduce_to(g, shape):
    # gradient of a scalar operand used against a full tensor
    if shape == () and np.ndim(g) != 0:
        return np.sum(g)
    return g


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0
        out._backward = lambda g: x._accumulate(g * mask)
    return out


def concat_channels(tensors) -> Tensor:
    """Concatenate (B,C_i,H,W) tensors along the channel axis."""
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ShapeError(f"concat mismatch {base.shape} vs {t.shape}")
    out = _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[1] for t in tensors]

        def backward(g):
            ofs = 0
            for t, c in zip(tensors, sizes):
                if t.requires_grad:
                    t._accumulate(g[:, ofs:ofs + c])
                ofs += c

        out._backward = backward
    return out


def index_channels(x: Tensor, indices) -> Tensor:
    """Gather an arbitrary channel subset of a (B,C,H,W) tensor."""
    idx = np.asarray(indices, dtype=np.intp)
    out = _result(np.ascontiguousarray(x.data[:, idx]), (x,))
    if out.requires_grad:

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (slice(None), idx), g)
            x._accumulate(full)

        out._backward = backward
    return out


# -- convolution ------------------------------------------------------


def _pad2d(x, p, pw=None):
    pw = p if pw is None else pw
    if p == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (pw, pw)))


def _dilate2d(x, s):
    if s == 1:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, (h - 1) * s + 1, (w - 1) * s + 1), dtype=x.dtype)
    out[:, :, ::s, ::s] = x
    return out


def _im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # (B,C,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * kh * kw), ho, wo


def _conv_core(x, kernel, stride, padding):
    """Plain forward cross-correlation on ndarrays."""
    b = x.shape[0]
    cout, cin, kh, kw = kernel.shape
    xp = _pad2d(x, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ kernel.reshape(cout, cin * kh * kw).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))


def _conv_grad_kernel(x, grad, kernel_shape, stride, padding):
    cout, cin, kh, kw = kernel_shape
    cols, ho, wo = _im2col(_pad2d(x, padding), kh, kw, stride)
    gmat = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (gmat.T @ cols).reshape(kernel_shape)


def _conv_grad_input(grad, kernel, x_shape, stride, padding):
    cout, cin, kh, kw = kernel.shape
    b, _, h, w = x_shape
    gd = _pad2d(_dilate2d(grad, stride), kh - 1, kw - 1)
    kflip = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (Cin,Cout,kh,kw)
    full = _conv_core(gd, kflip, 1, 0)
    # `full` covers (Ho-1)*s + kh rows of the padded input; embed then crop padding
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, cin, hp, wp), dtype=grad.dtype)
    fh = min(full.shape[2], hp)
    fw = min(full.shape[3], wp)
    dxp[:, :, :fh, :fw] = full[:, :, :fh, :fw]
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (B,Cin,H,W) with (Cout,Cin,kh,kw); H' = (H+2p-kh)//s + 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    out = _result(_conv_core(x.data, kernel.data, stride, padding), (x, kernel))
    if out.requires_grad:

        def backward(g):
            if kernel.requires_grad:
                kernel._accumulate(_conv_grad_kernel(x.data, g, kernel.shape, stride, padding))
            if x.requires_grad:
                x._accumulate(_conv_grad_input(g, kernel.data, x.shape, stride, padding))

        out._backward = backward
    return out


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d. Input (B,C1,H,W), kernel (C1,C2,kh,kw) -> (B,C2,H',W')
    with H' = (H-1)*stride - 2*padding + kh.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    b, c1, h, w = x.shape
    kc1, c2, kh, kw = kernel.shape
    if kc1 != c1:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {c1}, kernel expects {kc1}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d_transpose stride must be 1 or 2, got {stride}")
    if kh - 1 - padding < 0 or kw - 1 - padding < 0:
        raise ShapeError(f"padding {padding} too large for kernel {kh}x{kw}")

    xd_pad = _pad2d(_dilate2d(x.data, stride), kh - 1 - padding, kw - 1 - padding)
    kt = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out = _result(_conv_core(xd_pad, kt, 1, 0), (x, kernel))
    if out.requires_grad:

        def backward(g):
            if x.requires_grad:
                # adjoint pair: d/dx of conv_T under kernel K is conv2d with K
                x._accumulate(_conv_core(g, np.ascontiguousarray(kernel.data), stride, padding))
            if kernel.requires_grad:
                cols, ho, wo = _im2col(xd_pad, kh, kw, 1)
                gmat = g.transpose(0, 2, 3, 1).reshape(-1, c2)
                dkt = (gmat.T @ cols).reshape(c2, c1, kh, kw)
                kernel._accumulate(np.ascontiguousarray(dkt[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))

        out._backward = backward
    return out


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first max in scan order."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"max_pool2d needs H,W divisible by {window}, got {h}x{w}")
    ho, wo = h // window, w // window
    patches = x.data.reshape(b, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    patches = patches.reshape(b, c, ho, wo, window * window)
    arg = np.argmax(patches, axis=-1)  # first occurrence on ties, scan order
    out_data = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    out = _result(np.ascontiguousarray(out_data), (x,))
    if out.requires_grad:

        def backward(g):
            flat = np.zeros_like(patches)
            np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
            full = flat.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(np.ascontiguousarray(full.reshape(b, c, h, w)))

        out._backward = backward
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of (B,L,H,W), max-stabilized."""
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.shape[1]}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=1, keepdims=True)
    if not np.all(np.isfinite(p)):
        raise NumericsError("softmax_channels produced non-finite values (NaN input?)")
    out = _result(p, (x,))
    if out.requires_grad:

        def backward(g):
            dot = np.sum(g * p, axis=1, keepdims=True)
            x._accumulate(p * (g - dot))

        out._backward = backward
    return out


class RunningStats:
    """Exponential running mean/variance for scale_shift at inference."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False

    def update(self, mean, var, momentum):
        if not self.initialized:
            self.mean[...] = mean
            self.var[...] = var
            self.initialized = True
        else:
            self.mean *= momentum
            self.mean += (1 - momentum) * mean
            self.var *= momentum
            self.var += (1 - momentum) * var


def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor, training: bool = True,
                running: RunningStats | None = None, momentum: float = 0.9,
                eps: float = 1e-8) -> Tensor:
    """Per-channel normalize-then-affine over batch+space of (B,C,H,W).

    Training mode uses batch statistics (and updates `running` if given);
    inference mode uses the stored running averages.
    """
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"scale_shift affine params must have shape ({c},)")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            running.update(mu, var, momentum)
    else:
        if running is None or not running.initialized:
            raise ShapeError("scale_shift inference mode needs initialized running stats")
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _result(y, (x, gamma, beta))
    if out.requires_grad:
        n = b * h * w

        def backward(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxh = g * gamma.data[None, :, None, None]
                if training:
                    s1 = gxh.sum(axis=(0, 2, 3))
                    s2 = (gxh * xhat).sum(axis=(0, 2, 3))
                    dx = (gxh - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / n) \
                        * inv[None, :, None, None]
                else:
                    dx = gxh * inv[None, :, None, None]
                x._accumulate(dx)

        out._backward = backward
    return out


# -- optimizer --------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment buffers, positionally aligned with a fixed parameter list."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params, state: AdamState):
    """One in-place Adam update with bias correction over `params`."""
    params = list(params)
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(f"AdamState tracks {len(state.first_moment)} params, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name or i!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != param shape {p.data.shape}")
        m, v = state.first_moment[i], state.second_moment[i]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * np.square(p.grad)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_hat)


# -- finite-difference checking ---------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5, indices=None, rng=None) -> float:
    """Compare f's backward gradient at x against central differences.

    f must be a deterministic scalar-valued function of x (double
    precision).  Checks all entries of x unless `indices` (flat) or an
    rng for subsampling up to 64 entries is given.  Returns the max
    relative error.
    """
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    if indices is None:
        idx = np.arange(flat.size)
        if rng is not None and flat.size > 64:
            idx = np.sort(rng.choice(flat.size, size=64, replace=False))
    else:
        idx = np.asarray(indices)

    ana_flat = analytic.reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = ana_flat[i]
        denom = max(abs(num), abs(a))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(num - a) / denom)
    return worst
