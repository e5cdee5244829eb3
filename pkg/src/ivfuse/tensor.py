"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Every value is a (batch, channels, height, width) float array.  Operations
record onto the innermost active ``Tape`` whenever at least one input takes
part in gradient computation; ``Tape.backward`` replays the recorded entries
once, in reverse order, accumulating gradients additively.  The operation set
is exactly what the fusion network and its quality-index loss need: there is
no broadcasting beyond python scalars, no dynamic control flow in the graph,
and shape mismatches raise ``ShapeError`` instead of being coerced.

Arrays are float64 by default; float32 tensors work through every forward op
for faster inference.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An operand shape violates an operation's contract."""


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def current_tape():
    """Innermost active Tape, or None outside any recording context."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """4-D float array plus optional same-shape gradient storage.

    ``requires_grad`` marks leaves (network parameters).  Outputs of recorded
    operations are flagged automatically so gradients chain through them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or np.float64)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-D (batch, channels, height, width); got shape {arr.shape}"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.tape = None

    @classmethod
    def _wrap(cls, arr):
        out = object.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = False
        out.node_id = None
        out.tape = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are the only permitted broadcast
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def scalar(value, dtype=np.float64):
    """A 1x1x1x1 tensor holding one number."""
    return Tensor._wrap(np.full((1, 1, 1, 1), value, dtype=dtype))


class _Entry:
    __slots__ = ("op", "input_ids", "output_id", "output", "backward_fn")

    def __init__(self, op, input_ids, output_id, output, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of one forward pass.

    Append order is topological by construction (an entry's inputs are always
    assigned ids before its output), so the backward pass is a single reverse
    sweep that visits every entry exactly once.  A tape must stay confined to
    one worker; tensors themselves may be shared once computed.
    """

    def __init__(self):
        self.entries = []
        self._next_id = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts must nest"
        return False

    def _assign_id(self, t):
        if t.tape is not self or t.node_id is None:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, op, inputs, output, backward_fn):
        input_ids = tuple(self._assign_id(t) for t in inputs)
        output.requires_grad = True
        out_id = self._assign_id(output)
        self.entries.append(_Entry(op, input_ids, out_id, output, backward_fn))

    def backward(self, root):
        """Populate grads of every tensor the scalar ``root`` depends on."""
        if root.data.size != 1:
            raise ValueError(
                f"backward root must be scalar; got shape {root.shape}"
            )
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += 1.0
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is not None:
                entry.backward_fn(g)


def backward(root):
    """Reverse sweep from a recorded scalar tensor (see ``Tape.backward``)."""
    if root.tape is None:
        raise ValueError("tensor was not recorded on any tape")
    root.tape.backward(root)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(op, inputs, out_arr, backward_fn):
    out = Tensor._wrap(out_arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,kH,kW).

    Output spatial size is floor((H + 2*pad - kH)/stride) + 1.  ``bias``,
    when given, is a (1,O,1,1) tensor added per output channel.  Gradients
    are defined w.r.t. input, weight and bias.
    """
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0; got {stride}, {pad}")
    B, C, H, W = x.data.shape
    O, Ci, kh, kw = weight.data.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Ci}")
    if bias is not None and bias.data.shape != (1, O, 1, 1):
        raise ShapeError(
            f"conv2d bias must have shape (1,{O},1,1); got {bias.data.shape}"
        )
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if H + 2 * pad < kh or W + 2 * pad < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty for input {H}x{W}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, oh, ow, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, O)
        if weight.requires_grad:
            _accumulate(weight, (gmat.T @ cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, oh, ow, C, kh, kw)
            gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if pad:
                gxp = gxp[:, :, pad : pad + H, pad : pad + W]
            _accumulate(x, gxp)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("conv2d", inputs, out, backward_fn)


def dilate(x, stride):
    """Insert stride-1 zeros between neighbouring pixels (transpose-conv helper)."""
    if stride == 1:
        return x
    B, C, H, W = x.data.shape
    out = np.zeros(
        (B, C, (H - 1) * stride + 1, (W - 1) * stride + 1), dtype=x.data.dtype
    )
    out[:, :, ::stride, ::stride] = x.data

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g[:, :, ::stride, ::stride])

    return _finish("dilate", (x,), out, backward_fn)


def _flip_swap(weight):
    """Spatially flip a kernel and swap its in/out channel axes."""
    out = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))

    def backward_fn(g):
        if weight.requires_grad:
            _accumulate(
                weight, np.ascontiguousarray(g.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            )

    return _finish("flip_swap", (weight,), out, backward_fn)


def conv_transpose2d(x, weight, bias=None, stride=1, pad=0):
    """Adjoint of conv2d: forward equals the gradient-w.r.t.-input map of a
    conv2d with identical stride/pad.

    ``weight`` has shape (inC, outC, kH, kW); output spatial size is
    (H - 1)*stride - 2*pad + kH.  Built from dilation plus a flipped-kernel
    conv2d, so gradients flow through the primitive ops.
    """
    if stride < 1 or pad < 0:
        raise ShapeError(
            f"conv_transpose2d needs stride >= 1 and pad >= 0; got {stride}, {pad}"
        )
    Ci, O, kh, kw = weight.data.shape
    if x.data.shape[1] != Ci:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input has {x.data.shape[1]}, "
            f"weight expects {Ci}"
        )
    if pad > kh - 1 or pad > kw - 1:
        raise ShapeError(f"conv_transpose2d pad {pad} exceeds kernel-1 ({kh - 1})")
    return conv2d(dilate(x, stride), _flip_swap(weight), bias, stride=1, pad=kh - 1 - pad)


def avgpool2d(x, k=2, stride=None):
    """Mean over k x k windows placed every ``stride`` pixels (floor semantics).

    ``stride`` defaults to ``k`` (non-overlapping).  The gradient distributes
    1/k^2 of each output cell's grad to every contributing input pixel.
    """
    if stride is None:
        stride = k
    B, C, H, W = x.data.shape
    if k > H or k > W:
        raise ShapeError(f"avgpool2d window {k} exceeds input {H}x{W}")
    if k < 1 or stride < 1:
        raise ShapeError(f"avgpool2d needs k >= 1 and stride >= 1; got {k}, {stride}")
    oh = (H - k) // stride + 1
    ow = (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5))

    def backward_fn(g):
        if x.requires_grad:
            gs = g / (k * k)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gs
            _accumulate(x, gx)

    return _finish("avgpool2d", (x,), out, backward_fn)


def pad_replicate(x, p):
    """Replicate-pad the two spatial axes by ``p`` pixels on every side."""
    if p < 0:
        raise ShapeError(f"pad_replicate needs p >= 0; got {p}")
    if p == 0:
        return x
    B, C, H, W = x.data.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward_fn(g):
        if not x.requires_grad:
            return
        core = g[:, :, p : p + H, p : p + W].copy()
        core[:, :, 0, :] += g[:, :, :p, p : p + W].sum(axis=2)
        core[:, :, -1, :] += g[:, :, p + H :, p : p + W].sum(axis=2)
        core[:, :, :, 0] += g[:, :, p : p + H, :p].sum(axis=3)
        core[:, :, :, -1] += g[:, :, p : p + H, p + W :].sum(axis=3)
        core[:, :, 0, 0] += g[:, :, :p, :p].sum(axis=(2, 3))
        core[:, :, 0, -1] += g[:, :, :p, p + W :].sum(axis=(2, 3))
        core[:, :, -1, 0] += g[:, :, p + H :, :p].sum(axis=(2, 3))
        core[:, :, -1, -1] += g[:, :, p + H :, p + W :].sum(axis=(2, 3))
        _accumulate(x, core)

    return _finish("pad_replicate", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(a, b):
    """Stack b's channels after a's; batch and spatial extents must agree."""
    Ba, Ca, Ha, Wa = a.data.shape
    Bb, Cb, Hb, Wb = b.data.shape
    if (Ba, Ha, Wa) != (Bb, Hb, Wb):
        raise ShapeError(
            f"concat_channels needs matching batch/spatial dims; got {a.shape} vs {b.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g[:, :Ca])
        if b.requires_grad:
            _accumulate(b, g[:, Ca:])

    return _finish("concat_channels", (a, b), out, backward_fn)


def slice_channels(x, start, stop):
    """Channels [start, stop) as a new tensor; the exact inverse of concat."""
    C = x.data.shape[1]
    if not (0 <= start < stop <= C):
        raise ShapeError(f"slice_channels [{start}:{stop}) out of range for {C} channels")
    out = x.data[:, start:stop].copy()

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _accumulate(x, gx)

    return _finish("slice_channels", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# pointwise maps


def tanh_map(x):
    """Elementwise tanh; output strictly inside (-1, 1), gradient 1 - tanh^2."""
    y = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * (1.0 - y * y))

    return _finish("tanh", (x,), y, backward_fn)


def leaky_relu(x, negative_slope=0.2):
    """max(x, negative_slope * x); keeps a small gradient on the negative side."""
    pos = x.data > 0
    y = np.where(pos, x.data, negative_slope * x.data)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * np.where(pos, 1.0, negative_slope))

    return _finish("leaky_relu", (x,), y, backward_fn)


def sqrt_map(x):
    """Elementwise square root; inputs must be >= 0 (callers stabilize with eps)."""
    if np.any(x.data < 0):
        raise ValueError("sqrt_map of negative values")
    y = np.sqrt(x.data)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * (0.5 / y))

    return _finish("sqrt", (x,), y, backward_fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic (tensor (.) tensor of equal shape, or tensor (.) scalar)


def _check_broadcast(a, b, kind):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")


def _fit_shape(g, shape):
    """Reduce a broadcast gradient back onto a scalar-shaped operand."""
    if g.shape == shape:
        return g
    return g.sum().reshape(1, 1, 1, 1)


def _is_number(v):
    return isinstance(v, (int, float, np.integer, np.floating))


def add(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast(a, b, "add")
        out = a.data + b.data

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, _fit_shape(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _fit_shape(g, b.data.shape))

        return _finish("add", (a, b), out, backward_fn)
    if _is_number(b):
        a, b = a, float(b)
    elif _is_number(a):
        a, b = b, float(a)
    else:
        return NotImplemented
    out = a.data + b

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _finish("add", (a,), out, backward_fn)


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast(a, b, "sub")
        out = a.data - b.data

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, _fit_shape(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _fit_shape(-g, b.data.shape))

        return _finish("sub", (a, b), out, backward_fn)
    if isinstance(a, Tensor) and _is_number(b):
        c = float(b)
        out = a.data - c

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, g)

        return _finish("sub", (a,), out, backward_fn)
    if _is_number(a) and isinstance(b, Tensor):
        c = float(a)
        out = c - b.data

        def backward_fn(g):
            if b.requires_grad:
                _accumulate(b, -g)

        return _finish("sub", (b,), out, backward_fn)
    return NotImplemented


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast(a, b, "mul")
        out = a.data * b.data

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, _fit_shape(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _fit_shape(g * a.data, b.data.shape))

        return _finish("mul", (a, b), out, backward_fn)
    if _is_number(b):
        a, b = a, float(b)
    elif _is_number(a):
        a, b = b, float(a)
    else:
        return NotImplemented
    c = b
    out = a.data * c

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _finish("mul", (a,), out, backward_fn)


def div(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast(a, b, "div")
        if np.any(b.data == 0):
            raise ZeroDivisionError("div by tensor containing exact zeros; add an epsilon")
        out = a.data / b.data

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, _fit_shape(g / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _fit_shape(-g * a.data / (b.data * b.data), b.data.shape))

        return _finish("div", (a, b), out, backward_fn)
    if isinstance(a, Tensor) and _is_number(b):
        c = float(b)
        if c == 0.0:
            raise ZeroDivisionError("div by exact scalar zero")
        out = a.data / c

        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, g / c)

        return _finish("div", (a,), out, backward_fn)
    if _is_number(a) and isinstance(b, Tensor):
        c = float(a)
        if np.any(b.data == 0):
            raise ZeroDivisionError("div by tensor containing exact zeros; add an epsilon")
        out = c / b.data

        def backward_fn(g):
            if b.requires_grad:
                _accumulate(b, -g * c / (b.data * b.data))

        return _finish("div", (b,), out, backward_fn)
    return NotImplemented


# ---------------------------------------------------------------------------
# reductions (all collapse to a 1x1x1x1 scalar tensor)


def reduce_sum(x):
    out = x.data.sum().reshape(1, 1, 1, 1)

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g  # scalar broadcast over the whole tensor

    return _finish("sum", (x,), out, backward_fn)


def reduce_mean(x):
    n = x.data.size
    out = (x.data.sum() / n).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g / n

    return _finish("mean", (x,), out, backward_fn)


def reduce_max(x):
    """Maximum element; the gradient routes to its first occurrence."""
    idx = np.unravel_index(np.argmax(x.data), x.data.shape)
    out = x.data[idx].reshape(1, 1, 1, 1).copy()

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g.reshape(())

    return _finish("max", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# finite-difference checking


def max_rel_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise over two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradient_check(fn, wrt, h=1e-5, max_coords=None, rng=None, skip_kinks=False):
    """Compare autodiff grads of scalar ``fn()`` against central differences.

    ``fn`` must rebuild its forward expression from the current values of the
    tensors in ``wrt`` each time it is called.  When ``max_coords`` is given,
    at most that many coordinates per tensor are perturbed (sampled with
    ``rng``), which keeps full-network checks tractable.  Returns the maximum
    relative error over all checked coordinates.

    ``skip_kinks`` guards against piecewise-linear activations: a central
    difference is only a derivative estimate where the function is smooth
    across the whole stencil, so coordinates whose h and h/8 estimates
    disagree (a kink inside the stencil) are excluded instead of compared.
    """
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("gradient_check targets must have requires_grad=True")
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    autograds = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * step)

    worst = 0.0
    for t, ag in zip(wrt, autograds):
        flat = t.data.reshape(-1)
        agf = ag.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            fd = central(flat, i, h)
            if skip_kinks:
                fd_fine = central(flat, i, h / 8.0)
                scale = max(abs(fd), abs(fd_fine), abs(agf[i]), 1e-6)
                if abs(fd - fd_fine) / scale > 3e-5:
                    continue
            rel = abs(fd - agf[i]) / max(abs(fd), abs(agf[i]), 1e-8)
            if rel > worst:
                worst = rel
    return worst
