"""Deterministic reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a per-input backward rule on the
output tensor; ``backward`` replays the reachable subgraph once, in reverse
creation order (a valid topological order, since an op's output is always
created after its inputs). All storage is 64-bit, reductions keep numpy's
fixed evaluation order, and any NaN/Inf produced in a forward value or a
gradient raises immediately instead of propagating.

The spiking nonlinearity is the one place the backward rule is not the
true derivative of the forward: ``spike_forward`` is a hard Heaviside step
whose backward is a surrogate from :mod:`spikesearch.surrogate`. Inside the
``relaxed_spikes`` context the step is replaced by the surrogate's smooth
antiderivative, making backward the exact derivative again -- that relaxed
network is what finite-difference gradient checks run against.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from . import surrogate as sg


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


_ids = itertools.count()
_grad_enabled = True
_spikes_relaxed = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def relaxed_spikes():
    """Replace hard spikes by their smooth surrogate primitive."""
    global _spikes_relaxed
    prev = _spikes_relaxed
    _spikes_relaxed = True
    try:
        yield
    finally:
        _spikes_relaxed = prev


def spikes_are_relaxed() -> bool:
    return _spikes_relaxed


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation.

    Leaves created with ``requires_grad=True`` carry a zero-initialized
    ``grad`` buffer that ``backward`` accumulates into; op outputs allocate
    theirs lazily during replay.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "rules", "tid", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, f"tensor {name or '<leaf>'}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = None
        self.inputs: tuple[Tensor, ...] = ()
        self.rules: tuple = ()
        self.tid = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self.inputs

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars stay raw floats rather than becoming nodes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op_kind: str, inputs: tuple[Tensor, ...], data: np.ndarray, rules: tuple) -> Tensor:
    """Register an op output on the graph.

    ``rules[i]`` maps the output gradient to input i's gradient contribution
    (or is None for non-differentiable inputs). This is also the extension
    hook for custom-gradient ops such as the spike surrogate.
    """
    _check_finite(data, f"forward of {op_kind}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tid = next(_ids)
    out.name = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op_kind
        out.inputs = inputs
        out.rules = rules
    else:
        out.requires_grad = False
        out.op = op_kind
        out.inputs = ()
        out.rules = ()
    return out


class GradTape:
    """Topologically ordered record of the ops reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.inputs:
                nodes.append(t)
                stack.extend(t.inputs)
        # Creation order is a topological order: outputs are born after inputs.
        nodes.sort(key=lambda t: t.tid)
        return cls(nodes)

    def replay(self, root: Tensor):
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += 1.0
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for inp, rule in zip(node.inputs, node.rules):
                if rule is None or not inp.requires_grad:
                    continue
                contrib = rule(g)
                _check_finite(contrib, f"backward of {node.op}")
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                if contrib.shape != inp.data.shape:
                    raise ShapeError(
                        f"backward of {node.op}: gradient shape {contrib.shape} "
                        f"!= input shape {inp.data.shape}"
                    )
                inp.grad += contrib


def backward(loss: Tensor):
    """Populate gradients of every reachable requires_grad tensor.

    Gradients accumulate additively across paths (and, for unrolled
    temporal networks, across timesteps).
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    GradTape.from_root(loss).replay(loss)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("add needs at least one Tensor")
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return record_op("add_scalar", (a,), a.data + c, (lambda g: g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _broadcast_check("add", a.data, b.data)
    return record_op(
        "add",
        (a, b),
        a.data + b.data,
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and isinstance(a, Tensor):
        _broadcast_check("sub", a.data, b.data)
        return record_op(
            "sub",
            (a, b),
            a.data - b.data,
            (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
        )
    return add(a, -b if not isinstance(b, Tensor) else b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("mul needs at least one Tensor")
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return record_op("mul_scalar", (a,), a.data * c, (lambda g: g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _broadcast_check("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return record_op(
        "mul",
        (a, b),
        ad * bd,
        (lambda g: _unbroadcast(g * bd, ad.shape), lambda g: _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = _as_tensor(a)
    _broadcast_check("div", a.data, b.data)
    ad, bd = a.data, b.data
    return record_op(
        "div",
        (a, b),
        ad / bd,
        (
            lambda g: _unbroadcast(g / bd, ad.shape),
            lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def _unary(op: str, a: Tensor, out: np.ndarray, dval: np.ndarray) -> Tensor:
    return record_op(op, (a,), out, (lambda g: g * dval,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _unary("relu", a, out, (a.data > 0.0).astype(np.float64))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _unary("tanh", a, out, 1.0 - out * out)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _unary("exp", a, out, out)


def log(a: Tensor) -> Tensor:
    return _unary("log", a, np.log(a.data), 1.0 / a.data)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _unary("sigmoid", a, out, out * (1.0 - out))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _unary(f"pow{p}", a, out, p * a.data ** (p - 1.0))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _unary("sqrt", a, out, 0.5 / out)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def rule(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return record_op("sum", (a,), np.asarray(out), (rule,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return record_op("reshape", (a,), a.data.reshape(shape), (lambda g: g.reshape(old),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    datas = [t.data for t in tensors]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: incompatible shapes {[d.shape for d in datas]} on axis {axis}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_rule(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return record_op("concat", tuple(tensors), out, tuple(make_rule(i) for i in range(len(tensors))))


def crop(a: Tensor, starts: tuple[int, ...], sizes: tuple[int, ...]) -> Tensor:
    """Slice a contiguous block; backward scatters into zeros."""
    if len(starts) != a.data.ndim or len(sizes) != a.data.ndim:
        raise ShapeError(f"crop: starts/sizes rank must match tensor rank {a.data.ndim}")
    sl = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    shape = a.data.shape

    def rule(g):
        full = np.zeros(shape)
        full[sl] = g
        return full

    return record_op("crop", (a,), a.data[sl].copy(), (rule,))


def pad2d(a: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    t, b, l, r = pad
    widths = [(0, 0)] * (a.data.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(a.data, widths)
    sl = tuple(
        [slice(None)] * (a.data.ndim - 2)
        + [slice(t, out.shape[-2] - b), slice(l, out.shape[-1] - r)]
    )
    return record_op("pad2d", (a,), out, (lambda g: g[sl],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return record_op(
            "matmul", (a, b), ad @ bd, (lambda g: g @ bd.T, lambda g: np.outer(ad, g))
        )
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return record_op(
            "matmul", (a, b), ad @ bd, (lambda g: np.outer(g, bd), lambda g: ad.T @ g)
        )
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return record_op("matmul", (a, b), ad @ bd, (lambda g: g @ bd.T, lambda g: ad.T @ g))
    raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow), (oh, ow)


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, i, j
            ]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input by FCHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(f, -1)
    out = np.matmul(wmat[None, :, :], cols).reshape(n, f, oh, ow)

    def rule_x(g):
        gmat = g.reshape(n, f, oh * ow)
        gcols = np.matmul(wmat.T[None, :, :], gmat)
        return _col2im(gcols, x.data.shape, kh, kw, stride, padding, oh, ow)

    def rule_w(g):
        gmat = g.reshape(n, f, oh * ow)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(f, cw, kh, kw)

    return record_op("conv2d", (x, w), out, (rule_x, rule_w))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4D input, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.data.shape

    def rule(g):
        return g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))

    return record_op("upsample_nearest", (x,), out, (rule,))


def subsample(x: Tensor, factor: int) -> Tensor:
    """Strided subsampling of the last two axes (keeps every factor-th
    pixel). Binary inputs stay binary, unlike an averaging pool."""
    if x.data.ndim != 4:
        raise ShapeError(f"subsample: expected 4D input, got {x.shape}")
    out = x.data[:, :, ::factor, ::factor].copy()

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, :, ::factor, ::factor] = g
        return full

    return record_op("subsample", (x,), out, (rule,))


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return p * (g - (g * p).sum(axis=axis, keepdims=True))

    return record_op("softmax", (a,), p, (rule,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(ls)

    def rule(g):
        return g - p * g.sum(axis=axis, keepdims=True)

    return record_op("log_softmax", (a,), ls, (rule,))


def softmax_mix(weights: Tensor, items: list[Tensor]) -> Tensor:
    """softmax(weights)-weighted sum of same-shape tensors.

    The gradient to ``weights[k]`` is written in the pairwise form
    p_k * sum_j p_j * (s_k - s_j) with s_k = <grad_out, item_k>, which is
    algebraically p_k (s_k - s_bar) but returns an exact 0.0 when all
    candidate outputs are identical -- the property the selection searches
    rely on for their no-signal fixed points.
    """
    if weights.data.ndim != 1 or len(items) != weights.data.shape[0]:
        raise ShapeError(
            f"softmax_mix: need one weight per item, got {weights.shape} weights "
            f"for {len(items)} items"
        )
    shape = items[0].data.shape
    for it in items[1:]:
        if it.data.shape != shape:
            raise ShapeError(f"softmax_mix: item shapes differ: {shape} vs {it.data.shape}")
    z = weights.data - weights.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out = p[0] * items[0].data
    for k in range(1, len(items)):
        out = out + p[k] * items[k].data

    item_datas = [it.data for it in items]

    def rule_weights(g):
        s = np.array([float(np.vdot(g, d)) for d in item_datas])
        gw = np.empty_like(p)
        for k in range(len(p)):
            acc = 0.0
            for j in range(len(p)):
                acc += p[j] * (s[k] - s[j])
            gw[k] = p[k] * acc
        return gw

    def make_item_rule(k):
        return lambda g: p[k] * g

    rules = (rule_weights,) + tuple(make_item_rule(k) for k in range(len(items)))
    return record_op("softmax_mix", (weights, *items), out, rules)


# ---------------------------------------------------------------------------
# spiking nonlinearity


def spike_forward(u: Tensor, threshold, spec: sg.SurrogateSpec) -> Tensor:
    """Heaviside spike H(u - threshold); ties at the threshold fire.

    Backward applies the surrogate derivative at the membrane potential.
    ``threshold`` is a float (ordinary neurons) or a Tensor (adaptive
    thresholds); a tensor threshold receives the negated surrogate factor,
    so the surrogate is applied jointly to (u - threshold). Inside
    ``relaxed_spikes`` the forward is the surrogate's smooth antiderivative
    instead of the step.
    """
    thr_tensor = isinstance(threshold, Tensor)
    thr_data = threshold.data if thr_tensor else float(threshold)
    if not np.all(np.isfinite(np.asarray(thr_data))):
        raise NonFiniteError("non-finite spike threshold")

    if thr_tensor or thr_data != spec.threshold:
        # Re-center so the surrogate's peak tracks the effective threshold.
        u_eff = u.data - thr_data + spec.threshold
    else:
        u_eff = u.data

    if _spikes_relaxed:
        out = sg.antiderivative(spec, u_eff)
    else:
        out = (u.data - thr_data >= 0.0).astype(np.float64)

    dval = None

    def deriv():
        nonlocal dval
        if dval is None:
            dval = sg.derivative(spec, u_eff)
        return dval

    def rule_u(g):
        return g * deriv()

    if thr_tensor:
        def rule_thr(g):
            return _unbroadcast(-g * deriv(), threshold.data.shape)

        return record_op("spike", (u, threshold), out, (rule_u, rule_thr))
    return record_op("spike", (u,), out, (rule_u,))
