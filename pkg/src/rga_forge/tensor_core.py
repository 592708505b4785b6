"""Minimal dense-array numerics with reverse-mode differentiation.

Implements exactly the operation set the toy victim encoder, the 2D
transforms, and the attack loss need: conv2d, relu, row-wise L2
normalization, cosine similarity, and a handful of elementwise/reduction
ops to glue them together. Arrays are 32-bit floats by default; a float64
mode exists for numerical gradient checking.
"""

import enum
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class ContractError(TensorError):
    pass


class DegenerateVectorError(TensorError):
    pass


# Guard for divisions the inputs cannot be trusted to keep away from zero.
DIV_GUARD = 1e-12


class NormMode(enum.Enum):
    """Denominator convention for cosine_similarity.

    NORM_PRODUCT is the standard scale-invariant cosine <a,b>/(|a||b|).
    SQUARED_NORM_PRODUCT divides by the squared norms instead.
    """

    NORM_PRODUCT = "norm-product"
    SQUARED_NORM_PRODUCT = "squared-norm-product"


class Tensor:
    """A node in a recorded computation graph.

    `data` is a contiguous row-major float array with at most 4 axes.
    `grad` is populated by backward(). `_prev` and `_backward` record the
    tape: which nodes fed this one and how to push gradients to them.
    """

    __slots__ = ("data", "grad", "_prev", "_op", "_backward")

    def __init__(self, data, dtype=np.float32, _prev=(), _op="leaf"):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if arr.ndim > 4:
            raise ShapeError(f"tensors support at most 4 axes, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self._prev = tuple(_prev)
        self._op = _op
        self._backward = lambda: None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _node(data, prev, op):
    return Tensor(data, dtype=data.dtype, _prev=prev, _op=op)


def _as_tensor(x, like):
    """Wrap plain arrays/scalars as constant leaves matching `like`'s dtype."""
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise ContractError(
                f"mixed dtypes in one graph: {x.data.dtype} vs {like.data.dtype}"
            )
        return x
    return Tensor(x, dtype=like.data.dtype)


def add(a, b):
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b), "add")

    def _bw():
        a.grad += out.grad
        b.grad += out.grad

    out._backward = _bw
    return out


def sub(a, b):
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data - b.data, (a, b), "sub")

    def _bw():
        a.grad += out.grad
        b.grad -= out.grad

    out._backward = _bw
    return out


def mul(a, b):
    if isinstance(b, (int, float, np.floating)):
        s = a.data.dtype.type(b)
        out = _node(a.data * s, (a,), "smul")

        def _bw():
            a.grad += out.grad * s

        out._backward = _bw
        return out

    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data * b.data, (a, b), "mul")

    def _bw():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._backward = _bw
    return out


def tsum(a):
    """Sum all elements to a scalar."""
    out = _node(a.data.sum(dtype=a.data.dtype).reshape(()), (a,), "sum")

    def _bw():
        a.grad += out.grad

    out._backward = _bw
    return out


def dot(a, b):
    b = _as_tensor(b, a)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("dot expects 1-d tensors")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"dot length mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(np.dot(a.data, b.data).reshape(()), (a, b), "dot")

    def _bw():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._backward = _bw
    return out


def reshape(a, shape):
    out = _node(a.data.reshape(shape), (a,), "reshape")

    def _bw():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = _bw
    return out


# Optional sink used by finite_diff_check to detect relu kink crossings:
# while set, every relu forward appends its activation pattern here.
_relu_pattern_sink = None


class _record_relu_patterns:
    def __init__(self, sink):
        self.sink = sink

    def __enter__(self):
        global _relu_pattern_sink
        self._saved = _relu_pattern_sink
        _relu_pattern_sink = self.sink
        return self.sink

    def __exit__(self, *exc):
        global _relu_pattern_sink
        _relu_pattern_sink = self._saved
        return False


def relu(a):
    """Elementwise max(0, x). The subgradient at exactly 0 is 0."""
    pos = a.data > 0
    if _relu_pattern_sink is not None:
        _relu_pattern_sink.append(pos)
    out = _node(np.where(pos, a.data, a.data.dtype.type(0)), (a,), "relu")

    def _bw():
        a.grad += out.grad * pos

    out._backward = _bw
    return out


def conv2d(x, kernel, stride=1, pad=0):
    """2-d cross-correlation of an H x W x Cin image with a k x k x Cin x Cout kernel."""
    kernel = _as_tensor(kernel, x)
    xv, kv = x.data, kernel.data
    if xv.ndim != 3:
        raise ShapeError(f"conv2d input must have 3 axes (H, W, Cin), got {xv.ndim}")
    if kv.ndim != 4:
        raise ShapeError(f"conv2d kernel must have 4 axes (k, k, Cin, Cout), got {kv.ndim}")
    kh, kw, cin_k, cout = kv.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if xv.shape[2] != cin_k:
        raise ShapeError(
            f"channel axis mismatch: input Cin={xv.shape[2]}, kernel Cin={cin_k}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    h, w, _ = xv.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty for input {h}x{w}, kernel {kh}, "
            f"stride {stride}, pad {pad}"
        )

    padded = np.pad(xv, ((pad, pad), (pad, pad), (0, 0))) if pad else xv
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))[::stride, ::stride]
    data = np.tensordot(windows, kv, axes=([3, 4, 2], [0, 1, 2]))
    out = _node(np.ascontiguousarray(data), (x, kernel), "conv2d")

    def _bw():
        go = out.grad
        gpad = np.zeros_like(padded)
        for ki in range(kh):
            for kj in range(kw):
                # input gradient: scatter each tap's contribution back
                gpad[ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += (
                    go @ kv[ki, kj].T
                )
                patch = padded[ki:ki + ho * stride:stride, kj:kj + wo * stride:stride]
                kernel.grad[ki, kj] += np.tensordot(patch, go, axes=([0, 1], [0, 1]))
        x.grad += gpad[pad:pad + h, pad:pad + w] if pad else gpad

    out._backward = _bw
    return out


def l2_normalize_rows(a, eps_div=DIV_GUARD):
    """Divide each row of an N x D tensor by max(row L2 norm, eps_div)."""
    if eps_div <= 0:
        raise ContractError(f"eps_div must be > 0, got {eps_div}")
    xv = a.data
    if xv.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects 2 axes (N, D), got {xv.ndim}")
    norms = np.sqrt((xv * xv).sum(axis=1))
    denom = np.maximum(norms, xv.dtype.type(eps_div))
    out = _node(xv / denom[:, None], (a,), "l2norm_rows")

    def _bw():
        g = out.grad
        gx = g / denom[:, None]
        big = norms > eps_div
        if big.any():
            dots = (xv[big] * g[big]).sum(axis=1)
            gx[big] -= xv[big] * (dots / norms[big] ** 3)[:, None]
        a.grad += gx

    out._backward = _bw
    return out


def cosine_similarity(a, b, mode=NormMode.NORM_PRODUCT):
    """Cosine-style similarity of two 1-d vectors, differentiable in both."""
    b = _as_tensor(b, a)
    av, bv = a.data, b.data
    if av.ndim != 1 or bv.ndim != 1:
        raise ShapeError("cosine_similarity expects 1-d tensors")
    if av.shape != bv.shape or av.size < 1:
        raise ShapeError(f"length mismatch: {av.shape} vs {bv.shape}")
    na = float(np.sqrt(np.dot(av, av)))
    nb = float(np.sqrt(np.dot(bv, bv)))
    if na < DIV_GUARD or nb < DIV_GUARD:
        raise DegenerateVectorError(
            f"cosine_similarity on near-zero vector (norms {na:.3e}, {nb:.3e})"
        )
    s = float(np.dot(av, bv))
    if mode is NormMode.NORM_PRODUCT:
        denom = na * nb
    elif mode is NormMode.SQUARED_NORM_PRODUCT:
        denom = (na * na) * (nb * nb)
    else:
        raise ContractError(f"unknown norm mode {mode!r}")
    val = np.asarray(s / denom, dtype=av.dtype).reshape(())
    out = _node(val, (a, b), "cosine")

    def _bw():
        g = float(out.grad.reshape(()))
        v = s / denom
        if mode is NormMode.NORM_PRODUCT:
            a.grad += (g * (bv / denom - (v / (na * na)) * av)).astype(av.dtype)
            b.grad += (g * (av / denom - (v / (nb * nb)) * bv)).astype(bv.dtype)
        else:
            a.grad += (g * (bv / denom - (2.0 * v / (na * na)) * av)).astype(av.dtype)
            b.grad += (g * (av / denom - (2.0 * v / (nb * nb)) * bv)).astype(bv.dtype)

    out._backward = _bw
    return out


def _topo_order(root):
    order = []
    visited = set()

    def build(node):
        if id(node) in visited:
            return
        visited.add(id(node))
        for child in node._prev:
            build(child)
        order.append(node)

    build(root)
    return order


def backward(loss, wrt):
    """Gradient of a scalar loss node with respect to `wrt`.

    Visits each recorded node exactly once in reverse topological order;
    accumulation order is fixed by the recorded graph, so identical graphs
    produce bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    in_graph = {id(n) for n in order}
    if id(wrt) not in in_graph:
        warnings.warn("backward: wrt tensor is not part of the loss graph; "
                      "returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(wrt.data)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._backward()
    return wrt.grad.copy()


def _patterns_match(ref, other):
    if len(ref) != len(other):
        return False
    return all(p.shape == q.shape and np.array_equal(p, q) for p, q in zip(ref, other))


def finite_diff_check(f, x, h=1e-3, samples=32, rng=None, skip_kinks=True,
                      check_dtype=np.float64):
    """Worst relative error between backward() and central differences.

    Probes `samples` randomly chosen coordinates of x. When skip_kinks is
    set, coordinates whose +/-h evaluations change any relu activation
    pattern are rejected (the two-sided quotient is meaningless across a
    kink) and another coordinate is drawn. The relative error denominator
    is max(|analytic|, |numeric|, 1e-8).

    The probe runs in float64 by default: the backward rules under test are
    dtype-independent, and float32 forward rounding at small h would swamp
    the comparison for small-gradient coordinates. f must therefore build
    its graph in the dtype of the tensor it receives.
    """
    if h <= 0:
        raise ContractError(f"h must be > 0, got {h}")
    if samples < 1:
        raise ContractError(f"samples must be >= 1, got {samples}")
    if rng is None:
        rng = np.random.default_rng(0)
    base = np.asarray(x.data, dtype=check_dtype).copy()

    def run(data, sink):
        with _record_relu_patterns(sink):
            leaf = Tensor(data, dtype=base.dtype)
            out = f(leaf)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued f")
        return leaf, out

    base_patterns = []
    leaf, out = run(base, base_patterns)
    analytic = backward(out, leaf).reshape(-1)

    worst = 0.0
    accepted = 0
    for idx in rng.permutation(base.size):
        if accepted >= samples:
            break
        xp = base.copy()
        xm = base.copy()
        xp.flat[idx] += h
        xm.flat[idx] -= h
        pats_p, pats_m = [], []
        _, fp = run(xp, pats_p)
        _, fm = run(xm, pats_m)
        if skip_kinks and not (
            _patterns_match(base_patterns, pats_p)
            and _patterns_match(base_patterns, pats_m)
        ):
            continue
        # use the realized step: adding h in low precision may not be exact
        step = float(xp.flat[idx]) - float(xm.flat[idx])
        numeric = (float(fp.data.reshape(())) - float(fm.data.reshape(()))) / step
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        accepted += 1
    if accepted == 0:
        raise ContractError("finite_diff_check found no kink-free coordinates")
    return worst
