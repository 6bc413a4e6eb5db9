"""Dense tensors with reverse-mode automatic differentiation.

Everything the network needs runs through this module: elementwise math,
matrix products, 2-D convolution (via im2col + GEMM), transposed
convolution, bilinear 2x upsampling, batch normalization and the usual
reductions. Gradients are accumulated by walking the recorded graph in
reverse topological order.

Values are plain numpy arrays; float32 and float64 are both supported and
ops preserve the input dtype. Non-finite values are treated as an error
state: every op output is checked while finite guards are enabled (the
default), which costs one cheap pass per op next to the GEMMs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or invalid extents."""


class NumericError(ArithmeticError):
    """A tensor left the finite domain (NaN or Inf)."""


_grad_enabled = True
_finite_checks = True


class no_grad:
    """Disable graph recording inside a ``with`` block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf guards. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _guard(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in result")


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Attributes:
        data: the underlying numpy array (row-major).
        grad: accumulated gradient of the same shape, or None.
        requires_grad: whether backward() should reach this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, backward_fn, op: str) -> "Tensor":
        _guard(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def _accumulate(self, grad: np.ndarray, owned: bool = False) -> None:
        # ``owned`` promises the caller just allocated ``grad`` and holds no
        # other reference, letting us adopt the buffer. Otherwise copy: one
        # incoming array may be shared by several parents (broadcast-free
        # add), and mutating it later with += would corrupt a sibling.
        if self.grad is None:
            if owned and grad.dtype == self.data.dtype:
                self.grad = grad
                return
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        ``seed`` defaults to 1.0 for scalars; non-scalar roots need an
        explicit seed gradient of matching shape.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        self.grad = _as_array(seed).astype(self.data.dtype, copy=True).reshape(self.data.shape)

        # Iterative topological order; model graphs are too deep for recursion.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # Interior grads are not retained; free them eagerly.
                if node is not self:
                    node.grad = None
                node._backward_fn = None
                node._parents = ()
        if _finite_checks:
            for node in (n for n in order if n.grad is not None):
                _guard(node.grad, "backward")

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), bw, "neg")

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape), owned=True)
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape), owned=True)

        return Tensor._make(self.data * other.data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape), owned=True)
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape), owned=True)

        return Tensor._make(self.data / other.data, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)

        def bw(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._make(self.data ** p, (self,), bw, "pow")

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), bw, "exp")

    def log(self):
        def bw(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bw, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), bw, "sqrt")

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (self,), bw, "tanh")

    def cos(self):
        def bw(g):
            self._accumulate(-g * np.sin(self.data))

        return Tensor._make(np.cos(self.data), (self,), bw, "cos")

    def acos(self):
        def bw(g):
            self._accumulate(-g / np.sqrt(1.0 - self.data * self.data))

        return Tensor._make(np.arccos(self.data), (self,), bw, "acos")

    def relu(self):
        mask = self.data > 0

        def bw(g):
            self._accumulate(g * mask, owned=True)

        return Tensor._make(np.where(mask, self.data, 0.0), (self,), bw, "relu")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                grad = np.broadcast_to(g, self.data.shape)
            else:
                if not keepdims:
                    axes = (axis,) if isinstance(axis, int) else tuple(axis)
                    g = np.expand_dims(g, axes)
                grad = np.broadcast_to(g, self.data.shape)
            self._accumulate(grad.astype(self.data.dtype, copy=False))

        return Tensor._make(np.asarray(out_data), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape surgery ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw(g):
            self._accumulate(g.reshape(self.data.shape))

        return Tensor._make(self.data.reshape(shape), (self,), bw, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))

        def bw(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._make(self.data.transpose(axes), (self,), bw, "transpose")

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            self._accumulate(full, owned=True)

        return Tensor._make(self.data[idx], (self,), bw, "slice")

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = np.matmul(self.data, other.data)

        def bw(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.data.shape), owned=True)
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.data.shape), owned=True)

        return Tensor._make(out_data, (self, other), bw, "matmul")


# -- free functions over tensors ------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        start = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            if t.requires_grad:
                t._accumulate(g[tuple(idx)])
            start += n

    return Tensor._make(out_data, tuple(tensors), bw, "concat")


def pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the two trailing axes of a 4-D tensor symmetrically."""
    widths = ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w))
    H, W = x.data.shape[2], x.data.shape[3]

    def bw(g):
        x._accumulate(g[:, :, pad_h:pad_h + H, pad_w:pad_w + W])

    return Tensor._make(np.pad(x.data, widths), (x,), bw, "pad2d")


def dilate2d(x: Tensor, stride, extra=(0, 0)) -> Tensor:
    """Insert stride-1 zeros between spatial entries, plus trailing zeros.

    Maps an input of extent n to (n-1)*s + 1 + extra; the workhorse behind
    transposed convolution.
    """
    sh, sw = stride
    eh, ew = extra
    B, C, H, W = x.data.shape
    out_data = np.zeros((B, C, (H - 1) * sh + 1 + eh, (W - 1) * sw + 1 + ew), dtype=x.data.dtype)
    out_data[:, :, ::sh, ::sw][:, :, :H, :W] = x.data

    def bw(g):
        x._accumulate(np.ascontiguousarray(g[:, :, ::sh, ::sw][:, :, :H, :W]))

    return Tensor._make(out_data, (x,), bw, "dilate2d")


def take_along(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather entries of ``x`` at integer ``index`` along ``axis``."""
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, index, g, axis=axis)
        x._accumulate(full, owned=True)

    return Tensor._make(np.take_along_axis(x.data, index, axis=axis), (x,), bw, "take_along")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shift - shift.exp().sum(axis=axis, keepdims=True).log()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()


def spatial_std(x: Tensor, axis, eps: float = 1e-10) -> Tensor:
    """Biased standard deviation with epsilon inside the square root."""
    mu = x.mean(axis=axis, keepdims=True)
    d = x - mu
    return ((d * d).mean(axis=axis, keepdims=False) + eps).sqrt()


# -- convolution -----------------------------------------------------------------


def _conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"conv2d: spatial extent {n} too small for kernel {k} stride {s} pad {p}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    # One transpose-free block copy per kernel offset into a batched-GEMM
    # operand [B, C*KH*KW, OH*OW]; every copy runs along contiguous rows.
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh * kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # [Cout, Cin*KH*KW] with the same (c, kh, kw) minor order as _im2col rows.
    co = w.shape[0]
    return np.ascontiguousarray(w.reshape(co, -1))


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    sh, sw = stride
    ph, pw = padding
    b, c, h, wdt = x.shape
    co, ci, kh, kw = w.shape
    oh = _conv_out_extent(h, kh, sh, ph)
    ow = _conv_out_extent(wdt, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    y = np.matmul(_weight_matrix(w), cols)        # [B, Cout, OH*OW]
    return y.reshape(b, co, oh, ow)


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of NCHW input with OIHW weights.

    Output extent per axis is floor((n + 2p - k)/s) + 1. Channel mismatch
    raises ShapeError; non-finite input raises NumericError.
    """
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[1]} channels, weight expects {w.data.shape[1]}")
    _guard(x.data, "conv2d input")

    sh, sw = stride
    ph, pw = padding
    b, c, h, wdt = x.data.shape
    co, ci, kh, kw = w.data.shape
    oh = _conv_out_extent(h, kh, sh, ph)
    ow = _conv_out_extent(wdt, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    out_data = np.matmul(_weight_matrix(w.data), cols).reshape(b, co, oh, ow)
    # The column matrix is the expensive part of both passes; keep it for
    # the weight gradient while a graph is being recorded, free it otherwise.
    keep = cols if (_grad_enabled and w.requires_grad) else None
    cols = None

    def bw(g):
        if w.requires_grad:
            g3 = g.reshape(b, co, oh * ow)
            dw = np.matmul(g3, keep.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(dw.reshape(co, ci, kh, kw), owned=True)
        if x.requires_grad:
            # dx = full correlation of the stride-dilated output grad with the
            # spatially flipped, channel-swapped kernel.
            hd, wd = (oh - 1) * sh + 1, (ow - 1) * sw + 1
            dil = np.zeros((b, co, hd, wd), dtype=g.dtype)
            dil[:, :, ::sh, ::sw] = g
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dxp = _conv2d_raw(dil, wf, (1, 1), (kh - 1, kw - 1))
            hp, wp = h + 2 * ph, wdt + 2 * pw
            if dxp.shape[2] != hp or dxp.shape[3] != wp:
                grown = np.zeros((b, c, hp, wp), dtype=g.dtype)
                grown[:, :, :dxp.shape[2], :dxp.shape[3]] = dxp
                dxp = grown
            x._accumulate(np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wdt]), owned=True)

    return Tensor._make(out_data, (x, w), bw, "conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, stride=(2, 2), padding=(0, 0),
                      output_padding=(0, 0)) -> Tensor:
    """Transposed 2-D convolution with IOHW weights.

    Built as zero-stuffing followed by an ordinary convolution with the
    flipped kernel, so output extent is (n-1)*s - 2p + k + output_padding.
    """
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    if isinstance(output_padding, int):
        output_padding = (output_padding, output_padding)
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input has {x.data.shape[1]} channels, weight expects {w.data.shape[0]}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    ph, pw = padding
    if kh - 1 - ph < 0 or kw - 1 - pw < 0:
        raise ShapeError("transposed_conv2d: padding exceeds kernel-1")
    stuffed = dilate2d(x, stride, extra=output_padding)
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d(stuffed, wf, stride=(1, 1), padding=(kh - 1 - ph, kw - 1 - pw))


# -- resampling ------------------------------------------------------------------


def _upsample2x_axis(x: Tensor, axis: int) -> Tensor:
    """Double one axis by half-pixel-center bilinear interpolation."""
    n = x.data.shape[axis]
    src = np.moveaxis(x.data, axis, -1)
    out = np.empty(src.shape[:-1] + (2 * n,), dtype=src.dtype)
    out[..., 0] = src[..., 0]
    out[..., 2 * n - 1] = src[..., n - 1]
    if n > 1:
        out[..., 1:2 * n - 1:2] = 0.75 * src[..., :n - 1] + 0.25 * src[..., 1:]
        out[..., 2:2 * n - 1:2] = 0.25 * src[..., :n - 1] + 0.75 * src[..., 1:]

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        dsrc = np.zeros_like(src)
        dsrc[..., 0] += gm[..., 0]
        dsrc[..., n - 1] += gm[..., 2 * n - 1]
        if n > 1:
            odd = gm[..., 1:2 * n - 1:2]
            even = gm[..., 2:2 * n - 1:2]
            dsrc[..., :n - 1] += 0.75 * odd + 0.25 * even
            dsrc[..., 1:] += 0.25 * odd + 0.75 * even
        x._accumulate(np.ascontiguousarray(np.moveaxis(dsrc, -1, axis)), owned=True)

    return Tensor._make(np.ascontiguousarray(np.moveaxis(out, -1, axis)), (x,), bw, "upsample2x")


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Double both spatial extents of an NCHW tensor.

    Only factor 2 is supported; the interpolation uses half-pixel centers
    (no corner alignment), so constants are preserved exactly and outputs
    stay inside the input's min/max range.
    """
    if factor != 2:
        raise ShapeError(f"bilinear_upsample: only factor 2 is supported, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected 4-D input, got {x.data.shape}")
    return _upsample2x_axis(_upsample2x_axis(x, 2), 3)


# -- batch normalization -----------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place with the given momentum; eval mode applies the
    running statistics as constants. The training path is a fused op with
    the closed-form backward, since composite reductions dominated profile
    time on large activations.
    """
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: parameter extent must be ({c},)")
    if not training:
        gamma4 = gamma.reshape(1, c, 1, 1)
        beta4 = beta.reshape(1, c, 1, 1)
        rm = Tensor(running_mean.reshape(1, c, 1, 1))
        rstd = Tensor(np.sqrt(running_var.reshape(1, c, 1, 1) + eps))
        return gamma4 * ((x - rm) / rstd) + beta4

    axes = (0, 2, 3)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = np.square(x.data - mu).mean(axis=axes, keepdims=True)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(c)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out_data = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes), owned=True)
        sum_g_xhat = (g * xhat).sum(axis=axes, keepdims=True)
        if gamma.requires_grad:
            gamma._accumulate(sum_g_xhat.reshape(c).copy(), owned=True)
        if x.requires_grad:
            sum_g = g.sum(axis=axes, keepdims=True)
            dx = (g4 * inv_std / n) * (n * g - sum_g - xhat * sum_g_xhat)
            x._accumulate(dx, owned=True)

    return Tensor._make(out_data, (x, gamma, beta), bw, "batchnorm2d")


# -- gradient verification -----------------------------------------------------------


class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    def __init__(self, max_rel_err: float, tolerance: float, num_coords: int, worst: str):
        self.max_rel_err = max_rel_err
        self.tolerance = tolerance
        self.num_coords = num_coords
        self.worst = worst
        self.passed = max_rel_err < tolerance

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({state}, max_rel_err={self.max_rel_err:.3e}, "
                f"tol={self.tolerance:.1e}, coords={self.num_coords}, worst={self.worst})")


def grad_check(f, params, step: float = 1e-3, tolerance: float = 1e-4,
               coords_per_tensor: int = 4, rng=None) -> GradCheckReport:
    """Compare the reverse-mode gradient of scalar ``f()`` against central
    finite differences at a sample of parameter coordinates.

    ``f`` must close over ``params`` and be deterministic; that is verified
    by evaluating it twice before differencing. Relative error uses
    max(|analytic|, |numeric|, 1e-5) in the denominator so coordinates with
    vanishing gradients are judged against finite-difference noise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = list(params)

    with no_grad():
        y0 = f().item()
        y1 = f().item()
    if y0 != y1:
        raise NumericError(f"grad_check: f is not deterministic ({y0!r} vs {y1!r})")

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    worst = ""
    total = 0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords_per_tensor else rng.choice(n, size=coords_per_tensor, replace=False)
        for j in picks:
            saved = flat[j]
            with no_grad():
                flat[j] = saved + step
                y_plus = f().item()
                flat[j] = saved - step
                y_minus = f().item()
            flat[j] = saved
            numeric = (y_plus - y_minus) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            total += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"param[{i}] coord {int(j)}: analytic {a:.6e} numeric {numeric:.6e}"
    for p in params:
        p.zero_grad()
    return GradCheckReport(max_rel, tolerance, total, worst)
