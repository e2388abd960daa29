"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray and records the op that produced it; the
implicit tape (parent links) is topologically sorted by ``backward``. The
primitive catalogue covers what the models here need: elementwise arithmetic,
matmul, strided/padded 1-D convolution, shape ops, GELU, softmax, layer norm,
embedding lookup and reductions. Attention is composed from these primitives
so that every backward rule stays finite-difference checkable.

Broadcasting is restricted to the leading-batch pattern: operand shapes must
be identical, or one must equal the trailing dims of the other (plus plain
scalars). Anything else needs an explicit ``reshape``/``expand``.

Reductions accumulate in 64-bit even when tensors store float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _suffix_compatible(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    k = min(len(sa), len(sb))
    return sa[-k:] == sb[-k:]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` (leading axes only)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    return grad.reshape(shape)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- inspection ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad):
        grad = np.asarray(grad)
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad = self.grad + grad.reshape(self.data.shape)

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic --------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        if not _suffix_compatible(self.shape, other.shape):
            raise ValueError(f"add shapes {self.shape} and {other.shape} are not leading-batch compatible")
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return self._result(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(-g)

        return self._result(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        if not _suffix_compatible(self.shape, other.shape):
            raise ValueError(f"mul shapes {self.shape} and {other.shape} are not leading-batch compatible")
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._result(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        if not _suffix_compatible(self.shape, other.shape):
            raise ValueError(f"div shapes {self.shape} and {other.shape} are not leading-batch compatible")
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._result(a.data / b.data, (a, b), bwd)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def pow(self, exponent: float):
        a = self
        exponent = float(exponent)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * exponent * a.data ** (exponent - 1.0))

        return self._result(a.data ** exponent, (a,), bwd)

    __pow__ = pow

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * out_data)

        return self._result(out_data, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return self._result(np.log(a.data), (a,), bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out_data)

        return self._result(out_data, (a,), bwd)

    def abs(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.data))

        return self._result(np.abs(a.data), (a,), bwd)

    def maximum(self, other):
        other = self._lift(other)
        if not _suffix_compatible(self.shape, other.shape):
            raise ValueError(f"maximum shapes {self.shape} and {other.shape} incompatible")
        a, b = self, other
        a_wins = a.data >= b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * a_wins, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * ~a_wins, b.shape))

        return self._result(np.maximum(a.data, b.data), (a, b), bwd)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return self._result(a.data.reshape(shape), (a,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inverse = tuple(np.argsort(axes))

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return self._result(a.data.transpose(axes), (a,), bwd)

    def swapaxes(self, ax1: int, ax2: int):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(tuple(axes))

    def __getitem__(self, key):
        a = self

        def bwd(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)

        return self._result(a.data[key], (a,), bwd)

    def expand(self, *shape):
        """Explicitly stretch size-1 axes to ``shape`` (gradient sums back)."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        target = tuple(shape)
        src = a.shape
        if len(target) != len(src):
            raise ValueError(f"expand rank mismatch: {src} -> {target}")
        stretched = tuple(i for i, (s, t) in enumerate(zip(src, target)) if s != t)
        if any(src[i] != 1 for i in stretched):
            raise ValueError(f"expand can only stretch size-1 axes: {src} -> {target}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.sum(axis=stretched, keepdims=True, dtype=np.float64))

        return self._result(np.broadcast_to(a.data, target).copy(), (a,), bwd)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out_data = out_data.astype(a.data.dtype)

        def bwd(g):
            if not a.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                gg = np.expand_dims(gg, axes)
            a._accumulate(np.broadcast_to(gg, a.shape))

        return self._result(out_data, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- matmul ---------------------------------------------------------------------

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires operands of rank >= 2")

        def bwd(g):
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))

        return self._result(a.data @ b.data, (a, b), bwd)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- non-method primitives ---------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def repeat_interleave(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``repeats`` times (upsampling by hold)."""
    x = Tensor._lift(x)
    a = x

    def bwd(g):
        if a.requires_grad:
            new_shape = list(a.shape)
            new_shape.insert(axis + 1, repeats)
            a._accumulate(g.reshape(new_shape).sum(axis=axis + 1, dtype=np.float64))

    return Tensor._result(np.repeat(a.data, repeats, axis=axis), (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = Tensor._lift(x)
    a = x
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bwd(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(g * (cdf + a.data * pdf))

    return Tensor._result(a.data * cdf, (a,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = Tensor._lift(x)
    a = x
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True, dtype=np.float64)

    def bwd(g):
        if a.requires_grad:
            dot = np.sum(g * out_data, axis=-1, keepdims=True, dtype=np.float64)
            a._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = Tensor._lift(x)
    a = x
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((a.data - mu) * inv_std).astype(a.data.dtype)

    def bwd_norm(g):
        if a.requires_grad:
            g_mean = g.mean(axis=-1, keepdims=True, dtype=np.float64)
            gx_mean = (g * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
            a._accumulate(inv_std * (g - g_mean - xhat * gx_mean))

    normed = Tensor._result(xhat, (a,), bwd_norm)
    if gain is not None:
        normed = normed * gain
    if bias is not None:
        normed = normed + bias
    return normed


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into ``table`` (n_rows, dim) by an integer id array."""
    table = Tensor._lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    t = table

    def bwd(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, ids, g)
            t._accumulate(full)

    return Tensor._result(t.data[ids], (t,), bwd)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution: x (B, C_in, L) * weight (C_out, C_in, K) -> (B, C_out, L_out).

    Zero padding; L_out = floor((L + 2 * padding - K) / stride) + 1.
    """
    x = Tensor._lift(x)
    weight = Tensor._lift(weight)
    batch, c_in, length = x.shape
    c_out, c_in_w, kernel = weight.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d channel mismatch: input {c_in} vs weight {c_in_w}")
    l_out = (length + 2 * padding - kernel) // stride + 1
    if l_out < 1:
        raise ValueError("conv1d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    if bias is not None:
        bias = Tensor._lift(bias)
    parents = (x, weight) if bias is None else (x, weight, bias)

    # im2col with flattened 2-D GEMMs (single BLAS call each way)
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)
    cols = windows[:, :, ::stride][:, :, :l_out]  # (B, C_in, L_out, K) view
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(batch * l_out, c_in * kernel)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    out_flat = cols2 @ w2.T                       # (B*L_out, C_out)
    out_data = out_flat.reshape(batch, l_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]

    def bwd(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * l_out, c_out)
        if weight.requires_grad:
            weight._accumulate((g_flat.T @ cols2).reshape(c_out, c_in, kernel))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2), dtype=np.float64))
        if x.requires_grad:
            gcols = (g_flat @ w2).reshape(batch, l_out, c_in, kernel)
            gx = np.zeros((batch, c_in, length + 2 * padding), dtype=x.data.dtype)
            if stride > 1 and kernel % stride == 0:
                # fold whole stride-sized groups at once (kernel // stride adds)
                grouped = gcols.reshape(batch, l_out, c_in, kernel // stride, stride)
                for grp in range(kernel // stride):
                    lo = grp * stride
                    view = gx[:, :, lo:lo + l_out * stride].reshape(batch, c_in, l_out, stride)
                    view += grouped[:, :, :, grp, :].transpose(0, 2, 1, 3)
                    gx[:, :, lo:lo + l_out * stride] = view.reshape(batch, c_in, -1)
            else:
                for k in range(kernel):
                    # strided basic slice: targets are distinct within one k
                    gx[:, :, k:k + stride * l_out:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            if padding:
                gx = gx[:, :, padding:padding + length]
            x._accumulate(gx)

    return Tensor._result(out_data, parents, bwd)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              n_heads: int) -> Tensor:
    """Scaled-dot-product multi-head self-attention, composed from primitives.

    x is (B, T, D); the four weights are (D, D). Returns (B, T, D).
    """
    b, t, d = x.shape
    if d % n_heads:
        raise ValueError(f"hidden dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split_heads(y):
        return y.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    q = split_heads(x @ wq)
    k = split_heads(x @ wk)
    v = split_heads(x @ wv)
    scores = (q @ k.swapaxes(2, 3)) * (1.0 / np.sqrt(hd))
    attn = softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ wo


# -- gradients and checking ----------------------------------------------------------


def gradients(output: Tensor, wrt) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar output w.r.t. a list of tensors.

    Tensors not on any path to the output get an exact zero gradient.
    """
    if output.size != 1:
        raise ValueError("gradients() requires a scalar output")
    wrt = list(wrt)
    for t in wrt:
        t.zero_grad()
    output.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


@dataclass
class GradcheckResult:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: tuple


def gradcheck(fn, inputs, tol: float = 1e-4, eps: float = 1e-5,
              atol: float = 1e-7, max_per_tensor: int | None = None,
              seed: int = 0) -> GradcheckResult:
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` maps the given tensors to a scalar Tensor. Passes when
    |analytic - numeric| <= atol + tol * |numeric| at every checked
    coordinate. ``max_per_tensor`` caps the coordinates checked per input
    (seeded random subset), which keeps whole-model checks affordable.
    """
    inputs = [Tensor._lift(t) for t in inputs]
    out = fn(*inputs)
    grads = gradients(out, [t for t in inputs if t.requires_grad])
    analytic = iter(grads)
    rng = np.random.default_rng(seed)
    worst = (0.0, -1, ())
    ok = True
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        an = next(analytic)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(fn(*inputs).data)
            flat[j] = orig - eps
            f_minus = float(fn(*inputs).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(an.reshape(-1)[j])
            err = abs(a - numeric)
            rel = err / max(abs(numeric), 1e-12)
            if err > atol + tol * abs(numeric):
                ok = False
            if rel > worst[0]:
                where = np.unravel_index(int(j), t.shape) if t.shape else ()
                worst = (rel, i, where)
    return GradcheckResult(passed=ok, max_rel_error=worst[0],
                           worst_input=worst[1], worst_index=worst[2])
