"""Dense float64 tensors with reverse-mode differentiation.

Every numeric value in this package flows through :class:`Tensor`: a
row-major float64 array plus an optional gradient accumulated by
``backward()``. The operation set is deliberately small -- matrix
products, row softmax, layer normalization, cosine similarity, an
orthonormal channel DCT pair, top-k row selection, and the elementwise
glue those need. Nothing broadcasts beyond what these operations
require, and there are no fast transforms: matrices here are tiny.

Gradients of every differentiable operation are validated against
central finite differences by :func:`grad_check`; the package-wide
budget is ``max_rel_err <= 1e-4``.

Construction of any tensor with NaN or Inf entries raises
:class:`NonFiniteError`, so non-finite values cannot escape a public
operation silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class NonFiniteError(FloatingPointError):
    """A tensor operation produced or received NaN/Inf values."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class DegenerateRowError(ValueError):
    """A row norm is too small for a norm-dependent operation."""


class InvalidTruncationError(ValueError):
    """A channel truncation keeps more coefficients than exist."""


LAYER_NORM_EPS = 1e-5
_NORM_FLOOR = 1e-12

_grad_enabled = True


class _GradMode:
    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = self._enabled
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def no_grad() -> _GradMode:
    """Context manager: run forward passes without recording the graph."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class Tensor:
    """Row-major float64 array with optional reverse-mode gradient.

    Values are immutable by convention once built into a graph; the
    optimizer mutates leaf ``data`` in place only between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the graph's tensors.

        Single-threaded, reverse topological order; accumulation order is
        fixed by graph construction order, so repeated runs are bit
        identical.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise glue ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        def back(g, a=a):
            _accum(a, g)
        return _result(a.data + s, (a,), back)
    if a.shape == b.shape:
        def back(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)
        return _result(a.data + b.data, (a, b), back)
    # row-vector broadcast: [m, n] + [n]
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def back(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
        return _result(a.data + b.data, (a, b), back)
    raise ShapeMismatchError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, -g)
    return _result(-a.data, (a,), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        def back(g, a=a, s=s):
            _accum(a, g * s)
        return _result(a.data * s, (a,), back)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot multiply shapes {a.shape} and {b.shape}")
    def back(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _result(a.data * b.data, (a, b), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, np.full_like(a.data, float(g)))
    return _result(np.asarray(a.data.sum()), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    def back(g, a=a, n=n):
        _accum(a, np.full_like(a.data, float(g) / n))
    return _result(np.asarray(a.data.mean()), (a,), back)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    def back(g, a=a):
        _accum(a, g / a.data)
    return _result(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, g * (a.data > 0.0))
    return _result(np.maximum(a.data, 0.0), (a,), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    def back(g, a=a, cdf=cdf):
        x = a.data
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))
    return _result(x * cdf, (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    def back(g, a=a):
        _accum(a, g.reshape(a.data.shape))
    return _result(a.data.reshape(shape), (a,), back)


def take(a: Tensor, index: int) -> Tensor:
    """Pick one entry by row-major flat index, as a 0-d tensor."""
    index = int(index)
    flat = a.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise IndexError(f"flat index {index} out of range for shape {a.shape}")
    def back(g, a=a, index=index):
        buf = np.zeros_like(a.data).reshape(-1)
        buf[index] = float(g)
        _accum(a, buf.reshape(a.data.shape))
    return _result(np.asarray(flat[index]), (a,), back)


# -- matrix products ----------------------------------------------------


def _check_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeMismatchError(f"{name} expects 2-D tensors, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    def back(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), back)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` without materializing the transpose node."""
    _check_2d("matmul_t", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"matmul_t last dimensions disagree: {a.shape} x {b.shape}")
    def back(g, a=a, b=b):
        _accum(a, g @ b.data)
        _accum(b, g.T @ a.data)
    return _result(a.data @ b.data.T, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    def back(g, a=a):
        _accum(a, g.T)
    return _result(a.data.T.copy(), (a,), back)


# -- row slicing / concatenation -----------------------------------------


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_rows", a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise IndexError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    def back(g, a=a, start=start, stop=stop):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        _accum(a, buf)
    return _result(a.data[start:stop].copy(), (a,), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_cols", a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise IndexError(f"column slice [{start}:{stop}] out of range for {a.shape}")
    def back(g, a=a, start=start, stop=stop):
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = g
        _accum(a, buf)
    return _result(a.data[:, start:stop].copy(), (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    _check_2d("concat_rows", *parts)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeMismatchError(
            f"concat_rows column counts differ: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    def back(g, parts=parts, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])
    return _result(np.vstack([p.data for p in parts]), parts, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    _check_2d("concat_cols", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatchError(
            f"concat_cols row counts differ: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    def back(g, parts=parts, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])
    return _result(np.hstack([p.data for p in parts]), parts, back)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    _check_2d("gather_rows", a)
    idx = np.asarray(indices, dtype=np.intp)
    def back(g, a=a, idx=idx):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)
    return _result(a.data[idx].copy(), (a,), back)


# -- normalized / structured operations -----------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-12."""
    _check_2d("softmax_rows", a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    def back(g, a=a, y=y):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))
    return _result(y, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each trailing-axis vector to zero mean / unit variance,
    then apply the affine (gain, bias). Variance epsilon is fixed at 1e-5.
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match d={d}")
    x = a.data.reshape(-1, d)
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    y = (xhat * gain.data + bias.data).reshape(a.data.shape)
    def back(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
        g2 = g.reshape(-1, d)
        _accum(gain, (g2 * xhat).sum(axis=0))
        _accum(bias, g2.sum(axis=0))
        dxhat = g2 * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(a, (term * inv).reshape(a.data.shape))
    return _result(y, (a, gain, bias), back)


def _row_norms(x: np.ndarray, side: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1))
    bad = np.flatnonzero(norms < _NORM_FLOOR)
    if bad.size:
        raise DegenerateRowError(
            f"{side} row {int(bad[0])} has near-zero norm ({norms[bad[0]]:.3e})")
    return norms


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``."""
    _check_2d("cosine_rows", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"cosine_rows dimensions disagree: {a.shape} vs {b.shape}")
    na = _row_norms(a.data, "left")
    nb = _row_norms(b.data, "right")
    ah = a.data / na[:, None]
    bh = b.data / nb[:, None]
    y = ah @ bh.T
    def back(g, a=a, b=b, ah=ah, bh=bh, na=na, nb=nb):
        ga_hat = g @ bh
        _accum(a, (ga_hat - ah * (ga_hat * ah).sum(axis=1, keepdims=True))
               / na[:, None])
        gb_hat = g.T @ ah
        _accum(b, (gb_hat - bh * (gb_hat * bh).sum(axis=1, keepdims=True))
               / nb[:, None])
    return _result(y, (a, b), back)


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise paired cosine: out[i] = cos(a[i], b[i])."""
    _check_2d("cosine_pairs", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"cosine_pairs shapes disagree: {a.shape} vs {b.shape}")
    na = _row_norms(a.data, "left")
    nb = _row_norms(b.data, "right")
    ah = a.data / na[:, None]
    bh = b.data / nb[:, None]
    y = (ah * bh).sum(axis=1)
    def back(g, a=a, b=b, ah=ah, bh=bh, na=na, nb=nb, y=y):
        gc = g[:, None]
        _accum(a, gc * (bh - y[:, None] * ah) / na[:, None])
        _accum(b, gc * (ah - y[:, None] * bh) / nb[:, None])
    return _result(y, (a, b), back)


# -- orthonormal channel DCT ----------------------------------------------

_dct_cache: dict[int, np.ndarray] = {}


def _dct_basis(d: int) -> np.ndarray:
    """Orthonormal DCT-II matrix B with B[k, m] = s_k cos(pi (2m+1) k / 2d)."""
    basis = _dct_cache.get(d)
    if basis is None:
        k = np.arange(d, dtype=np.float64)[:, None]
        m = np.arange(d, dtype=np.float64)[None, :]
        basis = np.cos(np.pi * (2.0 * m + 1.0) * k / (2.0 * d)) * math.sqrt(2.0 / d)
        basis[0, :] = math.sqrt(1.0 / d)
        _dct_cache[d] = basis
    return basis


def dct_channels(a: Tensor) -> Tensor:
    """Orthonormal type-II DCT along the channel axis of each row."""
    _check_2d("dct_channels", a)
    basis = _dct_basis(a.shape[1])
    def back(g, a=a, basis=basis):
        _accum(a, g @ basis)
    return _result(a.data @ basis.T, (a,), back)


def idct_channels(a: Tensor, d: int) -> Tensor:
    """Inverse of :func:`dct_channels` at length ``d``.

    Truncated coefficient rows (width < d) are zero-padded before the
    inverse transform; width > d is an invalid truncation.
    """
    _check_2d("idct_channels", a)
    keep = a.shape[1]
    if keep > d:
        raise InvalidTruncationError(
            f"cannot keep {keep} coefficients of a length-{d} transform")
    basis = _dct_basis(d)
    if keep == d:
        padded = a.data
    else:
        padded = np.zeros((a.shape[0], d))
        padded[:, :keep] = a.data
    def back(g, a=a, basis=basis, keep=keep):
        _accum(a, (g @ basis.T)[:, :keep])
    return _result(padded @ basis, (a,), back)


# -- response-ranked row selection -----------------------------------------


def row_responses(a: Tensor) -> np.ndarray:
    """Channel-wise sum of squares per row (selection score)."""
    return (a.data * a.data).sum(axis=1)


def topk_rows(a: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """The k rows with largest response, descending; ties keep the lower
    original index. Returns (rows, original indices)."""
    _check_2d("topk_rows", a)
    n = a.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} rows")
    order = np.argsort(-row_responses(a), kind="stable")[:k]
    return gather_rows(a, order), order


# -- graph helpers ----------------------------------------------------------


def rbf_rows(a: Tensor, beta: float) -> Tensor:
    """Gaussian kernel of pairwise squared row distances:
    out[i, j] = exp(-beta * ||a[i] - a[j]||^2). Symmetric, unit diagonal."""
    _check_2d("rbf_rows", a)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    diff = a.data[:, None, :] - a.data[None, :, :]
    dist2 = (diff * diff).sum(axis=2)
    v = np.exp(-beta * dist2)
    def back(g, a=a, v=v, beta=beta):
        w = g * v
        w = w + w.T
        _accum(a, -2.0 * beta * (w.sum(axis=1, keepdims=True) * a.data - w @ a.data))
    return _result(v, (a,), back)


def sym_normalize(a: Tensor) -> Tensor:
    """Degree-normalize a square adjacency: D^{-1/2} A D^{-1/2}."""
    _check_2d("sym_normalize", a)
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"sym_normalize needs a square matrix, got {a.shape}")
    deg = a.data.sum(axis=1)
    if np.any(deg <= 0.0):
        raise DegenerateRowError("adjacency has a non-positive row sum")
    dinv = 1.0 / np.sqrt(deg)
    y = a.data * dinv[:, None] * dinv[None, :]
    def back(g, a=a, y=y, deg=deg, dinv=dinv):
        gy = g * y
        r = gy.sum(axis=1) + gy.sum(axis=0)
        _accum(a, g * (dinv[:, None] * dinv[None, :]) - 0.5 * (r / deg)[:, None])
    return _result(y, (a,), back)


# -- finite-difference gradient checking ------------------------------------


@dataclass
class GradReport:
    """Analytic vs central-difference gradients for one scalar function."""

    op_name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float

    def __str__(self) -> str:
        return f"{self.op_name}: max_rel_err={self.max_rel_err:.3e}"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               op_name: str = "f", h: float = 1e-5) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` against
    central differences with step ``h``.

    ``f`` must be a pure function of its argument's values.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with enable_grad():
        out = f(leaf)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    if leaf.grad is None:
        analytic = np.zeros(leaf.data.size)
    else:
        analytic = leaf.grad.reshape(-1).copy()

    probe = Tensor(x.data.copy())
    flat = probe.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(probe).item()
            flat[i] = orig - h
            fm = f(probe).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel_err = float(np.max(np.abs(analytic - numeric) / denom)) \
        if analytic.size else 0.0
    return GradReport(op_name, analytic, numeric, max_rel_err)
