"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every operation records its parents and a closure that pushes the output
adjoint back to them.  Shapes must match exactly: there is no implicit
broadcasting, use :func:`expand_rows` / :func:`expand_cols` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, message: str, blocks: np.ndarray | None = None):
        super().__init__(message)
        self.blocks = blocks


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        for node in _topo_order(self):
            node.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Propagate adjoints from this node to every leaf that requires grad.

        Interior adjoints are cleared first so repeated calls over the same
        tape give identical leaf gradients (leaves still accumulate).
        """
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without seed needs a scalar, got {self.shape}")
            seed = np.ones_like(self.data)
        self.grad = np.array(np.broadcast_to(seed, self.shape), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s); operand shapes: {shapes}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    out_data = a.data / b.data

    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * out_data / b.data)

    return _make(out_data, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(c * g)

    return _make(c * a.data, (a,), backward, "scale")


def matmul(a, b) -> Tensor:
    """2-D product, or batched 3-D product with equal leading dimension."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def sparse_matmul(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a 1-D or 2-D tensor."""
    x = as_tensor(x)
    s = sp.csr_matrix(s)
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: shape mismatch {s.shape} @ {x.shape}")
    st = s.T.tocsr()

    def backward(g):
        x._accumulate(np.asarray(st @ g))

    return _make(np.asarray(s @ x.data), (x,), backward, "sparse_matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), backward, "transpose")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        a._accumulate(g.reshape(original))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, index, g)
        a._accumulate(acc)

    return _make(a.data[index], (a,), backward, "gather_rows")


def cols(a, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"cols needs a matrix, got {a.shape}")

    def backward(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        a._accumulate(acc)

    return _make(a.data[:, start:stop].copy(), (a,), backward, "cols")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}: {exc}") from exc
    return _make(data, tuple(parts), backward, "concat")


def expand_rows(a, n: int) -> Tensor:
    """Tile a 1-D tensor of length k into an ``(n, k)`` matrix."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"expand_rows needs a vector, got {a.shape}")

    def backward(g):
        a._accumulate(g.sum(axis=0))

    return _make(np.tile(a.data, (n, 1)), (a,), backward, "expand_rows")


def expand_cols(a, k: int) -> Tensor:
    """Tile a 1-D tensor of length n into an ``(n, k)`` matrix."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"expand_cols needs a vector, got {a.shape}")

    def backward(g):
        a._accumulate(g.sum(axis=1))

    return _make(np.repeat(a.data[:, None], k, axis=1), (a,), backward, "expand_cols")


def expand_scalar(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if a.data.size != 1:
        raise ShapeError(f"expand_scalar needs one element, got {a.shape}")
    original = a.shape

    def backward(g):
        a._accumulate(np.full(original, g.sum()))

    return _make(np.full(shape, a.data.reshape(-1)[0]), (a,), backward, "expand_scalar")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            a._accumulate(np.full(a.shape, float(g)))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    data = a.data.sum() if axis is None else a.data.sum(axis=axis)
    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def _unary(a, value: np.ndarray, local_grad: np.ndarray, op: str) -> Tensor:
    def backward(g):
        a._accumulate(g * local_grad)

    return _make(value, (a,), backward, op)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.logaddexp(0.0, a.data), _sigmoid(a.data), "softplus")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); no gradient flows where the floor is active."""
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, floor), (a.data > floor).astype(np.float64), "clamp_min")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary(a, s, s * (1.0 - s), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, 1.0 - t * t, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, e, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(a, np.log(a.data), 1.0 / a.data, "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, 2.0 * a.data, "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(a.data)
        return _unary(a, r, 0.5 / r, "sqrt")


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(2.0 * float(g) * a.data)

    return _make(np.asarray(np.sum(a.data * a.data)), (a,), backward, "frobenius_sq")


# ---------------------------------------------------------------------------
# recurrent layer
# ---------------------------------------------------------------------------


def _fast_sigmoid(a: np.ndarray) -> None:
    """In-place logistic via ``0.5 * (1 + tanh(x / 2))``; several times faster than ``expit``."""
    a *= 0.5
    np.tanh(a, out=a)
    a += 1.0
    a *= 0.5


def gru_layer(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Gated recurrent layer over ``x`` of shape ``(T, N, I)`` from a zero state.

    Gate order in the ``3H`` columns is reset, update, candidate:
    ``h_t = (1 - z) * n + z * h_{t-1}`` with ``n = tanh(x W_in + b_in + r * (h W_hn + b_hn))``.
    Returns all hidden states ``(T, N, H)``.  One tape node; the backward pass
    is hand-written backpropagation through time.
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    if x.ndim != 3:
        raise ShapeError(f"gru_layer expects (T, N, I) input, got {x.shape}")
    steps, n, i = x.shape
    hdim = w_hh.shape[0]
    if w_ih.shape != (i, 3 * hdim) or w_hh.shape != (hdim, 3 * hdim) or b_ih.shape != (3 * hdim,) \
            or b_hh.shape != (3 * hdim,):
        raise ShapeError(f"gru_layer: inconsistent weights {w_ih.shape}, {w_hh.shape}, {b_ih.shape}, {b_hh.shape}")
    x2 = x.data.reshape(steps * n, i)
    gx = x2 @ w_ih.data
    gx += b_ih.data
    gx = gx.reshape(steps, n, 3 * hdim)
    h2 = 2 * hdim
    hs, rzs, cands, ghn = [], [], [], []
    h = np.zeros((n, hdim))
    for t in range(steps):
        if t:
            gh = h @ w_hh.data
            gh += b_hh.data
        else:
            gh = np.broadcast_to(b_hh.data, (n, 3 * hdim))
        rz = gx[t, :, :h2] + gh[:, :h2]
        _fast_sigmoid(rz)
        cand = rz[:, :hdim] * gh[:, h2:]
        cand += gx[t, :, h2:]
        np.tanh(cand, out=cand)
        h = h - cand
        h *= rz[:, hdim:]
        h += cand
        hs.append(h)
        rzs.append(rz)
        cands.append(cand)
        ghn.append(gh[:, h2:])
    out = np.stack(hs)

    def backward(g):
        dgx = np.empty((steps, n, 3 * hdim))
        dw_hh = np.zeros_like(w_hh.data)
        db_hh = np.zeros(3 * hdim)
        dh = np.zeros((n, hdim))
        for t in range(steps - 1, -1, -1):
            dh += g[t]
            r, z, cand = rzs[t][:, :hdim], rzs[t][:, hdim:], cands[t]
            one_z = 1.0 - z
            d = dgx[t]
            dan, daz, dar = d[:, h2:], d[:, hdim:h2], d[:, :hdim]
            np.multiply(cand, cand, out=dan)
            np.subtract(1.0, dan, out=dan)
            dan *= dh
            dan *= one_z
            if t:
                np.subtract(hs[t - 1], cand, out=daz)
            else:
                np.negative(cand, out=daz)
            daz *= dh
            daz *= z
            daz *= one_z
            np.multiply(dan, ghn[t], out=dar)
            dar *= r
            dar *= 1.0 - r
            dgh = d.copy()
            dgh[:, h2:] *= r
            db_hh += dgh.sum(axis=0)
            if t:
                dw_hh += hs[t - 1].T @ dgh
                dh *= z
                dh += dgh @ w_hh.data.T
        dgx2 = dgx.reshape(steps * n, 3 * hdim)
        w_ih._accumulate(x2.T @ dgx2)
        b_ih._accumulate(dgx2.sum(axis=0))
        w_hh._accumulate(dw_hh)
        b_hh._accumulate(db_hh)
        x._accumulate((dgx2 @ w_ih.data.T).reshape(x.shape))

    return _make(out, (x, w_ih, w_hh, b_ih, b_hh), backward, "gru_layer")


def index_first(a, t: int) -> Tensor:
    """``a[t]`` along the leading axis."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[t] = g
        a._accumulate(full)

    return _make(a.data[t].copy(), (a,), backward, "index_first")


# ---------------------------------------------------------------------------
# SPD helpers
# ---------------------------------------------------------------------------

JITTER_START = 1e-8
JITTER_MAX = 1e-4
PIVOT_FLOOR = 1e-12


def _try_cholesky(m: np.ndarray) -> np.ndarray | None:
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None
    scale_ = np.mean(np.diagonal(m, axis1=-2, axis2=-1), axis=-1)
    pivots = np.diagonal(chol, axis1=-2, axis2=-1) ** 2
    if np.any(pivots.min(axis=-1) <= PIVOT_FLOOR * np.abs(scale_)):
        return None
    return chol


def cholesky_with_jitter(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Cholesky of ``(B, n, n)`` blocks with the escalating jitter policy.

    A block is first factored as-is.  If that fails (or leaves a pivot below
    ``1e-12`` of the mean diagonal) the block gets ``1e-8 * mean(diag) * I``,
    escalating x10 up to ``1e-4 * mean(diag)``.  Returns the factors and the
    absolute jitter added to each block.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    squeeze = blocks.ndim == 2
    if squeeze:
        blocks = blocks[None]
    if not np.allclose(blocks, np.swapaxes(blocks, -1, -2), rtol=0.0,
                       atol=1e-10 * max(1.0, float(np.abs(blocks).max(initial=0.0)))):
        raise CholeskyError("block is not symmetric", blocks)
    jitter = np.zeros(blocks.shape[0])
    chol = _try_cholesky(blocks)
    if chol is None:
        chol = np.empty_like(blocks)
        eye = np.eye(blocks.shape[-1])
        for b, block in enumerate(blocks):
            factor = _try_cholesky(block)
            if factor is None:
                level = np.mean(np.diag(block))
                rel = JITTER_START
                while factor is None and rel <= JITTER_MAX * (1 + 1e-9):
                    jitter[b] = rel * level
                    factor = _try_cholesky(block + jitter[b] * eye)
                    rel *= 10.0
                if factor is None:
                    raise CholeskyError(
                        f"block {b} not positive definite after jitter {JITTER_MAX:g}*mean(diag):\n{block}",
                        block,
                    )
            chol[b] = factor
    if squeeze:
        return chol[0], jitter
    return chol, jitter


def _cho_inverse(chol: np.ndarray) -> np.ndarray:
    linv = np.linalg.inv(chol)
    inv = np.swapaxes(linv, -1, -2) @ linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def spd_logdet_and_solve(m, r) -> tuple[Tensor, Tensor]:
    """Differentiable ``(log det M, M^{-1} r)`` for one SPD matrix via Cholesky."""
    m, r = as_tensor(m), as_tensor(r)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or r.shape != (m.shape[0],):
        raise ShapeError(f"spd_logdet_and_solve: shape mismatch {m.shape}, {r.shape}")
    chol, _ = cholesky_with_jitter(m.data)
    inv = _cho_inverse(chol)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    x = inv @ r.data

    def back_logdet(g):
        m._accumulate(float(g) * inv)

    def back_solve(g):
        y = inv @ g
        r._accumulate(y)
        outer = np.outer(y, x)
        m._accumulate(-0.5 * (outer + outer.T))

    return (
        _make(np.asarray(logdet), (m,), back_logdet, "spd_logdet"),
        _make(x, (m, r), back_solve, "spd_solve"),
    )


def block_gaussian_nll(m, r) -> Tensor:
    """``sum_b 0.5 * (log det M_b + r_b^T M_b^{-1} r_b)`` over ``(B, n, n)`` blocks.

    The ``log 2 pi`` constant is left to the caller.  Adjoints use the
    closed forms ``dM = 0.5 (M^{-1} - a a^T)`` and ``dr = a`` with ``a = M^{-1} r``.
    """
    m, r = as_tensor(m), as_tensor(r)
    if m.ndim != 3 or m.shape[1] != m.shape[2] or r.shape != m.shape[:2]:
        raise ShapeError(f"block_gaussian_nll: shape mismatch {m.shape}, {r.shape}")
    chol, _ = cholesky_with_jitter(m.data)
    inv = _cho_inverse(chol)
    alpha = np.einsum("bij,bj->bi", inv, r.data)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)))
    quad = np.sum(alpha * r.data)

    def backward(g):
        g = float(g)
        if m.requires_grad:
            m._accumulate(0.5 * g * (inv - alpha[:, :, None] * alpha[:, None, :]))
        r._accumulate(g * alpha)

    return _make(np.asarray(0.5 * (logdet + quad)), (m, r), backward, "block_gaussian_nll")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class TensorCheck:
    name: str
    mode: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{c.name:<24s} {c.mode:<7s} rel_err={c.rel_error:.3e} |g|={c.analytic_norm:.3e}"
               for c in self.checks]
        out.append(f"max relative error {self.max_rel_error:.3e} "
                   f"({'PASS' if self.passed else 'FAIL'} at tol {self.tolerance:g})")
        return out


def grad_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 4096,
    probes: int = 8,
    probe_names: Iterable[str] = (),
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central differences, tensor by tensor.

    Tensors up to ``max_coords`` entries (and not listed in ``probe_names``)
    are checked coordinate-wise; the rest along ``probes`` random unit
    directions.  The error per tensor is ``|a - f| / max(|a|, |f|, floor)``
    over the stacked coordinates or probe values.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    loss = loss_fn(leaves)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    probe_set = set(probe_names)

    def value(name: str, arr: np.ndarray) -> float:
        current = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        return float(loss_fn(current).data)

    report = GradCheckReport(tolerance=tolerance)
    for name, x0 in base.items():
        if x0.size <= max_coords and name not in probe_set:
            mode = "coords"
            numeric = np.zeros(x0.size)
            flat = x0.reshape(-1)
            for i in range(x0.size):
                xp = flat.copy()
                xp[i] += epsilon
                xm = flat.copy()
                xm[i] -= epsilon
                numeric[i] = (value(name, xp.reshape(x0.shape)) - value(name, xm.reshape(x0.shape))) / (2 * epsilon)
            a = analytic[name].reshape(-1)
        else:
            mode = "probes"
            a = np.zeros(probes)
            numeric = np.zeros(probes)
            for p in range(probes):
                u = rng.standard_normal(x0.shape)
                u /= np.linalg.norm(u)
                a[p] = float(np.sum(analytic[name] * u))
                numeric[p] = (value(name, x0 + epsilon * u) - value(name, x0 - epsilon * u)) / (2 * epsilon)
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        report.checks.append(TensorCheck(name, mode, float(np.linalg.norm(a - numeric) / denom),
                                         float(np.linalg.norm(a)), float(np.linalg.norm(numeric))))
    return report
