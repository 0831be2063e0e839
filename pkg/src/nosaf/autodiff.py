"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tape` records every operation whose inputs include a tape-tracked
tensor.  Tensors without a tape are constants; operations on constants only
are evaluated eagerly and never recorded, which makes an untaped forward pass
(evaluation) run at plain numpy speed.

Example::

    tape = Tape()
    w = tape.variable(np.ones((3, 2)))
    loss = sum_all(relu(matmul(Tensor(x), w)))
    grads = tape.backward(loss)
    grads[w]  # same shape as w
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import special

from .errors import ArgumentError, DataError, DimensionError

__all__ = [
    "Tensor", "Tape", "Gradients", "SparseCsr", "BatchNormState", "AdamState",
    "matmul", "spmm", "add", "sub", "hadamard", "scale", "relu", "leaky_relu",
    "sigmoid", "broadcast_col", "concat_cols", "add_bias", "sum_all", "dropout",
    "batch_norm", "masked_softmax_cross_entropy", "backward", "adam_step",
]


class Tensor:
    """A 2-D float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor({self.rows}x{self.cols}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


# Backward closures map the upstream gradient to one gradient (or None) per input.
BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of operations, swept in reverse by :meth:`backward`."""

    def __init__(self):
        self._fns: list[BackwardFn | None] = []
        self._parents: list[tuple[int | None, ...]] = []

    def __len__(self):
        return len(self._fns)

    def variable(self, data) -> Tensor:
        """Register a leaf (a parameter or any input we want gradients for)."""
        node = len(self._fns)
        self._fns.append(None)
        self._parents.append(())
        return Tensor(data, self, node)

    def _push(self, value, inputs, fn) -> Tensor:
        node = len(self._fns)
        self._fns.append(fn)
        self._parents.append(tuple(t.node if t.tape is self else None for t in inputs))
        return Tensor(value, self, node)

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.tape is not self:
            raise ArgumentError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ArgumentError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones((1, 1))
        for i in range(loss.node, -1, -1):
            g = grads[i]
            fn = self._fns[i]
            if g is None or fn is None:
                continue
            for pid, pg in zip(self._parents[i], fn(g)):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
            grads[i] = None  # interior gradients are not kept
        return Gradients(grads)


class Gradients:
    """Gradient lookup by tensor; tensors the loss does not depend on get zeros."""

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g

    def get(self, t: Tensor):
        if t.node is None or t.node >= len(self._grads):
            return None
        return self._grads[t.node]


def backward(loss: Tensor) -> Gradients:
    if loss.tape is None:
        raise ArgumentError("loss is a constant; nothing was recorded")
    return loss.tape.backward(loss)


def _emit(value, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ArgumentError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    return tape._push(value, inputs, fn)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------
# sparse constant matrices


@dataclass(frozen=True, eq=False)
class SparseCsr:
    """Compressed-sparse-row matrix used as a constant left operand."""

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp = np.asarray(self.row_ptr, dtype=np.int64)
        ci = np.asarray(self.col_idx, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        object.__setattr__(self, "values", vals)
        if rp.shape != (self.rows + 1,) or rp[0] != 0:
            raise DataError("row_ptr must have rows+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise DataError("row_ptr must be non-decreasing")
        if rp[-1] != ci.size or ci.size != vals.size:
            raise DataError("row_ptr[-1], col_idx and values disagree on nnz")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise DataError("column index out of range")
        # strictly increasing columns inside each row
        row_start = np.zeros(ci.size + 1, dtype=bool)
        row_start[rp] = True
        if np.any(np.diff(ci)[~row_start[1:-1]] <= 0):
            raise DataError("column indices must be strictly increasing within a row")

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v) -> "SparseCsr":
        """Build from triplets; duplicate coordinates are summed."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if r.size:
            first = np.ones(r.size, dtype=bool)
            first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
            starts = np.flatnonzero(first)
            v = np.add.reduceat(v, starts)
            r, c = r[starts], c[starts]
        row_ptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=rows), out=row_ptr[1:])
        return cls(rows, cols, row_ptr, c, v)

    @classmethod
    def identity(cls, n: int) -> "SparseCsr":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.row_ptr))

    def densify(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def transpose(self) -> "SparseCsr":
        cached = self.__dict__.get("_transpose")
        if cached is None:
            cached = SparseCsr.from_coo(self.cols, self.rows, self.col_idx,
                                        self.row_indices(), self.values)
            object.__setattr__(self, "_transpose", cached)
        return cached

    @property
    def T(self) -> "SparseCsr":
        return self.transpose()

    def _scipy(self):
        mat = self.__dict__.get("_csr")
        if mat is None:
            mat = sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)
            object.__setattr__(self, "_csr", mat)
        return mat

    def dot(self, dense: np.ndarray) -> np.ndarray:
        """Plain numpy product ``self @ dense``."""
        if dense.shape[0] != self.cols:
            raise DimensionError(f"spmm: sparse {self.shape} times dense {dense.shape}")
        return np.asarray(self._scipy() @ dense)


# ----------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def spmm(s: SparseCsr, d: Tensor) -> Tensor:
    """``s @ d`` for a constant sparse ``s``; gradients flow to ``d`` only."""
    if s.cols != d.rows:
        raise DimensionError(f"spmm: sparse {s.shape} times dense {d.shape}")
    return _emit(s.dot(d.data), (d,), lambda g: (s.T.dot(g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    local = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * local, (x,), lambda g: (g * local,))


def sigmoid(x: Tensor) -> Tensor:
    # expit stays strictly positive down to x ~ -745; above ~37 it rounds to 1.0
    y = special.expit(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def broadcast_col(v: Tensor, width: int) -> Tensor:
    """Repeat a single column ``width`` times."""
    if v.cols != 1:
        raise DimensionError(f"broadcast_col needs one column, got {v.shape}")
    if width < 1:
        raise ArgumentError("broadcast width must be at least 1")
    out = np.repeat(v.data, width, axis=1)
    return _emit(out, (v,), lambda g: (g.sum(axis=1, keepdims=True),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts {a.rows} and {b.rows} differ")
    p = a.cols
    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :p], g[:, p:]))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of ``x``."""
    if b.shape != (1, x.cols):
        raise DimensionError(f"add_bias: bias {b.shape} for input {x.shape}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``p`` is the drop probability."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


@dataclass
class BatchNormState:
    """Learnable affine terms plus running statistics of one batch-norm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ArgumentError("batch-norm eps must be positive")
        if np.any(np.asarray(self.running_var) < 0):
            raise ArgumentError("running variance must be non-negative")

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.ones((1, features)), np.zeros((1, features)),
                   np.zeros((1, features)), np.ones((1, features)), momentum, eps)

    @property
    def features(self) -> int:
        return self.gamma.shape[1]


def batch_norm(x: Tensor, state: BatchNormState, training: bool,
               gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Per-column batch normalization over rows.

    ``gamma``/``beta`` may be tape variables standing in for ``state.gamma`` and
    ``state.beta``; if omitted the state's arrays are used as constants.
    Training mode updates the running statistics in place.
    """
    if x.rows == 0:
        raise ArgumentError("batch_norm needs at least one row")
    if x.cols != state.features:
        raise DimensionError(f"batch_norm: input {x.shape} for {state.features} features")
    gamma = Tensor(state.gamma) if gamma is None else gamma
    beta = Tensor(state.beta) if beta is None else beta
    G = gamma.data
    if training:
        n = x.rows
        mean = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv_std

        def bw(g):
            dxhat = g * G
            dx = inv_std * (dxhat - dxhat.mean(axis=0, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std

        def bw(g):
            return (g * G * inv_std, (g * xhat).sum(axis=0, keepdims=True),
                    g.sum(axis=0, keepdims=True))
    return _emit(xhat * G + beta.data, (x, gamma, beta), bw)


def _mask_indices(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise DimensionError(f"boolean mask of shape {mask.shape} for {n} rows")
        return np.flatnonzero(mask)
    return mask.astype(np.int64).ravel()


def masked_softmax_cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``."""
    idx = _mask_indices(mask, logits.rows)
    if idx.size == 0:
        raise ArgumentError("cross-entropy mask selects no rows")
    y = np.asarray(labels, dtype=np.int64)[idx]
    k = logits.cols
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"labels must lie in [0, {k})")
    z = logits.data[idx]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(idx.size), y]))
    shape = logits.shape

    def bw(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(idx.size), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, idx, p * (g[0, 0] / idx.size))
        return (out,)

    return _emit(np.array([[loss]]), (logits,), bw)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 0.01,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> dict:
    """One Adam update, in place, for every parameter that has a gradient.

    Weight decay is the classic L2 form: ``weight_decay * p`` is added to the
    gradient before the moment estimates.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"adam: {name} has shape {p.shape}, gradient {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params
