"""Dense float64 tensors with reverse-mode differentiation.

The operation set is deliberately closed: matmul, elementwise arithmetic,
concat / slice / pad / take / expand, transpose, reshape, sum / mean,
softmax, gelu, sigmoid and fused log-sigmoid losses, square, batch and
layer normalization, and embedding gather. That is everything the model
needs, and small enough that every op can be gradient-checked against
central finite differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands have incompatible or otherwise illegal shapes."""


class NumericError(RuntimeError):
    """A value that must be finite is not."""


class ConfigError(ValueError):
    """A configuration value outside its legal range."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Tensors are value-like: once created, ``data`` is never mutated by any
    operation. ``grad`` is populated by ``backward`` and accumulates across
    repeated backward passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._bw: Callable | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad ancestor of this scalar.

        Interior node gradients are reset per pass; leaf gradients (tensors
        with no parents, i.e. parameters and constants) accumulate across
        calls, so repeated backward passes sum as expected.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data) if self._parents else self.grad_or_zeros() + 1.0

        for node in reversed(order):
            if node._bw is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._bw(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    g = g.reshape(parent.data.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is outside the closed op set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: tuple, bw: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._bw = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch extents incompatible, {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), bw)


def tslice(a, key) -> Tensor:
    """Basic (slice / int) indexing; gradient scatters back into a zero buffer."""
    a = _lift(a)
    data = a.data[key]
    if data.base is not None:
        data = data.copy()

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return (buf,)

    return _make(data, (a,), bw)


def pad(a, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a (before, after) pair per axis."""
    a = _lift(a)
    pad_width = tuple((int(b), int(c)) for b, c in pad_width)
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad: got {len(pad_width)} pad pairs for {a.ndim}-D input")
    data = np.pad(a.data, pad_width)
    inner = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))
    return _make(data, (a,), lambda g: (g[inner],))


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather along one axis with a 1-D integer index list (repeats allowed)."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {idx.shape}")
    data = np.take(a.data, idx, axis=axis)

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _make(data, (a,), bw)


def expand(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def embedding(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding: id out of range for table with {n_rows} rows")
    data = table.data[ids]

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (buf,)

    return _make(data, (table,), bw)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(data, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size
    return _make(data, (a,), lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims),))


def softmax_lastdim(a) -> Tensor:
    """Stabilized softmax over the last axis.

    -inf entries are legal (they are the additive-mask sentinel and get
    exactly zero weight); NaN or +inf raise, as does a fully masked row.
    """
    a = _lift(a)
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("softmax: last extent must be >= 1")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax: input contains NaN or +inf")
    m = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise NumericError("softmax: a row is entirely masked")
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), bw)


def gelu(a) -> Tensor:
    """Exact gelu, x * Phi(x) with the erf form; gradient Phi(x) + x * phi(x)."""
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe split form."""
    a = _lift(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), lambda g: (g * _sigmoid(x),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) fused as -softplus(-x); never evaluates log(0)."""
    a = _lift(a)
    x = a.data
    data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), lambda g: (g * _sigmoid(-x),))


@dataclass
class NormState:
    """Running statistics and mode for one batch-norm site.

    Eval-mode output is a pure function of (input, running stats, affine),
    never of batch content. ``track_stats`` exists so gradient checking can
    re-run forwards without perturbing the running estimates.
    """

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    track_stats: bool = True
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise ConfigError(f"norm momentum must be in (0,1), got {self.momentum}")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features, dtype=DTYPE)

    def train(self):
        self.mode = "train"

    def eval(self):
        self.mode = "eval"


def batchnorm(x, gamma, beta, state: NormState, mask: np.ndarray | None = None) -> Tensor:
    """Normalize per feature channel, pooling every leading axis.

    Train mode takes statistics from the current batch, restricted to rows
    where ``mask`` is true when a mask is given, and updates the running
    stats (population variance throughout). Eval mode normalizes with the
    running stats only. The affine map is applied to every row either way.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    nf = x.shape[-1]
    if gamma.shape != (nf,) or beta.shape != (nf,):
        raise ShapeError(
            f"batchnorm: affine shapes {gamma.shape}/{beta.shape} do not match {nf} features"
        )

    if state.mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        data = gamma.data * xhat + beta.data
        lead = tuple(range(x.ndim - 1))

        def bw_eval(g):
            gx = g * gamma.data * inv
            return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return _make(data, (x, gamma, beta), bw_eval)

    flat_rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    if mask is None:
        n = flat_rows
        valid = None
    else:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != x.shape[:-1]:
            raise ShapeError(f"batchnorm: mask shape {valid.shape} does not match rows {x.shape[:-1]}")
        n = int(valid.sum())
    if n < 2:
        raise ConfigError(f"batchnorm: train mode needs at least 2 valid rows, got {n}")

    flat = x.data.reshape(-1, nf)
    rows = flat if valid is None else flat[valid.reshape(-1)]
    mu = rows.mean(axis=0)
    var = rows.var(axis=0)
    if state.track_stats:
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data
    lead = tuple(range(x.ndim - 1))
    indicator = 1.0 if valid is None else valid[..., None].astype(DTYPE)

    def bw_train(g):
        gm = g * gamma.data
        sum_gm = gm.sum(axis=lead)
        sum_gm_xhat = (gm * xhat).sum(axis=lead)
        # mu/var depend only on valid rows, hence the indicator on the correction
        gx = inv * (gm - indicator * (sum_gm + xhat * sum_gm_xhat) / n)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(data, (x, gamma, beta), bw_train)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature (last) axis independently per position."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    nf = x.shape[-1]
    if gamma.shape != (nf,) or beta.shape != (nf,):
        raise ShapeError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match {nf} features"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gm = g * gamma.data
        mean_gm = gm.mean(axis=-1, keepdims=True)
        mean_gm_xhat = (gm * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gm - mean_gm - xhat * mean_gm_xhat)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(data, (x, gamma, beta), bw)


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors from a finite-difference sweep."""

    per_param: dict[str, float]
    max_error: float

    def failing(self, tol: float) -> dict[str, float]:
        return {k: v for k, v in self.per_param.items() if v >= tol}


def grad_check_report(
    f: Callable[[], Tensor],
    named_params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|),
    maximized over ``max_coords`` sampled coordinates per parameter. ``f``
    must be a deterministic function of the parameter values.
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ConfigError(f"grad_check: eps must lie in [1e-6, 1e-4], got {eps}")
    rng = rng or np.random.default_rng(0)

    params = list(named_params.values())
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: p.grad_or_zeros().reshape(-1).copy() for name, p in named_params.items()}

    per_param: dict[str, float] = {}
    with no_grad():
        for name, p in named_params.items():
            k = min(max_coords, p.data.size)
            coords = rng.choice(p.data.size, size=k, replace=False)
            worst = 0.0
            for c in coords:
                idx = np.unravel_index(c, p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + eps
                fp = f().item()
                p.data[idx] = orig - eps
                fm = f().item()
                p.data[idx] = orig
                numeric = (fp - fm) / (2.0 * eps)
                ana = analytic[name][c]
                err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
                worst = max(worst, err)
            per_param[name] = worst

    max_error = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(per_param=per_param, max_error=max_error)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    named = {f"param{i}": p for i, p in enumerate(params)}
    return grad_check_report(f, named, eps=eps, max_coords=max_coords, rng=rng).max_error
