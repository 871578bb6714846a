"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded together with
their backward closures; :func:`backward` replays the tape in reverse.  Outside
of a tape every op is a plain numpy computation, which is what inference uses.

Sign convention: the policy-gradient objective is *maximized*.  Training code
builds the negated objective as a loss and :func:`adam_step` descends on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "DimensionError",
    "InfeasibilityError",
    "NonFiniteGradientError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "gather_rows",
    "layer_norm",
    "log",
    "masked_log_softmax",
    "masked_softmax",
    "matmul",
    "relu",
    "softmax",
    "take_along_last",
    "tanh",
]

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    pass


class InfeasibilityError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a scalar is supported")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is topologically ordered by
    construction.  A tape can be differentiated once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        if self.consumed:
            raise StaleTapeError("tape already differentiated; re-run the forward pass on a new tape")
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | dict | None = None) -> dict[int, np.ndarray]:
        if self.consumed:
            raise StaleTapeError("backward called twice on the same tape without a new forward pass")
        if not self.nodes:
            raise StaleTapeError("backward called on an empty tape")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._tape is not self:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            # release intermediate references as soon as they are consumed
            node.backward = None  # type: ignore[assignment]

        if params is None:
            targets = list(leaves.values())
        elif isinstance(params, dict):
            targets = list(params.values())
        else:
            targets = list(params)
        result: dict[int, np.ndarray] = {}
        for p in targets:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                g = _unbroadcast(g, p.shape)
            p.grad = g.astype(p.dtype, copy=False)
            result[id(p)] = p.grad
        self.nodes = []
        return result


def backward(loss: Tensor, params: Iterable[Tensor] | dict | None = None) -> dict:
    """Differentiate ``loss`` and return gradients for ``params``.

    With a ``dict`` of named parameters the result is keyed by name, otherwise
    by ``id(tensor)``.  Parameters the loss does not depend on get zeros.
    """
    tape = loss._tape if loss._tape is not None else (_TAPES[-1] if _TAPES else None)
    if tape is None:
        raise StaleTapeError("loss was not produced under an active tape")
    out = tape.backward(loss, params)
    if isinstance(params, dict):
        return {name: out[id(t)] for name, t in params.items()}
    return out


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor._wrap(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, ``b`` may be a plain matrix."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), fn)


# ---------------------------------------------------------------- softmax family


def _prep_mask(x: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        if mask.ndim == 0 or mask.shape[-1] != x.shape[-1]:
            raise DimensionError(f"mask shape {mask.shape} does not match logits {x.shape}")
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError(f"mask shape {mask.shape} does not match logits {x.shape}") from None
    if not mask.any(axis=-1).all():
        raise InfeasibilityError("softmax over a fully masked row (no feasible action)")
    return mask


def _masked_parts(x: np.ndarray, mask: np.ndarray):
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    return z, m, e, s


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    mask = _prep_mask(x, mask)
    _, _, e, s = _masked_parts(x.data, mask)
    p = e / s

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), fn)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, None)


def masked_log_softmax(x: Tensor, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries are ``-inf`` and get zero gradient."""
    mask = _prep_mask(x, mask)
    z, m, e, s = _masked_parts(x.data, mask)
    out = z - m - np.log(s)
    p = e / s

    def fn(g):
        g = np.where(mask, g, 0)
        gx = g - p * g.sum(axis=-1, keepdims=True)
        return (np.where(mask, gx, 0).astype(x.dtype, copy=False),)

    return _result(out, (x,), fn)


# ---------------------------------------------------------------- indexing


def take_along_last(x: Tensor, idx) -> Tensor:
    """``out[..., k] = x[..., idx[..., k]]``; an index array without the trailing axis yields a squeezed result."""
    idx = np.asarray(idx, dtype=np.intp)
    squeeze = idx.ndim == x.ndim - 1
    if squeeze:
        idx = idx[..., None]
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"take_along_last: index shape {idx.shape} does not match {x.shape}")
    out = np.take_along_axis(x.data, idx, axis=-1)
    shape = x.shape

    def fn(g):
        if squeeze:
            g = g[..., None]
        gx = np.zeros(shape, dtype=g.dtype)
        if idx.shape[-1] == 1:
            np.put_along_axis(gx, idx, g, axis=-1)
        else:
            flat = gx.reshape(-1, shape[-1])
            rows = np.repeat(np.arange(flat.shape[0]), idx.shape[-1])
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        return (gx,)

    return _result(out[..., 0] if squeeze else out, (x,), fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Index-select along axis 1 per batch: ``x`` (B, n, d), ``idx`` (B, M) -> (B, M, d)."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: expected (B,n,d) and (B,M), got {x.shape} and {idx.shape}")
    b = np.arange(x.shape[0])[:, None]
    n = x.shape[1]

    def fn(g):
        onehot = (idx[:, :, None] == np.arange(n)).astype(g.dtype)
        return (np.swapaxes(onehot, 1, 2) @ g,)

    return _result(x.data[b, idx], (x,), fn)


# ---------------------------------------------------------------- normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: scale {gamma.shape}/shift {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def fn(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, d).sum(axis=0)
        return gx, ggam, gbet

    return _result(xhat * gd + beta.data, (x, gamma, beta), fn)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
        }


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float | None = None,
) -> dict[str, Tensor]:
    """Bias-corrected Adam descent step, applied in place.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m.astype(p.dtype, copy=False)
        state.second_moment[name] = v.astype(p.dtype, copy=False)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - step).astype(p.dtype, copy=False)
    return params

