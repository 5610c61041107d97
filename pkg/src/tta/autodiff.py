"""Dense float64 tensors with reverse-mode gradients and forward-mode JVPs.

A model is written once as a function ``model_fn(p, x)`` over :class:`Var`
nodes, where ``p`` maps parameter names to leaves and ``x`` is a batched
input leaf. The same function then serves three purposes:

* plain evaluation (:func:`forward_eval`),
* dual-number propagation of a parameter-space direction (:func:`forward_jvp`),
* backpropagation of an output cotangent (:func:`vjp`, :func:`reverse_grad`).

Only the primitives defined in this module may be used inside a model
function. Batched nodes carry the example axis first; parameter leaves are
unbatched.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.special import ndtr

Tensor = np.ndarray

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class LayoutError(ValueError):
    """Shapes or parameter layouts do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a computation."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


# ---------------------------------------------------------------------------
# parameter layouts


@dataclass(frozen=True)
class ParamLayout:
    """Ordered ``(name, shape, offset)`` entries describing a flat vector."""

    entries: tuple[tuple[str, tuple[int, ...], int], ...]

    def __post_init__(self):
        names = [e[0] for e in self.entries]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate parameter names in layout: {names}")
        expected = 0
        for name, shape, offset in self.entries:
            if offset != expected:
                raise LayoutError(f"entry {name!r} has offset {offset}, expected {expected}")
            if any(int(s) < 1 for s in shape):
                raise LayoutError(f"entry {name!r} has non-positive dimension in {shape}")
            expected += int(np.prod(shape, dtype=np.int64))

    @classmethod
    def from_shapes(cls, shapes) -> "ParamLayout":
        entries, offset = [], 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            entries.append((name, shape, offset))
            offset += int(np.prod(shape, dtype=np.int64))
        return cls(tuple(entries))

    @property
    def total_len(self) -> int:
        if not self.entries:
            return 0
        name, shape, offset = self.entries[-1]
        return offset + int(np.prod(shape, dtype=np.int64))

    @property
    def names(self) -> list[str]:
        return [e[0] for e in self.entries]

    def shape_of(self, name: str) -> tuple[int, ...]:
        for n, shape, _ in self.entries:
            if n == name:
                return shape
        raise KeyError(name)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 vector with named layout. Values are read-only."""

    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.shape[0] != self.layout.total_len:
            raise LayoutError(
                f"vector has {values.shape[0]} values but layout needs {self.layout.total_len}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(layout, np.zeros(layout.total_len))

    def arrays(self) -> dict[str, np.ndarray]:
        """Unflatten into read-only views keyed by parameter name."""
        return {
            name: self.values[off:off + int(np.prod(shape, dtype=np.int64))].reshape(shape)
            for name, shape, off in self.layout.entries
        }

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.layout, values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self)}, names={self.layout.names})"


def flatten(layout: ParamLayout, arrays: dict[str, np.ndarray]) -> ParamVector:
    if set(arrays) != set(layout.names):
        raise LayoutError(f"array names {sorted(arrays)} do not match layout {layout.names}")
    parts = []
    for name, shape, _ in layout.entries:
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != shape:
            raise LayoutError(f"{name!r}: shape {a.shape} != layout shape {shape}")
        parts.append(a.reshape(-1))
    return ParamVector(layout, np.concatenate(parts) if parts else np.zeros(0))


def check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise LayoutError("parameter layouts differ")


# ---------------------------------------------------------------------------
# graph nodes


class Var:
    """A node in the computation: value, optional tangent, backward closure."""

    __slots__ = ("value", "tangent", "batched", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, tangent=None, batched=True, requires_grad=False,
                 parents=(), backward_fn=None, op="leaf"):
        self.value = value
        self.tangent = tangent
        self.batched = batched
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.value.shape}, batched={self.batched})"


def constant(value, batched=False) -> Var:
    return Var(np.asarray(value, dtype=np.float64), batched=batched)


def _coerce(v) -> Var:
    if isinstance(v, Var):
        return v
    raise ContractError(f"expected a Var, got {type(v).__name__}; wrap constants with constant()")


def _node(op, value, tangent, parents, backward_fn, batched) -> Var:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    if tangent is not None and not np.all(np.isfinite(tangent)):
        raise NumericError(f"non-finite tangent produced by {op}")
    rg = any(p.requires_grad for p in parents)
    return Var(value, tangent, batched, rg, parents if rg else (), backward_fn if rg else None, op)


def _tsum(*terms):
    """Sum tangent contributions, skipping absent ones."""
    out = None
    for t in terms:
        if t is None:
            continue
        out = t if out is None else out + t
    return out


def _reduce_to(g, target: Var, per_example: bool, batched_out: bool = True):
    """Sum a broadcast gradient back onto ``target``'s shape.

    Unbatched targets keep a leading example axis when ``per_example``.
    """
    shape = target.value.shape
    if not batched_out:
        # neither operand batched: plain numpy broadcasting rules
        lead = g.ndim - len(shape)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        return g.sum(axis=axes, keepdims=True) if axes else g
    if target.batched:
        lead = g.ndim - len(shape)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        return g.sum(axis=axes, keepdims=True) if axes else g
    # unbatched target, g carries the example axis first
    rest = g.shape[1:]
    lead = len(rest) - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(1, 1 + lead)))
    axes = tuple(i + 1 for i, s in enumerate(shape) if s == 1 and g.shape[i + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g if per_example else g.sum(axis=0)


# ---------------------------------------------------------------------------
# primitives


def affine(x: Var, w: Var, b: Var | None = None) -> Var:
    """``y = x @ w.T + b`` over the last axis of a batched ``x``."""
    x, w = _coerce(x), _coerce(w)
    if not x.batched or w.batched:
        raise ContractError("affine expects a batched input and an unbatched weight")
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[1]:
        raise LayoutError(f"affine: input dim {x.value.shape[-1]} vs weight shape {w.value.shape}")
    if b is not None:
        b = _coerce(b)
        if b.value.shape != (w.value.shape[0],):
            raise LayoutError(f"affine: bias shape {b.value.shape} vs weight shape {w.value.shape}")
    xv, wv = x.value, w.value
    y = xv @ wv.T
    if b is not None:
        y = y + b.value
    tangent = _tsum(
        None if x.tangent is None else x.tangent @ wv.T,
        None if w.tangent is None else xv @ w.tangent.T,
        None if b is None else b.tangent,
    )
    if tangent is not None and tangent.shape != y.shape:
        tangent = np.broadcast_to(tangent, y.shape).copy()

    def backward(g, per_example):
        n, d_out, d_in = g.shape[0], wv.shape[0], wv.shape[1]
        gx = g @ wv if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            g3, x3 = g.reshape(n, -1, d_out), xv.reshape(n, -1, d_in)
            gw = (np.einsum("nlo,nli->noi", g3, x3) if per_example
                  else g3.reshape(-1, d_out).T @ x3.reshape(-1, d_in))
        if b is not None and b.requires_grad:
            g3 = g.reshape(n, -1, d_out).sum(axis=1)
            gb = g3 if per_example else g3.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node("affine", y, tangent, parents, backward, True)


def relu(x: Var) -> Var:
    x = _coerce(x)
    mask = x.value > 0
    y = np.where(mask, x.value, 0.0)
    t = None if x.tangent is None else np.where(mask, x.tangent, 0.0)
    return _node("relu", y, t, (x,), lambda g, pe: (np.where(mask, g, 0.0),), x.batched)


def tanh(x: Var) -> Var:
    x = _coerce(x)
    y = np.tanh(x.value)
    dy = 1.0 - y * y
    t = None if x.tangent is None else dy * x.tangent
    return _node("tanh", y, t, (x,), lambda g, pe: (g * dy,), x.batched)


def gelu(x: Var) -> Var:
    """Exact GELU, ``x * Phi(x)``."""
    x = _coerce(x)
    cdf = ndtr(x.value)
    pdf = np.exp(-0.5 * x.value * x.value) / _SQRT_2PI
    y = x.value * cdf
    dy = cdf + x.value * pdf
    t = None if x.tangent is None else dy * x.tangent
    return _node("gelu", y, t, (x,), lambda g, pe: (g * dy,), x.batched)


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    x = _coerce(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    t = None
    if x.tangent is not None:
        t = s * (x.tangent - (s * x.tangent).sum(axis=-1, keepdims=True))

    def backward(g, pe):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node("softmax", s, t, (x,), backward, x.batched)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalize the last axis of a batched ``x``, then scale and shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if not x.batched:
        raise ContractError("layer_norm expects a batched input")
    d = x.value.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise LayoutError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma
    y = gain.value * xhat + bias.value

    def _norm_linear(v):
        return (v - v.mean(axis=-1, keepdims=True)
                - xhat * (v * xhat).mean(axis=-1, keepdims=True)) / sigma

    t = _tsum(
        None if x.tangent is None else gain.value * _norm_linear(x.tangent),
        None if gain.tangent is None else gain.tangent * xhat,
        bias.tangent,
    )
    if t is not None and t.shape != y.shape:
        t = np.broadcast_to(t, y.shape).copy()

    def backward(g, per_example):
        gx = _norm_linear(g * gain.value) if x.requires_grad else None
        ggain = _reduce_to(g * xhat, gain, per_example) if gain.requires_grad else None
        gbias = _reduce_to(g, bias, per_example) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node("layer_norm", y, t, (x, gain, bias), backward, True)


def _check_broadcast(a: Var, b: Var, op: str):
    if a.batched and b.batched:
        if a.value.shape[0] != b.value.shape[0]:
            raise LayoutError(f"{op}: batch sizes differ")
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError as exc:
        raise LayoutError(f"{op}: cannot broadcast {a.value.shape} with {b.value.shape}") from exc


def add(a: Var, b: Var) -> Var:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    y = a.value + b.value
    t = _tsum(a.tangent, b.tangent)
    if t is not None and t.shape != y.shape:
        t = np.broadcast_to(t, y.shape).copy()
    batched = a.batched or b.batched

    def backward(g, pe):
        return (_reduce_to(g, a, pe, batched) if a.requires_grad else None,
                _reduce_to(g, b, pe, batched) if b.requires_grad else None)

    return _node("add", y, t, (a, b), backward, batched)


def mul(a: Var, b: Var) -> Var:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    y = a.value * b.value
    t = _tsum(
        None if a.tangent is None else a.tangent * b.value,
        None if b.tangent is None else a.value * b.tangent,
    )
    if t is not None and t.shape != y.shape:
        t = np.broadcast_to(t, y.shape).copy()
    batched = a.batched or b.batched

    def backward(g, pe):
        return (_reduce_to(g * b.value, a, pe, batched) if a.requires_grad else None,
                _reduce_to(g * a.value, b, pe, batched) if b.requires_grad else None)

    return _node("mul", y, t, (a, b), backward, batched)


def mean(x: Var, axis=None) -> Var:
    """Mean over ``axis`` (all axes when None). Reducing axis 0 of a batched
    node yields an unbatched result."""
    x = _coerce(x)
    shape = x.value.shape
    axes = tuple(range(len(shape))) if axis is None else tuple(
        a % len(shape) for a in np.atleast_1d(axis))
    count = int(np.prod([shape[a] for a in axes]))
    y = x.value.mean(axis=axes)
    t = None if x.tangent is None else x.tangent.mean(axis=axes)
    batched = x.batched and 0 not in axes

    def backward(g, pe):
        if pe and x.batched and 0 in axes:
            raise ContractError("per-example gradients through a batch reduction")
        g = np.expand_dims(np.asarray(g), axes)
        return (np.broadcast_to(g, shape) / count,)

    return _node("mean", np.asarray(y), None if t is None else np.asarray(t), (x,), backward, batched)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    """Reshape the per-example part of a batched node."""
    x = _coerce(x)
    if not x.batched:
        raise ContractError("reshape is defined for batched nodes only")
    n = x.value.shape[0]
    old = x.value.shape
    try:
        y = x.value.reshape((n,) + tuple(shape))
    except ValueError as exc:
        raise LayoutError(f"reshape: {old[1:]} -> {shape}") from exc
    t = None if x.tangent is None else x.tangent.reshape(y.shape)
    return _node("reshape", y, t, (x,), lambda g, pe: (g.reshape(old),), True)


def bmm(a: Var, b: Var, transpose_b: bool = False) -> Var:
    """Per-example matrix product of two batched 3-D nodes."""
    a, b = _coerce(a), _coerce(b)
    if not (a.batched and b.batched) or a.value.ndim != 3 or b.value.ndim != 3:
        raise ContractError("bmm expects two batched 3-D nodes")
    bv = np.swapaxes(b.value, 1, 2) if transpose_b else b.value
    if a.value.shape[2] != bv.shape[1]:
        raise LayoutError(f"bmm: {a.value.shape} @ {bv.shape}")
    y = a.value @ bv
    bt = None if b.tangent is None else (np.swapaxes(b.tangent, 1, 2) if transpose_b else b.tangent)
    t = _tsum(
        None if a.tangent is None else a.tangent @ bv,
        None if bt is None else a.value @ bt,
    )

    def backward(g, pe):
        ga = g @ np.swapaxes(bv, 1, 2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.value, 1, 2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, 1, 2)
        return ga, gb

    return _node("bmm", y, t, (a, b), backward, True)


def l2_normalize(x: Var, eps: float = 1e-12) -> Var:
    """Scale each example to unit Euclidean norm along the last axis."""
    x = _coerce(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise NumericError("l2_normalize of a (near) zero vector")
    y = x.value / norm

    def _proj(v):
        return (v - y * (y * v).sum(axis=-1, keepdims=True)) / norm

    t = None if x.tangent is None else _proj(x.tangent)
    return _node("l2_normalize", y, t, (x,), lambda g, pe: (_proj(g),), x.batched)


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy of batched ``(n, c)`` logits against int labels."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    n, c = z.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ContractError("cross_entropy: labels must be (n,) class indices")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(n)
    y = np.asarray((lse - z[rows, labels]).mean())
    p = np.exp(z - lse[:, None])
    t = None
    if logits.tangent is not None:
        t = np.asarray(((p * logits.tangent).sum(axis=1) - logits.tangent[rows, labels]).mean())

    def backward(g, pe):
        if pe:
            raise ContractError("per-example gradients through a batch loss")
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node("cross_entropy", y, t, (logits,), backward, False)


def mse(outputs: Var, targets) -> Var:
    """``mean_i 0.5 * ||outputs_i - targets_i||^2`` for batched outputs."""
    outputs = _coerce(outputs)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != outputs.value.shape:
        raise LayoutError(f"mse: targets {targets.shape} vs outputs {outputs.value.shape}")
    n = outputs.value.shape[0]
    r = outputs.value - targets
    y = np.asarray(0.5 * (r * r).sum() / n)
    t = None if outputs.tangent is None else np.asarray((r * outputs.tangent).sum() / n)

    def backward(g, pe):
        if pe:
            raise ContractError("per-example gradients through a batch loss")
        return (r * (g / n),)

    return _node("mse", y, t, (outputs,), backward, False)


PRIMITIVES = {
    f.__name__: f for f in (affine, relu, tanh, gelu, softmax, layer_norm, add, mul, mean,
                            reshape, bmm, l2_normalize, cross_entropy, mse)
}


# ---------------------------------------------------------------------------
# backpropagation


def _toposort(out: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(out: Var, cotangent, per_example: bool = False) -> dict[int, np.ndarray]:
    """Backpropagate ``cotangent`` from ``out``; returns leaf grads keyed by ``id``."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != out.value.shape:
        raise LayoutError(f"cotangent shape {cotangent.shape} vs output {out.value.shape}")
    grads: dict[int, np.ndarray] = {id(out): cotangent}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            continue
        if per_example and not node.batched:
            raise ContractError(f"per-example backward through unbatched node {node.op}")
        for p, pg in zip(node.parents, node.backward_fn(g, per_example)):
            if pg is None or not p.requires_grad:
                continue
            grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg
    return leaves


# ---------------------------------------------------------------------------
# evaluation entry points

_EVAL_HOOKS: list[Callable[[str, ParamVector], None]] = []


@contextlib.contextmanager
def eval_sites() -> Iterator[list[tuple[str, ParamVector]]]:
    """Record every ``(kind, params)`` pair at which a model function runs."""
    record: list[tuple[str, ParamVector]] = []
    hook = lambda kind, params: record.append((kind, params))  # noqa: E731
    _EVAL_HOOKS.append(hook)
    try:
        yield record
    finally:
        _EVAL_HOOKS.remove(hook)


def _notify(kind: str, params: ParamVector) -> None:
    for hook in _EVAL_HOOKS:
        hook(kind, params)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise LayoutError("input must have at least one dimension")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def _check_model_layout(model_fn, params: ParamVector) -> None:
    layout = getattr(model_fn, "layout", None)
    if layout is not None and layout != params.layout:
        raise LayoutError("parameter layout does not match the model")


def _bind(params: ParamVector, direction: ParamVector | None = None,
          requires_grad: bool = False) -> dict[str, Var]:
    tangents = direction.arrays() if direction is not None else {}
    return {
        name: Var(arr, tangents.get(name), batched=False, requires_grad=requires_grad)
        for name, arr in params.arrays().items()
    }


def _run(model_fn, p, xb) -> Var:
    out = model_fn(p, Var(xb, batched=True))
    if not isinstance(out, Var):
        raise ContractError("model function must return a Var")
    return out


def forward_eval(model_fn, params: ParamVector, x) -> np.ndarray:
    """Evaluate ``f(x; params)``; ``x`` may be one example or a batch."""
    _check_model_layout(model_fn, params)
    _notify("eval", params)
    xb, single = _as_batch(x)
    out = _run(model_fn, _bind(params), xb).value
    return out[0] if single else out


def forward_jvp(model_fn, params0: ParamVector, direction: ParamVector, x):
    """Primal ``f(x; params0)`` and directional derivative along ``direction``,
    propagated as dual numbers through every primitive."""
    _check_model_layout(model_fn, params0)
    check_same_layout(params0, direction)
    _notify("jvp", params0)
    xb, single = _as_batch(x)
    out = _run(model_fn, _bind(params0, direction), xb)
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.value)
    if single:
        return out.value[0], tangent[0]
    return out.value, tangent


def _collect(layout: ParamLayout, p: dict[str, Var], leaves, n=None) -> np.ndarray:
    parts = []
    for name, shape, _ in layout.entries:
        g = leaves.get(id(p[name]))
        size = int(np.prod(shape, dtype=np.int64))
        if g is None:
            g = np.zeros(size if n is None else (n, size))
        parts.append(g.reshape(-1) if n is None else g.reshape(n, size))
    if n is None:
        return np.concatenate(parts) if parts else np.zeros(0)
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))


def vjp(model_fn, params: ParamVector, x, cotangent, per_example: bool = False):
    """Pull an output cotangent back to parameter space.

    Returns a :class:`ParamVector` (summed over the batch), or an ``(n, P)``
    array of per-example gradients when ``per_example`` is set.
    """
    _check_model_layout(model_fn, params)
    _notify("vjp", params)
    xb, single = _as_batch(x)
    p = _bind(params, requires_grad=True)
    out = _run(model_fn, p, xb)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single:
        cot = cot[None]
    leaves = backward(out, cot, per_example=per_example)
    if per_example:
        return _collect(params.layout, p, leaves, n=xb.shape[0])
    return ParamVector(params.layout, _collect(params.layout, p, leaves))


def jacobian(model_fn, params: ParamVector, x, output_index: int) -> np.ndarray:
    """Per-example gradients of one output coordinate, shape ``(n, P)``."""
    xb, _ = _as_batch(x)
    out = forward_eval(model_fn, params, xb)
    if not 0 <= output_index < out.shape[-1]:
        raise ContractError(f"output index {output_index} out of range")
    cot = np.zeros_like(out)
    cot[..., output_index] = 1.0
    return vjp(model_fn, params, xb, cot, per_example=True)


def reverse_grad(loss_fn, params: ParamVector, batch) -> ParamVector:
    """Gradient of a scalar ``loss_fn(p, batch)`` with respect to ``params``."""
    _notify("grad", params)
    p = _bind(params, requires_grad=True)
    loss = loss_fn(p, batch)
    if not isinstance(loss, Var) or loss.value.shape != ():
        raise ContractError("loss_fn must return a scalar Var")
    if not loss.requires_grad:
        return ParamVector.zeros(params.layout)
    leaves = backward(loss, np.asarray(1.0))
    return ParamVector(params.layout, _collect(params.layout, p, leaves))


def value_and_grad(loss_fn, params: ParamVector, batch) -> tuple[float, ParamVector]:
    _notify("grad", params)
    p = _bind(params, requires_grad=True)
    loss = loss_fn(p, batch)
    if not isinstance(loss, Var) or loss.value.shape != ():
        raise ContractError("loss_fn must return a scalar Var")
    if not loss.requires_grad:
        return float(loss.value), ParamVector.zeros(params.layout)
    leaves = backward(loss, np.asarray(1.0))
    return float(loss.value), ParamVector(params.layout, _collect(params.layout, p, leaves))


def finite_diff_directional(model_fn, params0: ParamVector, direction: ParamVector, x,
                            h: float = 1e-5) -> np.ndarray:
    """Central difference ``(f(θ0 + hτ) - f(θ0 - hτ)) / 2h``."""
    if not h > 0:
        raise ContractError("step h must be positive")
    check_same_layout(params0, direction)
    plus = params0.with_values(params0.values + h * direction.values)
    minus = params0.with_values(params0.values - h * direction.values)
    return (forward_eval(model_fn, plus, x) - forward_eval(model_fn, minus, x)) / (2.0 * h)


def tangent_value_and_grad(model_fn, params0: ParamVector, direction: ParamVector, x, loss_fn):
    """Loss and gradient of ``loss_fn(f(x; p0) + J(x; p0) @ direction)``
    with respect to ``direction``.

    The model output is affine in ``direction`` so the gradient is the VJP at
    ``params0``; one dual forward pass and one backward pass, both at ``params0``.
    """
    _check_model_layout(model_fn, params0)
    check_same_layout(params0, direction)
    _notify("jvp", params0)
    xb, _ = _as_batch(x)
    p = _bind(params0, direction, requires_grad=True)
    out = _run(model_fn, p, xb)
    tangent = out.tangent if out.tangent is not None else 0.0
    lin = Var(out.value + tangent, batched=True, requires_grad=True)
    loss = loss_fn(lin)
    if not isinstance(loss, Var) or loss.value.shape != ():
        raise ContractError("loss_fn must return a scalar Var")
    cot = backward(loss, np.asarray(1.0)).get(id(lin))
    if cot is None:
        return float(loss.value), ParamVector.zeros(params0.layout)
    leaves = backward(out, cot)
    return float(loss.value), ParamVector(params0.layout, _collect(params0.layout, p, leaves))
