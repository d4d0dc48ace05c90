"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package that trains runs on :class:`DiffTensor`: a numpy
array plus a tape node.  Ops build an explicit DAG eagerly; ``backward``
walks it once in reverse topological order.  Storage is float32 by default
(float64 is supported for high-precision gradient checking); explicit
reductions accumulate in float64 regardless of storage dtype.

Gradients accumulate: a node's ``grad`` buffer is only ever added to, so
repeated backward passes sum their contributions and callers are expected
to zero grads between optimizer steps (see :func:`zero_grads`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_GELU_K = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


class DiffTensor:
    """A dense float tensor participating in a differentiation graph.

    ``data`` is row-major.  ``grad`` is allocated iff ``requires_grad`` and
    always has the same shape as ``data``.  Non-leaf tensors produced by ops
    carry ``requires_grad=True`` whenever any input does, so intermediate
    gradients (e.g. of a model output) are available after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents: tuple[DiffTensor, ...] = ()
        self._vjp = None

    @property
    def grad(self):
        """Same-shape accumulator; allocated (as zeros) iff requires_grad."""
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; the named module functions are the primary surface
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x, dtype) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[DiffTensor, ...], vjp) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._grad = None
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core ops


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product of two 2-D tensors, [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _node(data, (a, b), vjp)


def affine(x: DiffTensor, weight: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """Fused x @ weight + bias for [t, in] inputs (one tape node)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine shapes incompatible: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine bias {bias.shape} vs weight {weight.shape}")
    data = x.data @ weight.data
    data += bias.data

    def vjp(g):
        return ((x, g @ weight.data.T),
                (weight, x.data.T @ g),
                (bias, g.sum(axis=0, dtype=np.float64).astype(g.dtype)))

    return _node(data, (x, weight, bias), vjp)


def transpose(x: DiffTensor) -> DiffTensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    data = np.ascontiguousarray(x.data.T)

    def vjp(g):
        return ((x, np.ascontiguousarray(g.T)),)

    return _node(data, (x,), vjp)


def softmax_rows(x: DiffTensor) -> DiffTensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(x.data.dtype)

    def vjp(g):
        inner = (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(g.dtype)
        return ((x, y * (g - inner)),)

    return _node(y, (x,), vjp)


def layernorm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise DimensionError(f"layernorm expects a 2-D tensor, got {x.shape}")
    c = x.shape[1]
    if c < 2:
        raise DimensionError(f"layernorm needs at least 2 columns, got {c}")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layernorm gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    dt = x.data.dtype
    mu = x.data.mean(axis=1, keepdims=True, dtype=np.float64)
    var = np.maximum(
        (x.data * x.data).mean(axis=1, keepdims=True, dtype=np.float64) - mu * mu, 0.0)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu.astype(dt)) * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True, dtype=np.float64).astype(dt)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True, dtype=np.float64).astype(dt)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (
            (x, dx),
            (gain, (g * xhat).sum(axis=0, dtype=np.float64).astype(dt)),
            (bias, g.sum(axis=0, dtype=np.float64).astype(dt)),
        )

    return _node(y, (x, gain, bias), vjp)


def pointwise(x: DiffTensor, kind: str, other: DiffTensor | None = None,
              value: float | None = None) -> DiffTensor:
    """Elementwise op. ``kind`` is one of gelu, elu_plus_one, add, mul, scale.

    ``add``/``mul`` take a second tensor (numpy broadcasting rules);
    ``scale`` takes a python float in ``value``.
    """
    if kind == "gelu":
        return _gelu(x)
    if kind == "elu_plus_one":
        return _elu_plus_one(x)
    if kind == "add":
        if other is None:
            raise ContractError("pointwise add needs a second tensor")
        return _binary(x, other, "add")
    if kind == "mul":
        if other is None:
            raise ContractError("pointwise mul needs a second tensor")
        return _binary(x, other, "mul")
    if kind == "scale":
        if value is None:
            raise ContractError("pointwise scale needs a value")
        return scale(x, value)
    raise ContractError(f"unknown pointwise kind {kind!r}")


def _gelu(x: DiffTensor) -> DiffTensor:
    # tanh form, as used by ViT-style MLPs
    xd = x.data
    u = _GELU_K * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_A * xd ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du
        return ((x, g * dy.astype(g.dtype)),)

    return _node(y.astype(xd.dtype), (x,), vjp)


def _elu_plus_one(x: DiffTensor) -> DiffTensor:
    # strictly positive feature map: x+1 for x >= 0, exp(x) below
    xd = x.data
    ex = np.exp(np.minimum(xd, 0.0))
    y = np.where(xd > 0.0, xd + 1.0, ex)

    def vjp(g):
        return ((x, g * np.where(xd > 0.0, 1.0, ex).astype(g.dtype)),)

    return _node(y.astype(xd.dtype), (x,), vjp)


def _binary(a: DiffTensor, b: DiffTensor, kind: str) -> DiffTensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if kind == "add":
        data = a.data + b.data

        def vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    else:
        data = a.data * b.data

        def vjp(g):
            return ((a, _unbroadcast(g * b.data, a.shape)),
                    (b, _unbroadcast(g * a.data, b.shape)))

    return _node(data, (a, b), vjp)


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    return _binary(a, b, "add")


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    return _binary(a, b, "mul")


def scale(x: DiffTensor, factor: float) -> DiffTensor:
    factor = float(factor)
    data = x.data * factor

    def vjp(g):
        return ((x, g * factor),)

    return _node(data, (x,), vjp)


def div(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise a / b with broadcasting. Caller guarantees b != 0."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
    inv = 1.0 / b.data
    data = a.data * inv

    def vjp(g):
        return ((a, _unbroadcast(g * inv, a.shape)),
                (b, _unbroadcast(-g * data * inv, b.shape)))

    return _node(data, (a, b), vjp)


def clamp_min(x: DiffTensor, floor: float) -> DiffTensor:
    data = np.maximum(x.data, floor)
    passed = x.data > floor

    def vjp(g):
        return ((x, g * passed.astype(g.dtype)),)

    return _node(data, (x,), vjp)


def sum_all(x: DiffTensor) -> DiffTensor:
    data = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def vjp(g):
        return ((x, np.full_like(x.data, g.reshape(()))),)

    return _node(data, (x,), vjp)


def mean_all(x: DiffTensor) -> DiffTensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def reshape(x: DiffTensor, shape: tuple[int, ...]) -> DiffTensor:
    data = x.data.reshape(shape)

    def vjp(g):
        return ((x, g.reshape(x.shape)),)

    return _node(data, (x,), vjp)


def take_rows(x: DiffTensor, indices: np.ndarray) -> DiffTensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    if x.data.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _node(data, (x,), vjp)


def slice_cols(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-D tensor, got {x.shape}")
    data = np.ascontiguousarray(x.data[:, start:stop])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return ((x, gx),)

    return _node(data, (x,), vjp)


def concat_cols(xs: list[DiffTensor]) -> DiffTensor:
    if not xs:
        raise ContractError("concat_cols of empty list")
    data = np.concatenate([x.data for x in xs], axis=1)
    widths = [x.shape[1] for x in xs]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple((x, np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]))
                     for i, x in enumerate(xs))

    return _node(data, tuple(xs), vjp)


def permute_flat(x: DiffTensor, perm: np.ndarray, out_shape: tuple[int, ...]) -> DiffTensor:
    """Rearrange elements: out.flat[i] = x.flat[perm[i]].

    ``perm`` must be a permutation of range(x.size); this is the workhorse
    behind patchify/unpatchify-style reshuffles.
    """
    perm = np.asarray(perm, dtype=np.intp)
    if perm.size != x.data.size or int(np.prod(out_shape)) != x.data.size:
        raise DimensionError(
            f"permute_flat: perm/out_shape sized {perm.size}/{out_shape} vs tensor {x.shape}")
    data = x.data.reshape(-1)[perm].reshape(out_shape)

    def vjp(g):
        gx = np.zeros(x.data.size, dtype=g.dtype)
        gx[perm] = g.reshape(-1)
        return ((x, gx.reshape(x.shape)),)

    return _node(data, (x,), vjp)


def gather_flat(x: DiffTensor, indices: np.ndarray, out_shape: tuple[int, ...]) -> DiffTensor:
    """Select elements by flat index (repeats allowed): out.flat[i] = x.flat[idx[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size != int(np.prod(out_shape)):
        raise DimensionError(f"gather_flat: {idx.size} indices vs out_shape {out_shape}")
    data = x.data.reshape(-1)[idx].reshape(out_shape)

    def vjp(g):
        gx = np.zeros(x.data.size, dtype=g.dtype)
        np.add.at(gx, idx, g.reshape(-1))
        return ((x, gx.reshape(x.shape)),)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffTensor) -> None:
    """Accumulate dRoot/dNode into ``grad`` of every requires_grad node.

    ``root`` must be scalar.  Flow buffers are per-call, so invoking
    backward twice adds each node's contribution twice (callers zero grads
    between optimizer steps).
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node._grad is None:
                node._grad = np.array(g, copy=True)
            else:
                node._grad += g
        if node._vjp is None:
            continue
        for parent, contrib in node._vjp(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                # non-mutating: vjps may alias one buffer to several parents
                flow[key] = flow[key] + contrib
            else:
                flow[key] = contrib


def zero_grads(params) -> None:
    """Zero the grad buffers of an iterable or mapping of tensors."""
    tensors = params.values() if hasattr(params, "values") else params
    for p in tensors:
        p.zero_grad()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """AdamW state: decoupled weight decay, bias-corrected moments.

    The betas / weight-decay defaults follow common masked-autoencoder
    pretraining practice; only the learning-rate constant is externally
    specified, so these are configuration, not derived values.
    """

    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, DiffTensor], state: OptimizerState,
               lr_now: float | None = None) -> None:
    """One decoupled-weight-decay Adam update. Grads are left untouched."""
    lr = state.base_lr if lr_now is None else float(lr_now)
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter {name!r} has no grad buffer")
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
        v = state.second_moment.get(name)
        if v is None:
            v = state.second_moment[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if state.weight_decay != 0.0:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
