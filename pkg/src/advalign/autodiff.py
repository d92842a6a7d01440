"""Dense float64 computation graphs with reverse-mode differentiation.

Two layers live here. The eager layer (`Var` plus the ``v_*`` primitives)
records a tape as values are computed; every backward rule is itself built
from the same primitives, so gradients of gradients work without a separate
mechanism (harmonized training differentiates through an input gradient).
The declarative layer (`Graph`, `evaluate`, `gradients`) names nodes,
validates shapes when nodes are added, and executes by driving the eager
layer.

Conventions, fixed for reproducibility:
  * all data is float64; reductions use numpy's deterministic summation,
  * full reductions produce shape ``(1,)`` scalars,
  * relu/abs/max report a zero subgradient exactly at their kinks and ties,
  * sqrt/rsqrt report a zero derivative at zero (norms and normalizers treat
    the origin as a kink, same convention).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Malformed graph, binding, or request."""


class ShapeError(GraphError):
    """Operand shapes violate an op's shape rule."""


class UnboundInputError(GraphError):
    """A leaf required for evaluation was not bound."""


class UnknownLeafError(GraphError):
    """A gradient was requested for a name that is not a leaf."""


class NonScalarOutputError(GraphError):
    """gradients() needs a single-element output node."""


class NonFiniteError(GraphError):
    """An intermediate value became NaN or infinite (message names the node)."""


class Tensor:
    """Immutable dense array: a shape and a flat row-major float64 payload.

    Entries must be finite; NaN or Inf raise at construction. The wrapped
    array is a private copy with the write flag cleared, so tensors are safe
    to share across threads.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            arr = arr.reshape(tuple(int(s) for s in shape))
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor entries must be finite (got NaN or Inf)")
        arr.setflags(write=False)
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def array(self) -> np.ndarray:
        """Read-only shaped view."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only flat row-major view."""
        return self._array.reshape(-1)

    @property
    def size(self) -> int:
        return self._array.size

    def tolist(self):
        return self._array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


def as_array(values) -> np.ndarray:
    """Coerce a Tensor / array-like to a float64 ndarray without copying tensors."""
    if isinstance(values, Tensor):
        return values.array
    return np.asarray(values, dtype=np.float64)


# ---------------------------------------------------------------------------
# Eager tape layer
# ---------------------------------------------------------------------------


class Var:
    """Tape node: a value plus vjp edges back to the vars it came from.

    ``parents`` holds ``(var, vjp)`` pairs where ``vjp`` maps the upstream
    adjoint Var to this parent's adjoint Var. Vjps call back into the
    ``v_*`` primitives, so adjoints extend the tape and can themselves be
    differentiated.
    """

    __slots__ = ("data", "parents", "requires")

    def __init__(self, data: np.ndarray, parents=(), requires: bool = False):
        self.data = data
        self.parents = parents
        self.requires = requires

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _leaf(values) -> Var:
    return Var(np.asarray(values, dtype=np.float64))


def as_var(values, requires: bool = False) -> Var:
    if isinstance(values, Var):
        return values
    return Var(as_array(values), requires=requires)


def _out(data: np.ndarray, parents: list) -> Var:
    live = tuple(p for p in parents if p is not None)
    return Var(data, live, bool(live))


def _sum_to(u: Var, shape: tuple[int, ...]) -> Var:
    """Sum the broadcast dimensions of ``u`` back down to ``shape``."""
    shape = tuple(shape)
    if u.data.shape == shape:
        return u
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return v_reshape(v_reduce_sum(u), shape)
    extra = u.data.ndim - len(shape)
    if extra > 0:
        u = v_reduce_sum(u, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and u.data.shape[i] != 1)
    if axes:
        u = v_reduce_sum(u, axis=axes, keepdims=True)
    if u.data.shape != shape:
        u = v_reshape(u, shape)
    return u


def v_add(a: Var, b: Var) -> Var:
    return _out(a.data + b.data, [
        (a, lambda u: _sum_to(u, a.data.shape)) if a.requires else None,
        (b, lambda u: _sum_to(u, b.data.shape)) if b.requires else None,
    ])


def v_sub(a: Var, b: Var) -> Var:
    return _out(a.data - b.data, [
        (a, lambda u: _sum_to(u, a.data.shape)) if a.requires else None,
        (b, lambda u: _sum_to(v_neg(u), b.data.shape)) if b.requires else None,
    ])


def v_neg(a: Var) -> Var:
    return _out(-a.data, [(a, v_neg) if a.requires else None])


def v_mul(a: Var, b: Var) -> Var:
    return _out(a.data * b.data, [
        (a, lambda u: _sum_to(v_mul(u, b), a.data.shape)) if a.requires else None,
        (b, lambda u: _sum_to(v_mul(u, a), b.data.shape)) if b.requires else None,
    ])


def v_div(a: Var, b: Var) -> Var:
    def grad_b(u):
        return _sum_to(v_neg(v_div(v_mul(u, a), v_mul(b, b))), b.data.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _out(out, [
        (a, lambda u: _sum_to(v_div(u, b), a.data.shape)) if a.requires else None,
        (b, grad_b) if b.requires else None,
    ])


def v_reshape(a: Var, shape: Sequence[int]) -> Var:
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    return _out(a.data.reshape(shape),
                [(a, lambda u: v_reshape(u, old)) if a.requires else None])


def v_swaplast(a: Var) -> Var:
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _out(out, [(a, v_swaplast) if a.requires else None])


def v_matmul(a: Var, b: Var) -> Var:
    out = np.matmul(a.data, b.data)
    a_nd, b_nd = a.data.ndim, b.data.ndim

    def grad_a(u):
        if b_nd == 1:
            # y = a @ b with vector b: da = u[..., None] * b
            return _sum_to(v_mul(v_reshape(u, u.data.shape + (1,)), b), a.data.shape)
        if a_nd == 1:
            return v_matmul(u, v_swaplast(b))
        return _sum_to(v_matmul(u, v_swaplast(b)), a.data.shape)

    def grad_b(u):
        if a_nd == 1 and b_nd == 2:
            n, m = b.data.shape
            return v_mul(v_reshape(a, (n, 1)), v_reshape(u, (1, m)))
        if b_nd == 1:
            return _sum_to(v_mul(a, v_reshape(u, u.data.shape + (1,))), b.data.shape)
        return _sum_to(v_matmul(v_swaplast(a), u), b.data.shape)

    return _out(out, [
        (a, grad_a) if a.requires else None,
        (b, grad_b) if b.requires else None,
    ])


def v_relu(a: Var) -> Var:
    out = np.maximum(a.data, 0.0)
    if not a.requires:
        return Var(out)
    mask = _leaf((a.data > 0.0).astype(np.float64))  # zero exactly at the kink
    return _out(out, [(a, lambda u: v_mul(u, mask))])


def v_abs(a: Var) -> Var:
    out = np.abs(a.data)
    if not a.requires:
        return Var(out)
    sgn = _leaf(np.sign(a.data))  # sign(0) = 0: zero subgradient at the kink
    return _out(out, [(a, lambda u: v_mul(u, sgn))])


def v_tanh(a: Var) -> Var:
    out = Var(np.tanh(a.data))
    if not a.requires:
        return out
    out.parents = ((a, lambda u: v_mul(u, v_sub(_leaf(1.0), v_mul(out, out)))),)
    out.requires = True
    return out


def v_exp(a: Var) -> Var:
    out = Var(np.exp(a.data))
    if not a.requires:
        return out
    out.parents = ((a, lambda u: v_mul(u, out)),)
    out.requires = True
    return out


def v_sqrt(a: Var) -> Var:
    out = Var(np.sqrt(a.data))
    if not a.requires:
        return out
    nonzero = a.data != 0.0
    safe = _leaf(np.where(nonzero, 0.0, 1.0))
    half = _leaf(np.where(nonzero, 0.5, 0.0))
    # u * 0.5 / sqrt(x), forced to 0 at x == 0
    out.parents = ((a, lambda u: v_div(v_mul(u, half), v_add(out, safe))),)
    out.requires = True
    return out


def v_rsqrt(a: Var) -> Var:
    """x ** -0.5 with the degenerate rule rsqrt(0) = 0."""
    positive = a.data > 0.0
    with np.errstate(divide="ignore"):
        data = np.where(positive, 1.0 / np.sqrt(np.where(positive, a.data, 1.0)), 0.0)
    out = Var(data)
    if not a.requires:
        return out
    coeff = _leaf(np.where(positive, -0.5, 0.0))
    out.parents = ((a, lambda u: v_mul(u, v_mul(coeff, v_mul(out, v_mul(out, out))))),)
    out.requires = True
    return out


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def v_reduce_sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        out = np.array([a.data.sum()])
        if not a.requires:
            return Var(out)
        ones = _leaf(np.ones_like(a.data))
        expand = (1,) * max(a.data.ndim, 1)
        return _out(out, [(a, lambda u: v_mul(v_reshape(u, expand), ones))])
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not a.requires:
        return Var(out)
    kshape = tuple(1 if i in axis else n for i, n in enumerate(a.data.shape))
    ones = _leaf(np.ones_like(a.data))

    def grad(u):
        if not keepdims:
            u = v_reshape(u, kshape)
        return v_mul(u, ones)

    return _out(out, [(a, grad)])


def v_reduce_mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    naxis = _norm_axis(axis, a.data.ndim)
    if naxis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[i] for i in naxis], dtype=np.int64))
    return v_mul(v_reduce_sum(a, axis=axis, keepdims=keepdims), _leaf(1.0 / count))


def v_reduce_max(a: Var, axis=None, keepdims: bool = False) -> Var:
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        out = np.array([a.data.max()])
        if not a.requires:
            return Var(out)
        eq = a.data == a.data.max()
        mask = eq.astype(np.float64) if eq.sum() == 1 else np.zeros_like(a.data)
        mask_leaf = _leaf(mask)
        expand = (1,) * max(a.data.ndim, 1)
        return _out(out, [(a, lambda u: v_mul(v_reshape(u, expand), mask_leaf))])
    out = a.data.max(axis=axis, keepdims=keepdims)
    if not a.requires:
        return Var(out)
    kmax = a.data.max(axis=axis, keepdims=True)
    eq = a.data == kmax
    counts = eq.sum(axis=axis, keepdims=True)
    mask = np.where(counts == 1, eq.astype(np.float64), 0.0)  # ties: zero subgradient
    kshape = tuple(1 if i in axis else n for i, n in enumerate(a.data.shape))
    mask_leaf = _leaf(mask)

    def grad(u):
        if not keepdims:
            u = v_reshape(u, kshape)
        return v_mul(u, mask_leaf)

    return _out(out, [(a, grad)])


# -- pooling ----------------------------------------------------------------


def _pool_view(x: np.ndarray, w: int) -> np.ndarray:
    b, h, wd, c = x.shape
    return x.reshape(b, h // w, w, wd // w, w, c)


def v_pool_sum(a: Var, window: int) -> Var:
    out = _pool_view(a.data, window).sum(axis=(2, 4))
    return _out(out, [(a, lambda u: v_pool_repeat(u, window)) if a.requires else None])


def v_pool_repeat(a: Var, window: int) -> Var:
    out = np.repeat(np.repeat(a.data, window, axis=1), window, axis=2)
    return _out(out, [(a, lambda u: v_pool_sum(u, window)) if a.requires else None])


def _with_batch(a: Var, rank: int) -> tuple[Var, bool]:
    if a.data.ndim == rank - 1:
        return v_reshape(a, (1,) + a.data.shape), True
    return a, False


def v_max_pool(a: Var, window: int) -> Var:
    a4, squeezed = _with_batch(a, 4)
    view = _pool_view(a4.data, window)
    out = view.max(axis=(2, 4))
    if a.requires:
        eq = view == out[:, :, None, :, None, :]
        counts = eq.sum(axis=(2, 4), keepdims=True)
        mask6 = np.where(counts == 1, eq.astype(np.float64), 0.0)  # tied windows: zero
        mask = _leaf(mask6.reshape(a4.data.shape))
        result = _out(out, [(a4, lambda u: v_mul(v_pool_repeat(u, window), mask))])
    else:
        result = Var(out)
    if squeezed:
        result = v_reshape(result, result.data.shape[1:])
    return result


def v_avg_pool(a: Var, window: int) -> Var:
    a4, squeezed = _with_batch(a, 4)
    result = v_mul(v_pool_sum(a4, window), _leaf(1.0 / (window * window)))
    if squeezed:
        result = v_reshape(result, result.data.shape[1:])
    return result


# -- convolution ------------------------------------------------------------


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int):
    oh = -(-h // stride)
    ow = -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    return oh, ow, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def _conv2d_forward(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    b, h, w, _ = x.shape
    kh, kw, _, co = k.shape
    oh, ow, ph, pw = _conv_geometry(h, w, kh, kw, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    out = np.zeros((b, oh, ow, co))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u:u + (oh - 1) * stride + 1:stride,
                    v:v + (ow - 1) * stride + 1:stride, :]
            out += np.matmul(sl, k[u, v])
    return out


def _conv2d_input_grad_forward(g, k, x_shape, stride: int) -> np.ndarray:
    b, h, w, ci = x_shape
    kh, kw, _, _ = k.shape
    oh, ow, ph, pw = _conv_geometry(h, w, kh, kw, stride)
    gx = np.zeros((b, h + ph[0] + ph[1], w + pw[0] + pw[1], ci))
    for u in range(kh):
        for v in range(kw):
            gx[:, u:u + (oh - 1) * stride + 1:stride,
               v:v + (ow - 1) * stride + 1:stride, :] += np.matmul(g, k[u, v].T)
    return gx[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]


def _conv2d_kernel_grad_forward(x, g, k_shape, stride: int) -> np.ndarray:
    b, h, w, _ = x.shape
    kh, kw, _, _ = k_shape
    oh, ow, ph, pw = _conv_geometry(h, w, kh, kw, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    gk = np.zeros(k_shape)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u:u + (oh - 1) * stride + 1:stride,
                    v:v + (ow - 1) * stride + 1:stride, :]
            gk[u, v] = np.tensordot(sl, g, axes=([0, 1, 2], [0, 1, 2]))
    return gk


def _v_conv2d_batched(x: Var, k: Var, stride: int) -> Var:
    out = _conv2d_forward(x.data, k.data, stride)
    x_shape, k_shape = x.data.shape, k.data.shape
    return _out(out, [
        (x, lambda u: _v_conv2d_input_grad(u, k, x_shape, stride)) if x.requires else None,
        (k, lambda u: _v_conv2d_kernel_grad(x, u, k_shape, stride)) if k.requires else None,
    ])


def _v_conv2d_input_grad(g: Var, k: Var, x_shape, stride: int) -> Var:
    out = _conv2d_input_grad_forward(g.data, k.data, x_shape, stride)
    k_shape = k.data.shape
    return _out(out, [
        (g, lambda u: _v_conv2d_batched(u, k, stride)) if g.requires else None,
        (k, lambda u: _v_conv2d_kernel_grad(g, u, k_shape, stride)) if k.requires else None,
    ])


def _v_conv2d_kernel_grad(x: Var, g: Var, k_shape, stride: int) -> Var:
    out = _conv2d_kernel_grad_forward(x.data, g.data, k_shape, stride)
    x_shape = x.data.shape
    return _out(out, [
        (x, lambda u: _v_conv2d_input_grad(g, u, x_shape, stride)) if x.requires else None,
        (g, lambda u: _v_conv2d_batched(x, u, stride)) if g.requires else None,
    ])


def v_conv2d(x: Var, k: Var, stride: int = 1) -> Var:
    x4, squeezed = _with_batch(x, 4)
    result = _v_conv2d_batched(x4, k, stride)
    if squeezed:
        result = v_reshape(result, result.data.shape[1:])
    return result


# -- classification loss ----------------------------------------------------


def _smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    idx = labels.astype(np.int64)
    if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= num_classes):
        raise GraphError("labels must be integers in [0, num_classes)")
    t = np.full((labels.size, num_classes), smoothing / (num_classes - 1))
    t[np.arange(labels.size), idx] = 1.0 - smoothing
    return t


def v_softmax_cross_entropy(logits: Var, labels: Var, smoothing: float = 0.0) -> Var:
    z2, squeezed = _with_batch(logits, 2)
    b, k = z2.data.shape
    targets = _smoothed_targets(labels.data.reshape(-1), k, smoothing)
    zmax = z2.data.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z2.data - zmax).sum(axis=1))
    out = np.array([(lse - (targets * z2.data).sum(axis=1)).mean()])
    if not logits.requires:
        return Var(out)
    shift = _leaf(zmax)  # constant shift: softmax(z - c) == softmax(z)
    t_leaf = _leaf(targets)

    def grad(u):
        e = v_exp(v_sub(z2, shift))
        p = v_div(e, v_reduce_sum(e, axis=1, keepdims=True))
        g = v_mul(v_sub(p, t_leaf), v_mul(v_reshape(u, (1, 1)), _leaf(1.0 / b)))
        return v_reshape(g, logits.data.shape) if squeezed else g

    return _out(out, [(logits, grad)])


# -- backward ---------------------------------------------------------------


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires and id(parent) not in seen:
                stack.append((parent, False))
    return order


def vgrad(output: Var, wrt: Sequence[Var]) -> list[Var]:
    """Reverse-mode adjoints of a single-element ``output`` for each of ``wrt``.

    Returned adjoints are Vars on the same tape: feeding them into further
    primitives and differentiating again yields higher-order gradients.
    Accumulation follows the fixed reverse topological order, so results are
    bit-identical across runs.
    """
    if output.data.size != 1:
        raise NonScalarOutputError(
            f"gradient output must have a single element, got shape {output.data.shape}")
    adjoint: dict[int, Var] = {id(output): _leaf(np.ones_like(output.data))}
    for node in reversed(_topo_order(output)):
        u = adjoint.get(id(node))
        if u is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires:
                continue
            g = vjp(u)
            held = adjoint.get(id(parent))
            adjoint[id(parent)] = g if held is None else v_add(held, g)
    return [adjoint.get(id(w)) or _leaf(np.zeros_like(w.data)) for w in wrt]


# ---------------------------------------------------------------------------
# Declarative graph layer
# ---------------------------------------------------------------------------

LEAF_OPS = ("input", "parameter", "constant")


@dataclass(frozen=True)
class Node:
    """One primitive op (or leaf) in a Graph, with its inferred output shape."""

    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()


def _matmul_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    if len(sa) < 1 or len(sb) < 1 or (len(sa) == 1 and len(sb) == 1):
        raise ShapeError(f"matmul needs at least one 2-D operand, got {sa} @ {sb}")
    a2 = (1,) + sa if len(sa) == 1 else sa
    b2 = sb + (1,) if len(sb) == 1 else sb
    if a2[-1] != b2[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {sa} @ {sb}")
    try:
        batch = np.broadcast_shapes(a2[:-2], b2[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {sa} @ {sb}") from exc
    out = tuple(batch) + (a2[-2], b2[-1])
    if len(sa) == 1:
        out = out[:-2] + (out[-1],)
    if len(sb) == 1:
        out = out[:-1]
    return out


def _image_rank(shape: tuple[int, ...], what: str) -> bool:
    if len(shape) == 4:
        return True
    if len(shape) == 3:
        return False
    raise ShapeError(f"{what} expects a (H, W, C) or (B, H, W, C) operand, got {shape}")


class Graph:
    """Topologically ordered primitive ops over named leaves.

    Nodes are appended through the builder methods below, each of which
    validates operand shapes against the op's shape rule and returns the new
    node's name. Referencing only existing nodes keeps the graph acyclic and
    the node list in a valid evaluation order. Graphs are cheap to ``copy``
    and extend; evaluation never mutates them.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._index: dict[str, Node] = {}

    # -- introspection ------------------------------------------------------

    @property
    def nodes(self) -> tuple[Node, ...]:
        return tuple(self._nodes)

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self._nodes if n.op == "input")

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self._nodes if n.op == "parameter")

    def node(self, name: str) -> Node:
        try:
            return self._index[name]
        except KeyError:
            raise GraphError(f"no node named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self.node(name).shape

    def copy(self) -> "Graph":
        g = Graph()
        g._nodes = list(self._nodes)
        g._index = dict(self._index)
        return g

    # -- construction ---------------------------------------------------------

    def _register(self, name: str | None, op: str, inputs: Sequence[str],
                  attrs: dict, shape: tuple[int, ...]) -> str:
        if name is None:
            name = f"{op}_{len(self._nodes)}"
        if name in self._index:
            raise GraphError(f"duplicate node name {name!r}")
        for ref in inputs:
            if ref not in self._index:
                raise GraphError(f"node {name!r} references unknown node {ref!r}")
        node = Node(name, op, tuple(inputs), attrs, tuple(int(s) for s in shape))
        self._nodes.append(node)
        self._index[name] = node
        return name

    def _shapes(self, names: Sequence[str]) -> list[tuple[int, ...]]:
        return [self.node(n).shape for n in names]

    @staticmethod
    def _check_shape(shape: Sequence[int], what: str) -> tuple[int, ...]:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"{what} dimensions must be positive, got {shape}")
        return shape

    def input(self, name: str, shape: Sequence[int]) -> str:
        return self._register(name, "input", (), {}, self._check_shape(shape, "input"))

    def parameter(self, name: str, shape: Sequence[int]) -> str:
        return self._register(name, "parameter", (), {},
                              self._check_shape(shape, "parameter"))

    def constant(self, values, name: str | None = None) -> str:
        tensor = values if isinstance(values, Tensor) else Tensor(values)
        return self._register(name, "constant", (), {"value": tensor}, tensor.shape)

    def _broadcast_op(self, op: str, a: str, b: str, name: str | None) -> str:
        sa, sb = self._shapes((a, b))
        try:
            shape = tuple(np.broadcast_shapes(sa, sb))
        except ValueError as exc:
            raise ShapeError(f"{op} operands do not broadcast: {sa} vs {sb}") from exc
        return self._register(name, op, (a, b), {}, shape)

    def add(self, a: str, b: str, name: str | None = None) -> str:
        return self._broadcast_op("add", a, b, name)

    def sub(self, a: str, b: str, name: str | None = None) -> str:
        return self._broadcast_op("sub", a, b, name)

    def mul(self, a: str, b: str, name: str | None = None) -> str:
        return self._broadcast_op("mul", a, b, name)

    def div(self, a: str, b: str, name: str | None = None) -> str:
        return self._broadcast_op("div", a, b, name)

    def matmul(self, a: str, b: str, name: str | None = None) -> str:
        sa, sb = self._shapes((a, b))
        return self._register(name, "matmul", (a, b), {}, _matmul_shape(sa, sb))

    def transpose(self, a: str, name: str | None = None) -> str:
        (sa,) = self._shapes((a,))
        if len(sa) < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {sa}")
        shape = sa[:-2] + (sa[-1], sa[-2])
        return self._register(name, "transpose", (a,), {}, shape)

    def _unary(self, op: str, a: str, name: str | None) -> str:
        (sa,) = self._shapes((a,))
        return self._register(name, op, (a,), {}, sa)

    def relu(self, a: str, name: str | None = None) -> str:
        return self._unary("relu", a, name)

    def abs(self, a: str, name: str | None = None) -> str:
        return self._unary("abs", a, name)

    def tanh(self, a: str, name: str | None = None) -> str:
        return self._unary("tanh", a, name)

    def exp(self, a: str, name: str | None = None) -> str:
        return self._unary("exp", a, name)

    def sqrt(self, a: str, name: str | None = None) -> str:
        return self._unary("sqrt", a, name)

    def reshape(self, a: str, shape: Sequence[int], name: str | None = None) -> str:
        (sa,) = self._shapes((a,))
        shape = self._check_shape(shape, "reshape")
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"reshape cannot map {sa} onto {shape}")
        return self._register(name, "reshape", (a,), {"shape": shape}, shape)

    def conv2d(self, x: str, kernel: str, stride: int = 1,
               name: str | None = None) -> str:
        sx, sk = self._shapes((x, kernel))
        if len(sk) != 4:
            raise ShapeError(f"conv2d kernel must be (kh, kw, cin, cout), got {sk}")
        if stride < 1:
            raise ShapeError("conv2d stride must be >= 1")
        batched = _image_rank(sx, "conv2d")
        h, w, ci = sx[-3], sx[-2], sx[-1]
        if ci != sk[2]:
            raise ShapeError(f"conv2d channel mismatch: input {ci} vs kernel {sk[2]}")
        oh, ow, _, _ = _conv_geometry(h, w, sk[0], sk[1], stride)
        shape = (sx[0], oh, ow, sk[3]) if batched else (oh, ow, sk[3])
        return self._register(name, "conv2d", (x, kernel), {"stride": stride}, shape)

    def _pool(self, op: str, a: str, window: int, name: str | None) -> str:
        (sa,) = self._shapes((a,))
        batched = _image_rank(sa, op)
        h, w, c = sa[-3], sa[-2], sa[-1]
        if window < 1 or h % window or w % window:
            raise ShapeError(
                f"{op} window {window} must evenly divide spatial dims {(h, w)}")
        shape = (h // window, w // window, c)
        if batched:
            shape = (sa[0],) + shape
        return self._register(name, op, (a,), {"window": window}, shape)

    def max_pool(self, a: str, window: int = 2, name: str | None = None) -> str:
        return self._pool("max_pool", a, window, name)

    def avg_pool(self, a: str, window: int = 2, name: str | None = None) -> str:
        return self._pool("avg_pool", a, window, name)

    def softmax_cross_entropy(self, logits: str, labels: str, smoothing: float = 0.0,
                              name: str | None = None) -> str:
        sl, sy = self._shapes((logits, labels))
        if not 0.0 <= smoothing < 1.0:
            raise GraphError("label smoothing must lie in [0, 1)")
        if len(sl) == 1:
            if int(np.prod(sy, dtype=np.int64)) != 1:
                raise ShapeError(f"scalar-logits loss needs one label, got {sy}")
        elif len(sl) == 2:
            if sy != (sl[0],):
                raise ShapeError(f"labels {sy} do not match logits batch {sl}")
        else:
            raise ShapeError(f"softmax_cross_entropy logits must be 1-D or 2-D, got {sl}")
        if sl[-1] < 2:
            raise ShapeError("softmax_cross_entropy needs at least 2 classes")
        return self._register(name, "softmax_cross_entropy", (logits, labels),
                              {"smoothing": float(smoothing)}, (1,))

    def _reduce(self, op: str, a: str, axis, keepdims: bool, name: str | None) -> str:
        (sa,) = self._shapes((a,))
        naxis = _norm_axis(axis, len(sa))
        if naxis is None:
            shape: tuple[int, ...] = (1,)
        else:
            if any(ax >= len(sa) for ax in naxis):
                raise ShapeError(f"{op} axis {axis} out of range for shape {sa}")
            if keepdims:
                shape = tuple(1 if i in naxis else n for i, n in enumerate(sa))
            else:
                shape = tuple(n for i, n in enumerate(sa) if i not in naxis)
                if not shape:
                    shape = (1,)
        return self._register(name, op, (a,),
                              {"axis": naxis, "keepdims": bool(keepdims)}, shape)

    def reduce_sum(self, a: str, axis=None, keepdims: bool = False,
                   name: str | None = None) -> str:
        return self._reduce("reduce_sum", a, axis, keepdims, name)

    def reduce_mean(self, a: str, axis=None, keepdims: bool = False,
                    name: str | None = None) -> str:
        return self._reduce("reduce_mean", a, axis, keepdims, name)

    def reduce_max(self, a: str, axis=None, keepdims: bool = False,
                   name: str | None = None) -> str:
        return self._reduce("reduce_max", a, axis, keepdims, name)


def _eval_node(node: Node, args: list[Var]) -> Var:
    op = node.op
    if op == "add":
        return v_add(*args)
    if op == "sub":
        return v_sub(*args)
    if op == "mul":
        return v_mul(*args)
    if op == "div":
        return v_div(*args)
    if op == "matmul":
        return v_matmul(*args)
    if op == "transpose":
        return v_swaplast(args[0])
    if op == "relu":
        return v_relu(args[0])
    if op == "abs":
        return v_abs(args[0])
    if op == "tanh":
        return v_tanh(args[0])
    if op == "exp":
        return v_exp(args[0])
    if op == "sqrt":
        return v_sqrt(args[0])
    if op == "reshape":
        return v_reshape(args[0], node.attrs["shape"])
    if op == "conv2d":
        return v_conv2d(args[0], args[1], node.attrs["stride"])
    if op == "max_pool":
        return v_max_pool(args[0], node.attrs["window"])
    if op == "avg_pool":
        return v_avg_pool(args[0], node.attrs["window"])
    if op == "softmax_cross_entropy":
        return v_softmax_cross_entropy(args[0], args[1], node.attrs["smoothing"])
    if op == "reduce_sum":
        return v_reduce_sum(args[0], node.attrs["axis"], node.attrs["keepdims"])
    if op == "reduce_mean":
        return v_reduce_mean(args[0], node.attrs["axis"], node.attrs["keepdims"])
    if op == "reduce_max":
        return v_reduce_max(args[0], node.attrs["axis"], node.attrs["keepdims"])
    raise GraphError(f"unknown op {op!r}")


def trace(graph: Graph, bindings: Mapping[str, object],
          requires: frozenset[str] | set[str] = frozenset()) -> dict[str, Var]:
    """Run the graph eagerly, returning the live Var for every node.

    ``requires`` names the leaves whose gradients will be requested; the
    returned Vars for those (and everything downstream) stay attached to the
    tape so `vgrad` can walk it.
    """
    env: dict[str, Var] = {}
    for node in graph.nodes:
        if node.op in ("input", "parameter"):
            if node.name not in bindings:
                raise UnboundInputError(f"graph leaf {node.name!r} is not bound")
            arr = as_array(bindings[node.name])
            if arr.shape != node.shape:
                raise ShapeError(
                    f"binding for {node.name!r} has shape {arr.shape}, "
                    f"declared {node.shape}")
            env[node.name] = Var(arr, requires=node.name in requires)
        elif node.op == "constant":
            env[node.name] = Var(node.attrs["value"].array)
        else:
            var = _eval_node(node, [env[i] for i in node.inputs])
            if not np.all(np.isfinite(var.data)):
                raise NonFiniteError(
                    f"non-finite value at node {node.name!r} (op {node.op})")
            env[node.name] = var
    return env


def evaluate(graph: Graph, bindings: Mapping[str, object]) -> dict[str, Tensor]:
    """Evaluate every node; pure, deterministic, and bindings are untouched."""
    env = trace(graph, bindings)
    return {name: Tensor(var.data) for name, var in env.items()}


def gradients(graph: Graph, bindings: Mapping[str, object], scalar_output: str,
              wrt: Sequence[str] | set[str]) -> dict[str, Tensor]:
    """Exact reverse-mode gradients of ``scalar_output`` with respect to leaves."""
    wrt = list(wrt)
    out_node = graph.node(scalar_output)
    if int(np.prod(out_node.shape, dtype=np.int64)) != 1:
        raise NonScalarOutputError(
            f"output {scalar_output!r} has shape {out_node.shape}, need a scalar")
    for name in wrt:
        if name not in graph:
            raise UnknownLeafError(f"unknown leaf {name!r}")
        if graph.node(name).op not in ("input", "parameter"):
            raise UnknownLeafError(f"{name!r} is not an input or parameter leaf")
    env = trace(graph, bindings, requires=set(wrt))
    grads = vgrad(env[scalar_output], [env[name] for name in wrt])
    return {name: Tensor(g.data) for name, g in zip(wrt, grads)}


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteDifferenceReport:
    """Outcome of a central-difference sweep over leaf coordinates.

    ``skipped`` lists (leaf, flat index) pairs whose one-sided slopes
    disagreed, i.e. coordinates sitting on a kink of relu/max/abs where a
    central difference is meaningless.
    """

    max_rel_error: float
    checked: int
    skipped: tuple[tuple[str, int], ...]
    step: float
    seed: int | None


def finite_difference_report(graph: Graph, bindings: Mapping[str, object],
                             scalar_output: str, wrt: Sequence[str] | set[str],
                             step: float, sample: int | None = None,
                             seed: int = 0) -> FiniteDifferenceReport:
    """Compare analytic gradients against seeded central differences.

    With ``sample`` set, at most that many coordinates per leaf are probed,
    chosen by a generator seeded with ``seed`` (the subsampling is thereby
    reproducible and declared in the report).
    """
    if step <= 0:
        raise GraphError("finite-difference step must be positive")
    analytic = gradients(graph, bindings, scalar_output, wrt)
    base = {k: as_array(v) for k, v in bindings.items()}
    f0 = float(evaluate(graph, base)[scalar_output].data[0])
    rng = np.random.default_rng(seed)
    max_err = 0.0
    checked = 0
    skipped: list[tuple[str, int]] = []
    for name in sorted(analytic):
        grad = analytic[name].data
        size = grad.size
        if sample is not None and size > sample:
            coords = np.sort(rng.choice(size, size=sample, replace=False))
        else:
            coords = np.arange(size)
        for i in coords:
            i = int(i)
            probe = dict(base)
            plus = base[name].copy()
            plus.flat[i] += step
            probe[name] = plus
            f_plus = float(evaluate(graph, probe)[scalar_output].data[0])
            minus = base[name].copy()
            minus.flat[i] -= step
            probe[name] = minus
            f_minus = float(evaluate(graph, probe)[scalar_output].data[0])
            slope_plus = (f_plus - f0) / step
            slope_minus = (f0 - f_minus) / step
            scale = max(abs(slope_plus), abs(slope_minus), 1e-12)
            if abs(slope_plus - slope_minus) / scale > 0.1:
                skipped.append((name, i))  # kink crossed: central diff is invalid
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            max_err = max(max_err, err)
            checked += 1
    return FiniteDifferenceReport(max_err, checked, tuple(skipped), step,
                                  seed if sample is not None else None)


def finite_difference_check(graph: Graph, bindings: Mapping[str, object],
                            scalar_output: str, wrt: Sequence[str] | set[str],
                            step: float, sample: int | None = None,
                            seed: int = 0) -> float:
    """Max relative analytic-vs-numeric gradient error over checked coordinates."""
    return finite_difference_report(graph, bindings, scalar_output, wrt, step,
                                    sample=sample, seed=seed).max_rel_error


__all__ = [
    "Tensor", "Var", "Graph", "Node",
    "GraphError", "ShapeError", "UnboundInputError", "UnknownLeafError",
    "NonScalarOutputError", "NonFiniteError",
    "evaluate", "gradients", "trace", "vgrad", "as_array", "as_var",
    "finite_difference_check", "finite_difference_report", "FiniteDifferenceReport",
    "v_add", "v_sub", "v_neg", "v_mul", "v_div", "v_reshape", "v_swaplast",
    "v_matmul", "v_relu", "v_abs", "v_tanh", "v_exp", "v_sqrt", "v_rsqrt",
    "v_reduce_sum", "v_reduce_mean", "v_reduce_max", "v_max_pool", "v_avg_pool",
    "v_conv2d", "v_softmax_cross_entropy",
]
