"""Reverse-mode differentiation over the tensor primitives.

Graphs are built define-by-run: each operation returns a :class:`Node`
holding its value, its parents, and a closure that maps the incoming
gradient to parent gradients using only saved context.  Quantization
nodes (``fake_quantize``, ``binarize``) use the straight-through
estimator as their backward rule: the gradient passes unchanged where
the pre-quantization input lies strictly inside (lower, upper) and is
zeroed elsewhere.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import quant, tensor
from .errors import GraphError, ShapeError

_ids = itertools.count()


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("uid", "value", "parents", "grad", "requires_grad", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.uid = next(_ids)
        self.value = value
        self.parents = tuple(parents)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = backward
        self.name = name

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Node(uid={self.uid}, shape={shape}, name={self.name})"


def leaf(value: np.ndarray, requires_grad: bool = True, name: str | None = None) -> Node:
    return Node(np.asarray(value, dtype=np.float32), requires_grad=requires_grad, name=name)


def ste_backward(
    delta_in: np.ndarray, x: np.ndarray, lower, upper
) -> np.ndarray:
    """Straight-through estimator: pass the gradient where lower < x < upper,
    zero elsewhere.  The interval is strictly open; values exactly at the
    bounds receive zero.  Interior gradients are copied bit-for-bit."""
    if delta_in.shape != x.shape:
        raise ShapeError(
            f"ste_backward shape mismatch: gradient {delta_in.shape} vs input {x.shape}"
        )
    inside = (x > lower) & (x < upper)
    return np.where(inside, delta_in, np.float32(0.0))


def topo_order(root: Node) -> list[Node]:
    """Topological order of the graph below ``root`` (root last).

    Iterative DFS with an explicit in-progress set; revisiting a node that
    is still on the stack means the graph has a cycle.
    """
    order: list[Node] = []
    done: set[int] = set()
    in_progress: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            in_progress.discard(id(node))
            done.add(id(node))
            order.append(node)
            continue
        if id(node) in done:
            continue
        if id(node) in in_progress:
            raise GraphError("computation graph contains a cycle")
        in_progress.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) in in_progress:
                raise GraphError("computation graph contains a cycle")
            if id(parent) not in done:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients from a scalar loss node.

    Sets ``.grad`` on every node in the tape and returns``{uid: grad}``
    for the leaves that require gradients.
    """
    if np.size(loss.value) != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {np.shape(loss.value)}")
    order = topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(np.asarray(loss.value, dtype=np.float32))
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    return {
        n.uid: n.grad
        for n in order
        if n.requires_grad and not n.parents and n.grad is not None
    }


def matmul(a: Node, b: Node) -> Node:
    value = tensor.matmul(a.value, b.value)
    a_val, b_val = a.value, b.value

    def _bw(g):
        return (
            tensor.matmul(g, np.ascontiguousarray(b_val.T)),
            tensor.matmul(np.ascontiguousarray(a_val.T), g),
        )

    return Node(value, (a, b), _bw, name="matmul")


def linear(x: Node, w: Node) -> Node:
    """x @ w.T for a weight stored as (out_features, in_features)."""
    x_val, w_val = x.value, w.value
    value = tensor.matmul(x_val, np.ascontiguousarray(w_val.T))

    def _bw(g):
        return (
            tensor.matmul(g, w_val),
            tensor.matmul(np.ascontiguousarray(g.T), x_val),
        )

    return Node(value, (x, w), _bw, name="linear")


def conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    x_val, w_val = x.value, w.value
    if x_val.ndim != 4 or w_val.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if x_val.shape[1] != w_val.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x_val.shape[1]} vs kernel {w_val.shape[1]}"
        )
    n = x_val.shape[0]
    o, _, kh, kw = w_val.shape
    cols, out_h, out_w = tensor.im2col(x_val, kh, kw, stride, padding)
    w_mat = w_val.reshape(o, -1)
    out_mat = tensor.matmul(cols, np.ascontiguousarray(w_mat.T))
    value = np.ascontiguousarray(
        out_mat.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    )

    def _bw(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        d_cols = tensor.matmul(g_mat, w_mat)
        d_w = tensor.matmul(np.ascontiguousarray(g_mat.T), cols).reshape(w_val.shape)
        d_x = tensor.col2im(d_cols, x_val.shape, kh, kw, stride, padding)
        return (d_x, d_w)

    return Node(value, (x, w), _bw, name="conv2d")


def relu(x: Node) -> Node:
    mask = x.value > 0

    def _bw(g):
        return (np.where(mask, g, np.float32(0.0)),)

    return Node(tensor.relu(x.value), (x,), _bw, name="relu")


def add(a: Node, b: Node) -> Node:
    value = tensor.add(a.value, b.value)

    def _bw(g):
        return (g, g)

    return Node(value, (a, b), _bw, name="add")


def scale(x: Node, c: float) -> Node:
    c32 = np.float32(c)

    def _bw(g):
        return (g * c32,)

    return Node(tensor.scale(x.value, c32), (x,), _bw, name="scale")


def flatten2d(x: Node) -> Node:
    """Collapse trailing dimensions so the value is (batch, features)."""
    x_shape = x.value.shape
    value = np.ascontiguousarray(x.value.reshape(x_shape[0], -1))

    def _bw(g):
        return (g.reshape(x_shape),)

    return Node(value, (x,), _bw, name="flatten2d")


def sum_all(x: Node) -> Node:
    x_shape = x.value.shape

    def _bw(g):
        return (np.full(x_shape, np.float32(g), dtype=np.float32),)

    return Node(np.float32(x.value.sum()), (x,), _bw, name="sum")


def fake_quantize(x: Node, params: quant.QuantParams) -> Node:
    """Fake-quantize forward; straight-through estimator backward with the
    node's own (lower, upper) as the pass-through interval."""
    x_val = x.value
    value = quant.fake_quantize(x_val, params)
    ndim = x_val.ndim
    lower = params._spread(params.lower, ndim).astype(np.float32)
    upper = params._spread(params.upper, ndim).astype(np.float32)

    def _bw(g):
        return (ste_backward(g, x_val, lower, upper),)

    return Node(value, (x,), _bw, name="fake_quantize")


def binarize(x: Node) -> Node:
    """Sign forward; straight-through estimator backward clipped to (-1, 1)."""
    x_val = x.value

    def _bw(g):
        return (ste_backward(g, x_val, np.float32(-1.0), np.float32(1.0)),)

    return Node(quant.binarize(x_val), (x,), _bw, name="binarize")


def softmax_values(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction, FP32 throughout."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_values(logits: np.ndarray, labels: np.ndarray) -> tuple[np.float32, np.ndarray]:
    """Mean negative log-likelihood and the per-row softmax (for reuse)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match {logits.shape[0]} rows"
        )
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), labels]
    loss = np.float32((log_z - picked).mean())
    probs = softmax_values(logits)
    return loss, probs


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    loss, probs = cross_entropy_values(logits.value, labels)
    m, _ = logits.value.shape
    labels = np.asarray(labels)

    def _bw(g):
        d = probs.copy()
        d[np.arange(m), labels] -= np.float32(1.0)
        return (d * (np.float32(g) / np.float32(m)),)

    return Node(loss, (logits,), _bw, name="cross_entropy")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain gradient descent: p <- p - lr * g, returned as new arrays."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    lr32 = np.float32(lr)
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} vs grad shape {g.shape}")
        out.append(p - lr32 * g)
    return out
