"""Minimal dense reverse-mode autodiff.

Float64 tensors in a dynamically built computation graph, with exactly the
operations the two-modality model needs: matmul, bias-row addition, ReLU,
row softmax, softmax cross-entropy and scalar reductions. Each loss term
gets its own backward pass so classification and domain gradients stay
separate vectors.
"""

import math

import numpy as np

# Every trainable parameter belongs to exactly one of these partitions.
PARTITIONS = ("encoder:v", "encoder:a", "head:classifier", "head:discriminator")


class Tensor:
    """Dense float64 array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray promotes 0-d scalars to 1-d; keep scalars 0-d.
        self.data = np.ascontiguousarray(arr) if arr.ndim > 0 else arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  parents=parents if requires else (),
                  backward_fn=backward_fn if requires else None)


def _accum(tensor, grad):
    if tensor.requires_grad:
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [n,k] @ [k,m] -> [n,m]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(out):
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _node(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also [n,k] + [k] bias-row broadcast (the only
    broadcast form supported)."""
    if a.data.shape == b.data.shape:
        def backward(out):
            _accum(a, out.grad)
            _accum(b, out.grad)
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def backward(out):
            _accum(a, out.grad)
            _accum(b, out.grad.sum(axis=0))
    else:
        raise ValueError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    return _node(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(out):
        _accum(x, out.grad * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)

    def backward(out):
        _accum(x, out.grad * s)

    return _node(x.data * s, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar tensor."""

    def backward(out):
        _accum(x, np.full_like(x.data, float(out.grad)))

    return _node(np.asarray(x.data.sum()), (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    probs = _softmax(x.data)

    def backward(out):
        inner = (out.grad * probs).sum(axis=1, keepdims=True)
        _accum(x, probs * (out.grad - inner))

    return _node(probs, (x,), backward)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true label.

    Gradient w.r.t. logits is (softmax - onehot) / n.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.data.shape
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[np.arange(n), labels] - log_z
    loss = -log_probs.mean()

    def backward(out):
        g = _softmax(logits.data)
        g[np.arange(n), labels] -= 1.0
        _accum(logits, g * (float(out.grad) / n))

    return _node(np.asarray(loss), (logits,), backward)


def tanh_scalar(x: float) -> float:
    """Hyperbolic tangent of a scalar (used for modulation coefficients)."""
    return math.tanh(x)


def _topo_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: "ParamSet") -> dict:
    """Backpropagate from a scalar loss; return {param id -> gradient array}.

    Clears all gradient buffers in the reachable graph first, so repeated
    calls (and a second pass for a second loss on the same graph) never
    accumulate across passes. Parameter values are never mutated; params
    unreachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    # Params outside this loss's graph would otherwise keep buffers from a
    # previous pass and leak into the returned map.
    params.zero_grads()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    out = {}
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


class ParamSet:
    """Named trainable tensors, each assigned to exactly one partition."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._partition: dict[str, str] = {}

    def add(self, name: str, data, partition: str) -> Tensor:
        if partition not in PARTITIONS:
            raise KeyError(f"unknown partition {partition!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter id {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._partition[name] = partition
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def partition_of(self, name: str) -> str:
        return self._partition[name]

    def names_in(self, partition: str) -> list:
        """Parameter ids in a partition, sorted for a stable flatten order."""
        if partition not in PARTITIONS:
            raise KeyError(f"unknown partition {partition!r}")
        return sorted(n for n, p in self._partition.items() if p == partition)

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    def copy(self) -> "ParamSet":
        ps = ParamSet()
        for name, t in self._params.items():
            ps.add(name, t.data.copy(), self._partition[name])
        return ps

    def flatten_grads(self, grads: dict, partition: str) -> np.ndarray:
        """Concatenate a gradient map over one partition into a flat vector,
        in sorted-id order."""
        names = self.names_in(partition)
        if not names:
            return np.zeros(0)
        return np.concatenate([np.asarray(grads[n], dtype=np.float64).ravel()
                               for n in names])

    def unflatten(self, vec: np.ndarray, partition: str) -> dict:
        """Inverse of flatten_grads: split a flat vector back into per-param
        arrays with the partition's shapes."""
        names = self.names_in(partition)
        out, offset = {}, 0
        for n in names:
            shape = self._params[n].data.shape
            size = self._params[n].data.size
            out[n] = np.asarray(vec[offset:offset + size],
                                dtype=np.float64).reshape(shape).copy()
            offset += size
        if offset != len(vec):
            raise ValueError(
                f"vector length {len(vec)} does not match partition size {offset}")
        return out
