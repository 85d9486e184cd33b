"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive used by the towers and the fusion blocks lives
here. A primitive computes its output eagerly and, when gradients are being
recorded, attaches a closure that maps the output gradient to the gradients of
its inputs. ``Graph`` orders the recorded nodes topologically and runs the
closures once each, in reverse.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents do not line up."""


class GraphError(RuntimeError):
    """Raised when backward is requested on something it cannot run on."""


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(other, multiply(self, -1.0))

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def _result(data, parents, op, backward_fn):
    """Wrap an op output, recording the node only when a parent needs gradients."""
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Graph:
    """Recorded operations reachable from ``root``, in topological order."""

    def __init__(self, root):
        self.root = root
        self.nodes = self._topological(root)

    @staticmethod
    def _topological(root):
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
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self):
        root = self.root
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += grad
                continue
            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad


def backward(loss):
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a recorded graph")
    Graph(loss).backward()


### ELEMENTWISE

def _operands(a, b):
    # plain Python numbers take the dtype of the tensor they meet
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b):
    a, b = _operands(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from e

    def _backward(grad):
        return (
            _unbroadcast(grad, a.shape) if a.requires_grad else None,
            _unbroadcast(grad, b.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), "add", _backward)


def multiply(a, b):
    a, b = _operands(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from e

    def _backward(grad):
        return (
            _unbroadcast(grad * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), "multiply", _backward)


def relu(x):
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype)

    def _backward(grad):
        return (grad * mask,)

    return _result(data, (x,), "relu", _backward)


def tanh(x):
    data = np.tanh(x.data)

    def _backward(grad):
        return (grad * (1 - data * data),)

    return _result(data, (x,), "tanh", _backward)


def total(x):
    """Sum of every entry, as a shape-() tensor."""
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def _backward(grad):
        return (np.broadcast_to(grad, x.shape).astype(x.dtype),)

    return _result(data, (x,), "sum", _backward)


def mean(x):
    return multiply(total(x), 1.0 / x.size)


### LINEAR ALGEBRA

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def _backward(grad):
        return grad @ b.data.T, a.data.T @ grad

    return _result(data, (a, b), "matmul", _backward)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    data = np.ascontiguousarray(x.data.T)

    def _backward(grad):
        return (grad.T,)

    return _result(data, (x,), "transpose", _backward)


def embedding(table, ids):
    """Gather rows of ``table``; gradients scatter-add back into the rows used."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"token id out of range for table of shape {table.shape}")
    data = table.data[ids]

    def _backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, grad)
        return (full,)

    return _result(data, (table,), "embedding", _backward)


### NORMALISATION AND PROBABILITIES

def softmax_rows(x):
    """Softmax over the last axis with max-subtraction. NaN in, NaN out."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def _backward(grad):
        return (data * (grad - (grad * data).sum(axis=-1, keepdims=True)),)

    return _result(data, (x,), "softmax", _backward)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    data = normed * gain.data + bias.data

    def _backward(grad):
        n = x.shape[-1]
        g_normed = grad * gain.data
        g_x = inv_std / n * (
            n * g_normed
            - g_normed.sum(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True)
        )
        g_gain = (grad * normed).reshape(-1, n).sum(axis=0)
        g_bias = grad.reshape(-1, n).sum(axis=0)
        return g_x, g_gain, g_bias

    return _result(data.astype(x.dtype), (x, gain, bias), "layer_norm", _backward)


def cross_entropy(logits, targets, ignore_mask=None):
    """
    Mean negative log-likelihood of ``targets`` over the positions not flagged
    in ``ignore_mask``. Ignored rows receive no gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    n_rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n_rows,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = np.ones(n_rows, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy called with every position masked")
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= vocab:
        raise ShapeError(f"target id out of range for vocabulary of {vocab}")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.nonzero(keep)[0]
    data = np.asarray(-log_probs[rows, kept_targets].sum() / count, dtype=logits.dtype)

    def _backward(grad):
        full = np.zeros_like(logits.data)
        probs = np.exp(log_probs[rows])
        probs[np.arange(count), kept_targets] -= 1
        full[rows] = probs / count
        return (full * grad,)

    return _result(data, (logits,), "cross_entropy", _backward)


### ATTENTION

def scaled_dot_product_attention(q, k, v, allowed, n_heads):
    """
    Multi-head attention over ``[T, d]`` inputs. ``allowed`` is a boolean
    ``[T_q, T_k]`` matrix; disallowed scores get an additive -inf and a query
    row with nothing allowed outputs zeros.
    """
    t_q, d = q.shape
    t_k = k.shape[0]
    if k.shape != (t_k, d) or v.shape != (t_k, d):
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (t_q, t_k):
        raise ShapeError(f"mask shape {allowed.shape} does not match [{t_q}, {t_k}]")
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    d_head = d // n_heads
    scale = 1.0 / float(np.sqrt(d_head))

    if t_k == 0:
        def _empty_backward(grad):
            return np.zeros_like(q.data), np.zeros_like(k.data), np.zeros_like(v.data)

        return _result(np.zeros_like(q.data), (q, k, v), "attention", _empty_backward)

    def split(x, t):
        return x.reshape(t, n_heads, d_head).transpose(1, 0, 2)

    qh, kh, vh = split(q.data, t_q), split(k.data, t_k), split(v.data, t_k)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    scores = np.where(allowed, scores, -np.inf)
    any_allowed = allowed.any(axis=-1, keepdims=True)
    row_max = np.where(any_allowed, scores.max(axis=-1, keepdims=True), 0)
    e = np.where(allowed, np.exp(scores - row_max), 0)
    denom = e.sum(axis=-1, keepdims=True)
    probs = (e / np.where(denom > 0, denom, 1)).astype(q.dtype)
    out_h = probs @ vh
    data = out_h.transpose(1, 0, 2).reshape(t_q, d)

    def _backward(grad):
        g = split(grad, t_q)
        g_v = probs.transpose(0, 2, 1) @ g
        g_probs = g @ vh.transpose(0, 2, 1)
        g_scores = probs * (g_probs - (g_probs * probs).sum(axis=-1, keepdims=True))
        g_q = (g_scores @ kh) * scale
        g_k = (g_scores.transpose(0, 2, 1) @ qh) * scale

        def merge(x, t):
            return x.transpose(1, 0, 2).reshape(t, d)

        return merge(g_q, t_q), merge(g_k, t_k), merge(g_v, t_k)

    return _result(np.ascontiguousarray(data), (q, k, v), "attention", _backward)


### REGULARISATION

def dropout(x, p, rng, training):
    """Inverted dropout drawn from ``rng``; identity outside training or when p == 0."""
    if not training or p <= 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    data = x.data * scale

    def _backward(grad):
        return (grad * scale,)

    return _result(data, (x,), "dropout", _backward)
