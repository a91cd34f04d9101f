"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its inputs and a local gradient rule on
the output tensor. :func:`backward` collects the operations reachable from a
scalar loss, orders them by recording sequence and replays them in exact
reverse order, so gradients are deterministic for a fixed forward pass.

Broadcasting is deliberately absent: binary operations require identical
shapes, except that a single-element tensor may scale any tensor. Row-vector
biases go through :func:`linear` or :func:`add_bias`.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatchError, DimensionError

__all__ = [
    "Tensor", "Tape", "no_grad", "is_grad_enabled", "backward",
    "matmul", "add", "sub", "mul", "neg", "scale", "relu", "sigmoid",
    "ew_unary", "ew_binary", "concat", "split_columns", "sum", "mean",
    "softmax_vec", "linear", "add_bias", "row_scale", "weighted_sum",
    "gather_rows", "scatter_add_rows", "batchnorm", "cross_entropy",
    "l1_loss", "Module", "Linear", "BatchNorm", "glorot_uniform",
]

_sequence = itertools.count()
_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """A float64 array that can take part in gradient recording.

    ``grad`` is populated by :func:`backward` on leaf tensors that have
    ``requires_grad`` set. Repeated backward passes accumulate into ``grad``
    until it is reset (``tensor.grad = None`` or ``Module.zero_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)

    @classmethod
    def _wrap(cls, data):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._seq = next(_sequence)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, _as_tensor(other))
    __radd__ = lambda self, other: add(_as_tensor(other), self)
    __sub__ = lambda self, other: sub(self, _as_tensor(other))
    __rsub__ = lambda self, other: sub(_as_tensor(other), self)
    __mul__ = lambda self, other: mul(self, _as_tensor(other))
    __rmul__ = lambda self, other: mul(_as_tensor(other), self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value, dtype=np.float64))


def _record(data, parents, rule):
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


class Tape:
    """Recorded operations reachable from an output, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output):
        seen = {id(output)}
        stack = [output]
        nodes = []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Populate ``grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def _scalar_like(t):
    return t.data.size == 1 and t.data.ndim <= 1


def _check_same(a, b, name):
    if a.shape != b.shape and not (_scalar_like(a) or _scalar_like(b)):
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, t):
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b):
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (_reduce_to(g * B, a), _reduce_to(g * A, b)))


def neg(x):
    return _record(-x.data, (x,), lambda g: (-g,))


def scale(x, factor):
    """Multiply by a plain Python constant."""
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x):
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = expit(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "neg": neg}
_BINARY = {"add": add, "mul": mul}


def ew_unary(x, kind):
    try:
        return _UNARY[kind](x)
    except KeyError:
        raise ValueError(f"unknown unary kind {kind!r}") from None


def ew_binary(a, b, kind):
    try:
        return _BINARY[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown binary kind {kind!r}") from None


def concat(parts):
    """Column-wise concatenation of 2-D tensors sharing the row count."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one tensor")
    n = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != n:
            raise DimensionError(f"concat: expected {n} rows, got shape {p.shape}")
    if len(parts) == 1:
        return parts[0]
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), rule)


def split_columns(x, sizes):
    """Inverse of :func:`concat`: slice ``x`` into column blocks."""
    if int(np.sum(sizes)) != x.shape[1]:
        raise DimensionError(f"split_columns: sizes {sizes} do not cover {x.shape[1]} columns")
    out = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def rule(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(_record(x.data[:, lo:hi].copy(), (x,), rule))
        start = hi
    return out


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    shape, n = x.shape, x.data.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def softmax_vec(logits):
    """Numerically stable softmax of a 1-D tensor."""
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise DimensionError(f"softmax_vec expects a nonempty vector, got {logits.shape}")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()
    return _record(p, (logits,), lambda g: (p * (g - np.dot(g, p)),))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with the bias added to every row."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is None:
        return _record(out, (x, weight), lambda g: (g @ W.T, X.T @ g))
    if bias.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match {W.shape[1]} outputs")
    out += bias.data
    return _record(out, (x, weight, bias), lambda g: (g @ W.T, X.T @ g, g.sum(axis=0)))


def add_bias(x, bias):
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: {bias.shape} does not fit {x.shape}")
    return _record(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def row_scale(x, q):
    """Scale row ``i`` of ``x`` by the scalar ``q[i, 0]``."""
    if q.shape != (x.shape[0], 1):
        raise DimensionError(f"row_scale: gate shape {q.shape} does not fit {x.shape}")
    X, Q = x.data, q.data
    return _record(X * Q, (x, q), lambda g: (g * Q, (g * X).sum(axis=1, keepdims=True)))


def weighted_sum(parts, weights):
    """``sum_k weights[k] * parts[k]`` for same-shape tensors and a weight vector."""
    parts = list(parts)
    if weights.shape != (len(parts),):
        raise DimensionError(f"weighted_sum: {len(parts)} parts but weights {weights.shape}")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"weighted_sum: shape mismatch {p.shape} vs {shape}")
    w = weights.data
    out = np.zeros(shape)
    for k, p in enumerate(parts):
        out += w[k] * p.data

    def rule(g):
        grads = [g * w[k] for k in range(len(parts))]
        gw = np.array([np.vdot(g, p.data) for p in parts])
        return (*grads, gw)

    return _record(out, (*parts, weights), rule)


def gather_rows(x, index):
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def rule(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), rule)


def scatter_add_rows(x, index, num_rows):
    """Sum rows of ``x`` into ``num_rows`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise DimensionError(f"scatter_add_rows: index {index.shape} does not fit {x.shape}")
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return _record(out, (x,), lambda g: (g[index],))


def batchnorm(h, state):
    """Batch normalization over the row (node) dimension.

    In training mode the batch mean and biased variance normalize ``h`` and the
    running statistics move by ``state.momentum`` (running variance uses the
    unbiased estimate). In evaluation mode the running statistics are used.
    """
    if h.ndim != 2 or h.shape[1] != state.num_features:
        raise DimensionError(f"batchnorm: input {h.shape} does not fit {state.num_features} features")
    n = h.shape[0]
    gamma, beta = state.gamma, state.beta
    G = gamma.data
    if state.training:
        if n < 2:
            raise DegenerateBatchError("batch norm in training mode needs at least 2 rows")
        mu = h.data.mean(axis=0)
        centered = h.data - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))

        def rule(g):
            dxhat = g * G
            dh = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dh, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (h.data - state.running_mean) * inv_std

        def rule(g):
            return g * (G * inv_std), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(xhat * G + beta.data, (h, gamma, beta), rule)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _record(np.asarray(loss), (logits,), rule)


def l1_loss(pred, target):
    """Mean absolute error; ``pred`` may be a column vector."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.data.size != target.size:
        raise DimensionError(f"l1_loss: {pred.shape} predictions for {target.size} targets")
    diff = pred.data.reshape(-1) - target
    shape = pred.shape
    n = diff.size
    return _record(np.asarray(np.abs(diff).mean()), (pred,),
                   lambda g: ((np.sign(diff) * (float(g) / n)).reshape(shape),))


# ---------------------------------------------------------------------------
# parameter containers


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


class Module:
    """Minimal parameter container.

    Parameters are discovered from instance attributes: every :class:`Tensor`
    attribute is a parameter, :class:`Module` attributes are recursed into,
    and lists/tuples/dicts of either are walked in insertion order.
    """

    _buffers = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(name, value)

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, dtype=np.float64) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unknown = set(state) - set(params) - set(buffers)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()
        for name in buffers:
            owner, attr = self._locate(name)
            setattr(owner, attr, np.asarray(state[name], dtype=np.float64).copy())

    def _locate(self, dotted):
        *path, attr = dotted.split(".")
        owner = self
        for part in path:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else (
                owner[part] if isinstance(owner, dict) else getattr(owner, part))
        return owner, attr


def _walk(name, value):
    if isinstance(value, (Tensor, Module)):
        yield name, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(f"{name}.{key}", item)


class Linear(Module):
    """Affine map ``x @ weight + bias`` with Glorot-uniform weights, zero bias."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.weight = Tensor(glorot_uniform(rng, in_features, out_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Learnable affine batch normalization with running statistics.

    Holds ``gamma``, ``beta``, ``running_mean``, ``running_var``, ``momentum``
    and ``eps``; ``training`` selects batch or running statistics.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch norm epsilon must be positive")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, h):
        return batchnorm(h, self)


BatchNormState = BatchNorm
