"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64. The graph is define-by-run: each operation records
its parents and a backward closure, and ``backward`` replays the tape in
reverse topological order. The tape is rebuilt per minibatch, which keeps
alternating updates with frozen sub-networks trivially correct.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class NonFiniteValueError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class NonFiniteGradientError(ArithmeticError):
    """An optimizer step received a NaN/Inf gradient; carries the parameter name."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name


class TapeError(RuntimeError):
    """backward() was called on an untraced, non-scalar, or consumed tensor."""


_trace_enabled = True


class no_grad:
    """Context manager that suspends tape recording (for evaluation passes)."""

    def __enter__(self):
        global _trace_enabled
        self._saved = _trace_enabled
        _trace_enabled = False
        return self

    def __exit__(self, *exc):
        global _trace_enabled
        _trace_enabled = self._saved
        return False


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    A tensor with ``requires_grad=False`` and no parents is a constant and
    never receives gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar; all real work happens in the module-level ops --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor; always on the tape."""

    __slots__ = ("name",)

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    traced = [p for p in parents if p.requires_grad]
    if _trace_enabled and traced:
        out.requires_grad = True
        out._parents = tuple(traced)
        out._backward = backward
        out._op = op
    else:
        out._op = op + "*"
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum-reduce over axes that were broadcast in the forward pass.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), "mul", bwd)


def matmul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), "matmul", bwd)


def transpose(a) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.T

    def bwd(g):
        _accumulate(a, g.T)

    return _node(data, (a,), "transpose", bwd)


def relu(a) -> Tensor:
    a = _ensure_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0.0))

    return _node(data, (a,), "relu", bwd)


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accumulate(a, g * data * (1.0 - data))

    return _node(data, (a,), "sigmoid", bwd)


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis; rows land on the simplex."""
    a = _ensure_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _node(data, (a,), "softmax", bwd)


def log(a) -> Tensor:
    """Natural log, clamped as log(max(x, 1e-12)) to avoid -Inf inside losses."""
    a = _ensure_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    data = np.log(clamped)

    def bwd(g):
        _accumulate(a, np.where(a.data > LOG_CLAMP, g / clamped, 0.0))

    return _node(data, (a,), "log", bwd)


def square(a) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data * a.data

    def bwd(g):
        _accumulate(a, g * 2.0 * a.data)

    return _node(data, (a,), "square", bwd)


def tsum(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _ensure_tensor(a)
    data = np.asarray(a.data.sum())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), "sum", bwd)


def mean(a) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    a = _ensure_tensor(a)
    count = a.data.size
    data = np.asarray(a.data.mean())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _node(data, (a,), "mean", bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    parts = [_ensure_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        start = 0
        for p, size in zip(parts, sizes):
            _accumulate(p, g[start:start + size])
            start += size

    return _node(data, tuple(parts), "concat", bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 1 (e.g. features with a one-hot condition)."""
    parts = [_ensure_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        start = 0
        for p, width in zip(parts, widths):
            _accumulate(p, g[:, start:start + width])
            start += width

    return _node(data, tuple(parts), "concat", bwd)


def take_rows(a, indices) -> Tensor:
    """Row-select: out[k] = a[indices[k]]. Repeated indices accumulate on backward."""
    a = _ensure_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accumulate(a, acc)

    return _node(data, (a,), "row-select", bwd)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a traced scalar.

    Returns a map from every traced leaf tensor (parameters and traced
    inputs) to its gradient, and leaves the same array in ``leaf.grad``.
    The tape is consumed: a second call on the same loss raises TapeError.
    """
    if loss._consumed:
        raise TapeError("tape already consumed for this loss")
    if not loss.requires_grad:
        raise TapeError("backward() on an untraced tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward() expects a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        elif node.requires_grad:
            grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
        # consume the tape
        node._parents = ()
        node._backward = None
    loss._consumed = True
    return grads


# ---------------------------------------------------------------------------
# Layers and networks
# ---------------------------------------------------------------------------

ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax")

_ACTIVATION_FNS = {
    "identity": lambda t: t,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


class DenseLayer:
    """Fully connected layer: activation(x @ W.T + b), weight is (out, in)."""

    def __init__(self, weight: Parameter, bias: Parameter, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        if weight.data.ndim != 2 or bias.data.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if weight.data.shape[0] != bias.data.shape[0]:
            raise ValueError(
                f"bias length {bias.data.shape[0]} does not match weight rows {weight.data.shape[0]}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[0]

    def apply(self, x: Tensor) -> Tensor:
        pre = add(matmul(x, transpose(self.weight)), self.bias)
        return _ACTIVATION_FNS[self.activation](pre)


class Mlp:
    """Ordered dense layers with a parameter registry for the optimizer."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]


def forward(mlp: Mlp, x: Tensor) -> Tensor:
    """Apply the network; records tape nodes when tracing is enabled."""
    x = _ensure_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"forward expects a 2-D batch, got shape {x.data.shape}")
    if x.data.shape[1] != mlp.in_dim:
        raise ValueError(
            f"input dim {x.data.shape[1]} does not match first layer in-dim {mlp.in_dim}")
    out = x
    for layer in mlp.layers:
        out = layer.apply(out)
    return out


def init_mlp(dims: Sequence[int], activations: Sequence[str], seed: int,
             name: str = "mlp") -> Mlp:
    """He-initialize relu layers, Xavier the rest; biases zero; deterministic."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    if any(d <= 0 for d in dims):
        raise ValueError(f"non-positive layer dim in {dims}")
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        act = activations[k]
        if act == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        w = Parameter(rng.normal(0.0, std, size=(fan_out, fan_in)), f"{name}.layer{k}.weight")
        b = Parameter(np.zeros(fan_out), f"{name}.layer{k}.bias")
        layers.append(DenseLayer(w, b, act))
    return Mlp(layers)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """SGD or Adam with per-parameter state."""

    def __init__(self, kind: str = "adam", lr: float = 1e-3,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind '{kind}'")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self, params: Iterable[Parameter], grads: dict[Tensor, np.ndarray]) -> None:
        """Update parameters in place; aborts (before touching anything) on a
        non-finite gradient, reporting the offending parameter.

        Parameters absent from ``grads`` are skipped: they took no part in
        the traced loss, so their Adam moments must not decay either.
        """
        updates: list[tuple[Parameter, np.ndarray]] = []
        for p in params:
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(p.name)
            updates.append((p, g))
        self.step_count += 1
        for p, g in updates:
            if self.kind == "sgd":
                p.data = p.data - self.lr * g
            else:
                m = self._m.get(id(p))
                v = self._v.get(id(p))
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                t = self._t.get(id(p), 0) + 1
                m = self.beta1 * m + (1.0 - self.beta1) * g
                v = self.beta2 * v + (1.0 - self.beta2) * g * g
                self._m[id(p)] = m
                self._v[id(p)] = v
                self._t[id(p)] = t
                m_hat = m / (1.0 - self.beta1 ** t)
                v_hat = v / (1.0 - self.beta2 ** t)
                p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays: Sequence[tuple[str, np.ndarray]],
                    manifest: dict) -> None:
    """Versioned container: per parameter its name, shape, and raw
    little-endian float64 data; the manifest records architecture dims/seed."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "manifest": manifest, "params": entries},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return header["manifest"], arrays
