"""Dense float64 tensors with gradient buffers and a reverse-mode tape.

Every operator in this subpackage builds nodes of a dynamic graph: a
node stores its value, its parents, and a closure that routes the
output gradient into the parents' buffers. ``backward()`` on a scalar
node replays the closures in reverse topological order. Gradient
recording can be switched off (``no_grad``) for sampling and
evaluation, where only values are needed.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

from ..errors import NumericalFault, ShapeError, ValidationError

_grad_enabled = True
_checked = False


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Assert finiteness of every op output inside the context."""
    global _checked
    previous = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = previous


class DiffTensor:
    """A float64 array with a lazily allocated same-shape gradient buffer."""

    __slots__ = ("data", "_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate(self, g):
        if self._grad is None:
            # copy: callers may hand the same buffer to several parents
            self._grad = np.array(g, dtype=np.float64)
            if self._grad.shape != self.data.shape:
                self._grad = np.broadcast_to(self._grad, self.data.shape).copy()
        else:
            self._grad += g

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data.copy())

    def backward(self):
        """Reverse-mode sweep from this (scalar) node."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar node")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape})"


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def make_node(data, parents, backward) -> DiffTensor:
    """Create an op output, recording the tape edge only when enabled."""
    if _checked and not np.isfinite(data).all():
        raise NumericalFault("non-finite values produced by an operator")
    if _grad_enabled:
        return DiffTensor(data, parents, backward)
    return DiffTensor(data)


class ParamStore:
    """Named parameter and buffer registry with deterministic order.

    Trainable parameters are DiffTensors; buffers (batch-norm running
    statistics) are plain arrays saved alongside them. Initialization
    draws from the store's own seeded generator, so a given seed yields
    a bitwise-identical store.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, DiffTensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self.seed = seed

    def add(self, name: str, shape, init: str = "fan_in") -> DiffTensor:
        """Register a parameter.

        ``fan_in`` draws uniform +-sqrt(1/fan_in); ``zeros``/``ones`` are
        used for biases and batch-norm gains.
        """
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "fan_in":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            if len(shape) == 4:  # conv kernels (kh, kw, cin, cout)
                fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(1.0 / fan_in)
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValidationError(f"unknown init {init!r}")
        tensor = DiffTensor(data)
        self.params[name] = tensor
        return tensor

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.buffers:
            raise ValidationError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name: str) -> DiffTensor:
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.params.items()}
        out.update({name: b.copy() for name, b in self.buffers.items()})
        return out

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = values[name].copy()
        for name in self.buffers:
            self.buffers[name] = values[name].copy()


# ---------------------------------------------------------------------------
# checkpoint format: b"DFN1", then per entry
#   uint32 name length | name utf-8 | uint32 rank | uint32 dims... | float64 data
# all little-endian.

MAGIC = b"DFN1"


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        entries = [(name, p.data) for name, p in store.params.items()]
        entries += [(name, b) for name, b in store.buffers.items()]
        for name, data in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError(f"{path}: not a parameter checkpoint")
        values: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if payload.size != count:
                raise ValidationError(f"{path}: truncated payload for {name!r}")
            values[name] = payload.reshape(dims).astype(np.float64)
    return values
