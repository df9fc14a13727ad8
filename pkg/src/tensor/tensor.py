"""Dense tensors and the operation tape used for reverse-mode differentiation."""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TRAINING_DTYPE = np.float32
VERIFICATION_DTYPE = np.float64

_default_dtype = TRAINING_DTYPE
_tape_stack: List["Tape"] = []


def get_default_dtype() -> type:
    """Return the dtype new tensors are created with."""
    return _default_dtype


@contextmanager
def precision(dtype):
    """
    Temporarily switch the precision of newly created tensors.

    Args:
        dtype: "float32" for training or "float64" for verification suites
    """
    global _default_dtype
    resolved = np.dtype(dtype).type
    if resolved not in (TRAINING_DTYPE, VERIFICATION_DTYPE):
        raise ValueError(f"Unsupported precision {dtype}; use float32 or float64")

    previous = _default_dtype
    _default_dtype = resolved
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """Immutable dense tensor value with an optional gradient requirement."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=_default_dtype)
        if any(extent < 1 for extent in array.shape):
            raise ValueError(f"All tensor extents must be >= 1, got shape {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an operation result without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # Operators delegate to ops; imported lazily because ops builds on this module.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class TapeNode:
    """One recorded primitive: its output, inputs and vector-Jacobian product."""
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive operations for one training context."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(TapeNode(op, output, inputs, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack.pop()


def current_tape() -> Optional[Tape]:
    """Return the innermost active tape, or None when nothing is recording."""
    return _tape_stack[-1] if _tape_stack else None


def backward(
    loss: Tensor,
    tape: Optional[Tape] = None,
    wrt: Optional[Iterable[Tensor]] = None
) -> Dict[Tensor, np.ndarray]:
    """
    Propagate gradients of a scalar loss back through the recorded tape.

    Args:
        loss: Scalar tensor produced while the tape was recording
        tape: Tape to replay (defaults to the active tape)
        wrt: Tensors that must appear in the result even when off the path

    Returns:
        Map from every gradient-requiring leaf tensor to its gradient
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    tape = tape if tape is not None else current_tape()
    produced = {id(node.output) for node in tape.nodes} if tape is not None else set()

    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("Loss is not reachable from a recorded tape")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes if tape is not None else []):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue

        for tensor, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            # Fan-out accumulates additively.
            pending[key] = pending[key] + grad if key in pending else grad
            if key not in produced:
                leaves[key] = tensor

    gradients = {tensor: pending[key] for key, tensor in leaves.items()}

    for tensor in wrt or []:
        if tensor not in gradients:
            gradients[tensor] = np.zeros_like(tensor.data)

    return gradients
