"""Universal finite-difference referee for analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .tensor import DiffTensor


@dataclass
class GradCheckReport:
    """Element-wise comparison of analytic and central-difference grads."""

    max_rel_error: float
    worst_input: int        # index into the checked input list
    worst_element: tuple    # np.unravel_index of the worst element
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"grad check {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}) at input {self.worst_input}, "
                f"element {self.worst_element}")


def grad_check(fn, inputs, h: float = 1e-6, tol: float = 1e-6,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare the analytic gradient of ``fn`` against central differences.

    ``fn(*inputs)`` must be pure and deterministic and return a scalar
    DiffTensor; determinism is verified with a second forward pass and a
    violation aborts the check. Relative error per element is
    ``|a - d| / max(|a|, |d|, floor)``, so near-zero gradients are
    compared absolutely at the ``floor`` scale.
    """
    inputs = [x if isinstance(x, DiffTensor) else DiffTensor(x) for x in inputs]
    out = fn(*inputs)
    out_repeat = fn(*inputs)
    if not np.array_equal(out.data, out_repeat.data):
        raise ValidationError("grad_check aborted: closure is not deterministic")
    for x in inputs:
        x.zero_grad()
    out = fn(*inputs)
    out.backward()
    analytic = [x.grad.copy() for x in inputs]

    max_err = 0.0
    worst = (0, (0,))
    per_input = []
    for i, x in enumerate(inputs):
        fd = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            f_plus = float(fn(*inputs).data)
            flat[j] = original - h
            f_minus = float(fn(*inputs).data)
            flat[j] = original
            fd_flat[j] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(fd)), floor)
        err = np.abs(analytic[i] - fd) / denom
        per_input.append(float(err.max()) if err.size else 0.0)
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst = (i, np.unravel_index(err.argmax(), err.shape))
    return GradCheckReport(max_err, worst[0], worst[1], tol, per_input)
