"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import ShapeError
from .tensor import Tape, Tensor, backward, no_record


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} over {self.checked} entries (tol {self.tol:g})"


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
              tol: float = 1e-5, indices: Mapping[str, np.ndarray] | None = None,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` must read the current ``.data`` of the tensors in ``params``.
    ``indices`` optionally restricts each named parameter to a subset of flat
    entries. The relative error denominator is floored at ``floor`` so that
    entries whose true gradient is zero are compared in absolute terms.
    """
    for t in params.values():
        t.grad = None
        t.requires_grad = True
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data, order="C")
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ShapeError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    if loss._node is not None:
        backward(loss, tape)

    worst = 0.0
    checked = 0
    per_param: dict[str, float] = {}
    with no_record():
        for name, p in params.items():
            analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
            flat = p.data.reshape(-1)
            which = np.arange(p.size) if indices is None or name not in indices else np.asarray(indices[name])
            err = 0.0
            for i in which:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = max(err, relative_error(float(analytic[i]), numeric, floor))
                checked += 1
            per_param[name] = err
            worst = max(worst, err)
    return GradcheckReport(worst, tol, checked, per_param)
