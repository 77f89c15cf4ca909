"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from kinaema.engine.tensor import Tensor, precision
from kinaema.errors import NumericError


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


# Gradients smaller than this are compared in absolute terms (e.g. key biases,
# whose true gradient is identically zero under softmax shift invariance).
SCALE_FLOOR = 1e-5
# Central differences carry round-off of about eps_machine * |f| / eps; the
# floor grows with |f| so that noise never reads as a relative error.
OUTPUT_FLOOR = 1e-5


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
               max_entries: int | None = 64, seed: int = 0) -> GradCheckReport:
    """Compare ``fn``'s reverse-mode gradients against central differences.

    ``fn`` takes no arguments and returns a scalar Tensor computed from the
    tensors in ``params`` (inputs count as params here).  All tensors are
    promoted to float64 for the duration of the check.  At most
    ``max_entries`` randomly chosen entries of each tensor are perturbed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    saved = {name: (t.data, t.requires_grad, t.grad) for name, t in params.items()}
    report = GradCheckReport()
    try:
        with precision(np.float64):
            for t in params.values():
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = None
            out = fn()
            if not np.all(np.isfinite(out.data)):
                raise NumericError("function output is not finite before perturbation")
            out.backward()
            floor = max(SCALE_FLOOR, OUTPUT_FLOOR * abs(float(out.data)))
            for name, t in params.items():
                analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
                flat = t.data.reshape(-1)
                if max_entries is None or flat.size <= max_entries:
                    idx = np.arange(flat.size)
                else:
                    idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                numeric = np.empty(len(idx))
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    plus = float(fn().data)
                    flat[i] = orig - eps
                    minus = float(fn().data)
                    flat[i] = orig
                    if not (np.isfinite(plus) and np.isfinite(minus)):
                        raise NumericError(f"non-finite output while perturbing parameter {name!r}")
                    numeric[j] = (plus - minus) / (2 * eps)
                analytic = analytic_full.reshape(-1)[idx]
                report.errors[name] = _relative_error(analytic, numeric, floor)
                report.checked_entries[name] = len(idx)
    finally:
        for name, t in params.items():
            data, req, grad = saved[name]
            t.data, t.requires_grad, t.grad = data, req, grad
    return report


def module_params(module, prefix: str = "") -> dict[str, Tensor]:
    """Parameters of ``module`` keyed by dotted name, optionally under ``prefix``."""
    return {f"{prefix}.{name}" if prefix else name: p for name, p in module.named_parameters()}
