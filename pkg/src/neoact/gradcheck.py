"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor


class DeterminismError(RuntimeError):
    """The loss function returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], epsilon: float = 1e-5,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() gradients with ``(f(p+eps) - f(p-eps)) / 2eps``.

    ``loss_fn`` takes no arguments and reads the tensors in ``params``,
    which are perturbed in place one element at a time and restored.
    Parameters with ``requires_grad=False`` are skipped.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("two forward passes disagree; loss_fn is not deterministic")

    live = {k: p for k, p in params.items() if p.requires_grad}
    for p in live.values():
        p.grad = None
    second.backward()

    report = GradCheckReport(max_rel_error=0.0, n_checked=0)
    for name, p in live.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn().item()
            flat[i] = orig - epsilon
            fm = loss_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * epsilon)
        err = relative_error(analytic, numeric, floor)
        worst = float(err.max()) if err.size else 0.0
        report.per_param[name] = worst
        report.n_checked += flat.size
        if worst > report.max_rel_error or report.worst is None:
            report.max_rel_error = max(report.max_rel_error, worst)
            report.worst = (name, int(err.argmax()))
    return report
