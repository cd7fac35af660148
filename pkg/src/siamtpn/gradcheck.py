"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_input: list[float]

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / denom)


DEFAULT_STEP = 1e-5


def _step(x: float, rel: float = DEFAULT_STEP) -> float:
    return rel * max(1.0, abs(x))


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    step: float = DEFAULT_STEP,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    ``inputs`` must be leaves with ``requires_grad=True``; ``fn`` closes over
    them. With ``coords`` set, only that many randomly chosen coordinates
    per input are perturbed (for large parameter sets). ``step`` is the
    relative finite-difference step; networks with many ReLU units need a
    smaller one so the perturbation does not cross an activation kink.
    The error per input
    is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` over the checked entries.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    errors = []
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if coords is None or coords >= flat.size:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, size=coords, replace=False)
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                h = _step(orig, step)
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            errors.append(_rel_error(ga.reshape(-1)[idx], numeric))
    return GradCheckResult(max(errors) if errors else 0.0, errors)


def directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator) -> float:
    """Relative error of <grad, v> against a central difference along a random direction v."""
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    dirs = [rng.standard_normal(t.shape) for t in inputs]
    analytic = float(np.sum([np.sum((t.grad if t.grad is not None else 0.0) * d) for t, d in zip(inputs, dirs)]))
    scale = max(1.0, max(float(np.abs(t.data).max()) for t in inputs))
    h = 1e-5 * scale / max(1.0, float(np.sqrt(np.sum([np.sum(d * d) for d in dirs]))))
    originals = [t.data.copy() for t in inputs]
    with no_grad():
        for t, d, o in zip(inputs, dirs, originals):
            t.data = o + h * d
        fp = fn().item()
        for t, d, o in zip(inputs, dirs, originals):
            t.data = o - h * d
        fm = fn().item()
        for t, o in zip(inputs, originals):
            t.data = o
    numeric = (fp - fm) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
