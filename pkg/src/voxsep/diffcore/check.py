"""Finite-difference validation of analytic gradients.

Analytic gradients come from the tape; numeric ones from central
differences (step 1e-5) on a scalar projection of the op output. Checks
are intended to run in float64; callers pass closures over float64
parameters when validating whole models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5
REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tested_shapes: tuple
    seed: int

    def __str__(self):
        shapes = ", ".join(str(s) for s in self.tested_shapes)
        return f"{self.op_name}[{shapes}] seed={self.seed}: max_rel_error={self.max_rel_error:.3e}"


def _sample_input(rng: np.random.Generator, shape, kink_margin: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    if kink_margin > 0.0:
        # keep samples away from piecewise-linear kinks at zero
        x = x + np.where(x >= 0.0, kink_margin, -kink_margin)
    return x


def grad_check(op_closure, input_shapes, seed: int, *, op_name: str = "op",
               step: float = FD_STEP, kink_margin: float = 1e-3,
               max_entries: int | None = None) -> GradCheckReport:
    """Compare tape gradients of `op_closure` against central differences.

    `op_closure(inputs)` receives float64 Tensors (requires_grad) shaped per
    `input_shapes` and returns one output Tensor. The output is reduced to a
    scalar by a fixed random projection so a single backward pass yields all
    analytic gradients. Relative error uses denominator max(|a|, |n|, 1e-8).
    `max_entries` caps the number of perturbed coordinates per input (all
    when None), which keeps whole-model checks affordable.
    """
    rng = np.random.default_rng(seed)
    base = [_sample_input(rng, s, kink_margin) for s in input_shapes]
    inputs = [Tensor(b.copy(), requires_grad=True) for b in base]

    out = op_closure(inputs)
    proj = rng.standard_normal(out.data.shape)
    out.backward(proj)
    analytic = [np.zeros_like(b) if t.grad is None else t.grad
                for b, t in zip(base, inputs)]

    def loss_at() -> float:
        fresh = [Tensor(b) for b in base]
        return float(np.sum(op_closure(fresh).data * proj))

    max_rel = 0.0
    for idx, b in enumerate(base):
        flat = b.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            plus = loss_at()
            flat[c] = orig - step
            minus = loss_at()
            flat[c] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[idx].reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            if rel > max_rel:
                max_rel = rel
    return GradCheckReport(op_name=op_name, max_rel_error=max_rel,
                           tested_shapes=tuple(input_shapes), seed=seed)
