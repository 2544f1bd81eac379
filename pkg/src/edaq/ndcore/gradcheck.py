"""Finite-difference oracle for the autodiff engine.

Checks analytic gradients against central differences (h=1e-3) with the whole
computation run in float64 so the comparison is limited by truncation error,
not storage precision. Large parameter tensors are spot-checked on a seeded
subset of entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


@dataclass
class ParamReport:
    name: str
    n_checked: int
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[ParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"grad_check: {state} ({len(self.entries)} params, "
                f"max rel err {self.max_rel_err:.3e}, tol {self.tolerance:.1e})")


def grad_check(fn, params: list[Tensor], tolerance: float = 1e-4,
               h: float = 1e-3, max_entries_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic grads of the scalar `fn()` against central differences.

    `fn` must rebuild its graph from the current contents of `params` on every
    call. Parameter data is temporarily promoted to float64 and restored
    bit-exactly afterwards.
    """
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report

    rng = np.random.default_rng(seed)
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
        zero_grads(params)
        loss = fn()
        backward(loss)
        analytic = [None if p.grad is None else p.grad.copy() for p in params]

        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_entries_per_param is not None and n > max_entries_per_param:
                idx = np.sort(rng.choice(n, size=max_entries_per_param,
                                         replace=False))
            else:
                idx = np.arange(n)
            a = (np.zeros(n) if analytic[pi] is None
                 else analytic[pi].reshape(-1))
            max_rel = 0.0
            with no_grad():
                for i in idx:
                    v = flat[i]
                    flat[i] = v + h
                    lp = float(fn().data)
                    flat[i] = v - h
                    lm = float(fn().data)
                    flat[i] = v
                    fd = (lp - lm) / (2.0 * h)
                    rel = abs(a[i] - fd) / max(abs(a[i]), abs(fd), 1e-6)
                    max_rel = max(max_rel, rel)
            name = p.name or f"param{pi}"
            report.entries.append(ParamReport(name, len(idx), max_rel,
                                              max_rel < tolerance))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
        zero_grads(params)
    return report
