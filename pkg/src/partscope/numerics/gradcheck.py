"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .tensor import NonFiniteError


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_err: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, {len(self.per_param)} parameters)"
        )


def _rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic) + abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def grad_check(
    fn,
    params: list[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` rebuilds and returns the scalar loss node from the current
    parameter values; it is re-invoked for every probe, so it must be a
    pure function of `params`.  Each parameter entry is probed unless
    `max_entries_per_param` caps the count, in which case a seeded
    subsample is used (large graphs).  Empty `params` passes trivially.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    for p in params:
        if not np.all(np.isfinite(p.value)):
            raise NonFiniteError(f"parameter {p.name} is non-finite before check")

    report = GradCheckReport(eps=eps, tol=tol)
    if not params:
        return report

    root = fn()
    if not np.all(np.isfinite(root.value)):
        raise NonFiniteError(f"non-finite forward value at op {root.op!r}")
    for p in params:
        p.zero_grad()
    root.backward()
    analytic = {p.name: p.grad_value.copy() for p in params}

    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            probe = np.sort(rng.choice(n, size=max_entries_per_param, replace=False))
        else:
            probe = np.arange(n)
        worst = 0.0
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().value)
            flat[i] = orig - eps
            f_minus = float(fn().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _rel_err(float(analytic[p.name].reshape(-1)[i]), numeric)
            if err > worst:
                worst = err
        report.per_param[p.name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
        if worst > tol:
            report.failures.append(f"{p.name}: rel err {worst:.3e} > tol {tol:.1e}")
    return report
