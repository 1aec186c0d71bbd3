"""Finite-difference verification of reverse-mode gradients."""
from dataclasses import dataclass, field

import numpy as np


class NonDeterministicError(RuntimeError):
    """Two evaluations of the same closure at the same point disagreed."""


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple = ("", -1)
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def lines(self):
        out = [f"{name}: checked={n} max_rel_error={err:.3e}"
               for name, (n, err) in self.per_param.items()]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"{status} max_rel_error={self.max_rel_error:.3e} "
                   f"tolerance={self.tolerance:.1e} checked={self.n_checked} "
                   f"worst={self.worst[0]}[{self.worst[1]}]")
        return out


def rel_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn, params, tolerance=1e-4, h=1e-5, max_elements=10_000,
              per_param_min=8, seed=0, floor=1e-8):
    """Compare reverse-mode gradients of ``loss_fn()`` to central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. When the parameters hold more than ``max_elements`` values a
    random subsample of that size is checked, with at least
    ``per_param_min`` elements (or all of them) from every parameter.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradcheck needs float64 parameters")
        p.grad = None
    loss = loss_fn()
    again = loss_fn()
    if loss.data.tobytes() != again.data.tobytes():
        raise NonDeterministicError("closure returned different values for identical inputs")
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = []
    if total <= max_elements:
        picks = [np.arange(n) for n in sizes]
    else:
        base = np.minimum(sizes, per_param_min)
        extra = max(max_elements - int(base.sum()), 0)
        share = np.floor(extra * sizes / total).astype(int)
        for n, k in zip(sizes, np.minimum(sizes, base + share)):
            picks.append(np.sort(rng.choice(n, size=k, replace=False)))

    report = GradcheckReport(max_rel_error=0.0, n_checked=0, tolerance=tolerance)
    for i, (p, g, idx) in enumerate(zip(params, grads, picks)):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(loss_fn().data)
            flat[j] = orig - h
            f_minus = float(loss_fn().data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = rel_error(float(gflat[j]), numeric, floor)
            if err > worst:
                worst = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (getattr(p, "name", "") or f"param{i}", int(j))
        report.n_checked += len(idx)
        report.per_param[getattr(p, "name", "") or f"param{i}"] = (len(idx), worst)
    for p in params:
        p.grad = None
    return report
