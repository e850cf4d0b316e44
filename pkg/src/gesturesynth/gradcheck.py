"""Finite-difference verification of analytic gradients.

`finite_diff_check` takes a closure that rebuilds a scalar loss from the
current parameter values, perturbs probed entries by +/-h, and compares the
central difference against the gradient produced by backward(). Failures are
reported, never raised, so a harness can print the full table.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamReport:
    name: str
    rel_err: float
    probes: int

    def ok(self, tol):
        return self.rel_err <= tol


@dataclass
class GradCheckReport:
    tol: float
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.ok(self.tol) for e in self.entries)

    @property
    def worst(self):
        """Entry with the largest relative error, or None when empty."""
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.rel_err)

    def summary(self):
        lines = [f"gradient check (tol {self.tol:g})"]
        for e in self.entries:
            mark = "ok " if e.ok(self.tol) else "FAIL"
            lines.append(f"  [{mark}] {e.name}: rel_err {e.rel_err:.3e} ({e.probes} probes)")
        return "\n".join(lines)


def _rel_err(a, b, atol=0.0):
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if max(norm_a, norm_b) < atol:
        # both effectively zero: central differences are pure roundoff here
        # (a parameter the loss provably does not depend on), so the norm
        # ratio would compare noise against noise
        return 0.0
    return float(np.linalg.norm(a - b) / max(norm_a, norm_b, 1e-12))


def finite_diff_check(loss_fn, params, h=1e-4, tol=1e-4, max_probes=16, rng=None,
                      atol=1e-6):
    """Compare analytic gradients of `loss_fn()` against central differences.

    `params` is a name -> Tensor mapping; each tensor is probed at up to
    `max_probes` entries (all of them when small enough). The relative error
    per parameter is the norm ratio ||fd - analytic|| / max(||fd||,
    ||analytic||) over the probed entries; when both sides' norms fall under
    `atol` the parameter counts as matching (a gradient that is genuinely
    zero leaves the difference quotient dominated by float cancellation).
    """
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }

    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_probes:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_probes, replace=False))
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            fd[j] = (f_plus - f_minus) / (2 * h)
        an = analytic[name].reshape(-1)[idx]
        report.entries.append(ParamReport(name, _rel_err(fd, an, atol=atol), len(idx)))
    return report
