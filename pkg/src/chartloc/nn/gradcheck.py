from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

# Denominator floor for relative error; entries whose gradients are both
# below it are compared absolutely against tol * floor.
REL_FLOOR = 1e-6
# Central differences cannot resolve gradients below ~ulp(L) / h; the floor is
# raised so that this roundoff alone stays under tol.
FD_NOISE_ULPS = 4.0


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``max_entries`` caps the number of entries checked per parameter by
    random subsampling (at least 100 when capped).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss {loss.data} at current parameters")
    loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    rng = rng or np.random.default_rng(0)
    floor = max(REL_FLOOR, FD_NOISE_ULPS * np.finfo(float).eps * abs(float(loss.data)) / (h * tol))

    worst = (0.0, "", ())
    n_checked = 0
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max(max_entries, 100):
            idx = rng.choice(flat.size, size=max(max_entries, 100), replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), floor)
            n_checked += 1
            if not np.isfinite(err) or err > worst[0]:
                worst = (err, name, np.unravel_index(i, p.data.shape))
    for p in params.values():
        p.grad = None
    return GradCheckReport(float(worst[0]), worst[1], tuple(int(v) for v in worst[2]), n_checked, tol)
