"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NondeterministicFunctionError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int
    worst_index: tuple | None = None
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<32s} max_rel_err={self.max_rel_error:.3e} "
                f"(tol {self.tol:.0e}, {self.n_checked} entries)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, atol)``; two zeros give 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def _evaluate(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(()))


def check_entries(f: Callable[[], Tensor], params: Sequence[Tensor],
                  entries: Sequence[tuple[int, tuple]] | None = None,
                  h: float = 1e-4, tol: float = 1e-4, atol: float = 1e-8,
                  name: str = "f") -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``f()``.

    ``f`` closes over ``params`` (leaf tensors with requires_grad). ``entries``
    selects (param position, flat index) pairs; default is every entry.
    """
    base = _evaluate(f)
    if _evaluate(f) != base:
        raise NondeterministicFunctionError(f"{name}: repeated evaluation differs")

    for p in params:
        p.grad = None
    out = f()
    out.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    if entries is None:
        entries = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]

    analytic = np.empty(len(entries))
    numeric = np.empty(len(entries))
    for n, (i, idx) in enumerate(entries):
        p = params[i]
        orig = p.data[idx].copy()
        p.data[idx] = orig + h
        fp = _evaluate(f)
        p.data[idx] = orig - h
        fm = _evaluate(f)
        p.data[idx] = orig
        numeric[n] = (fp - fm) / (2 * h)
        analytic[n] = grads[i][idx]

    if len(entries):
        err = relative_error(analytic, numeric, atol)
        worst = int(np.argmax(err))
        max_err = float(err[worst])
        worst_entry = tuple(entries[worst])
    else:
        max_err, worst_entry = 0.0, None
    return GradCheckReport(name, max_err, tol, len(entries), worst_entry, analytic, numeric)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
               tol: float = 1e-4, atol: float = 1e-8, name: str = "f") -> GradCheckReport:
    """Gradient check of a scalar function of one tensor over all its entries."""
    if not x.requires_grad:
        x.requires_grad = True
    return check_entries(lambda: f(x), [x], h=h, tol=tol, atol=atol, name=name)


def sample_entries(params: Sequence[Tensor], n: int, rng: np.random.Generator):
    """Pick ``n`` random (param position, index) pairs, weighted by param size."""
    sizes = np.array([p.size for p in params], dtype=float)
    picks = rng.choice(len(params), size=n, p=sizes / sizes.sum())
    out = []
    for i in picks:
        flat = int(rng.integers(params[i].size))
        out.append((int(i), np.unravel_index(flat, params[i].shape)))
    return out
