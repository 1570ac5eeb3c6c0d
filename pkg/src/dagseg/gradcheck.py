"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dagseg.tensor import Tensor


def numerical_grad(
    f: Callable[[], Tensor],
    t: Tensor,
    step: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """d f() / d t by central differences, perturbing ``t.data`` in place.

    With ``indices`` only those coordinates are estimated; the rest stay zero.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    if indices is None:
        coords = range(flat.size)
    else:
        coords = [np.ravel_multi_index(ix, t.shape) for ix in indices]
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare backprop against finite differences for each tensor in ``inputs``.

    ``f`` must rebuild the graph on every call and return a scalar. When
    ``max_coords`` is set, at most that many coordinates per input are probed
    (sampled with ``rng``). Returns one relative error per input.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    errors = []
    for t, a in zip(inputs, analytic):
        indices = None
        if max_coords is not None and t.size > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_coords, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
            mask = np.zeros(t.size, dtype=bool)
            mask[flat] = True
            a = np.where(mask.reshape(t.shape), a, 0.0)
        n = numerical_grad(f, t, step, indices)
        errors.append(relative_error(a, n))
    return errors
