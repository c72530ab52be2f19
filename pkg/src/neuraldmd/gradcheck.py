"""Central finite-difference checks of analytic parameter gradients."""

from __future__ import annotations

import numpy as np


def fd_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             n_samples: int = 6, step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Relative error of ``grads`` against central differences, per parameter array.

    ``loss_fn()`` must return the scalar loss for the current contents of
    ``params`` (arrays are perturbed in place and restored).  Up to
    ``n_samples`` entries per array are probed and compared as a vector:
    ``|g_fd - g| / max(|g_fd|, |g|)``.  Arrays whose sampled gradient is
    numerically zero report the absolute difference instead.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        if p.size == 0:
            continue
        idx = rng.choice(p.size, size=min(n_samples, p.size), replace=False)
        num = np.empty(len(idx))
        for i, j in enumerate(idx):
            old = p.flat[j]
            p.flat[j] = old + step
            up = loss_fn()
            p.flat[j] = old - step
            down = loss_fn()
            p.flat[j] = old
            num[i] = (up - down) / (2 * step)
        ana = np.asarray(grads[name], dtype=np.float64).ravel()[idx]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana))
        diff = np.linalg.norm(num - ana)
        errors[name] = float(diff / scale) if scale > 1e-10 else float(diff)
    return errors


def model_fd_check(model, loss, **kw) -> dict[str, float]:
    """``fd_check`` for a model exposing ``parameters()``; ``loss(model)`` returns ``(value, grads)``."""
    _, grads = loss(model)
    return fd_check(lambda: loss(model)[0], model.parameters(), grads, **kw)
