"""Shared test utilities."""
import numpy as np

from fmts import tensor as T


def finite_difference_check(loss_fn, leaves, h=1e-5, max_entries=None, rng=None):
    """Worst relative error between tape gradients and central differences.

    ``loss_fn()`` must build the loss from ``leaves`` (float64 tensors with
    requires_grad). Relative error per leaf is measured as
    max|g - fd| / max(max|fd|, 1e-8).
    """
    for leaf in leaves:
        leaf.zero_grad()
    with T.precision(np.float64), T.GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat_idx = list(np.ndindex(leaf.shape))
        if max_entries is not None and len(flat_idx) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(flat_idx), max_entries, replace=False)
            flat_idx = [flat_idx[i] for i in pick]
        fd = np.zeros(len(flat_idx))
        an = np.zeros(len(flat_idx))
        for j, idx in enumerate(flat_idx):
            orig = leaf.data[idx]
            leaf.data[idx] = orig + h
            with T.precision(np.float64):
                up = float(loss_fn().item())
            leaf.data[idx] = orig - h
            with T.precision(np.float64):
                down = float(loss_fn().item())
            leaf.data[idx] = orig
            fd[j] = (up - down) / (2 * h)
            an[j] = analytic[idx]
        worst = max(worst, float(np.max(np.abs(an - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    return worst

