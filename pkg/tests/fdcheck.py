"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def fd_check(
    fn: Callable[..., torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-3,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    ``fn(*tensors)`` may return any shape; it is contracted with a fixed
    random tensor to get a scalar loss.  Each input is checked as a whole:
    ``|g_fd - g_auto| / max(|g_fd|, |g_auto|)`` in the 2-norm.  The
    differences are taken on a float64 replica of the instance so that the
    check measures the gradient code, not float32 cancellation.  Pass
    float64 tensors to get the analytic side in float64 as well.
    """
    gen = torch.Generator().manual_seed(seed)
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*leaves)
    weight = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    (out * weight).sum().backward()
    analytic = [t.grad.double() for t in leaves]

    base = [t.detach().double().clone() for t in tensors]
    w64 = weight.double()

    def loss(args):
        with torch.no_grad():
            return float((fn(*args) * w64).sum())

    worst = 0.0
    for i, t in enumerate(base):
        numeric = torch.zeros_like(t)
        flat = t.view(-1)
        for j in range(flat.numel()):
            orig = float(flat[j])
            flat[j] = orig + step
            up = loss(base)
            flat[j] = orig - step
            down = loss(base)
            flat[j] = orig
            numeric.view(-1)[j] = (up - down) / (2 * step)
        denom = max(float(numeric.norm()), float(analytic[i].norm()), 1e-12)
        worst = max(worst, float((numeric - analytic[i]).norm()) / denom)
    return worst
