"""Central finite-difference gradient verification.

The analytic gradient under test comes from autograd; the reference is an
independent two-sided difference (L(x+h) - L(x-h)) / 2h evaluated in float64.
A coordinate passes when |fd - an| <= atol + rtol * max(|fd|, |an|).
"""

from __future__ import annotations

import numpy as np
import torch

STEP = 1e-4
RTOL = 1e-3
ATOL = 1e-8


def check_gradients(
    make_loss,
    tensors: dict[str, torch.Tensor],
    step: float = STEP,
    rtol: float = RTOL,
    atol: float = ATOL,
    max_coords: int = 5,
    seed: int = 0,
):
    """Verify d(make_loss())/d(tensor) for a sample of coordinates per tensor.

    ``make_loss`` must be a deterministic closure over ``tensors`` (fresh
    forward pass each call). All tensors must be float64 leaves with
    requires_grad set. Returns the number of coordinates checked.
    """
    for name, t in tensors.items():
        assert t.dtype == torch.float64, f"{name} must be float64"
        assert t.requires_grad, f"{name} must require grad"
        t.grad = None

    loss = make_loss()
    loss.backward()

    rng = np.random.default_rng(seed)
    checked = 0
    failures = []
    for name, t in tensors.items():
        grad = t.grad
        assert grad is not None, f"no gradient reached {name}"
        flat = t.detach().reshape(-1)
        gflat = grad.detach().reshape(-1)
        n = flat.numel()
        idx = rng.permutation(n)[: min(max_coords, n)]
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            lp = float(make_loss().detach())
            with torch.no_grad():
                flat[i] = orig - step
            lm = float(make_loss().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            an = float(gflat[i])
            tol = atol + rtol * max(abs(fd), abs(an))
            if abs(fd - an) > tol:
                failures.append(f"{name}[{i}]: fd={fd:.6e} autograd={an:.6e}")
            checked += 1
    assert not failures, "gradient mismatches:\n" + "\n".join(failures)
    return checked


def model_param_dict(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters()}
