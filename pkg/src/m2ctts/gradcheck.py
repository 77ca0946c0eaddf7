"""Central finite-difference gradient checking.

Written against the analytic gradients on purpose: the checker never
uses autograd internals beyond reading ``.grad``, so it is an
independent oracle. Checks run in float64; sampled coordinates keep
full-model checks affordable.
"""

from __future__ import annotations

import numpy as np
import torch

from .seeding import stable_seed

DEFAULT_STEP = 1e-6

# Central differences of an O(1) function in float64 bottom out around
# 1e-10; gradient pairs below this scale are compared absolutely, since
# a ratio of two noise terms says nothing (e.g. a parameter whose true
# gradient is exactly zero by a softmax shift-invariance).
ZERO_SCALE = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative disagreement between gradient samples."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < ZERO_SCALE:
        return diff
    return diff / float(scale)


def check_gradients(
    fn,
    tensors: dict[str, torch.Tensor],
    n_coords: int = 6,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> dict[str, float]:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` is a closure producing a scalar from the given leaf tensors.
    For each tensor, up to ``n_coords`` coordinates are sampled and
    perturbed by ±step; the two-sided slope is compared with the
    analytic gradient at those coordinates. Returns per-tensor relative
    errors. Tensors should be float64 with requires_grad set.
    """
    for name, t in tensors.items():
        if not t.requires_grad:
            raise ValueError(f"{name} does not require grad")
        t.grad = None
    loss = fn()
    if loss.dim() != 0:
        raise ValueError("fn must return a scalar")
    loss.backward()
    errors: dict[str, float] = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise ValueError(f"{name} received no gradient")
        grad = t.grad.detach().cpu().numpy().reshape(-1)
        numel = t.numel()
        rng = np.random.default_rng(stable_seed(seed, "fd", name))
        if numel <= n_coords:
            coords = np.arange(numel)
        else:
            coords = rng.choice(numel, size=n_coords, replace=False)
        flat = t.data.view(-1)  # shares storage; errors if not viewable
        analytic = []
        numeric = []
        with torch.no_grad():
            for idx in coords:
                idx = int(idx)
                orig = float(flat[idx])
                flat[idx] = orig + step
                f_plus = float(fn())
                flat[idx] = orig - step
                f_minus = float(fn())
                flat[idx] = orig
                analytic.append(grad[idx])
                numeric.append((f_plus - f_minus) / (2.0 * step))
        errors[name] = relative_error(np.array(analytic), np.array(numeric))
    return errors


def check_module_gradients(
    module: torch.nn.Module,
    loss_fn,
    n_coords: int = 4,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> dict[str, float]:
    """Finite-difference check over every parameter of a module.

    ``loss_fn`` is a closure over the module producing a scalar.
    The module should already be in float64.
    """
    tensors = dict(module.named_parameters())
    return check_gradients(loss_fn, tensors, n_coords=n_coords, step=step, seed=seed)
