"""
Rectified flow matching

The path runs from noise z0 (lambda = 0) to data z1 (lambda = 1):
    z_lambda = (1 - (1 - sigma) * lambda) * z0 + lambda * z1
with the constant velocity target
    v = z1 - (1 - sigma) * z0
Sampling integrates dz/dlambda = mu(z, lambda, ...) with explicit Euler steps.
"""

from typing import Callable, Optional

import torch
from torch import Tensor

from .. import settings
from ..errors import RefAudioValueError

# (z, lambda, references, reference_text, prompt) -> velocity
VelocityModel = Callable[[Tensor, Tensor, Tensor, Tensor, Tensor], Tensor]


def _check_pair(z0: Tensor, z1: Tensor) -> None:
    if z0.shape != z1.shape:
        raise RefAudioValueError(f"latent shapes differ: {tuple(z0.shape)} vs {tuple(z1.shape)}")


def _broadcast_lambda(lam: Tensor | float, like: Tensor) -> Tensor:
    lam = torch.as_tensor(lam, dtype=like.dtype, device=like.device)
    if lam.ndim == 1 and like.ndim > 1:
        # one lambda per batch element
        lam = lam.view(-1, *([1] * (like.ndim - 1)))
    return lam


def flow_interpolate(z0: Tensor, z1: Tensor, lam: Tensor | float,
                     sigma: float = settings.SIGMA) -> Tensor:
    _check_pair(z0, z1)
    lam_t = torch.as_tensor(lam)
    if torch.any(lam_t < 0) or torch.any(lam_t > 1):
        raise RefAudioValueError("lambda must lie in [0, 1]")
    lam_b = _broadcast_lambda(lam, z0)
    return (1 - (1 - sigma) * lam_b) * z0 + lam_b * z1


def velocity_target(z0: Tensor, z1: Tensor, sigma: float = settings.SIGMA) -> Tensor:
    _check_pair(z0, z1)
    return z1 - (1 - sigma) * z0


def cfg_combine(mu_cond: Tensor, mu_uncond: Tensor, w: float) -> Tensor:
    """Guided velocity; w = 1 gives mu_cond and w = 0 gives mu_uncond exactly."""
    if mu_cond.shape != mu_uncond.shape:
        raise RefAudioValueError("conditional and unconditional predictions differ in shape")
    return w * mu_cond + (1 - w) * mu_uncond


def check_steps(steps: int) -> None:
    if not 1 <= steps <= settings.MAX_SAMPLE_STEPS:
        raise RefAudioValueError(
            f"steps must be in [1, {settings.MAX_SAMPLE_STEPS}], got {steps}"
        )


@torch.no_grad()
def sample_ode(
    model: VelocityModel,
    references: Tensor,
    reference_text: Tensor,
    prompt: Tensor,
    *,
    shape: tuple[int, ...],
    null_references: Tensor,
    null_reference_text: Tensor,
    null_prompt: Tensor,
    steps: int = settings.SAMPLE_STEPS,
    w: float = settings.CFG_WEIGHT,
    generator: Optional[torch.Generator] = None,
    z0: Optional[Tensor] = None,
) -> Tensor:
    """Euler integration from z0 ~ N(0, I) over a uniform lambda grid.

    The unconditional branch receives the null prompt, null reference latents and
    null reference captions together.
    """
    check_steps(steps)
    if z0 is None:
        z0 = torch.randn(shape, generator=generator, dtype=references.dtype)
    elif tuple(z0.shape) != tuple(shape):
        raise RefAudioValueError(f"z0 shape {tuple(z0.shape)} does not match {tuple(shape)}")
    batch = z0.shape[0]
    grid = torch.linspace(0.0, 1.0, steps + 1, dtype=torch.float64)
    z = z0
    for k in range(steps):
        lam = torch.full((batch,), float(grid[k]), dtype=z.dtype)
        mu_c = model(z, lam, references, reference_text, prompt)
        if w == 1:
            mu = mu_c
        else:
            mu_u = model(z, lam, null_references, null_reference_text, null_prompt)
            mu = cfg_combine(mu_c, mu_u, w)
        z = z + float(grid[k + 1] - grid[k]) * mu
    return z
