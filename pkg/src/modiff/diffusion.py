"""Shared diffusion machinery: noise schedules, forward perturbation, the
masked score loss, and plain ancestral reverse sampling.

Timesteps are 1-based: t runs over {1, ..., T}. Schedule tables are kept in
float64 so they match an independent product-loop recomputation to 1e-12
relative; per-op arithmetic follows the input tensor dtype.
"""

from dataclasses import dataclass

import torch

from .errors import EmptyMaskError, ScheduleError, ShapeMismatchError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta / alpha-bar tables for T steps (float64, index 0 holds t=1)."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self):
        return self.betas.shape[0]

    def beta(self, t):
        return self.betas[t - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[t - 1]

    def to_config(self):
        return {
            "t_steps": int(self.T),
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass
class DiffusionState:
    """A noised tensor together with its (1-based) timestep."""

    z: torch.Tensor
    t: int


def make_linear_schedule(t_steps, beta_start=1e-4, beta_end=0.02):
    """Linearly spaced betas with alpha-bars from the running product."""
    if t_steps < 1:
        raise ScheduleError(f"t_steps must be >= 1, got {t_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, t_steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def _gather(table, t, like):
    """Index the schedule table with an int or a per-sample 1-D tensor of
    timesteps, reshaped for broadcasting against `like`."""
    if torch.is_tensor(t):
        vals = table.to(like.device)[t.long() - 1].to(like.dtype)
        return vals.view(-1, *([1] * (like.dim() - 1)))
    return table[int(t) - 1].to(like.dtype)


def _check_t(t, T):
    if torch.is_tensor(t):
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > T:
            raise ScheduleError(f"timesteps out of range [1, {T}]")
    elif not 1 <= int(t) <= T:
        raise ScheduleError(f"timestep {t} out of range [1, {T}]")


def forward_perturb(z0, t, eps, sched):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ShapeMismatchError(
            f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}",
            module="diffusion",
        )
    _check_t(t, sched.T)
    abar = _gather(sched.alpha_bars, t, z0)
    z_t = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
    return DiffusionState(z=z_t, t=t)


def score_loss(eps, eps_pred, channel_mask=None):
    """MSE between true and predicted noise over unmasked entries only.

    `channel_mask` is a boolean tensor broadcastable to the noise shape
    (typically a frame-axis mask). Masked-out entries contribute nothing to
    the value or the gradient.
    """
    if eps_pred.shape != eps.shape:
        raise ShapeMismatchError(
            f"eps_pred shape {tuple(eps_pred.shape)} != eps shape {tuple(eps.shape)}",
            module="diffusion",
        )
    diff = eps - eps_pred
    if channel_mask is None:
        return diff.pow(2).mean()
    mask = torch.broadcast_to(channel_mask.bool(), diff.shape)
    selected = diff[mask]
    if selected.numel() == 0:
        raise EmptyMaskError("channel_mask selects no entries")
    return selected.pow(2).mean()


def reverse_step(state, eps_pred, sched, noise=None):
    """One ancestral step z_t -> z_{t-1} with sigma_t^2 = beta_t.

    Injected noise is suppressed at t = 1 (deterministic final step).
    """
    t = state.t
    _check_t(t, sched.T)
    z = state.z
    if eps_pred.shape != z.shape:
        raise ShapeMismatchError(
            f"eps_pred shape {tuple(eps_pred.shape)} != state shape {tuple(z.shape)}",
            module="diffusion",
        )
    beta = _gather(sched.betas, t, z)
    abar = _gather(sched.alpha_bars, t, z)
    mean = (z - beta / torch.sqrt(1.0 - abar) * eps_pred) / torch.sqrt(1.0 - beta)
    if t > 1 and noise is not None:
        mean = mean + torch.sqrt(beta) * noise
    return DiffusionState(z=mean, t=t - 1)


def sample_loop(denoiser, shape, condition, sched, rng, dtype=torch.float32):
    """Ancestral sampling from a standard normal draw down to t = 1.

    `denoiser(z_t, t, condition)` must return a tensor of the input shape.
    Fully deterministic for a fixed `rng` (a torch.Generator or an int seed).
    """
    if isinstance(rng, int):
        generator = torch.Generator().manual_seed(rng)
    else:
        generator = rng
    z = torch.randn(shape, generator=generator, dtype=dtype)
    state = DiffusionState(z=z, t=sched.T)
    for t in range(sched.T, 0, -1):
        eps_pred = denoiser(state.z, t, condition)
        if eps_pred.shape != state.z.shape:
            raise ShapeMismatchError(
                f"denoiser returned shape {tuple(eps_pred.shape)}, "
                f"expected {tuple(state.z.shape)}",
                module="diffusion",
            )
        noise = (
            torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
        )
        state = reverse_step(state, eps_pred, sched, noise)
    return state.z
