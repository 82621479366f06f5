"""
scheduler.py

Noise schedule, deterministic DDIM stepping, DDIM inversion with a strength S, and
classifier-free guidance with an optional L0 proximal step on the guidance direction.

Main features:
- make_schedule builds a linear-beta schedule with the convention alpha_bar(0) = 1.
- inference_timesteps gives the uniform inference grid, t = 0 included.
- ddim_step / ddim_invert / denoise walk that grid down or up.
- prox_l0 + quantile_lambda implement the hard-threshold regulariser.
- guided_noise mixes the FFPE-token and NULL-token predictions, both carrying the
  same (translated) embedding.

Functions taking a ``model`` accept either a Denoiser or any callable
``noise_fn(z_t, t, cond) -> eps_hat``.
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.config import GuidanceConfig
from app.errors import NumericalFault, RejectedInputError
from app.ldm_core import ConditionBundle, DomainToken, LatentGrid, predict_noise

logger = logging.getLogger(__name__)

__all__ = [
    "GuidanceConfig",
    "NoiseSchedule",
    "make_schedule",
    "inference_timesteps",
    "ddim_step",
    "ddim_invert",
    "prox_l0",
    "quantile_lambda",
    "guided_noise",
    "denoise",
    "roundtrip_error",
]


@dataclass
class NoiseSchedule:
    T_train: int
    betas: torch.Tensor
    alphas_bar: torch.Tensor

    def alpha_bar(self, t):
        """alpha_bar at integer ``t`` (or a LongTensor of them); alpha_bar(0) is 1."""
        if isinstance(t, torch.Tensor):
            full = torch.cat([torch.ones(1, dtype=self.alphas_bar.dtype), self.alphas_bar])
            return full[t.long()]
        t = int(t)
        if t < 0 or t > self.T_train:
            raise RejectedInputError(f"Timestep {t} outside [0, {self.T_train}]")
        return 1.0 if t == 0 else float(self.alphas_bar[t - 1])


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """
    Linear betas from ``beta_start`` to ``beta_end`` over ``T_train`` steps.

    Raises:
        RejectedInputError: If ``T_train`` < 2 or the betas leave (0, 1).
    """
    if T_train < 2:
        raise RejectedInputError(f"T_train must be >= 2, got {T_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise RejectedInputError(f"Betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T_train, dtype=torch.float64)
    alphas_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(T_train=T_train, betas=betas, alphas_bar=alphas_bar)


def inference_timesteps(T_train: int, T_inference: int) -> List[int]:
    """Uniform grid of ``T_inference + 1`` timesteps from 0 to ``T_train`` inclusive."""
    if T_inference < 1 or T_inference > T_train:
        raise RejectedInputError(f"T_inference must lie in [1, {T_train}], got {T_inference}")
    return np.rint(np.linspace(0, T_train, T_inference + 1)).astype(int).tolist()


def _as_noise_fn(model) -> Callable:
    return partial(predict_noise, model) if isinstance(model, nn.Module) else model


def _values(z) -> torch.Tensor:
    return z.values if isinstance(z, LatentGrid) else z


def _require_finite(stage: str, **tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericalFault(f"{name} contains NaN/Inf (norm={t.float().norm().item():.4g})", stage)


def _ddim_transition(z: torch.Tensor, eps: torch.Tensor, t_from: int, t_to: int, schedule: NoiseSchedule) -> torch.Tensor:
    a_from = schedule.alpha_bar(t_from)
    a_to = schedule.alpha_bar(t_to)
    z0_hat = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * z0_hat + math.sqrt(1.0 - a_to) * eps


def ddim_step(z_t, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> LatentGrid:
    """
    Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    ``t_prev == t`` returns ``z_t`` unchanged.

    Raises:
        RejectedInputError: If ``t_prev`` > ``t``.
        NumericalFault: If ``z_t`` or ``eps_hat`` is not finite.
    """
    z = _values(z_t)
    if t_prev > t or t_prev < 0:
        raise RejectedInputError(f"DDIM step needs t >= t_prev >= 0, got t={t}, t_prev={t_prev}")
    _require_finite("ddim_step", z_t=z, eps_hat=eps_hat)
    if t_prev == t:
        return LatentGrid(z, t_prev)
    return LatentGrid(_ddim_transition(z, eps_hat, t, t_prev, schedule), t_prev)


@torch.no_grad()
def ddim_invert(
    model, z0: LatentGrid, cond_fs: ConditionBundle, cfg: GuidanceConfig, schedule: NoiseSchedule
) -> Tuple[LatentGrid, List[int]]:
    """
    Run DDIM forward for ``round(S * T_inference)`` grid steps under ``cond_fs`` (no guidance).

    Returns:
        tuple: The noisy latent (its ``timestep`` is the last visited grid point) and the
        visited timesteps, starting at 0.
    """
    if z0.timestep != 0:
        raise RejectedInputError(f"Inversion starts from a clean latent, got timestep {z0.timestep}")
    noise_fn = _as_noise_fn(model)
    grid = inference_timesteps(schedule.T_train, cfg.T_inference)
    visited = grid[: cfg.n_steps + 1]
    z = z0.values
    for t_cur, t_next in zip(visited[:-1], visited[1:]):
        eps = noise_fn(z, t_cur, cond_fs)
        z = _ddim_transition(z, eps, t_cur, t_next, schedule)
        _require_finite("invert", z=z)
    logger.debug("stage=invert steps=%d t_end=%d norm=%.4f", len(visited) - 1, visited[-1], z.float().norm().item())
    return LatentGrid(z, visited[-1]), visited


def prox_l0(d: torch.Tensor, lam: float) -> torch.Tensor:
    """
    Hard threshold: keep ``d[i]`` where ``|d[i]| > sqrt(2 * lam)``, zero elsewhere.

    Raises:
        RejectedInputError: If ``lam`` is negative.
    """
    if lam < 0:
        raise RejectedInputError(f"lambda must be >= 0, got {lam}")
    threshold = math.sqrt(2.0 * lam)
    return torch.where(d.abs() > threshold, d, torch.zeros_like(d))


def quantile_lambda(d: torch.Tensor, q: float, rule: str = "threshold") -> float:
    """
    Lambda for ``prox_l0`` from the q-quantile of ``|d|``.

    The quantile is the empirical inverse-CDF value (the ``ceil(n*q)``-th smallest
    magnitude), so exactly the entries strictly above it survive. With
    ``rule="threshold"`` the quantile is the threshold itself (lambda = Q^2 / 2); with
    ``rule="lambda"`` lambda equals the quantile.

    Raises:
        RejectedInputError: If ``q`` is outside (0, 1), ``d`` is empty or the rule is unknown.
    """
    if not 0.0 < q < 1.0:
        raise RejectedInputError(f"q must lie in (0, 1), got {q}")
    mags = d.detach().abs().reshape(-1).cpu()
    n = mags.numel()
    if n == 0:
        raise RejectedInputError("Cannot take a quantile of an empty tensor")
    # inverse-CDF quantile (Hyndman-Fan type 1), not linear interpolation: |d| in [1..4], q=0.5 gives 2, not 2.5
    k = min(n, max(1, math.ceil(n * q - 1e-9)))
    quantile = float(torch.kthvalue(mags, k).values.item())
    if rule == "threshold":
        return quantile * quantile / 2.0
    if rule == "lambda":
        return quantile
    raise RejectedInputError(f"Unknown lambda rule {rule!r}")


def _prox_direction(d: torch.Tensor, cfg: GuidanceConfig) -> torch.Tensor:
    # lambda is local to each sample of a batch
    if d.dim() == 4:
        return torch.stack([prox_l0(di, quantile_lambda(di, cfg.q, cfg.lambda_rule)) for di in d])
    return prox_l0(d, quantile_lambda(d, cfg.q, cfg.lambda_rule))


def _same_embedding(a: Optional[torch.Tensor], b: Optional[torch.Tensor]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a is b or (a.shape == b.shape and torch.equal(a, b))


def guided_noise(
    model,
    z_t,
    t: int,
    cond_ffpe: ConditionBundle,
    cond_null: Optional[ConditionBundle],
    cfg: GuidanceConfig,
) -> torch.Tensor:
    """
    Guided noise ``eps_u + GS * d`` with ``d = eps_c - eps_u`` (hard-thresholded when
    ``cfg.prox_enabled``).

    ``cond_null`` defaults to the NULL token with ``cond_ffpe``'s embedding. GS = 1 without
    prox returns ``eps_c`` and GS = 0 returns ``eps_u`` without evaluating the other branch.

    Raises:
        RejectedInputError: If the two branches carry different embeddings.
    """
    if cond_null is None:
        cond_null = cond_ffpe.with_token(DomainToken.NULL)
    if not _same_embedding(cond_ffpe.embedding, cond_null.embedding):
        raise RejectedInputError("Conditional and unconditional branches must share the same embedding")
    noise_fn = _as_noise_fn(model)
    z = _values(z_t)
    if cfg.GS == 1.0 and not cfg.prox_enabled:
        return noise_fn(z, t, cond_ffpe)
    eps_u = noise_fn(z, t, cond_null)
    if cfg.GS == 0.0:
        return eps_u
    d = noise_fn(z, t, cond_ffpe) - eps_u
    if cfg.prox_enabled:
        d = _prox_direction(d, cfg)
    return eps_u + cfg.GS * d


@torch.no_grad()
def denoise(
    model,
    z_noisy: LatentGrid,
    cond_ffpe: ConditionBundle,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    cond_null: Optional[ConditionBundle] = None,
    visited: Optional[Sequence[int]] = None,
) -> LatentGrid:
    """
    Walk the inference grid from ``z_noisy.timestep`` down to 0 with guided noise.

    Raises:
        RejectedInputError: If ``z_noisy`` (or the given ``visited`` grid) does not match
            the grid ``cfg`` implies.
    """
    grid = inference_timesteps(schedule.T_train, cfg.T_inference)
    n = cfg.n_steps
    if z_noisy.timestep != grid[n]:
        raise RejectedInputError(
            f"Latent is at t={z_noisy.timestep} but S={cfg.S}, T={cfg.T_inference} starts denoising at t={grid[n]}"
        )
    if visited is not None and list(visited) != grid[: n + 1]:
        raise RejectedInputError("Denoising grid does not match the inversion grid")
    noise_fn = _as_noise_fn(model)
    z = z_noisy.values
    for i in range(n, 0, -1):
        eps = guided_noise(noise_fn, z, grid[i], cond_ffpe, cond_null, cfg)
        z = ddim_step(z, eps, grid[i], grid[i - 1], schedule).values
        _require_finite("denoise", z=z)
    return LatentGrid(z, 0)


def roundtrip_error(
    model, latents: torch.Tensor, embeddings: Optional[torch.Tensor], schedule: NoiseSchedule,
    strength: float = 0.5, T_inference: int = 50,
) -> float:
    """Mean relative L2 error of invert -> denoise with FS conditioning, GS = 1 and no prox."""
    cfg = GuidanceConfig(GS=1.0, S=strength, T_inference=T_inference, prox_enabled=False)
    cond = ConditionBundle(DomainToken.FS, embeddings)
    z_s, visited = ddim_invert(model, LatentGrid(latents, 0), cond, cfg, schedule)
    z_rec = denoise(model, z_s, cond, cfg, schedule, visited=visited).values
    flat = latents.reshape(latents.shape[0], -1) if latents.dim() == 4 else latents.reshape(1, -1)
    rec = z_rec.reshape(flat.shape).to(flat.device)
    err = (rec - flat).norm(dim=1) / flat.norm(dim=1).clamp_min(1e-12)
    return err.mean().item()
