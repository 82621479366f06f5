"""
ldm_core.py

The desk-scale latent diffusion stack: a convolutional VAE (pix2latent encoder and
latent2pix decoder), a small residual U-Net denoiser conditioned on a domain token and
an extractor embedding, LoRA adapters for parameter-efficient fine-tuning, and the
noise-prediction training objective.

Main features:
- ImagePatch / LatentGrid / ConditionBundle data types shared by the whole package.
- encode/decode through the VAE posterior mean, with a recorded latent scale.
- predict_noise with token + embedding conditioning injected next to the timestep embedding.
- apply_lora installs zero-initialised low-rank adapters on every linear layer.
- ldm_loss / ldm_train_step implement the epsilon-prediction objective with
  token dropout for classifier-free guidance.
- train_vae / train_ldm / fine_tune_lora training loops and checkpoint helpers.

Tensor layout is channel-first throughout (pixels ``3×H×W``, latents ``c×h×w``);
every operation also accepts a leading batch dimension.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from app.checkpoint import load_checkpoint, save_checkpoint
from app.errors import ConfigError, RejectedInputError, TrainingFault

logger = logging.getLogger(__name__)

CLASS_LABELS = ("A", "B", "C")


class Domain(str, Enum):
    FS = "FS"
    FFPE = "FFPE"


class DomainToken(IntEnum):
    FS = 0
    FFPE = 1
    NULL = 2

    @classmethod
    def for_domain(cls, domain: Union[str, Domain]) -> "DomainToken":
        return cls[Domain(domain).value]


@dataclass
class ImagePatch:
    """An H×W×3 float image in [0, 1] with its provenance."""

    pixels: np.ndarray
    domain: str
    class_label: str
    case_id: str
    patch_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise RejectedInputError(f"Expected H×W×3 pixels, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise RejectedInputError(f"Pixel values of {self.patch_id} fall outside [0, 1]")

    @property
    def tensor(self) -> torch.Tensor:
        return pixels_to_tensor(self.pixels)


@dataclass
class LatentGrid:
    """A latent tensor (``c×h×w`` or ``n×c×h×w``) at a diffusion timestep; 0 is clean."""

    values: torch.Tensor
    timestep: int = 0


@dataclass
class ConditionBundle:
    """
    Everything the denoiser is conditioned on.

    ``domain_token`` is a DomainToken or a LongTensor of per-sample tokens; ``embedding``
    is a ``d_e`` vector, an ``n×d_e`` batch, or None when absent.
    """

    domain_token: Union[DomainToken, torch.Tensor]
    embedding: Optional[torch.Tensor] = None

    def with_token(self, token: DomainToken) -> "ConditionBundle":
        return ConditionBundle(token, self.embedding)


def pixels_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H×W×3 (or n×H×W×3) array -> channel-first float32 tensor."""
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous() if t.dim() == 4 else t.permute(2, 0, 1).contiguous()


def tensor_to_pixels(t: torch.Tensor) -> np.ndarray:
    """Channel-first tensor -> H×W×3 (or n×H×W×3) float32 array."""
    t = t.detach().cpu().float()
    t = t.permute(0, 2, 3, 1) if t.dim() == 4 else t.permute(1, 2, 0)
    return t.contiguous().numpy()


def make_generator(seed: int, device: Union[str, torch.device] = "cpu") -> torch.Generator:
    return torch.Generator(device=device).manual_seed(int(seed))


@torch.no_grad()
def reset_parameters_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """
    Redraw every Linear/Conv2d/Embedding parameter from ``generator``.

    Same distributions as a fresh construction (uniform within ``1/sqrt(fan_in)``, unit
    normal for embeddings), but torch's global RNG is neither read nor advanced.
    """
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            bound = 1.0 / math.sqrt(layer.weight[0].numel())
            layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=generator))
            if layer.bias is not None:
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=generator))
        elif isinstance(layer, nn.Embedding):
            layer.weight.copy_(torch.empty_like(layer.weight).normal_(0.0, 1.0, generator=generator))
    return module


# ---------------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------------


class VAE(nn.Module):
    """Convolutional VAE with ``log2(downsample)`` stride-2 stages."""

    def __init__(self, latent_channels: int = 4, downsample: int = 4, channels: int = 32):
        super().__init__()
        levels = int(round(math.log2(downsample)))
        if 2 ** levels != downsample:
            raise ConfigError(f"downsample must be a power of two, got {downsample}", "model.downsample")
        self.latent_channels = latent_channels
        self.downsample = downsample
        self.config = {"latent_channels": latent_channels, "downsample": downsample, "channels": channels}

        enc: List[nn.Module] = [nn.Conv2d(3, channels, 3, padding=1), nn.SiLU()]
        ch = channels
        for _ in range(levels):
            enc += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        enc.append(nn.Conv2d(ch, 2 * latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec: List[nn.Module] = [nn.Conv2d(latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch // 2, 3, padding=1), nn.SiLU()]
            ch //= 2
        dec.append(nn.Conv2d(ch, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("latent_scale", torch.tensor(1.0))

    def encode_moments(self, x: torch.Tensor):
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, logvar = self.encode_moments(x)
        noise = torch.randn(mean.shape, generator=generator).to(device=mean.device, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * noise
        return self.decode_raw(z), mean, logvar


@torch.no_grad()
def encode(x: Union[ImagePatch, torch.Tensor], vae: VAE) -> LatentGrid:
    """
    Encode an image patch (or a channel-first pixel batch) to a clean latent.

    Uses the posterior mean, scaled by ``vae.latent_scale``.

    Raises:
        RejectedInputError: If H or W is not divisible by the VAE downsample factor.
    """
    pixels = x.tensor if isinstance(x, ImagePatch) else x
    batched = pixels.dim() == 4
    if not batched:
        pixels = pixels.unsqueeze(0)
    h, w = pixels.shape[-2:]
    f = vae.downsample
    if h % f or w % f:
        raise RejectedInputError(f"Image size {h}x{w} is not divisible by the downsample factor {f}")
    device = vae.latent_scale.device
    mean, _ = vae.encode_moments(pixels.to(device))
    z = mean * vae.latent_scale
    return LatentGrid(z if batched else z[0], 0)


@torch.no_grad()
def decode(z: Union[LatentGrid, torch.Tensor], vae: VAE) -> torch.Tensor:
    """
    Decode a clean latent to channel-first pixels clamped to [0, 1].

    Raises:
        RejectedInputError: If the channel count does not match the VAE.
    """
    values = z.values if isinstance(z, LatentGrid) else z
    batched = values.dim() == 4
    if not batched:
        values = values.unsqueeze(0)
    if values.shape[1] != vae.latent_channels:
        raise RejectedInputError(
            f"Latent has {values.shape[1]} channels, decoder expects {vae.latent_channels}"
        )
    device = vae.latent_scale.device
    out = vae.decode_raw(values.to(device) / vae.latent_scale).clamp(0.0, 1.0)
    return out if batched else out[0]


def train_vae(
    vae: VAE,
    train_images: torch.Tensor,
    val_images: torch.Tensor,
    steps: int,
    lr: float = 1e-3,
    kl_weight: float = 1e-6,
    batch_size: int = 32,
    generator: Optional[torch.Generator] = None,
    log_every: int = 500,
) -> dict:
    """
    Train the VAE on reconstruction MSE plus a small KL term.

    Returns:
        dict: ``val_mse`` (posterior-mean round trip on ``val_images``), ``latent_scale``
        (reciprocal std of training latents, also stored on the module) and ``history``.
    """
    device = vae.latent_scale.device
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    history = []
    n = train_images.shape[0]
    vae.train()
    for step in tqdm(range(steps), desc="vae", disable=None):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        x = train_images[idx].to(device)
        recon, mean, logvar = vae(x, generator=generator)
        mse = F.mse_loss(recon, x)
        kl = -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
        loss = mse + kl_weight * kl
        if not torch.isfinite(loss):
            raise TrainingFault("VAE loss is not finite", {"step": step, "mse": mse.item(), "kl": kl.item()})
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "mse": mse.item(), "kl": kl.item()})
        if log_every and step % log_every == 0:
            logger.info("stage=vae step=%d mse=%.5f kl=%.3f", step, mse.item(), kl.item())
    vae.eval()

    with torch.no_grad():
        means = torch.cat([vae.encode_moments(b.to(device))[0] for b in train_images.split(256)])
        std = means.std().clamp_min(1e-6)
        vae.latent_scale.fill_(1.0 / std.item())
        recon = torch.cat([decode(encode(b, vae), vae).cpu() for b in val_images.split(256)])
        val_mse = F.mse_loss(recon, val_images.cpu()).item()
    logger.info("stage=vae val_mse=%.5f latent_scale=%.4f", val_mse, vae.latent_scale.item())
    return {"val_mse": val_mse, "latent_scale": vae.latent_scale.item(), "history": pd.DataFrame(history)}


# ---------------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------------


class LoRALinear(nn.Module):
    """A frozen ``nn.Linear`` plus a low-rank update ``scale * up @ down``; ``up`` starts at zero."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0, generator: Optional[torch.Generator] = None):
        super().__init__()
        k, d = base.in_features, base.out_features
        if rank < 1 or rank > min(k, d):
            raise ConfigError(f"LoRA rank {rank} must lie in [1, {min(k, d)}] for a {k}->{d} layer", "model.lora_rank")
        self.base = base
        self.rank = rank
        self.scale = scale
        bound = 1.0 / math.sqrt(k)
        down = torch.empty(rank, k, device=base.weight.device, dtype=base.weight.dtype)
        down.uniform_(-bound, bound, generator=generator)
        self.down = nn.Parameter(down)
        self.up = nn.Parameter(torch.zeros(d, rank, device=base.weight.device, dtype=base.weight.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def delta_weight(self) -> torch.Tensor:
        return self.scale * self.up @ self.down

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.down), self.up)


def lora_adapters(model: nn.Module) -> Dict[str, LoRALinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def lora_parameters(model: nn.Module) -> List[nn.Parameter]:
    params = []
    for adapter in lora_adapters(model).values():
        params += [adapter.down, adapter.up]
    return params


def apply_lora(model: nn.Module, rank: int, scale: float = 1.0, generator: Optional[torch.Generator] = None) -> nn.Module:
    """
    Install LoRA adapters on every ``nn.Linear`` of ``model`` (in place) and freeze the base weights.

    Right after installation the model computes exactly what it computed before.

    Raises:
        ConfigError: If ``rank`` is < 1 or exceeds the smallest dimension of a targeted layer.
    """
    targets = []
    for parent_name, parent in model.named_modules():
        if isinstance(parent, LoRALinear):
            continue
        for child_name, child in parent.named_children():
            if isinstance(child, nn.Linear):
                targets.append((parent, child_name, child))
    if not targets:
        raise ConfigError("model has no linear layers to adapt", "model.lora_rank")
    smallest = min(min(c.in_features, c.out_features) for _, _, c in targets)
    if rank < 1 or rank > smallest:
        raise ConfigError(f"LoRA rank {rank} must lie in [1, {smallest}]", "model.lora_rank")

    for p in model.parameters():
        p.requires_grad_(False)
    for parent, child_name, child in targets:
        setattr(parent, child_name, LoRALinear(child, rank, scale, generator))
    model.lora_rank = rank
    model.lora_scale = scale
    logger.debug("stage=lora rank=%d adapters=%d", rank, len(targets))
    return model


# ---------------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, device=t.device, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.cond_proj = nn.Linear(cond_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond_proj(F.silu(cond))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """
    Residual U-Net predicting the noise in a latent.

    The domain token is looked up in a learned table and added to the timestep
    embedding; the extractor embedding goes through one linear layer and is
    concatenated to it. The resulting vector conditions every residual block.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        base_channels: int = 32,
        channel_mults: Sequence[int] = (1, 2, 4),
        time_emb_dim: int = 128,
        embed_dim: int = 128,
        T_train: int = 1000,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.embed_dim = embed_dim
        self.time_emb_dim = time_emb_dim
        self.T_train = T_train
        self.lora_rank = 0
        self.lora_scale = 1.0
        self.config = {
            "latent_channels": latent_channels,
            "base_channels": base_channels,
            "channel_mults": list(channel_mults),
            "time_emb_dim": time_emb_dim,
            "embed_dim": embed_dim,
            "T_train": T_train,
        }

        self.time_mlp = nn.Sequential(
            nn.Linear(time_emb_dim, time_emb_dim * 2), nn.SiLU(), nn.Linear(time_emb_dim * 2, time_emb_dim)
        )
        self.token_embedding = nn.Embedding(len(DomainToken), time_emb_dim)
        self.embedding_proj = nn.Linear(embed_dim, time_emb_dim)
        cond_dim = 2 * time_emb_dim

        self.conv_in = nn.Conv2d(latent_channels, base_channels, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_chs = []
        ch = base_channels
        for i, mult in enumerate(channel_mults):
            out = base_channels * mult
            self.down_blocks.append(ResBlock(ch, out, cond_dim))
            ch = out
            if i < len(channel_mults) - 1:
                skip_chs.append(ch)
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, cond_dim)
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(channel_mults) - 1)):
            out = base_channels * channel_mults[i]
            self.up_blocks.append(ResBlock(ch + skip_chs[i], out, cond_dim))
            ch = out
        self.norm_out = nn.GroupNorm(min(8, ch), ch)
        self.conv_out = nn.Conv2d(ch, latent_channels, 3, padding=1)
        self.spatial_multiple = 2 ** (len(channel_mults) - 1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        t_emb = self.time_mlp(timestep_embedding(t, self.time_emb_dim))
        cond = torch.cat([t_emb + self.token_embedding(tokens), self.embedding_proj(embedding)], dim=-1)
        h = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, cond)
            if i < len(self.downsamplers):
                skips.append(h)
                h = self.downsamplers[i](h)
        h = self.mid(h, cond)
        for block in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), cond)
        return self.conv_out(F.silu(self.norm_out(h)))


def _token_tensor(token, n: int, device) -> torch.Tensor:
    if isinstance(token, torch.Tensor):
        tokens = token.to(device=device, dtype=torch.long).reshape(-1)
        return tokens.expand(n) if tokens.numel() == 1 else tokens
    return torch.full((n,), int(DomainToken(token)), dtype=torch.long, device=device)


def _embedding_tensor(embedding: Optional[torch.Tensor], n: int, dim: int, device) -> torch.Tensor:
    if embedding is None:
        return torch.zeros(n, dim, device=device)
    e = embedding.to(device=device, dtype=torch.float32)
    if e.shape[-1] != dim:
        raise RejectedInputError(f"Embedding dimension {e.shape[-1]} does not match the projection input {dim}")
    return e.expand(n, dim) if e.dim() == 1 else e


def predict_noise(model: Denoiser, z_t: Union[LatentGrid, torch.Tensor], t, cond: ConditionBundle) -> torch.Tensor:
    """
    Predict the noise in ``z_t`` at timestep ``t`` under ``cond``.

    Returns:
        torch.Tensor: Same shape as the input latent.

    Raises:
        RejectedInputError: On timesteps outside [0, T_train], latent sizes the U-Net cannot
            halve, or an embedding dimension that does not match the projection layer.
    """
    values = z_t.values if isinstance(z_t, LatentGrid) else z_t
    batched = values.dim() == 4
    z = values if batched else values.unsqueeze(0)
    n = z.shape[0]
    device = model.conv_in.weight.device
    z = z.to(device)
    if isinstance(t, torch.Tensor):
        ts = t.to(device=device, dtype=torch.long).reshape(-1)
        ts = ts.expand(n) if ts.numel() == 1 else ts
    else:
        ts = torch.full((n,), int(t), dtype=torch.long, device=device)
    if ts.min().item() < 0 or ts.max().item() > model.T_train:
        raise RejectedInputError(f"Timestep outside [0, {model.T_train}]: {ts.tolist()[:4]}")
    m = model.spatial_multiple
    if z.shape[-1] % m or z.shape[-2] % m:
        raise RejectedInputError(f"Latent size {tuple(z.shape[-2:])} must be divisible by {m}")
    tokens = _token_tensor(cond.domain_token, n, device)
    emb = _embedding_tensor(cond.embedding, n, model.embed_dim, device)
    out = model(z, ts, tokens, emb)
    return out if batched else out[0]


# ---------------------------------------------------------------------------------
# Objective and training
# ---------------------------------------------------------------------------------


def ldm_loss(
    noise_fn: Callable,
    z0: torch.Tensor,
    cond: ConditionBundle,
    schedule,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    t: Optional[torch.Tensor] = None,
    cfg_dropout: float = 0.0,
) -> torch.Tensor:
    """
    Epsilon-prediction loss on a batch of clean latents.

    Args:
        noise_fn: ``noise_fn(z_t, t, cond) -> eps_hat``, e.g. ``partial(predict_noise, model)``.
        z0: Clean latents, ``c×h×w`` or ``n×c×h×w``.
        cond: Conditioning; its token is replaced by NULL with probability ``cfg_dropout``
            per sample, the embedding is always kept.
        schedule: Any object exposing ``T_train`` and ``alpha_bar(t)``.
        noise, t: Optional explicit draws; sampled from ``generator`` when absent.

    Raises:
        TrainingFault: If the loss is not finite.
    """
    batched = z0.dim() == 4
    z0 = z0 if batched else z0.unsqueeze(0)
    n = z0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T_train + 1, (n,), generator=generator)
    t = t.reshape(-1).expand(n) if t.numel() == 1 else t.reshape(-1)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator)
    noise = noise.to(z0.device).reshape(z0.shape)
    ab = schedule.alpha_bar(t.cpu()).to(device=z0.device, dtype=z0.dtype).view(n, 1, 1, 1)
    z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise

    tokens = _token_tensor(cond.domain_token, n, torch.device("cpu"))
    if cfg_dropout > 0.0:
        drop = torch.rand(n, generator=generator) < cfg_dropout
        tokens = torch.where(drop, torch.full_like(tokens, int(DomainToken.NULL)), tokens)
    pred = noise_fn(z_t, t.to(z0.device), ConditionBundle(tokens.to(z0.device), cond.embedding))
    loss = F.mse_loss(pred, noise)
    if not torch.isfinite(loss):
        raise TrainingFault(
            "LDM loss is not finite",
            {"t": t.tolist(), "z_t_norm": z_t.norm().item()},
        )
    return loss


def ldm_train_step(
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    z0: torch.Tensor,
    cond: ConditionBundle,
    schedule,
    generator: Optional[torch.Generator] = None,
    cfg_dropout: float = 0.1,
) -> float:
    """One optimizer step on the LDM objective; returns the scalar loss."""
    model.train()
    optimizer.zero_grad()
    loss = ldm_loss(partial(predict_noise, model), z0, cond, schedule, generator, cfg_dropout=cfg_dropout)
    loss.backward()
    optimizer.step()
    return loss.item()


def train_ldm(
    model: Denoiser,
    latents: torch.Tensor,
    tokens: torch.Tensor,
    embeddings: Optional[torch.Tensor],
    schedule,
    steps: int,
    lr: float = 1e-4,
    betas=(0.9, 0.999),
    weight_decay: float = 0.01,
    batch_size: int = 1,
    cfg_dropout: float = 0.1,
    generator: Optional[torch.Generator] = None,
    params: Optional[Iterable[nn.Parameter]] = None,
    log_every: int = 500,
    stage: str = "ldm",
) -> pd.DataFrame:
    """
    Train the denoiser with AdamW on random mini-batches of (latent, token, embedding).

    Args:
        params: Parameters to optimise; defaults to every parameter requiring grad.

    Returns:
        pd.DataFrame: Columns ``step`` and ``loss``.
    """
    params = list(params) if params is not None else [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, betas=tuple(betas), weight_decay=weight_decay)
    device = model.conv_in.weight.device
    n = latents.shape[0]
    history = []
    for step in tqdm(range(steps), desc=stage, disable=None):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        emb = embeddings[idx].to(device) if embeddings is not None else None
        cond = ConditionBundle(tokens[idx], emb)
        loss = ldm_train_step(model, optimizer, latents[idx].to(device), cond, schedule, generator, cfg_dropout)
        history.append({"step": step, "loss": loss})
        if log_every and step % log_every == 0:
            logger.info("stage=%s step=%d loss=%.5f", stage, step, loss)
    model.eval()
    return pd.DataFrame(history, columns=["step", "loss"])


def fine_tune_lora(
    model: Denoiser,
    rank: int,
    latents: torch.Tensor,
    tokens: torch.Tensor,
    embeddings: Optional[torch.Tensor],
    schedule,
    steps: int,
    scale: float = 1.0,
    generator: Optional[torch.Generator] = None,
    **train_kwargs,
) -> pd.DataFrame:
    """Install rank-``rank`` adapters and train only them plus the domain-token table."""
    apply_lora(model, rank, scale, generator)
    model.token_embedding.weight.requires_grad_(True)
    params = lora_parameters(model) + [model.token_embedding.weight]
    return train_ldm(
        model, latents, tokens, embeddings, schedule, steps,
        generator=generator, params=params, stage=f"lora-r{rank}", **train_kwargs,
    )


# ---------------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------------


def save_ldm_checkpoint(path: Union[str, Path], vae: VAE, model: Denoiser, schedule, metadata: dict) -> Path:
    """Write VAE, denoiser (adapters included) and schedule constants into one archive."""
    meta = dict(metadata)
    meta.update(
        {
            "vae": vae.config,
            "denoiser": model.config,
            "lora_rank": int(model.lora_rank),
            "lora_scale": float(model.lora_scale),
            "latent_scale": float(vae.latent_scale.item()),
            "f": vae.downsample,
            "c": vae.latent_channels,
            "T_train": schedule.T_train,
            "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1]),
        }
    )
    state = {"vae": vae.state_dict(), "denoiser": model.state_dict(), "betas": schedule.betas.clone()}
    return save_checkpoint(path, state, meta)


def load_ldm_checkpoint(path: Union[str, Path], device="cpu"):
    """
    Rebuild VAE and denoiser from an archive written by ``save_ldm_checkpoint``.

    Returns:
        tuple: ``(vae, denoiser, metadata)``, both modules in eval mode on ``device``.
    """
    state, meta = load_checkpoint(path, map_location=device)
    vae = VAE(**meta["vae"])
    vae.load_state_dict(state["vae"])
    dcfg = dict(meta["denoiser"])
    model = Denoiser(**dcfg)
    if meta.get("lora_rank", 0):
        apply_lora(model, meta["lora_rank"], meta.get("lora_scale", 1.0))
    model.load_state_dict(state["denoiser"])
    return vae.to(device).eval(), model.to(device).eval(), meta
