"""
embed_translate.py

Feature extractors and the FS -> FFPE embedding translator.

Main features:
- A name -> factory registry of feature extractors; ``toy`` is a small conv classifier
  pretrained on FFPE patches whose penultimate layer is the embedding, ``random`` is
  the same network left at a seeded random initialisation.
- UNetFC: a U-style fully connected generator (d_e -> 64 -> 32 -> 64 -> d_e) with
  additive skips between mirrored layers and an input residual.
- TranslatorPair: generators G (FS -> FFPE), F (FFPE -> FS) and one WGAN critic per domain.
- gradient_penalty / translator_train_step / train_translator: WGAN-GP trained in
  cycle fashion.
- translate_embedding blends ``e_fs`` with ``G(e_fs)`` by ``alpha``.
"""

import hashlib
import logging
from typing import Callable, Dict, Optional, Sequence

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from app.checkpoint import load_checkpoint, save_checkpoint
from app.errors import RejectedInputError, TrainingFault
from app.ldm_core import CLASS_LABELS, ImagePatch, make_generator, reset_parameters_

logger = logging.getLogger(__name__)

EXTRACTORS: Dict[str, Callable[..., "FeatureExtractor"]] = {}


def register_extractor(name: str):
    """Decorator registering an extractor factory ``factory(dim, seed) -> FeatureExtractor``."""

    def wrap(factory):
        EXTRACTORS[name] = factory
        return factory

    return wrap


def build_extractor(name: str, dim: int = 128, seed: int = 0) -> "FeatureExtractor":
    if name not in EXTRACTORS:
        raise RejectedInputError(f"Unknown extractor {name!r}; registered: {sorted(EXTRACTORS)}")
    return EXTRACTORS[name](dim=dim, seed=seed)


class FeatureExtractor(nn.Module):
    """Small conv network; ``embed`` returns the penultimate features, ``forward`` the class logits."""

    def __init__(self, name: str, dim: int = 128, n_classes: int = len(CLASS_LABELS), trainable: bool = True):
        super().__init__()
        self.name = name
        self.dim = dim
        self.trainable = trainable
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(64, dim), nn.ReLU(),
        )
        self.head = nn.Linear(dim, n_classes)

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.features(pixels)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(pixels))


def _seeded(name: str, dim: int, seed: int, trainable: bool) -> FeatureExtractor:
    V = FeatureExtractor(name, dim, trainable=trainable)
    return reset_parameters_(V, make_generator(seed)).eval()


@register_extractor("toy")
def _toy(dim: int = 128, seed: int = 0) -> FeatureExtractor:
    return _seeded("toy", dim, seed, trainable=True)


@register_extractor("random")
def _random(dim: int = 128, seed: int = 0) -> FeatureExtractor:
    return _seeded("random", dim, seed + 7919, trainable=False)


@torch.no_grad()
def extract(x, V: FeatureExtractor) -> torch.Tensor:
    """
    Embed an ImagePatch (-> ``d_e`` vector) or a channel-first pixel batch (-> ``n×d_e``).

    Never changes the module mode; build_extractor, load_extractor and
    pretrain_extractor all return ``V`` in eval mode.
    """
    pixels = x.tensor if isinstance(x, ImagePatch) else x
    batched = pixels.dim() == 4
    if not batched:
        pixels = pixels.unsqueeze(0)
    device = next(V.parameters()).device
    out = torch.cat([V.embed(b.to(device)).cpu() for b in pixels.split(256)])
    return out if batched else out[0]


def pretrain_extractor(
    V: FeatureExtractor,
    images: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    generator: Optional[torch.Generator] = None,
    log_every: int = 500,
) -> pd.DataFrame:
    """Train ``V`` as a 3-class classifier; returns the loss/accuracy history."""
    device = next(V.parameters()).device
    opt = torch.optim.Adam(V.parameters(), lr=lr)
    history = []
    n = images.shape[0]
    V.train()
    for step in tqdm(range(steps), desc=f"extractor-{V.name}", disable=None):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        logits = V(images[idx].to(device))
        target = labels[idx].to(device)
        loss = F.cross_entropy(logits, target)
        if not torch.isfinite(loss):
            raise TrainingFault("extractor loss is not finite", {"step": step})
        opt.zero_grad()
        loss.backward()
        opt.step()
        acc = (logits.argmax(1) == target).float().mean().item()
        history.append({"step": step, "loss": loss.item(), "accuracy": acc})
        if log_every and step % log_every == 0:
            logger.info("stage=extractor step=%d loss=%.4f acc=%.3f", step, loss.item(), acc)
    V.eval()
    return pd.DataFrame(history)


def save_extractor(path, V: FeatureExtractor, metadata: dict):
    meta = {**metadata, "name": V.name, "dim": V.dim, "trainable": V.trainable}
    return save_checkpoint(path, {"extractor": V.state_dict()}, meta)


def load_extractor(path, device="cpu") -> FeatureExtractor:
    state, meta = load_checkpoint(path, map_location=device)
    V = FeatureExtractor(meta["name"], meta["dim"], trainable=meta.get("trainable", True))
    V.load_state_dict(state["extractor"])
    return V.to(device).eval()


# ---------------------------------------------------------------------------------
# Translator
# ---------------------------------------------------------------------------------


class UNetFC(nn.Module):
    """U-style fully connected generator; with ``identity_init`` it starts as the identity map."""

    def __init__(
        self, dim: int = 128, hidden: Sequence[int] = (64, 32), identity_init: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        h1, h2 = hidden
        self.dim = dim
        self.enc1 = nn.Linear(dim, h1)
        self.enc2 = nn.Linear(h1, h2)
        self.dec1 = nn.Linear(h2, h1)
        self.out = nn.Linear(h1, dim)
        self.act = nn.LeakyReLU(0.2)
        if generator is not None:
            reset_parameters_(self, generator)
        if identity_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        a1 = self.act(self.enc1(e))
        a2 = self.act(self.enc2(a1))
        b1 = self.act(self.dec1(a2)) + a1
        return self.out(b1) + e


class Critic(nn.Module):
    """3-layer MLP critic, no normalisation layers."""

    def __init__(self, dim: int = 128, hidden: int = 128, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )
        if generator is not None:
            reset_parameters_(self, generator)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.net(e)


class TranslatorPair(nn.Module):
    """G, F and both critics; with ``generator`` every weight is drawn from it in that order."""

    def __init__(self, dim: int = 128, identity_init: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.dim = dim
        self.G = UNetFC(dim, identity_init=identity_init, generator=generator)
        self.F = UNetFC(dim, identity_init=identity_init, generator=generator)
        self.D_ffpe = Critic(dim, generator=generator)
        self.D_fs = Critic(dim, generator=generator)

    def architecture_hash(self) -> str:
        return hashlib.sha1(repr(self).encode()).hexdigest()[:12]


def translate_embedding(e_fs: torch.Tensor, G: Optional[nn.Module], alpha: float) -> torch.Tensor:
    """
    Move ``e_fs`` toward ``G(e_fs)``: ``e_fs + alpha * (G(e_fs) - e_fs)``; alpha = 0 returns ``e_fs`` itself.

    Raises:
        RejectedInputError: If alpha is outside [0, 1] or the dimension does not match G.
    """
    if not 0.0 <= alpha <= 1.0:
        raise RejectedInputError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0 or G is None:
        return e_fs
    dim = getattr(G, "dim", e_fs.shape[-1])
    if e_fs.shape[-1] != dim:
        raise RejectedInputError(f"Embedding dimension {e_fs.shape[-1]} does not match translator dimension {dim}")
    with torch.no_grad():
        translated = G(e_fs)
    if alpha == 1.0:
        return translated
    return e_fs + alpha * (translated - e_fs)


def gradient_penalty(
    critic: Callable, real: torch.Tensor, fake: torch.Tensor, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """
    WGAN-GP penalty ``mean((||grad critic(x_hat)||_2 - 1)^2)`` on random interpolates.

    Raises:
        RejectedInputError: If the batches differ in shape.
        TrainingFault: If the gradient is not finite.
    """
    if real.shape != fake.shape:
        raise RejectedInputError(f"Batches differ in shape: {tuple(real.shape)} vs {tuple(fake.shape)}")
    u = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator).to(real.device)
    x_hat = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    if out.requires_grad:
        (grads,) = torch.autograd.grad(
            outputs=out, inputs=x_hat, grad_outputs=torch.ones_like(out), create_graph=True, allow_unused=True
        )
    else:
        grads = None
    if grads is None:
        grads = torch.zeros_like(x_hat)
    if not torch.isfinite(grads).all():
        raise TrainingFault("critic gradient is not finite", {"batch": real.shape[0]})
    norm = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return torch.mean((norm - 1.0) ** 2)


def make_translator_optimizers(pair: TranslatorPair, lr: float = 1e-4, betas=(0.0, 0.9)):
    opt_g = torch.optim.Adam(list(pair.G.parameters()) + list(pair.F.parameters()), lr=lr, betas=tuple(betas))
    opt_d = torch.optim.Adam(list(pair.D_ffpe.parameters()) + list(pair.D_fs.parameters()), lr=lr, betas=tuple(betas))
    return opt_g, opt_d


def critic_losses(pair: TranslatorPair, batch_fs, batch_ffpe, lambda_gp: float, generator=None) -> dict:
    fake_ffpe = pair.G(batch_fs).detach()
    fake_fs = pair.F(batch_ffpe).detach()
    gp_ffpe = gradient_penalty(pair.D_ffpe, batch_ffpe, fake_ffpe, generator)
    gp_fs = gradient_penalty(pair.D_fs, batch_fs, fake_fs, generator)
    w_ffpe = pair.D_ffpe(fake_ffpe).mean() - pair.D_ffpe(batch_ffpe).mean()
    w_fs = pair.D_fs(fake_fs).mean() - pair.D_fs(batch_fs).mean()
    return {
        "critic_ffpe": w_ffpe + lambda_gp * gp_ffpe,
        "critic_fs": w_fs + lambda_gp * gp_fs,
        "gp_ffpe": gp_ffpe,
        "gp_fs": gp_fs,
    }


def generator_losses(pair: TranslatorPair, batch_fs, batch_ffpe, lambda_cyc: float) -> dict:
    fake_ffpe = pair.G(batch_fs)
    fake_fs = pair.F(batch_ffpe)
    adv_g = -pair.D_ffpe(fake_ffpe).mean()
    adv_f = -pair.D_fs(fake_fs).mean()
    cycle = F.l1_loss(pair.F(fake_ffpe), batch_fs) + F.l1_loss(pair.G(fake_fs), batch_ffpe)
    return {"adv_g": adv_g, "adv_f": adv_f, "cycle": cycle, "generator": adv_g + adv_f + lambda_cyc * cycle}


def translator_train_step(
    pair: TranslatorPair,
    optimizers,
    batch_fs: torch.Tensor,
    batch_ffpe: torch.Tensor,
    lambda_gp: float = 10.0,
    lambda_cyc: float = 10.0,
    n_critic: int = 5,
    generator: Optional[torch.Generator] = None,
) -> dict:
    """
    ``n_critic`` critic updates followed by one joint update of G and F.

    Returns:
        dict: Float loss components of the last critic update and the generator update.

    Raises:
        TrainingFault: If any component is not finite (the record is attached).
    """
    opt_g, opt_d = optimizers
    pair.train()
    record = {}
    for _ in range(n_critic):
        losses = critic_losses(pair, batch_fs, batch_ffpe, lambda_gp, generator)
        opt_d.zero_grad()
        (losses["critic_ffpe"] + losses["critic_fs"]).backward()
        opt_d.step()
        record.update({k: v.item() for k, v in losses.items()})

    for p in list(pair.D_ffpe.parameters()) + list(pair.D_fs.parameters()):
        p.requires_grad_(False)
    try:
        losses = generator_losses(pair, batch_fs, batch_ffpe, lambda_cyc)
        opt_g.zero_grad()
        losses["generator"].backward()
        opt_g.step()
    finally:
        for p in list(pair.D_ffpe.parameters()) + list(pair.D_fs.parameters()):
            p.requires_grad_(True)
    record.update({k: v.item() for k, v in losses.items()})

    if not all(torch.isfinite(torch.tensor(v)) for v in record.values()):
        raise TrainingFault("translator loss is not finite", record)
    return record


def cycle_error(pair: TranslatorPair, embeddings: torch.Tensor) -> float:
    """Mean L1 error of F(G(e)) against e."""
    with torch.no_grad():
        return F.l1_loss(pair.F(pair.G(embeddings)), embeddings).item()


def train_translator(
    pair: TranslatorPair,
    emb_fs: torch.Tensor,
    emb_ffpe: torch.Tensor,
    steps: int,
    lambda_gp: float = 10.0,
    lambda_cyc: float = 10.0,
    n_critic: int = 5,
    lr: float = 1e-4,
    betas=(0.0, 0.9),
    batch_size: int = 64,
    generator: Optional[torch.Generator] = None,
    log_every: int = 500,
) -> pd.DataFrame:
    """Train on unpaired FS and FFPE embedding pools; returns the per-step loss record."""
    optimizers = make_translator_optimizers(pair, lr, betas)
    device = next(pair.parameters()).device
    history = []
    for step in tqdm(range(steps), desc="translator", disable=None):
        i_fs = torch.randint(0, emb_fs.shape[0], (min(batch_size, emb_fs.shape[0]),), generator=generator)
        i_ffpe = torch.randint(0, emb_ffpe.shape[0], (min(batch_size, emb_ffpe.shape[0]),), generator=generator)
        b_fs, b_ffpe = emb_fs[i_fs].to(device), emb_ffpe[i_ffpe].to(device)
        n = min(len(b_fs), len(b_ffpe))
        record = translator_train_step(
            pair, optimizers, b_fs[:n], b_ffpe[:n], lambda_gp, lambda_cyc, n_critic, generator
        )
        history.append({"step": step, **record})
        if log_every and step % log_every == 0:
            logger.info(
                "stage=translator step=%d critic_ffpe=%.4f cycle=%.4f generator=%.4f",
                step, record["critic_ffpe"], record["cycle"], record["generator"],
            )
    pair.eval()
    return pd.DataFrame(history)


def save_translator(path, pair: TranslatorPair, metadata: dict):
    meta = {**metadata, "d_e": pair.dim, "architecture": pair.architecture_hash()}
    return save_checkpoint(path, {"translator": pair.state_dict()}, meta)


def load_translator(path, device="cpu") -> TranslatorPair:
    state, meta = load_checkpoint(path, map_location=device)
    pair = TranslatorPair(meta["d_e"])
    if pair.architecture_hash() != meta.get("architecture", pair.architecture_hash()):
        raise RejectedInputError(f"Translator checkpoint {path} was written by a different architecture")
    pair.load_state_dict(state["translator"])
    return pair.to(device).eval()
