import numpy as np
import pytest
import torch

from app import cli
from app.config import GuidanceConfig, load_config
from app.embed_translate import FeatureExtractor, TranslatorPair
from app.f2f_pipeline import ModelBundle
from app.ldm_core import VAE, Denoiser, ImagePatch
from app.scheduler import make_schedule

EMBED_DIM = 8

# reduced sizes for the trained-model checks; everything else keeps its default
REFERENCE_RUN = [
    "--data.n_cases=18", "--data.patches_per_case=8", "--data.image_size=32",
    "--model.vae_channels=16", "--model.base_channels=16", "--model.channel_mults=[1, 2]",
    "--model.time_emb_dim=64", "--model.embed_dim=32", "--model.lora_rank=4",
    "--guidance.T_inference=20",
    "--optim.lr=1e-3", "--optim.batch_size=16",
    "--train.vae_steps=800", "--train.extractor_steps=400", "--train.base_steps=4000", "--train.lora_steps=800",
    "--translator.steps=600", "--eval.mil_hidden=32",
]


def make_patch(seed=0, size=16, domain="FS", class_label="A", case_id="case_000", patch_id="p000"):
    rng = np.random.default_rng(seed)
    return ImagePatch(rng.uniform(0.0, 1.0, (size, size, 3)).astype(np.float32), domain, class_label, case_id, patch_id)


def make_vae():
    torch.manual_seed(0)
    return VAE(latent_channels=4, downsample=4, channels=8).eval()


def make_denoiser(T_train=100):
    torch.manual_seed(1)
    return Denoiser(
        latent_channels=4, base_channels=8, channel_mults=(1, 2), time_emb_dim=16, embed_dim=EMBED_DIM, T_train=T_train
    ).eval()


@pytest.fixture
def schedule():
    return make_schedule(T_train=100)


@pytest.fixture
def tiny_vae():
    return make_vae()


@pytest.fixture
def tiny_denoiser():
    return make_denoiser()


@pytest.fixture
def tiny_bundle(schedule):
    torch.manual_seed(2)
    extractor = FeatureExtractor("toy", dim=EMBED_DIM).eval()
    translator = TranslatorPair(EMBED_DIM, identity_init=False).eval()
    return ModelBundle(make_vae(), make_denoiser(), schedule, extractor, translator)


@pytest.fixture
def guidance():
    return GuidanceConfig(GS=4.0, S=0.5, T_inference=10, prox_enabled=False)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Config of one trained run (synth, extractor, LDM, translator, translate, eval), built once per session."""
    root = tmp_path_factory.mktemp("reference")
    cfg = load_config(overrides=[("paths.output_root", str(root))] + cli.parse_overrides(REFERENCE_RUN))
    cli.seed_everything(cfg.seed)
    cli.cmd_all(cfg)
    return cfg
