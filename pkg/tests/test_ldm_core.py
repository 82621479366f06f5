import numpy as np
import pytest
import torch

from app import cli
from app.errors import ConfigError, RejectedInputError, TrainingFault
from app.ldm_core import (
    VAE, ConditionBundle, Denoiser, DomainToken, ImagePatch, LatentGrid, LoRALinear, apply_lora, decode, encode,
    ldm_loss, ldm_train_step, load_ldm_checkpoint, lora_adapters, lora_parameters, make_generator, predict_noise,
    reset_parameters_, save_ldm_checkpoint, train_ldm, train_vae,
)
from tests.conftest import EMBED_DIM, make_denoiser, make_patch, make_vae


def make_latents(n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 4, 4, 4, generator=g)


def make_embeddings(n=2, seed=0):
    g = torch.Generator().manual_seed(seed + 100)
    return torch.randn(n, EMBED_DIM, generator=g)


def test_image_patch_rejects_bad_shape_and_range():
    with pytest.raises(RejectedInputError):
        ImagePatch(np.zeros((8, 8)), "FS", "A", "c", "p")
    with pytest.raises(RejectedInputError):
        ImagePatch(np.full((8, 8, 3), 1.5), "FS", "A", "c", "p")


def test_domain_token_for_domain():
    assert DomainToken.for_domain("FS") == DomainToken.FS
    assert DomainToken.for_domain("FFPE") == DomainToken.FFPE
    assert int(DomainToken.NULL) == 2


def test_encode_decode_shapes(tiny_vae):
    patch = make_patch(size=16)
    z = encode(patch, tiny_vae)
    assert isinstance(z, LatentGrid)
    assert z.timestep == 0
    assert tuple(z.values.shape) == (4, 4, 4)
    x = decode(z, tiny_vae)
    assert tuple(x.shape) == (3, 16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_encode_rejects_size_not_divisible(tiny_vae):
    with pytest.raises(RejectedInputError):
        encode(torch.zeros(1, 3, 18, 16), tiny_vae)


def test_decode_rejects_channel_mismatch(tiny_vae):
    with pytest.raises(RejectedInputError):
        decode(torch.zeros(1, 3, 4, 4), tiny_vae)


def test_latent_scale_is_applied(tiny_vae):
    x = make_patch(size=16).tensor.unsqueeze(0)
    z1 = encode(x, tiny_vae).values
    tiny_vae.latent_scale.fill_(2.0)
    z2 = encode(x, tiny_vae).values
    assert torch.allclose(z2, 2.0 * z1)


def test_train_vae_reports_stats():
    vae = make_vae()
    images = torch.rand(8, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    stats = train_vae(vae, images, images[:4], steps=3, batch_size=4, generator=make_generator(0), log_every=0)
    assert stats["latent_scale"] > 0
    assert np.isfinite(stats["val_mse"])
    assert len(stats["history"]) == 3


@pytest.mark.parametrize("rank", [1, 4, 8])
def test_fresh_lora_leaves_outputs_bitwise_unchanged(rank):
    model = make_denoiser()
    z, e = make_latents(), make_embeddings()
    cond = ConditionBundle(torch.tensor([0, 1]), e)
    before = predict_noise(model, z, 37, cond)
    apply_lora(model, rank, generator=make_generator(3))
    after = predict_noise(model, z, 37, cond)
    assert torch.equal(before, after)
    assert model.lora_rank == rank


def test_apply_lora_freezes_base_and_trains_adapters():
    model = apply_lora(make_denoiser(), 2)
    trainable = [p for p in model.parameters() if p.requires_grad]
    assert trainable
    assert {id(p) for p in trainable} == {id(p) for p in lora_parameters(model)}
    assert all(isinstance(m, LoRALinear) for m in lora_adapters(model).values())


def test_apply_lora_rejects_rank_too_large():
    with pytest.raises(ConfigError):
        apply_lora(make_denoiser(), 1000)


def test_lora_delta_weight_starts_at_zero():
    layer = LoRALinear(torch.nn.Linear(6, 5), rank=3)
    assert torch.count_nonzero(layer.delta_weight()) == 0


def test_absent_embedding_is_zero_vector(tiny_denoiser):
    z = make_latents(1)
    a = predict_noise(tiny_denoiser, z, 10, ConditionBundle(DomainToken.FFPE, None))
    b = predict_noise(tiny_denoiser, z, 10, ConditionBundle(DomainToken.FFPE, torch.zeros(EMBED_DIM)))
    assert torch.equal(a, b)


def test_predict_noise_rejects_bad_inputs(tiny_denoiser):
    z = make_latents(1)
    with pytest.raises(RejectedInputError):
        predict_noise(tiny_denoiser, z, 10, ConditionBundle(DomainToken.FS, torch.zeros(EMBED_DIM + 1)))
    with pytest.raises(RejectedInputError):
        predict_noise(tiny_denoiser, z, 101, ConditionBundle(DomainToken.FS, None))
    with pytest.raises(RejectedInputError):
        predict_noise(tiny_denoiser, torch.zeros(1, 4, 3, 3), 10, ConditionBundle(DomainToken.FS, None))


def test_predict_noise_unbatched_matches_batched(tiny_denoiser):
    z = make_latents(1)
    cond = ConditionBundle(DomainToken.FS, make_embeddings(1)[0])
    assert torch.allclose(predict_noise(tiny_denoiser, z[0], 5, cond), predict_noise(tiny_denoiser, z, 5, cond)[0])


def test_ldm_loss_zero_when_noise_predicted_exactly(schedule):
    z0 = make_latents()
    noise = torch.randn(z0.shape, generator=torch.Generator().manual_seed(9))
    loss = ldm_loss(lambda z, t, c: noise, z0, ConditionBundle(DomainToken.FFPE), schedule, noise=noise, t=torch.tensor([5, 50]))
    assert loss.item() == 0.0


def test_ldm_loss_drops_token_but_keeps_embedding(schedule):
    seen = {}
    e = make_embeddings()

    def stub(z, t, cond):
        seen["tokens"] = cond.domain_token
        seen["embedding"] = cond.embedding
        return torch.zeros_like(z)

    ldm_loss(stub, make_latents(), ConditionBundle(DomainToken.FS, e), schedule, make_generator(0), cfg_dropout=1.0)
    assert torch.all(seen["tokens"] == int(DomainToken.NULL))
    assert seen["embedding"] is e


def test_ldm_loss_non_finite_raises_training_fault(schedule):
    with pytest.raises(TrainingFault) as info:
        ldm_loss(lambda z, t, c: torch.full_like(z, float("nan")), make_latents(), ConditionBundle(DomainToken.FS), schedule)
    assert "t" in info.value.details and "z_t_norm" in info.value.details


def test_ldm_train_step_updates_parameters(schedule):
    model = make_denoiser()
    before = model.conv_out.weight.detach().clone()
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    cond = ConditionBundle(torch.tensor([0, 1]), make_embeddings())
    loss = ldm_train_step(model, opt, make_latents(), cond, schedule, make_generator(0))
    assert np.isfinite(loss)
    assert not torch.equal(before, model.conv_out.weight)


def test_train_ldm_history(schedule):
    model = make_denoiser()
    history = train_ldm(
        model, make_latents(4), torch.tensor([0, 1, 0, 1]), make_embeddings(4), schedule, steps=3,
        batch_size=2, generator=make_generator(0), log_every=0,
    )
    assert list(history.columns) == ["step", "loss"]
    assert len(history) == 3


def test_ldm_checkpoint_round_trip(tmp_path, schedule):
    vae, model = make_vae(), apply_lora(make_denoiser(), 2)
    with torch.no_grad():
        for adapter in lora_adapters(model).values():
            adapter.up.fill_(0.01)
    path = save_ldm_checkpoint(tmp_path / "ldm.pt", vae, model, schedule, {"seed": 0})
    vae2, model2, meta = load_ldm_checkpoint(path)
    assert meta["lora_rank"] == 2
    assert meta["T_train"] == 100
    assert (tmp_path / "ldm.json").exists()
    z, cond = make_latents(1), ConditionBundle(DomainToken.FFPE, make_embeddings(1))
    assert torch.equal(predict_noise(model.eval(), z, 3, cond), predict_noise(model2, z, 3, cond))
    x = make_patch(size=16)
    assert torch.equal(encode(x, vae).values, encode(x, vae2).values)


def test_reset_parameters_covers_every_random_parameter():
    def build(global_seed):
        torch.manual_seed(global_seed)
        vae = VAE(latent_channels=4, downsample=4, channels=8)
        model = Denoiser(4, 8, (1, 2), 16, EMBED_DIM, 100)
        return reset_parameters_(vae, make_generator(4)), reset_parameters_(model, make_generator(4))

    for a, b in zip(build(1), build(2)):
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.slow
def test_trained_model_separates_fs_and_ffpe_tokens(reference_run):
    _, model, meta = load_ldm_checkpoint(reference_run.checkpoint_dir / cli.ldm_filename(reference_run))
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, meta["c"], 8, 8, generator=g)
    e = torch.randn(4, model.embed_dim, generator=g)
    fs = predict_noise(model, z, 500, ConditionBundle(DomainToken.FS, e))
    ffpe = predict_noise(model, z, 500, ConditionBundle(DomainToken.FFPE, e))
    assert (fs - ffpe).norm().item() > 0.0
