import numpy as np
import pytest
import torch

from helpers import finite_difference_check, fraction_within
from modiff.errors import ConfigError, ShapeMismatchError, StageError
from modiff.i2v import (
    ConcatFieldFusion,
    FieldAugmentedLayer,
    FieldProjection,
    I2vConfig,
    interleave,
    load_i2v,
    make_i2v,
    synthesize_video,
    train_i2v,
    warp,
)
from modiff.phantom import PhantomConfig, generate_sequence
from modiff.tddm import TddmConfig, train_tddm
from modiff.trainer import TrainerConfig
from modiff.vae import VaeConfig, train_vae


def test_warp_identity_with_zero_projection():
    torch.manual_seed(0)
    proj = FieldProjection(out_channels=4, total_stride=4)
    z1 = torch.randn(2, 4, 2, 2, 2)
    field = torch.randn(2, 1, 8, 8, 8)
    with torch.no_grad():
        assert torch.equal(warp(z1, field, proj), z1)


def test_warp_linearity_in_field():
    # The projection is linear (strided convs, no bias, no norm), so the
    # warp increment scales with the field.
    torch.manual_seed(1)
    proj = FieldProjection(out_channels=4, total_stride=4)
    for conv in proj.convs:
        torch.nn.init.normal_(conv.weight, std=0.2)
    z1 = torch.randn(1, 4, 2, 2, 2)
    field = torch.randn(1, 1, 8, 8, 8)
    with torch.no_grad():
        base = warp(z1, field, proj) - z1
        scaled = warp(z1, 2.5 * field, proj) - z1
    assert float((scaled - 2.5 * base).abs().max()) < 1e-6


def test_warp_shape_contract():
    torch.manual_seed(2)
    proj = FieldProjection(out_channels=8, total_stride=4)
    z1 = torch.randn(1, 8, 8, 8, 8)
    field = torch.randn(1, 1, 32, 32, 32)
    with torch.no_grad():
        assert warp(z1, field, proj).shape == z1.shape


def test_warp_unbridgeable_stride():
    torch.manual_seed(3)
    proj = FieldProjection(out_channels=4, total_stride=2)
    z1 = torch.randn(1, 4, 2, 2, 2)
    field = torch.randn(1, 1, 16, 16, 16)  # /2 gives 8, not 2
    with pytest.raises(ShapeMismatchError):
        warp(z1, field, proj)


def test_interleave_order_and_length():
    z = torch.tensor([0.0, 1.0, 2.0]).reshape(1, 1, 3, 1, 1, 1)
    warped = torch.tensor([10.0, 11.0]).reshape(1, 1, 2, 1, 1, 1)
    out = interleave(z, warped)
    assert out.shape[2] == 5  # 2N - 1
    assert out.flatten().tolist() == [0.0, 1.0, 10.0, 2.0, 11.0]


def test_interleave_n2():
    z = torch.tensor([5.0, 6.0]).reshape(1, 1, 2, 1, 1, 1)
    warped = torch.tensor([20.0]).reshape(1, 1, 1, 1, 1, 1)
    out = interleave(z, warped)
    assert out.shape[2] == 3
    assert out.flatten().tolist() == [5.0, 6.0, 20.0]


def test_fal_needs_two_frames():
    torch.manual_seed(4)
    fal = FieldAugmentedLayer(channels=4, total_stride=4)
    h = torch.randn(1, 4, 1, 2, 2, 2)
    fields = torch.randn(1, 1, 1, 8, 8, 8)
    with pytest.raises(ConfigError):
        fal(h, fields)


def test_fal_field_sensitivity_with_nonzero_params():
    torch.manual_seed(5)
    fal = FieldAugmentedLayer(channels=4, total_stride=4)
    for conv in fal.projection.convs:
        torch.nn.init.normal_(conv.weight, std=0.3)
    torch.nn.init.normal_(fal.attention.proj.weight, std=0.3)
    h = torch.randn(1, 4, 3, 2, 2, 2)
    fields = torch.randn(1, 1, 3, 8, 8, 8)
    with torch.no_grad():
        a = fal(h, fields)
        b = fal(h, torch.zeros_like(fields))
    assert float((a - b).abs().max()) > 0.0


def test_denoiser_shape_contract():
    torch.manual_seed(6)
    cfg = I2vConfig(c_lat=4, base_width=8, channel_mults=(1, 2), emb_dim=32, t_steps=8)
    model = make_i2v(cfg, seed=0)
    for n in (6, 10, 16):
        latents = torch.randn(1, 4, n, 8, 8, 8)
        z1 = torch.randn(1, 4, 8, 8, 8)
        fields = torch.randn(1, 1, n, 32, 32, 32) * 0.1
        with torch.no_grad():
            assert model(latents, 4, z1, fields, n).shape == latents.shape


def test_denoiser_inconsistent_n_rejected():
    torch.manual_seed(7)
    cfg = I2vConfig(c_lat=2, base_width=8, channel_mults=(1,), emb_dim=32, t_steps=8)
    model = make_i2v(cfg, seed=0)
    latents = torch.randn(1, 2, 4, 8, 8, 8)
    z1 = torch.randn(1, 2, 8, 8, 8)
    fields = torch.randn(1, 1, 5, 32, 32, 32)
    with pytest.raises(ConfigError):
        model(latents, 4, z1, fields, 4)  # fields N=5 vs latents N=4
    with pytest.raises(ConfigError):
        model(latents, 4, z1, fields[:, :, :4], 5)  # declared N mismatch


def test_denoiser_gradcheck_two_frame_toy():
    torch.manual_seed(8)
    cfg = I2vConfig(c_lat=2, base_width=6, channel_mults=(1,), emb_dim=16, t_steps=4)
    model = make_i2v(cfg, seed=2).double()
    for fusion in model.fusions:
        for conv in fusion.projection.convs:
            torch.nn.init.normal_(conv.weight, std=0.3)
        torch.nn.init.normal_(fusion.attention.proj.weight, std=0.3)
    latents = torch.randn(1, 2, 2, 1, 1, 1, dtype=torch.float64)
    z1 = torch.randn(1, 2, 1, 1, 1, dtype=torch.float64)
    fields = torch.randn(1, 1, 2, 4, 4, 4, dtype=torch.float64) * 0.3
    target = torch.randn_like(latents)

    def loss_fn():
        return (model(latents, 3, z1, fields, 2) - target).pow(2).mean()

    errors = finite_difference_check(model, loss_fn, n_probe=60, h=1e-5, seed=1)
    assert fraction_within(errors, 1e-3) >= 0.95


def test_concat_fusion_arm_runs():
    torch.manual_seed(9)
    cfg = I2vConfig(
        c_lat=2, base_width=8, channel_mults=(1,), emb_dim=32, t_steps=8, use_fal=False
    )
    model = make_i2v(cfg, seed=0)
    assert isinstance(model.fusions[0], ConcatFieldFusion)
    latents = torch.randn(1, 2, 4, 8, 8, 8)
    z1 = torch.randn(1, 2, 8, 8, 8)
    fields = torch.randn(1, 1, 4, 32, 32, 32) * 0.1
    with torch.no_grad():
        assert model(latents, 4, z1, fields, 4).shape == latents.shape


@pytest.fixture(scope="module")
def trained_pipeline(tmp_path_factory):
    videos = [
        generate_sequence(
            PhantomConfig(seed=s, grid_size=(16, 16, 16), frame_number=3, amplitude=0.12)
        )
        for s in (21, 22)
    ]
    vae, _, scale, _ = train_vae(
        videos,
        VaeConfig(c_lat=4, base_width=8),
        TrainerConfig(
            learning_rate=2e-3, weight_decay=0.0, warmup_steps=20, epochs=150,
            batch_size=2, seed=0,
        ),
    )
    tddm_cfg = TddmConfig(
        base_width=12, channel_mults=(1,), emb_dim=48, t_steps=16,
        beta_start=0.02, beta_end=0.25, working_scale=4,
    )
    tddm_model, _, _ = train_tddm(
        videos,
        tddm_cfg,
        TrainerConfig(
            learning_rate=4e-3, weight_decay=0.0, warmup_steps=30, epochs=300,
            batch_size=2, seed=0,
        ),
    )
    i2v_cfg = I2vConfig(
        c_lat=4, base_width=16, channel_mults=(1,), emb_dim=64, t_steps=12,
        beta_start=0.05, beta_end=0.3,
    )
    out_dir = tmp_path_factory.mktemp("i2v_overfit")
    i2v_model, report, ckpt = train_i2v(
        videos,
        vae,
        scale,
        i2v_cfg,
        TrainerConfig(
            learning_rate=3e-3, weight_decay=0.0, warmup_steps=30, epochs=900,
            batch_size=2, seed=0,
        ),
        out_dir=out_dir,
    )
    return videos, vae, scale, tddm_model, i2v_model, report, ckpt


def test_overfit_two_sequences(trained_pipeline):
    _, _, _, _, _, report, _ = trained_pipeline
    assert report.best_val < 0.02


def test_epoch_one_deterministic(trained_pipeline):
    videos, vae, scale, _, _, _, _ = trained_pipeline
    cfg = I2vConfig(c_lat=4, base_width=8, channel_mults=(1,), emb_dim=32, t_steps=8)
    tcfg = TrainerConfig(learning_rate=1e-3, warmup_steps=2, epochs=2, batch_size=2, seed=3)
    _, r1, _ = train_i2v(videos, vae, scale, cfg, tcfg)
    _, r2, _ = train_i2v(videos, vae, scale, cfg, tcfg)
    assert r1.losses == r2.losses


def test_checkpoint_roundtrip(trained_pipeline):
    _, _, _, _, model, _, ckpt = trained_pipeline
    loaded = load_i2v(ckpt)
    latents = torch.randn(1, 4, 3, 4, 4, 4)
    z1 = torch.randn(1, 4, 4, 4, 4)
    fields = torch.randn(1, 1, 3, 16, 16, 16) * 0.1
    with torch.no_grad():
        assert torch.equal(
            model(latents, 2, z1, fields, 3), loaded(latents, 2, z1, fields, 3)
        )


def test_synthesize_contract(trained_pipeline):
    videos, vae, scale, tddm_model, i2v_model, _, _ = trained_pipeline
    prompt = videos[0].frames[0]
    video, field_stack = synthesize_video(prompt, 3, vae, scale, tddm_model, i2v_model, seed=4)
    assert video.frame_number == 3
    assert np.array_equal(video.frames[0], prompt)
    assert video.frames.min() >= 0.0
    assert video.frames.max() <= 1.0
    assert field_stack.frame_number == 3

    again, _ = synthesize_video(prompt, 3, vae, scale, tddm_model, i2v_model, seed=4)
    assert np.array_equal(video.frames, again.frames)
    other, _ = synthesize_video(prompt, 3, vae, scale, tddm_model, i2v_model, seed=5)
    assert not np.array_equal(video.frames, other.frames)


def test_synthesize_stage_attribution(trained_pipeline):
    videos, vae, scale, tddm_model, i2v_model, _, _ = trained_pipeline
    prompt = videos[0].frames[0]
    with pytest.raises(StageError) as excinfo:
        synthesize_video(prompt, 3, vae, scale, object(), i2v_model, seed=0)
    assert excinfo.value.stage == "sample-fields"


def test_synthesize_rejects_bad_n(trained_pipeline):
    videos, vae, scale, tddm_model, i2v_model, _, _ = trained_pipeline
    with pytest.raises(ConfigError):
        synthesize_video(videos[0].frames[0], 1, vae, scale, tddm_model, i2v_model, seed=0)
