"""Stage 2: field-guided image-to-video diffusion in the VAE latent space.

The denoiser runs on per-frame latents with factorized spatial/temporal
blocks; at every encoder resolution the field-augmented attention layer
interleaves warped first-frame features (first-frame latent plus a learned
projection of the cumulative fields) with the frame features and attends
over the doubled sequence.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import trainer as trainer_mod
from .diffusion import forward_perturb, make_linear_schedule, sample_loop
from .errors import ConfigError, ShapeMismatchError, StageError
from .fields import compute_fields
from .layers import (
    ConditionEmbedding,
    TemporalCrossAttention,
    VideoUNet,
    fold_frames,
    unfold_frames,
)
from .phantom import Video4D
from .tddm import sample_fields
from .trainer import load_checkpoint, save_checkpoint
from .vae import encode_video


@dataclass(frozen=True)
class I2vConfig:
    c_lat: int = 4
    base_width: int = 16
    channel_mults: tuple = (1, 2)
    emb_dim: int = 64
    blocks: int = 1
    heads: int = 1
    use_fal: bool = True
    use_frame_number: bool = True
    image_downsample: int = 4
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


class FieldProjection(nn.Module):
    """Learned strided-conv projection of an image-resolution field volume to
    a feature resolution and channel count. Purely linear (no bias, no norm,
    no activation) with a zero-initialized final conv, so warping starts as
    the identity on the first-frame features."""

    def __init__(self, out_channels, total_stride):
        super().__init__()
        if total_stride < 1 or (total_stride & (total_stride - 1)) != 0:
            raise ConfigError(f"total_stride must be a power of 2, got {total_stride}")
        convs = []
        prev = 1
        stride = total_stride
        while stride > 1:
            convs.append(nn.Conv3d(prev, out_channels, 3, stride=2, padding=1, bias=False))
            prev = out_channels
            stride //= 2
        convs.append(nn.Conv3d(prev, out_channels, 3, padding=1, bias=False))
        nn.init.zeros_(convs[-1].weight)
        self.convs = nn.ModuleList(convs)

    def forward(self, field):
        h = field
        for conv in self.convs:
            h = conv(h)
        return h


def warp(z1, cum_field, projection):
    """z'_i = z_1 + Proj(cumulative field i); shapes follow z_1."""
    projected = projection(cum_field)
    if projected.shape[-3:] != z1.shape[-3:]:
        raise ShapeMismatchError(
            f"projected field shape {tuple(projected.shape[-3:])} != "
            f"latent frame shape {tuple(z1.shape[-3:])}; stride not bridgeable",
            module="i2v",
        )
    return z1 + projected


def interleave(z, warped):
    """Build the augmented sequence [z_1, z_2, z'_2, ..., z_N, z'_N].

    z: (B, C, N, ...); warped: (B, C, N-1, ...); result length 2N - 1.
    """
    n = z.shape[2]
    if warped.shape[2] != n - 1:
        raise ShapeMismatchError(
            f"warped stream has {warped.shape[2]} frames, expected {n - 1}",
            module="i2v",
        )
    parts = [z[:, :, 0:1]]
    for i in range(1, n):
        parts.append(z[:, :, i : i + 1])
        parts.append(warped[:, :, i - 1 : i])
    return torch.cat(parts, dim=2)


class FieldAugmentedLayer(nn.Module):
    """Warp, interleave, and attend: queries come from the N frame features,
    keys/values from the 2N-1 interleaved sequence, with a residual back onto
    the frame stream."""

    def __init__(self, channels, total_stride, heads=1):
        super().__init__()
        self.projection = FieldProjection(channels, total_stride)
        self.attention = TemporalCrossAttention(channels, heads)

    def forward(self, h, cum_fields):
        n = h.shape[2]
        if n < 2:
            raise ConfigError(f"field attention needs N >= 2, got {n}")
        if cum_fields.shape[2] != n:
            raise ShapeMismatchError(
                f"cumulative fields have {cum_fields.shape[2]} frames, features have {n}",
                module="i2v",
            )
        z1 = h[:, :, 0:1]
        future = cum_fields[:, :, 1:]  # (B, 1, N-1, L, H, W)
        batch = future.shape[0]
        projected = unfold_frames(self.projection(fold_frames(future)), batch)
        warped = z1 + projected
        augmented = interleave(h, warped)
        return self.attention(h, augmented)


class ConcatFieldFusion(nn.Module):
    """Ablation arm replacing field attention: project the cumulative fields,
    concatenate them channel-wise with the frame features, then run plain
    temporal self-attention on the merged stream."""

    def __init__(self, channels, total_stride, heads=1):
        super().__init__()
        self.projection = FieldProjection(channels, total_stride)
        self.merge = nn.Conv3d(2 * channels, channels, 1)
        self.attention = TemporalCrossAttention(channels, heads)

    def forward(self, h, cum_fields):
        batch = h.shape[0]
        projected = unfold_frames(self.projection(fold_frames(cum_fields)), batch)
        merged = torch.cat([h, projected], dim=1)
        merged = unfold_frames(self.merge(fold_frames(merged)), batch)
        return self.attention(merged, merged)


class I2vDenoiser(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        widths = [config.base_width * m for m in config.channel_mults]
        self.unet = VideoUNet(
            2 * config.c_lat,
            config.c_lat,
            config.base_width,
            config.channel_mults,
            config.emb_dim,
            config.blocks,
        )
        self.cond_emb = ConditionEmbedding(config.emb_dim, config.use_frame_number)
        fusion_cls = FieldAugmentedLayer if config.use_fal else ConcatFieldFusion
        self.fusions = nn.ModuleList(
            [
                fusion_cls(w, config.image_downsample * 2**i, config.heads)
                for i, w in enumerate(widths)
            ]
        )
        self.schedule = make_linear_schedule(
            config.t_steps, config.beta_start, config.beta_end
        )

    def forward(self, noisy_latents, t, z1, fields, frame_number):
        """noisy_latents: (B, C, N, l, h, w); z1: (B, C, l, h, w); fields:
        (B, 1, N, L, H, W) per-step differential fields at image resolution."""
        b, c, n = noisy_latents.shape[:3]
        if z1.shape != (b, c, *noisy_latents.shape[3:]):
            raise ShapeMismatchError(
                f"z1 shape {tuple(z1.shape)} does not match one latent frame",
                module="i2v",
            )
        if fields.shape[2] != n:
            raise ConfigError(
                f"fields have {fields.shape[2]} frames but latents have {n}"
            )
        n_vals = frame_number if torch.is_tensor(frame_number) else torch.tensor([frame_number])
        if int(n_vals.min()) != n or int(n_vals.max()) != n:
            raise ConfigError(f"frame_number {frame_number} inconsistent with latents N={n}")

        cum = torch.cumsum(fields, dim=2)
        x = torch.cat([noisy_latents, z1.unsqueeze(2).expand(-1, -1, n, -1, -1, -1)], dim=1)
        emb = self.cond_emb(t, frame_number, b)
        fusions = [
            (lambda h, i=i: self.fusions[i](h, cum)) for i in range(len(self.fusions))
        ]
        return self.unet(x, emb, fusions)


def make_i2v(config, seed=0):
    torch.manual_seed(seed)
    return I2vDenoiser(config)


def _video_to_item(video, vae, latent_scale):
    latents = encode_video(vae, video).latents * latent_scale  # (N, C, l, h, w)
    fields = torch.from_numpy(compute_fields(video).fields).unsqueeze(0)  # (1, N, L, H, W)
    return {
        "latents": latents.permute(1, 0, 2, 3, 4).contiguous(),  # (C, N, l, h, w)
        "fields": fields,
        "n": video.frame_number,
    }


def train_i2v(dataset, vae, latent_scale, config, trainer_config, out_dir=None, val_dataset=None):
    """Teacher-forced training: the conditioning fields are ground truth
    (computed from the videos), not Stage-1 samples."""
    if not dataset:
        raise ConfigError("train_i2v needs a non-empty dataset")
    if vae is None:
        raise ConfigError("train_i2v needs a trained VAE")
    model = make_i2v(config, seed=trainer_config.seed)
    sched = model.schedule

    items = [_video_to_item(v, vae, latent_scale) for v in dataset]
    val_items = (
        [_video_to_item(v, vae, latent_scale) for v in val_dataset] if val_dataset else None
    )

    def loss_fn(m, batch, generator):
        # Frame counts vary per sample; run samples separately and average.
        total = 0.0
        for item in batch:
            z0 = item["latents"].unsqueeze(0)
            t = int(torch.randint(1, sched.T + 1, (1,), generator=generator))
            eps = torch.randn(z0.shape, generator=generator)
            z_t = forward_perturb(z0, t, eps, sched).z
            pred = m(z_t, t, z0[:, :, 0], item["fields"].unsqueeze(0), item["n"])
            total = total + F.mse_loss(pred, eps)
        return total / len(batch)

    report = trainer_mod.fit(
        model, items, loss_fn, trainer_config, val_dataset=val_items, out_dir=out_dir
    )

    ckpt_path = None
    if out_dir is not None:
        from pathlib import Path

        ckpt_path = Path(out_dir) / "i2v.pt"
        save_checkpoint(ckpt_path, kind="i2v", config=config, state_dict=model.state_dict())
    return model, report, ckpt_path


def load_i2v(path):
    payload = load_checkpoint(path, expected_kind="i2v")
    cfg = payload["config"]
    cfg["channel_mults"] = tuple(cfg["channel_mults"])
    config = I2vConfig(**cfg)
    model = I2vDenoiser(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def synthesize_video(prompt, frame_number, vae, latent_scale, tddm_model, i2v_model, seed):
    """Full two-stage synthesis from a single prompting volume.

    Returns exactly `frame_number` frames at the prompt's resolution with
    values in [0, 1]; frame 1 is the prompt itself. Deterministic per seed.
    Failures carry the name of the stage that raised them.
    """
    if not 2 <= frame_number <= 16:
        raise ConfigError(f"frame_number must be in [2, 16], got {frame_number}")
    prompt = np.asarray(prompt, np.float32)
    generator = torch.Generator().manual_seed(seed)

    try:
        field_stack = sample_fields(prompt, frame_number, tddm_model, generator)
    except Exception as exc:  # noqa: BLE001 - stage attribution
        raise StageError("sample-fields", exc) from exc

    try:
        prompt_batch = torch.from_numpy(prompt)[None, None]
        with torch.no_grad():
            z1 = vae.encode(prompt_batch)[0] * latent_scale  # (1, C, l, h, w)
    except Exception as exc:  # noqa: BLE001
        raise StageError("encode-prompt", exc) from exc

    try:
        fields_t = torch.from_numpy(field_stack.fields)[None, None]  # (1, 1, N, L, H, W)
        i2v_model.eval()

        def denoiser(z_t, t, condition):
            with torch.no_grad():
                return i2v_model(z_t, t, condition[0], condition[1], condition[2])

        shape = (1, i2v_model.config.c_lat, frame_number, *z1.shape[-3:])
        z = sample_loop(
            denoiser, shape, (z1, fields_t, frame_number), i2v_model.schedule, generator
        )
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError("latent-sampling", exc) from exc

    try:
        latents = z[0].permute(1, 0, 2, 3, 4) / latent_scale  # (N, C, l, h, w)
        with torch.no_grad():
            frames = vae.decode(latents).squeeze(1).numpy().astype(np.float32)
    except Exception as exc:  # noqa: BLE001
        raise StageError("decode", exc) from exc

    frames[0] = prompt
    return Video4D(frames=frames), field_stack
