"""Per-frame volumetric VAE providing the latent space for the second stage.

Every frame is encoded independently: (L, H, W) -> (C_lat, L/4, H/4, W/4)
via two strided conv stages; the decoder mirrors them with nearest-neighbor
upsampling and a final sigmoid so outputs stay in [0, 1].
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeMismatchError
from .layers import group_norm
from .phantom import Video4D
from . import trainer as trainer_mod


@dataclass(frozen=True)
class VaeConfig:
    c_lat: int = 4
    base_width: int = 16
    kl_weight: float = 1e-6
    downsample_factor: int = 4

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample_factor must be a power of 2, got {f}")

    @property
    def n_stages(self):
        return int(math.log2(self.downsample_factor))


@dataclass
class LatentVideo:
    """Per-frame latent embeddings, shape (N, C_lat, L/4, H/4, W/4)."""

    latents: torch.Tensor

    def __post_init__(self):
        if self.latents.dim() != 5:
            raise ConfigError(
                f"latents must be (N, C, l, h, w), got shape {tuple(self.latents.shape)}"
            )
        if not torch.isfinite(self.latents).all():
            raise ConfigError("latents contain non-finite values")

    @property
    def frame_number(self):
        return self.latents.shape[0]


class VolumeVae(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        b = config.base_width
        widths = [b * 2**i for i in range(config.n_stages)]

        self.enc_init = nn.Conv3d(1, b, 3, padding=1)
        self.enc_stages = nn.ModuleList()
        prev = b
        for w in widths[1:] + [widths[-1] * 2]:
            self.enc_stages.append(
                nn.Sequential(
                    group_norm(prev), nn.SiLU(), nn.Conv3d(prev, w, 3, stride=2, padding=1)
                )
            )
            prev = w
        self.enc_head = nn.Sequential(
            group_norm(prev), nn.SiLU(), nn.Conv3d(prev, 2 * config.c_lat, 3, padding=1)
        )

        self.dec_init = nn.Conv3d(config.c_lat, prev, 3, padding=1)
        self.dec_stages = nn.ModuleList()
        for w in reversed([b] + widths[1:]):
            self.dec_stages.append(
                nn.Sequential(group_norm(prev), nn.SiLU(), nn.Conv3d(prev, w, 3, padding=1))
            )
            prev = w
        self.dec_head = nn.Sequential(
            group_norm(prev), nn.SiLU(), nn.Conv3d(prev, 1, 3, padding=1)
        )

    def _check_dims(self, x):
        f = self.config.downsample_factor
        if any(d % f for d in x.shape[-3:]):
            raise ShapeMismatchError(
                f"volume dims {tuple(x.shape[-3:])} not divisible by {f}", module="vae"
            )

    def encode(self, x):
        """x: (B, 1, L, H, W) -> (mean, log_variance), each (B, C_lat, L/4, ...)."""
        self._check_dims(x)
        h = self.enc_init(x)
        for stage in self.enc_stages:
            h = stage(h)
        mean, logvar = self.enc_head(h).chunk(2, dim=1)
        return mean, logvar

    def features(self, x):
        """Intermediate encoder activations, one per stage (for metric proxies)."""
        self._check_dims(x)
        feats = []
        h = self.enc_init(x)
        feats.append(h)
        for stage in self.enc_stages:
            h = stage(h)
            feats.append(h)
        return feats

    def decode(self, z):
        if z.shape[1] != self.config.c_lat:
            raise ShapeMismatchError(
                f"latent has {z.shape[1]} channels, expected {self.config.c_lat}",
                module="vae",
            )
        h = self.dec_init(z)
        for stage in self.dec_stages:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = stage(h)
        return torch.sigmoid(self.dec_head(h))

    def forward(self, x, generator=None):
        mean, logvar = self.encode(x)
        if generator is None:
            z = mean
        else:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mean, logvar


def make_vae(config, seed=0):
    torch.manual_seed(seed)
    return VolumeVae(config)


def kl_divergence(mean, logvar):
    """Mean per-element KL(q || N(0,1)); non-negative by construction."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def vae_loss(model, frames, generator, kl_weight=None):
    """Reconstruction MSE plus weighted KL on a (B, 1, L, H, W) batch."""
    if kl_weight is None:
        kl_weight = model.config.kl_weight
    recon, mean, logvar = model(frames, generator=generator)
    mse = F.mse_loss(recon, frames)
    kl = kl_divergence(mean, logvar)
    return mse + kl_weight * kl, mse, kl


def frames_to_tensor(video):
    return torch.from_numpy(video.frames).unsqueeze(1)


def encode_video(model, video, sample_posterior=False, generator=None):
    """Frame-wise encoding of a Video4D; order preserved."""
    x = frames_to_tensor(video)
    with torch.no_grad():
        mean, logvar = model.encode(x)
        if sample_posterior:
            if generator is None:
                generator = torch.Generator().manual_seed(0)
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * eps
        else:
            z = mean
    return LatentVideo(latents=z)


def decode_video(model, latent_video):
    with torch.no_grad():
        frames = model.decode(latent_video.latents)
    return Video4D(frames=frames.squeeze(1).numpy())


def dataset_hash(videos):
    digest = hashlib.sha256()
    digest.update(str(len(videos)).encode())
    for video in videos:
        digest.update(np.ascontiguousarray(video.frames).tobytes())
    return digest.hexdigest()[:16]


def calibrate_latent_scale(model, videos, max_frames=64):
    """1 / std of encoder means over training frames, so scaled latents have
    roughly unit variance for the second-stage diffusion."""
    means = []
    count = 0
    with torch.no_grad():
        for video in videos:
            mean, _ = model.encode(frames_to_tensor(video))
            means.append(mean.flatten())
            count += video.frame_number
            if count >= max_frames:
                break
    std = torch.cat(means).std().item()
    if std <= 1e-8:
        return 1.0
    return 1.0 / std


def train_vae(dataset, config, trainer_config, out_dir=None, val_dataset=None):
    """Train the frame VAE on phantom videos; returns (model, report, ckpt path).

    The checkpoint stores parameters, config, the calibrated latent-scale
    constant, and a training-data hash.
    """
    if not dataset:
        raise ConfigError("train_vae needs a non-empty dataset")
    model = make_vae(config, seed=trainer_config.seed)

    frames = [video.frames[i] for video in dataset for i in range(video.frame_number)]
    val_frames = None
    if val_dataset:
        val_frames = [
            video.frames[i] for video in val_dataset for i in range(video.frame_number)
        ]

    def loss_fn(m, batch, generator):
        x = torch.from_numpy(np.stack(batch)).unsqueeze(1)
        loss, _, _ = vae_loss(m, x, generator)
        return loss

    report = trainer_mod.fit(
        model, frames, loss_fn, trainer_config, val_dataset=val_frames, out_dir=out_dir
    )

    scale = calibrate_latent_scale(model, dataset)
    ckpt_path = None
    if out_dir is not None:
        from pathlib import Path

        ckpt_path = Path(out_dir) / "vae.pt"
        trainer_mod.save_checkpoint(
            ckpt_path,
            kind="vae",
            config=config,
            state_dict=model.state_dict(),
            extra={"latent_scale": scale, "data_hash": dataset_hash(dataset)},
        )
    return model, report, scale, ckpt_path


def load_vae(path):
    payload = trainer_mod.load_checkpoint(path, expected_kind="vae")
    config = VaeConfig(**payload["config"])
    model = VolumeVae(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["extra"]["latent_scale"]
