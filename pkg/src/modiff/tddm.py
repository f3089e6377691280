"""Stage 1: conditional diffusion over stacked temporal differential fields.

The denoiser consumes a fixed 16-channel temporal stack (channels past the
sample's N are zero padding, excluded from the loss by masking), conditioned
on the prompting frame through multiplicative/additive feature fusion and on
the frame number through a sinusoidal embedding.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import trainer as trainer_mod
from .diffusion import forward_perturb, make_linear_schedule, sample_loop, score_loss
from .errors import ConfigError, ShapeMismatchError
from .fields import FieldStack, compute_fields
from .layers import ConditionEmbedding, VideoUNet
from .trainer import load_checkpoint, save_checkpoint

TEMPORAL_CHANNELS = 16


@dataclass(frozen=True)
class TddmConfig:
    base_width: int = 16
    channel_mults: tuple = (1, 2)
    emb_dim: int = 64
    blocks: int = 1
    use_pal: bool = True
    use_frame_number: bool = True
    working_scale: int = 1
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        ws = self.working_scale
        if ws < 1 or (ws & (ws - 1)) != 0:
            raise ConfigError(f"working_scale must be a power of 2, got {ws}")


def pal_fuse(field_features, prompt_mul, prompt_add):
    """out = field (1 + mul) + add, with the prompt terms broadcast over the
    temporal axis. Zero heads make this an exact identity."""
    if prompt_mul.shape != prompt_add.shape:
        raise ShapeMismatchError(
            f"mul shape {tuple(prompt_mul.shape)} != add shape {tuple(prompt_add.shape)}",
            module="tddm",
        )
    if prompt_mul.shape[-3:] != field_features.shape[-3:]:
        raise ShapeMismatchError(
            f"prompt spatial shape {tuple(prompt_mul.shape[-3:])} != "
            f"field spatial shape {tuple(field_features.shape[-3:])}",
            module="tddm",
        )
    mul = prompt_mul.unsqueeze(2)
    add = prompt_add.unsqueeze(2)
    return field_features * (1.0 + mul) + add


class PalFusion(nn.Module):
    """Projection heads for one resolution; zero-initialized so fusion starts
    as the identity on the field features."""

    def __init__(self, channels):
        super().__init__()
        self.mul_head = nn.Conv3d(channels, channels, 1)
        self.add_head = nn.Conv3d(channels, channels, 1)
        for head in (self.mul_head, self.add_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, field_features, prompt_features):
        return pal_fuse(
            field_features, self.mul_head(prompt_features), self.add_head(prompt_features)
        )


class PromptEncoder(nn.Module):
    """Conv / ReLU / group-norm stack mapping the prompting frame to feature
    pyramids matching the denoiser's encoder resolutions."""

    def __init__(self, widths, working_scale):
        super().__init__()
        from .layers import group_norm

        stem = [nn.Conv3d(1, widths[0], 3, padding=1)]
        scale = working_scale
        while scale > 1:
            stem += [
                nn.ReLU(),
                group_norm(widths[0]),
                nn.Conv3d(widths[0], widths[0], 3, stride=2, padding=1),
            ]
            scale //= 2
        self.stem = nn.Sequential(*stem)
        self.stages = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.stages.append(
                nn.Sequential(
                    nn.Conv3d(prev, w, 3, stride=stride, padding=1),
                    nn.ReLU(),
                    group_norm(w),
                )
            )
            prev = w

    def forward(self, prompt):
        h = self.stem(prompt)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class TddmDenoiser(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        widths = [config.base_width * m for m in config.channel_mults]
        in_ch = 1 if config.use_pal else 2
        self.unet = VideoUNet(
            in_ch, 1, config.base_width, config.channel_mults, config.emb_dim, config.blocks
        )
        self.cond_emb = ConditionEmbedding(config.emb_dim, config.use_frame_number)
        if config.use_pal:
            self.prompt_encoder = PromptEncoder(widths, config.working_scale)
            self.pal = nn.ModuleList([PalFusion(w) for w in widths])
        self.schedule = make_linear_schedule(
            config.t_steps, config.beta_start, config.beta_end
        )

    def forward(self, noisy_fields, t, prompt, frame_number):
        """noisy_fields: (B, 1, 16, l, h, w); prompt: (B, 1, L, H, W) at image
        resolution; frame_number: int or (B,) tensor in [2, 16]."""
        if noisy_fields.shape[2] != TEMPORAL_CHANNELS:
            raise ShapeMismatchError(
                f"expected {TEMPORAL_CHANNELS} temporal channels, "
                f"got {noisy_fields.shape[2]}",
                module="tddm",
            )
        n_vals = frame_number if torch.is_tensor(frame_number) else torch.tensor([frame_number])
        if int(n_vals.min()) < 2 or int(n_vals.max()) > TEMPORAL_CHANNELS:
            raise ConfigError(f"frame_number must be in [2, {TEMPORAL_CHANNELS}]")
        batch = noisy_fields.shape[0]
        emb = self.cond_emb(t, frame_number, batch)

        if self.config.use_pal:
            pfeats = self.prompt_encoder(prompt)
            fusions = [
                (lambda h, i=i: self.pal[i](h, pfeats[i])) for i in range(len(self.pal))
            ]
            x = noisy_fields
        else:
            pooled = prompt
            if self.config.working_scale > 1:
                pooled = F.avg_pool3d(pooled, self.config.working_scale)
            pooled = pooled.unsqueeze(2).expand(-1, -1, TEMPORAL_CHANNELS, -1, -1, -1)
            x = torch.cat([noisy_fields, pooled], dim=1)
            fusions = None
        return self.unet(x, emb, fusions)


def make_tddm(config, seed=0):
    torch.manual_seed(seed)
    return TddmDenoiser(config)


def fields_to_training_tensor(video, working_scale=1):
    """Ground-truth fields of a video, pooled to the working resolution and
    zero-padded to the fixed temporal stack: (1, 16, l, h, w)."""
    stack = compute_fields(video)
    fields = torch.from_numpy(stack.fields).unsqueeze(1)  # (N, 1, L, H, W)
    if working_scale > 1:
        fields = F.avg_pool3d(fields, working_scale)
    n, _, l, h, w = fields.shape
    padded = torch.zeros(1, TEMPORAL_CHANNELS, l, h, w)
    padded[0, :n] = fields[:, 0]
    return padded


def train_tddm(dataset, config, trainer_config, out_dir=None, val_dataset=None):
    """Train the field denoiser on phantom videos with per-sample masking of
    the loss to the first N temporal channels."""
    if not dataset:
        raise ConfigError("train_tddm needs a non-empty dataset")
    for video in dataset:
        if video.frame_number > TEMPORAL_CHANNELS:
            raise ConfigError(
                f"sequence has N={video.frame_number} > {TEMPORAL_CHANNELS}"
            )
    model = make_tddm(config, seed=trainer_config.seed)
    sched = model.schedule

    def prepare(videos):
        items = []
        for video in videos:
            items.append(
                {
                    "fields": fields_to_training_tensor(video, config.working_scale),
                    "prompt": torch.from_numpy(video.frames[0]).unsqueeze(0),
                    "n": video.frame_number,
                }
            )
        return items

    items = prepare(dataset)
    val_items = prepare(val_dataset) if val_dataset else None

    def loss_fn(m, batch, generator):
        z0 = torch.stack([item["fields"] for item in batch])
        prompts = torch.stack([item["prompt"] for item in batch])
        ns = torch.tensor([item["n"] for item in batch])
        mask = torch.zeros(len(batch), 1, TEMPORAL_CHANNELS, 1, 1, 1, dtype=torch.bool)
        for i, item in enumerate(batch):
            mask[i, 0, : item["n"]] = True
        t = torch.randint(1, sched.T + 1, (len(batch),), generator=generator)
        eps = torch.randn(z0.shape, generator=generator)
        z_t = forward_perturb(z0, t, eps, sched).z
        pred = m(z_t, t, prompts, ns)
        return score_loss(eps, pred, mask)

    report = trainer_mod.fit(
        model, items, loss_fn, trainer_config, val_dataset=val_items, out_dir=out_dir
    )

    ckpt_path = None
    if out_dir is not None:
        from pathlib import Path

        ckpt_path = Path(out_dir) / "tddm.pt"
        save_checkpoint(ckpt_path, kind="tddm", config=config, state_dict=model.state_dict())
    return model, report, ckpt_path


def load_tddm(path):
    payload = load_checkpoint(path, expected_kind="tddm")
    cfg = payload["config"]
    cfg["channel_mults"] = tuple(cfg["channel_mults"])
    config = TddmConfig(**cfg)
    model = TddmDenoiser(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def sample_fields(prompt, frame_number, model, rng):
    """Sample a FieldStack for `prompt` (an (L, H, W) volume) and N frames.

    The first N temporal channels are kept, channel 1 is overwritten with the
    zero mask, and fields are returned at image resolution in [-1, 1].
    Deterministic for a fixed seed.
    """
    if not 2 <= frame_number <= TEMPORAL_CHANNELS:
        raise ConfigError(f"frame_number must be in [2, {TEMPORAL_CHANNELS}]")
    prompt_t = torch.as_tensor(np.asarray(prompt, np.float32))[None, None]
    ws = model.config.working_scale
    l, h, w = (d // ws for d in prompt_t.shape[-3:])

    model.eval()

    def denoiser(z_t, t, condition):
        with torch.no_grad():
            return model(z_t, t, condition[0], condition[1])

    z = sample_loop(
        denoiser,
        (1, 1, TEMPORAL_CHANNELS, l, h, w),
        (prompt_t, frame_number),
        model.schedule,
        rng,
    )
    fields = z[0, 0, :frame_number].unsqueeze(1)  # (N, 1, l, h, w)
    if ws > 1:
        fields = F.interpolate(fields, scale_factor=ws, mode="trilinear", align_corners=False)
    fields = fields[:, 0].clamp(-1.0, 1.0).numpy().astype(np.float32)
    fields[0] = 0.0
    return FieldStack(fields=fields)
