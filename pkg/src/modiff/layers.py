"""Shared network blocks for both denoisers: factorized spatial/temporal
convolutions, sinusoidal condition embeddings, a video U-Net trunk with
per-resolution fusion hooks, and the temporal attention core.

Feature tensors are laid out (B, C, N, L, H, W): batch, channel, frame,
then three spatial dims.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError


def fold_frames(x):
    """(B, C, N, l, h, w) -> (B*N, C, l, h, w) for per-frame spatial convs."""
    b, c, n, l, h, w = x.shape
    return x.permute(0, 2, 1, 3, 4, 5).reshape(b * n, c, l, h, w)


def unfold_frames(x, batch):
    bn, c, l, h, w = x.shape
    n = bn // batch
    return x.reshape(batch, n, c, l, h, w).permute(0, 2, 1, 3, 4, 5)


def spatial_conv(x, conv):
    """Apply a 3-D convolution independently to every frame."""
    return unfold_frames(conv(fold_frames(x)), x.shape[0])


def temporal_conv(x, conv):
    """Apply a 1-D convolution over the frame axis at every spatial site."""
    b, c, n, l, h, w = x.shape
    sites = x.permute(0, 3, 4, 5, 1, 2).reshape(b * l * h * w, c, n)
    out = conv(sites)
    return out.reshape(b, l, h, w, c, n).permute(0, 4, 5, 1, 2, 3)


class SpatialTemporalLayer(nn.Module):
    """Per-frame 3-D spatial conv followed by a per-site 1-D temporal conv.

    With `residual` the conv pair is added back onto the input; `zero_init_`
    then makes the layer an exact identity. Temporal padding is zero-padded
    so N down to 1 is legal for the spatial part and N >= 1 for the temporal
    kernel of size 3.
    """

    def __init__(self, channels, residual=True):
        super().__init__()
        self.spatial = nn.Conv3d(channels, channels, 3, padding=1)
        self.temporal = nn.Conv1d(channels, channels, 3, padding=1)
        self.residual = residual

    def zero_init_(self):
        for conv in (self.spatial, self.temporal):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        return self

    def identity_init_(self):
        """Centered delta kernels: the conv pair itself maps x to x."""
        for conv in (self.spatial, self.temporal):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        c = self.spatial.weight.shape[0]
        with torch.no_grad():
            for i in range(c):
                self.spatial.weight[i, i, 1, 1, 1] = 1.0
                self.temporal.weight[i, i, 1] = 1.0
        return self

    def forward(self, x):
        h = spatial_conv(x, self.spatial)
        h = temporal_conv(h, self.temporal)
        return x + h if self.residual else h


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of integer steps; t is a (B,) tensor or an int."""
    if not torch.is_tensor(t):
        t = torch.tensor([t])
    t = t.float()
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionEmbedding(nn.Module):
    """Summed embeddings of the diffusion timestep and the frame number.

    Frame-number conditioning can be disabled (the ablation arm); the output
    dimensionality stays the same, the N contribution is simply zero.
    """

    def __init__(self, dim, use_frame_number=True):
        super().__init__()
        self.dim = dim
        self.use_frame_number = use_frame_number
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.n_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t, frame_number, batch):
        dtype = self.t_mlp[0].weight.dtype
        t_emb = timestep_embedding(t, self.dim).to(dtype)
        if t_emb.shape[0] == 1 and batch > 1:
            t_emb = t_emb.expand(batch, -1)
        emb = self.t_mlp(t_emb)
        if self.use_frame_number:
            n_emb = timestep_embedding(frame_number, self.dim).to(dtype)
            if n_emb.shape[0] == 1 and batch > 1:
                n_emb = n_emb.expand(batch, -1)
            emb = emb + self.n_mlp(n_emb)
        return emb


def group_norm(channels):
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class STBlock(nn.Module):
    """U-Net block: norm/SiLU/spatial conv, condition bias, norm/SiLU/temporal
    conv, with a residual connection around the pair."""

    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.spatial = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = group_norm(out_ch)
        self.temporal = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = spatial_conv(F.silu(self.norm1(x)), self.spatial)
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None, None, None]
        h = temporal_conv(F.silu(self.norm2(h)), self.temporal)
        if isinstance(self.skip, nn.Conv3d):
            return spatial_conv(x, self.skip) + h
        return x + h


class Downsample(nn.Module):
    """Spatial stride-2 conv per frame; the frame axis is untouched."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return spatial_conv(x, self.conv)


class Upsample(nn.Module):
    """Nearest-neighbor spatial x2 followed by a conv, per frame."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        b = x.shape[0]
        frames = fold_frames(x)
        frames = F.interpolate(frames, scale_factor=2, mode="nearest")
        return unfold_frames(self.conv(frames), b)


class VideoUNet(nn.Module):
    """Encoder/decoder trunk over (B, C, N, l, h, w) features.

    `fusions` passed to forward is an optional per-encoder-level list of
    callables applied after that level's blocks; conditioning layers (prompt
    fusion, field attention) are owned by the callers and injected this way.
    """

    def __init__(self, in_ch, out_ch, base, mults=(1, 2), emb_dim=64, blocks=1):
        super().__init__()
        widths = [base * m for m in mults]
        self.widths = widths
        self.init_conv = nn.Conv3d(in_ch, base, 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = base
        for i, w in enumerate(widths):
            level = nn.ModuleList()
            for _ in range(blocks):
                level.append(STBlock(prev, w, emb_dim))
                prev = w
            self.enc_blocks.append(level)
            self.downs.append(Downsample(w) if i < len(widths) - 1 else nn.Identity())

        self.mid1 = STBlock(widths[-1], widths[-1], emb_dim)
        self.mid2 = STBlock(widths[-1], widths[-1], emb_dim)

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(widths))):
            level = nn.ModuleList()
            ch = widths[i] * 2  # concatenated skip
            for _ in range(blocks):
                level.append(STBlock(ch, widths[i], emb_dim))
                ch = widths[i]
            self.dec_blocks.append(level)
            self.ups.append(Upsample(widths[i], widths[i - 1]) if i > 0 else nn.Identity())

        self.out_norm = group_norm(widths[0])
        self.out_conv = nn.Conv3d(widths[0], out_ch, 3, padding=1)

    def forward(self, x, emb, fusions=None):
        h = spatial_conv(x, self.init_conv)
        skips = []
        for i, level in enumerate(self.enc_blocks):
            for block in level:
                h = block(h, emb)
            if fusions is not None and fusions[i] is not None:
                h = fusions[i](h)
            skips.append(h)
            if not isinstance(self.downs[i], nn.Identity):
                h = self.downs[i](h)

        h = self.mid1(h, emb)
        h = self.mid2(h, emb)

        for j, level in enumerate(self.dec_blocks):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level:
                h = block(h, emb)
            if not isinstance(self.ups[j], nn.Identity):
                h = self.ups[j](h)

        h = F.silu(self.out_norm(h))
        return spatial_conv(h, self.out_conv)


def temporal_attention(q, k, v, heads=1):
    """Scaled dot-product attention over the frame axis.

    q: (B*, Nq, C); k, v: (B*, Nk, C). Returns (out, weights) where weights
    rows sum to 1 across the Nk key positions.
    """
    if k.shape != v.shape:
        raise ShapeMismatchError(
            f"key shape {tuple(k.shape)} != value shape {tuple(v.shape)}",
            module="i2v",
        )
    b, nq, c = q.shape
    nk = k.shape[1]
    dh = c // heads
    qh = q.reshape(b, nq, heads, dh).transpose(1, 2)
    kh = k.reshape(b, nk, heads, dh).transpose(1, 2)
    vh = v.reshape(b, nk, heads, dh).transpose(1, 2)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(dh)
    weights = logits.softmax(dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, nq, c)
    return out, weights


class TemporalCrossAttention(nn.Module):
    """Per-spatial-site attention with queries from one frame stream and
    keys/values from another. The output projection starts at zero so the
    surrounding residual is an identity at initialization."""

    def __init__(self, channels, heads=1):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, q_feat, kv_feat):
        b, c, nq, l, h, w = q_feat.shape
        nk = kv_feat.shape[2]
        q = q_feat.permute(0, 3, 4, 5, 2, 1).reshape(b * l * h * w, nq, c)
        kv = kv_feat.permute(0, 3, 4, 5, 2, 1).reshape(b * l * h * w, nk, c)
        qn, kvn = self.norm_q(q), self.norm_kv(kv)
        out, _ = temporal_attention(
            self.to_q(qn), self.to_k(kvn), self.to_v(kvn), self.heads
        )
        out = self.proj(out)
        out = out.reshape(b, l, h, w, nq, c).permute(0, 5, 4, 1, 2, 3)
        return q_feat + out
