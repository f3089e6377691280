"""Deterministic synthetic 4D motion phantom.

Each sequence shows an ellipsoidal "organ" contracting over half a cosine
cycle: frame 1 is maximal expansion, frame N maximal contraction. Texture is
band-limited smooth noise (a small sum of random-phase sinusoids), and the
background can optionally drift slowly between frames.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GridSizingError
from . import t4dio

VAE_DOWNSAMPLE = 4

# Intensity bands keep the organ interior above 0.5 and the background below,
# so voxel counts at the 0.5 iso-level track organ volume.
_ORGAN_LEVEL = 0.72
_ORGAN_TEXTURE_AMP = 0.14
_BG_LEVEL = 0.18
_BG_TEXTURE_AMP = 0.10
_EDGE_WIDTH_VOXELS = 0.75
_N_TEXTURE_WAVES = 6


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of one synthetic sequence."""

    seed: int = 0
    grid_size: tuple = (32, 32, 32)
    frame_number: int = 8
    amplitude: float = 0.15
    background_drift: float = 0.0
    texture_scale: float = 1.0

    def __post_init__(self):
        L, H, W = self.grid_size
        if min(L, H, W) <= 0:
            raise ConfigError(f"grid_size must be positive, got {self.grid_size}")
        for dim in (L, H, W):
            if dim % VAE_DOWNSAMPLE != 0:
                raise ConfigError(
                    f"grid dims must be divisible by {VAE_DOWNSAMPLE}, got {self.grid_size}"
                )
        if self.frame_number < 2:
            raise ConfigError(f"frame_number must be >= 2, got {self.frame_number}")
        if not 0.0 <= self.amplitude <= 0.3:
            raise ConfigError(f"amplitude must be in [0, 0.3], got {self.amplitude}")
        if not 0.0 <= self.background_drift <= 0.05:
            raise ConfigError(
                f"background_drift must be in [0, 0.05], got {self.background_drift}"
            )
        if self.texture_scale <= 0:
            raise ConfigError(f"texture_scale must be positive, got {self.texture_scale}")


@dataclass
class Video4D:
    """A length-N sequence of 3D intensity volumes, shape (N, L, H, W).

    Intensities are nominally in [0, 1]; generated phantoms always satisfy
    the bound, reconstructed videos may exceed it unless clamped.
    """

    frames: np.ndarray
    voxel_spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ConfigError(f"frames must be (N, L, H, W), got shape {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ConfigError(f"frame_number must be >= 2, got {self.frames.shape[0]}")
        if not np.all(np.isfinite(self.frames)):
            raise ConfigError("frames contain non-finite values")
        if any(s <= 0 for s in self.voxel_spacing):
            raise ConfigError(f"voxel_spacing must be positive, got {self.voxel_spacing}")

    @property
    def frame_number(self):
        return self.frames.shape[0]

    @property
    def grid_size(self):
        return tuple(self.frames.shape[1:])


class _PhantomAssets:
    """Seed-derived static scene description shared by all frames."""

    def __init__(self, config):
        rng = np.random.default_rng(config.seed)
        L, H, W = config.grid_size
        extents = np.array([L, H, W], dtype=np.float64)

        shape_factors = rng.uniform(0.85, 1.0, size=3)
        self.base_axes = 0.28 * extents * shape_factors
        self.delta_axes = 0.5 * config.amplitude * extents
        self.center = (extents - 1.0) / 2.0

        margin = _EDGE_WIDTH_VOXELS + 1.0
        max_axes = self.base_axes + self.delta_axes
        if np.any(max_axes + margin > extents / 2.0):
            raise GridSizingError(
                f"organ semi-axes {np.round(max_axes, 2)} plus margin {margin} exceed "
                f"half-extents {extents / 2.0}; shrink amplitude or enlarge the grid"
            )

        # Random-phase sinusoid banks: rows of (kx, ky, kz, phase).
        freq = 2.0 * np.pi * config.texture_scale
        self.organ_waves = np.column_stack(
            [
                rng.uniform(0.5, 2.0, size=(_N_TEXTURE_WAVES, 3)) * freq / extents,
                rng.uniform(0.0, 2.0 * np.pi, size=_N_TEXTURE_WAVES),
            ]
        )
        self.bg_waves = np.column_stack(
            [
                rng.uniform(0.25, 1.0, size=(_N_TEXTURE_WAVES, 3)) * freq / extents,
                rng.uniform(0.0, 2.0 * np.pi, size=_N_TEXTURE_WAVES),
            ]
        )
        drift_dir = rng.normal(size=3)
        self.drift_dir = drift_dir / np.linalg.norm(drift_dir)
        self.drift_step = config.background_drift * extents

        grids = np.meshgrid(
            np.arange(L, dtype=np.float64),
            np.arange(H, dtype=np.float64),
            np.arange(W, dtype=np.float64),
            indexing="ij",
        )
        self.coords = np.stack(grids, axis=0)

    def axes_at(self, phase):
        return self.base_axes + self.delta_axes * np.cos(np.pi * phase)

    def _texture(self, waves, offset):
        out = np.zeros(self.coords.shape[1:], dtype=np.float64)
        for kx, ky, kz, ph in waves:
            arg = (
                kx * (self.coords[0] - offset[0])
                + ky * (self.coords[1] - offset[1])
                + kz * (self.coords[2] - offset[2])
                + ph
            )
            out += np.sin(arg)
        return out / len(waves)

    def render(self, phase):
        axes = self.axes_at(phase)
        rel = (self.coords - self.center.reshape(3, 1, 1, 1)) / axes.reshape(3, 1, 1, 1)
        rho = np.sqrt(np.sum(rel * rel, axis=0))
        signed_dist = (1.0 - rho) * axes.mean()
        mask = 1.0 / (1.0 + np.exp(-signed_dist / _EDGE_WIDTH_VOXELS))

        organ = _ORGAN_LEVEL + _ORGAN_TEXTURE_AMP * self._texture(self.organ_waves, np.zeros(3))
        bg_off = self.drift_dir * self.drift_step * phase
        background = _BG_LEVEL + _BG_TEXTURE_AMP * self._texture(self.bg_waves, bg_off)

        frame = background + mask * (organ - background)
        return np.clip(frame, 0.0, 1.0).astype(np.float32)


def render_phase(config, phase):
    """Render a single frame at motion phase `phase` in [0, 1]."""
    return _PhantomAssets(config).render(float(phase))


def generate_sequence(config):
    """Generate one phantom sequence; bit-identical for a fixed config."""
    assets = _PhantomAssets(config)
    n = config.frame_number
    phases = [i / (n - 1) for i in range(n)]
    frames = np.stack([assets.render(p) for p in phases], axis=0)
    return Video4D(frames=frames)


def generate_dataset(
    n_train,
    n_val,
    n_test,
    base_config,
    seed,
    n_range=(6, 16),
    out_dir=None,
):
    """Generate train/val/test splits with disjoint per-sequence seeds.

    Per-sequence frame numbers are uniform over `n_range` (inclusive). When
    `out_dir` is given, each sequence is written as `<split>/<split>_<i>.t4d`
    with a sidecar recording seed, N, amplitude, and drift.
    """
    for name, count in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if count <= 0:
            raise ConfigError(f"{name} must be positive, got {count}")
    lo, hi = n_range
    if not (2 <= lo <= hi <= 16):
        raise ConfigError(f"n_range must satisfy 2 <= lo <= hi <= 16, got {n_range}")

    rng = np.random.default_rng(seed)
    total = n_train + n_val + n_test
    seeds = []
    seen = set()
    while len(seeds) < total:
        cand = int(rng.integers(0, 2**31 - 1))
        if cand not in seen:
            seen.add(cand)
            seeds.append(cand)
    frame_numbers = rng.integers(lo, hi + 1, size=total)

    splits = {}
    idx = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        videos = []
        for i in range(count):
            cfg = dataclasses.replace(
                base_config, seed=seeds[idx], frame_number=int(frame_numbers[idx])
            )
            video = generate_sequence(cfg)
            videos.append(video)
            if out_dir is not None:
                _write_sequence(out_dir, split, i, cfg, video)
            idx += 1
        splits[split] = videos
    return splits["train"], splits["val"], splits["test"]


def _write_sequence(out_dir, split, index, cfg, video):
    from pathlib import Path

    split_dir = Path(out_dir) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": cfg.seed,
        "frame_number": cfg.frame_number,
        "amplitude": cfg.amplitude,
        "background_drift": cfg.background_drift,
        "texture_scale": cfg.texture_scale,
        "grid_size": list(cfg.grid_size),
        "kind": "video4d",
    }
    t4dio.save_volume_sequence(
        split_dir / f"{split}_{index:03d}.t4d", video.frames, meta=meta
    )


def load_dataset_split(data_dir, split):
    """Load all sequences of one split written by `generate_dataset`."""
    from pathlib import Path

    split_dir = Path(data_dir) / split
    videos = []
    for path in sorted(split_dir.glob("*.t4d")):
        frames, _, _ = t4dio.load_volume_sequence(path)
        videos.append(Video4D(frames=frames))
    return videos
