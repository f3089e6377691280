"""Temporal differential fields: adjacent-frame differences, their prefix
sums, and reconstruction of a video from a first frame plus fields."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .phantom import Video4D


@dataclass
class FieldStack:
    """Per-frame differential fields, shape (N, L, H, W); field 1 is zero."""

    fields: np.ndarray

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float32)
        if self.fields.ndim != 4:
            raise ConfigError(f"fields must be (N, L, H, W), got shape {self.fields.shape}")
        if not np.all(np.isfinite(self.fields)):
            raise ConfigError("fields contain non-finite values")
        if np.any(self.fields[0] != 0.0):
            raise ConfigError("field 1 must be identically zero")

    @property
    def frame_number(self):
        return self.fields.shape[0]


@dataclass
class CumulativeFieldStack:
    """Prefix sums of a FieldStack; cum_fields[i] telescopes to frame i - frame 1."""

    cum_fields: np.ndarray

    def __post_init__(self):
        self.cum_fields = np.asarray(self.cum_fields, dtype=np.float32)
        if self.cum_fields.ndim != 4:
            raise ConfigError(
                f"cum_fields must be (N, L, H, W), got shape {self.cum_fields.shape}"
            )
        if np.any(self.cum_fields[0] != 0.0):
            raise ConfigError("cumulative field 1 must be identically zero")

    @property
    def frame_number(self):
        return self.cum_fields.shape[0]


def compute_fields(video):
    """Element-wise differences of adjacent frames; field 1 is the zero mask."""
    frames = video.frames
    fields = np.zeros_like(frames)
    fields[1:] = frames[1:] - frames[:-1]
    return FieldStack(fields=fields)


def cumulate(stack):
    """Prefix sums along the frame axis, accumulated in float64."""
    cum = np.cumsum(stack.fields.astype(np.float64), axis=0)
    cum[0] = 0.0
    return CumulativeFieldStack(cum_fields=cum.astype(np.float32))


def reconstruct_video(first_frame, stack, clamp=False):
    """Rebuild frames as first_frame + cumulative fields.

    With `clamp` the result is clipped to [0, 1] for display export; without
    it the roundtrip with `compute_fields` is exact to accumulation tolerance.
    """
    first = np.asarray(first_frame, dtype=np.float32)
    if first.shape != stack.fields.shape[1:]:
        raise ShapeMismatchError(
            f"first frame shape {first.shape} != field shape {stack.fields.shape[1:]}",
            module="fields",
        )
    cum = cumulate(stack).cum_fields.astype(np.float64)
    frames = first.astype(np.float64)[None] + cum
    if clamp:
        frames = np.clip(frames, 0.0, 1.0)
    return Video4D(frames=frames.astype(np.float32))
