"""Evaluation suite: PSNR, self-contained perceptual and video-distribution
proxies built on the trained VAE encoder, and per-frame temporal error maps.

The proxies are explicitly NOT the pretrained-network metrics they stand in
for; reports label them `lpips_proxy` and `fvd_proxy` and their values are
only directionally comparable between models evaluated the same way.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeMismatchError

PSNR_IDENTICAL_SENTINEL = math.inf


@dataclass
class EvalReport:
    psnr: list = field(default_factory=list)
    lpips_proxy: list = field(default_factory=list)
    fvd_proxy: float = math.nan
    n_sequences: int = 0

    def summary(self):
        finite = [p for p in self.psnr if math.isfinite(p)]
        return {
            "psnr_mean": float(np.mean(finite)) if finite else math.inf,
            "lpips_proxy_mean": float(np.mean(self.lpips_proxy)),
            "fvd_proxy": float(self.fvd_proxy),
            "n_sequences": self.n_sequences,
        }


def _check_same_shape(pred, gt, module="metrics"):
    if pred.frames.shape != gt.frames.shape:
        raise ShapeMismatchError(
            f"pred shape {pred.frames.shape} != gt shape {gt.frames.shape}",
            module=module,
        )


def psnr(pred, gt):
    """10 log10(1 / MSE) over all voxels and frames, peak 1.

    Identical inputs return the infinite sentinel.
    """
    _check_same_shape(pred, gt)
    mse = float(
        np.mean((pred.frames.astype(np.float64) - gt.frames.astype(np.float64)) ** 2)
    )
    if mse == 0.0:
        return PSNR_IDENTICAL_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def _frame_features(encoder, frames):
    """Encoder stage activations for an (N, L, H, W) stack."""
    x = torch.from_numpy(np.asarray(frames, np.float32)).unsqueeze(1)
    with torch.no_grad():
        return encoder.features(x)


def perceptual_proxy(pred, gt, encoder):
    """Scale-normalized squared feature distance in the VAE encoder's
    intermediate activations, averaged over layers and frames.

    Symmetric, non-negative, and zero iff the features agree.
    """
    if encoder is None:
        raise ConfigError("perceptual_proxy needs a trained encoder")
    _check_same_shape(pred, gt)
    feats_a = _frame_features(encoder, pred.frames)
    feats_b = _frame_features(encoder, gt.frames)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        fa = fa.double()
        fb = fb.double()
        num = float((fa - fb).pow(2).mean())
        denom = float(fa.pow(2).mean() + fb.pow(2).mean()) + 1e-12
        total += num / denom
    return total / len(feats_a)


def video_features(video, encoder):
    """Pooled spatiotemporal descriptor of one video: time-mean and time-std
    of spatially pooled deep encoder channels, plus a fixed temporal-
    difference channel (mean and spread of adjacent-frame change)."""
    feats = _frame_features(encoder, video.frames)
    deep = feats[-1]  # (N, C, l, h, w)
    pooled = deep.mean(dim=(2, 3, 4)).double()  # (N, C)
    t_mean = pooled.mean(dim=0)
    t_std = pooled.std(dim=0) if pooled.shape[0] > 1 else torch.zeros_like(t_mean)

    frames = video.frames.astype(np.float64)
    diffs = np.abs(frames[1:] - frames[:-1]).mean(axis=(1, 2, 3))  # (N-1,)
    d_mean = float(diffs.mean())
    d_std = float(diffs.std())
    return torch.cat(
        [t_mean, t_std, torch.tensor([d_mean, d_std], dtype=torch.float64)]
    ).numpy()


def fit_gaussian(features):
    """Mean and covariance of a (n, d) feature matrix."""
    feats = np.asarray(features, np.float64)
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return mu, cov


def sqrt_trace_of_product(cov1, cov2):
    """Tr((cov1 cov2)^(1/2)) via eigendecomposition of the symmetrized
    product, negative eigenvalues clipped at 0."""
    product = cov1 @ cov2
    sym = (product + product.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return float(np.sqrt(eigvals).sum())


def frechet_distance(mu1, cov1, mu2, cov2):
    """||mu1 - mu2||^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    mu1 = np.asarray(mu1, np.float64)
    mu2 = np.asarray(mu2, np.float64)
    diff = float(((mu1 - mu2) ** 2).sum())
    sqrt_trace = sqrt_trace_of_product(cov1, cov2)
    return diff + float(np.trace(cov1) + np.trace(cov2) - 2.0 * sqrt_trace)


def frechet_from_features(feats1, feats2, eps=1e-6):
    """Frechet distance between Gaussian fits of two feature matrices.

    Singular covariances are regularized with `eps` on the diagonal; the
    regularization is reported via a warning.
    """
    mu1, cov1 = fit_gaussian(feats1)
    mu2, cov2 = fit_gaussian(feats2)
    dim = cov1.shape[0]
    singular = (
        np.linalg.matrix_rank(cov1, tol=1e-10) < dim
        or np.linalg.matrix_rank(cov2, tol=1e-10) < dim
    )
    if singular:
        warnings.warn(
            f"singular covariance regularized with {eps} on the diagonal",
            stacklevel=2,
        )
        cov1 = cov1 + eps * np.eye(dim)
        cov2 = cov2 + eps * np.eye(dim)
    return frechet_distance(mu1, cov1, mu2, cov2)


def fvd_proxy(pred_set, gt_set, encoder, eps=1e-6):
    """Frechet distance between pooled-feature Gaussians of two video sets."""
    if encoder is None:
        raise ConfigError("fvd_proxy needs a trained encoder")
    if len(pred_set) < 2 or len(gt_set) < 2:
        raise ConfigError("fvd_proxy needs at least 2 sequences per set")
    feats_pred = np.stack([video_features(v, encoder) for v in pred_set])
    feats_gt = np.stack([video_features(v, encoder) for v in gt_set])
    return frechet_from_features(feats_pred, feats_gt, eps)


def temporal_error_maps(pred, gt):
    """|pred_i - gt_i| for interior frames i = 2..N-1 (1-indexed); the
    bilateral frames are excluded. Returns an (N-2, L, H, W) array."""
    _check_same_shape(pred, gt)
    n = pred.frames.shape[0]
    if n < 4:
        warnings.warn(f"N={n} < 4 yields no interior frames; empty map set", stacklevel=2)
        return np.zeros((0, *pred.frames.shape[1:]), np.float32)
    maps = np.abs(pred.frames[1 : n - 1] - gt.frames[1 : n - 1])
    return maps.astype(np.float32)


def evaluate_sets(pred_videos, gt_videos, encoder, eps=1e-6):
    """Per-sequence PSNR and perceptual proxy plus the set-level fvd proxy."""
    if len(pred_videos) != len(gt_videos):
        raise ConfigError(
            f"{len(pred_videos)} predictions vs {len(gt_videos)} ground truths"
        )
    report = EvalReport(n_sequences=len(pred_videos))
    for p, g in zip(pred_videos, gt_videos):
        report.psnr.append(psnr(p, g))
        report.lpips_proxy.append(perceptual_proxy(p, g, encoder))
    if len(pred_videos) >= 2:
        report.fvd_proxy = fvd_proxy(pred_videos, gt_videos, encoder, eps)
    return report
