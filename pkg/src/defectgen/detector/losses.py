"""Loss functions for the two-net detector.

The reconstruction net is trained with SSIM plus squared error against
the clean source.  The segmentation net is trained with focal loss; for
box-labeled samples the per-pixel focal map is reweighted so that
pixels inside the box which the net already scores as defective with
high confidence stop contributing, which keeps the box from being
segmented wholesale.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ParameterError, ShapeError

_EPS = 1e-6


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Normalized 2-d gaussian kernel, shape (size, size)."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"window size must be odd and positive, got {size}")
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def ssim_map(x: torch.Tensor, y: torch.Tensor, window_size: int = 11,
             sigma: float = 1.5, c1: float = 0.01**2,
             c2: float = 0.03**2) -> torch.Tensor:
    """Per-pixel structural similarity of two (B,C,H,W) images in [0,1].

    Gaussian-windowed means/variances, channel-averaged, same spatial
    size as the input.
    """
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ShapeError(f"expected (B,C,H,W), got {tuple(x.shape)}")
    c = x.shape[1]
    window = gaussian_window(window_size, sigma).to(x.dtype)
    kernel = window.expand(c, 1, window_size, window_size)
    pad = window_size // 2

    mu_x = F.conv2d(x, kernel, padding=pad, groups=c)
    mu_y = F.conv2d(y, kernel, padding=pad, groups=c)
    xx = F.conv2d(x * x, kernel, padding=pad, groups=c) - mu_x**2
    yy = F.conv2d(y * y, kernel, padding=pad, groups=c) - mu_y**2
    xy = F.conv2d(x * y, kernel, padding=pad, groups=c) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return (num / den).mean(dim=1)


def ssim(x: torch.Tensor, y: torch.Tensor, **kwargs) -> torch.Tensor:
    return ssim_map(x, y, **kwargs).mean()


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor,
                        lambda_ssim: float = 1.0) -> torch.Tensor:
    """lambda * (1 - SSIM) plus mean squared error."""
    return lambda_ssim * (1.0 - ssim(recon, target)) + ((recon - target) ** 2).mean()


def focal_seg_loss(prob: torch.Tensor, target: torch.Tensor,
                   gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Unreduced focal loss on predicted defect probabilities.

    prob and target share shape; target is binary.  Positive pixels are
    weighted by alpha, negatives by 1 - alpha.
    """
    if prob.shape != target.shape:
        raise ShapeError(f"shapes differ: {tuple(prob.shape)} vs {tuple(target.shape)}")
    p = prob.clamp(_EPS, 1.0 - _EPS)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    a_t = torch.where(target > 0.5,
                      torch.full_like(p, alpha),
                      torch.full_like(p, 1.0 - alpha))
    return -a_t * (1.0 - p_t) ** gamma * torch.log(p_t)


def confidence_indicator(prob: torch.Tensor, tau: float) -> torch.Tensor:
    """1 where the detached defect probability reaches tau (inclusive)."""
    if not 0.0 < tau <= 1.0:
        raise ParameterError(f"tau must be in (0, 1], got {tau}")
    return (prob.detach() >= tau).to(prob.dtype)


def weak_seg_loss(loss_map: torch.Tensor, prob: torch.Tensor,
                  box_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Box-supervised focal loss with confident pixels released.

    Inside the box the loss keeps only pixels the net does not yet
    score above tau; outside the box every pixel counts.  Mean over all
    entries.
    """
    if loss_map.shape != box_mask.shape:
        raise ShapeError(
            f"loss map {tuple(loss_map.shape)} vs box mask {tuple(box_mask.shape)}"
        )
    delta = confidence_indicator(prob, tau)
    weight = box_mask * (1.0 - delta) + (1.0 - box_mask)
    return (weight * loss_map).mean()


def weighted_seg_loss(loss_map: torch.Tensor, prob: torch.Tensor,
                      mask: torch.Tensor, weak: torch.Tensor,
                      tau: float) -> torch.Tensor:
    """Batch segmentation loss mixing exact and box labels.

    ``weak`` flags per sample (B,) whether ``mask`` is a box label; the
    confidence release applies only to those samples.  Exact-mask and
    normal samples keep the plain mean.
    """
    if loss_map.dim() != 3:
        raise ShapeError(f"expected (B,H,W) loss map, got {tuple(loss_map.shape)}")
    delta = confidence_indicator(prob, tau)
    w = weak.to(loss_map.dtype).view(-1, 1, 1)
    weight = w * (mask * (1.0 - delta) + (1.0 - mask)) + (1.0 - w)
    return (weight * loss_map).mean()
