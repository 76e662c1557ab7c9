"""Loss terms for polarisation-supervised inverse rendering.

The full objective is

    L = L_rgb + l1 * L_pol + l2 * L_mask + l3 * L_depth + l4 * L_smooth

where L_rgb mixes L1 with structural dissimilarity on s0, L_pol is an L1 on
the s1/s2 Stokes components, L_mask matches accumulated opacity against the
observed coverage mask, L_depth pulls blended surfel normals toward normals
differentiated from the depth map, and L_smooth is an edge-aware total
variation on the normal map.  When only polariser-filtered intensities are
available (partial supervision), the photometric and polarimetric terms are
replaced by an L1 between the simulated and captured polariser images, with
the polariser angles themselves optimisable.

The SSIM implementation mirrors the standard Wang et al. configuration
(11-tap Gaussian window, sigma 1.5, population covariance, border crop), so
it can be validated bit-for-bit against reference implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor
import torch.nn.functional as F

from .shading import RenderResult, simulate_lp_capture
from .surfels import depth_to_normal

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5


@dataclass
class LossWeights:
    """Multipliers for the individual terms (photometric weight is fixed at 1)."""

    polarization: float = 10.0
    mask: float = 0.4
    depth: float = 0.2
    smooth: float = 0.1


def _gaussian_kernel1d(sigma: float = _SSIM_SIGMA, truncate: float = _SSIM_TRUNCATE) -> Tensor:
    radius = int(truncate * sigma + 0.5)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    w = torch.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _symmetric_pad_filter(img: Tensor, kernel: Tensor) -> Tensor:
    """Separable filtering of (H, W) with half-sample symmetric padding."""
    r = (kernel.numel() - 1) // 2
    x = torch.cat([img[:, :r].flip(1), img, img[:, -r:].flip(1)], dim=1)
    x = F.conv1d(x.unsqueeze(1), kernel.view(1, 1, -1)).squeeze(1)
    x = x.T
    x = torch.cat([x[:, :r].flip(1), x, x[:, -r:].flip(1)], dim=1)
    x = F.conv1d(x.unsqueeze(1), kernel.view(1, 1, -1)).squeeze(1)
    return x.T


def ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Mean structural similarity between (H, W) or (H, W, C) images."""
    if a.shape != b.shape:
        raise ValueError("ssim: images must share a shape")
    if a.ndim == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    kernel = _gaussian_kernel1d().to(a.dtype)
    radius = (kernel.numel() - 1) // 2
    if min(a.shape[0], a.shape[1]) < 2 * radius + 1:
        raise ValueError("ssim: images smaller than the filter window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x = a[..., ch]
        y = b[..., ch]
        ux = _symmetric_pad_filter(x, kernel)
        uy = _symmetric_pad_filter(y, kernel)
        uxx = _symmetric_pad_filter(x * x, kernel)
        uyy = _symmetric_pad_filter(y * y, kernel)
        uxy = _symmetric_pad_filter(x * y, kernel)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return torch.stack(vals).mean()


def dssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Structural dissimilarity ``(1 - ssim) / 2`` in [0, 1]."""
    return (1.0 - ssim(a, b, data_range)) / 2.0


def loss_rgb(pred_s0: Tensor, obs_s0: Tensor) -> Tensor:
    """Photometric term: ``0.8 * L1 + 0.2 * DSSIM`` on intensity images."""
    return 0.8 * (pred_s0 - obs_s0).abs().mean() + 0.2 * dssim(pred_s0, obs_s0)


def loss_polarization(pred: Tensor, obs: Tensor) -> Tensor:
    """L1 on the linear Stokes components; inputs shaped (H, W, 4, C)."""
    return (pred[..., 1, :] - obs[..., 1, :]).abs().mean() + (pred[..., 2, :] - obs[..., 2, :]).abs().mean()


def loss_mask(opacity: Tensor, mask: Tensor) -> Tensor:
    """L1 between accumulated opacity and the observed coverage mask."""
    return (opacity - mask.to(opacity.dtype)).abs().mean()


def loss_depth_normal(result: RenderResult, opacity_threshold: float = 0.5) -> Tensor:
    """Mean ``1 - n_depth . n_blend`` over pixels where both normals exist."""
    n_depth = depth_to_normal(result.gbuffer, opacity_threshold)
    n_blend = result.gbuffer.normal
    valid = result.mask & (torch.linalg.vector_norm(n_depth, dim=-1) > 0.5)
    if not bool(valid.any()):
        return torch.zeros((), dtype=n_blend.dtype)
    dots = (n_depth * n_blend).sum(-1)
    return (1.0 - dots[valid]).mean()


def loss_smoothness(normal: Tensor, edge_image: Tensor, mask: Tensor) -> Tensor:
    """Edge-aware normal smoothness.

    Mean absolute normal gradient, attenuated by ``exp(-|grad(edge_image)|)``
    so discontinuities in the guidance image relax the penalty.  Restricted
    to neighbour pairs inside the mask; with a constant guidance image this
    reduces to the mean normal gradient magnitude.
    """
    edge = edge_image.mean(dim=-1) if edge_image.ndim == 3 else edge_image
    terms = []
    pair_x = mask[:, 1:] & mask[:, :-1]
    if bool(pair_x.any()):
        dn = (normal[:, 1:] - normal[:, :-1]).abs().mean(-1)
        de = (edge[:, 1:] - edge[:, :-1]).abs()
        terms.append((dn * torch.exp(-de))[pair_x].mean())
    pair_y = mask[1:, :] & mask[:-1, :]
    if bool(pair_y.any()):
        dn = (normal[1:, :] - normal[:-1, :]).abs().mean(-1)
        de = (edge[1:, :] - edge[:-1, :]).abs()
        terms.append((dn * torch.exp(-de))[pair_y].mean())
    if not terms:
        return torch.zeros((), dtype=normal.dtype)
    return torch.stack(terms).sum()


def total_loss(
    result: RenderResult,
    observation,
    weights: LossWeights | None = None,
    lp_angles: Tensor | None = None,
) -> tuple[Tensor, dict]:
    """Combine all terms for one view.

    ``observation`` provides either full Stokes supervision (``stokes``,
    (H, W, 4, 3)) or a polariser capture (``intensity`` plus ``lp_index``
    into ``lp_angles``); both carry a coverage ``mask``.

    Returns the scalar total and a dict of the unweighted parts.
    """
    weights = weights or LossWeights()
    pred = result.total.stokes
    opacity = result.gbuffer.opacity
    parts: dict[str, Tensor] = {}

    if getattr(observation, "stokes", None) is not None:
        obs_stokes = observation.stokes.to(pred.dtype)
        parts["rgb"] = loss_rgb(pred[..., 0, :], obs_stokes[..., 0, :])
        parts["pol"] = loss_polarization(pred, obs_stokes)
        edge = obs_stokes[..., 0, :]
        photometric = parts["rgb"] + weights.polarization * parts["pol"]
    else:
        theta = lp_angles[observation.lp_index]
        capture = simulate_lp_capture(pred, theta)
        parts["capture"] = (capture - observation.intensity.to(pred.dtype)).abs().mean()
        edge = observation.intensity.to(pred.dtype)
        photometric = parts["capture"]

    parts["mask"] = loss_mask(opacity, observation.mask)
    parts["depth"] = loss_depth_normal(result)
    parts["smooth"] = loss_smoothness(result.gbuffer.normal, edge, result.mask)
    total = (
        photometric
        + weights.mask * parts["mask"]
        + weights.depth * parts["depth"]
        + weights.smooth * parts["smooth"]
    )
    return total, parts
