"""Reconstruction losses: reference color+silhouette, normal MSE, masked
negative-Pearson depth correlation, a deterministic perceptual loss, and the
pixel-space refinement loss. All are plain differentiable torch functions.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ArgumentError, DegenerateDepthSignal

MIN_MASKED_PIXELS = 16
_EXTRACTOR_CACHE = {}


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ArgumentError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reference_loss_parts(render, job_or_image, mask=None):
    """(masked color MSE, silhouette MSE) between a render and the reference.

    Accepts either a ReconstructionJob or an explicit (image, mask) pair sized
    like the render. Each term is normalized by the full pixel count.
    """
    if mask is None:
        size = render.rgb.shape[0]
        target = job_or_image.ref_image_t(size)
        mask = job_or_image.ref_mask_t(size)
    else:
        target = job_or_image
    _check_same_shape(render.rgb, target, "reference color")
    _check_same_shape(render.alpha, mask, "reference mask")
    diff = (target - render.rgb) * mask[..., None]
    color = (diff * diff).mean()
    mdiff = mask - render.alpha
    silhouette = (mdiff * mdiff).mean()
    return color, silhouette


def reference_loss(render, job) -> torch.Tensor:
    """Masked color term plus silhouette term (both mean-square)."""
    color, silhouette = reference_loss_parts(render, job)
    return color + silhouette


def normal_loss(render_normal: torch.Tensor, job_or_target, mask=None) -> torch.Tensor:
    """Masked MSE between camera-space normal maps."""
    if mask is None:
        size = render_normal.shape[0]
        target = job_or_target.ref_normal_t(size)
        mask = job_or_target.ref_mask_t(size)
    else:
        target = job_or_target
    _check_same_shape(render_normal, target, "normal maps")
    diff = (target - render_normal) * mask[..., None]
    return (diff * diff).mean()


def depth_pearson_loss(render_depth: torch.Tensor, job_or_target, mask=None) -> torch.Tensor:
    """1 - Pearson correlation of the masked depth maps; in [0, 2].

    Statistics run over the mask-weighted pixel population, so the loss is
    invariant to positive affine transforms of either map. Raises
    DegenerateDepthSignal when a masked map is (near-)constant.
    """
    if mask is None:
        size = render_depth.shape[0]
        target = job_or_target.ref_depth_t(size)
        mask = job_or_target.ref_mask_t(size)
    else:
        target = job_or_target
    _check_same_shape(render_depth, target, "depth maps")
    w = mask.reshape(-1)
    x = render_depth.reshape(-1)
    y = target.reshape(-1)
    wsum = w.sum()
    if float((w > 0.5).sum()) < MIN_MASKED_PIXELS:
        raise ArgumentError(f"need at least {MIN_MASKED_PIXELS} masked pixels")
    xm = (w * x).sum() / wsum
    ym = (w * y).sum() / wsum
    xc = x - xm
    yc = y - ym
    cov = (w * xc * yc).sum() / wsum
    vx = (w * xc * xc).sum() / wsum
    vy = (w * yc * yc).sum() / wsum
    if float(vx) < 1e-12 or float(vy) < 1e-12:
        raise DegenerateDepthSignal("masked depth variance ~ 0; skipping depth term")
    return 1.0 - cov / (vx.sqrt() * vy.sqrt())


class RandConvPyramid(nn.Module):
    """Fixed seeded random-convolution pyramid: 3 stride-2 levels.

    Deterministic and dependency-free; stands in where a pretrained feature
    network would normally go. The weights never train.
    """

    name = "builtin-rand-pyramid"

    def __init__(self, seed: int = 1234, channels=(8, 16, 32)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            convs = []
            c_in = 3
            for c_out in channels:
                conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
                nn.init.orthogonal_(conv.weight, gain=1.4)
                nn.init.zeros_(conv.bias)
                convs.append(conv)
                c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor):
        """(H,W,3) image -> list of feature maps, one per level."""
        x = image.permute(2, 0, 1)[None]
        feats = []
        for conv in self.convs:
            x = torch.nn.functional.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def get_extractor(handle="builtin-rand-pyramid"):
    """Resolve a feature-extractor handle: the builtin name or 'external:<path>'."""
    if callable(handle):
        return handle
    if handle in _EXTRACTOR_CACHE:
        return _EXTRACTOR_CACHE[handle]
    if handle == RandConvPyramid.name:
        ext = RandConvPyramid()
    elif isinstance(handle, str) and handle.startswith("external:"):
        obj = torch.load(handle.split(":", 1)[1], weights_only=False)
        if not callable(obj):
            raise ArgumentError(f"external extractor {handle!r} is not callable")
        ext = obj
    else:
        raise ArgumentError(f"unknown extractor handle {handle!r}")
    _EXTRACTOR_CACHE[handle] = ext
    return ext


def perceptual_loss(img_a: torch.Tensor, img_b: torch.Tensor, extractor=None) -> torch.Tensor:
    """Sum over extractor levels of feature-map MSE."""
    _check_same_shape(img_a, img_b, "perceptual images")
    extractor = get_extractor(extractor or "builtin-rand-pyramid")
    fa = extractor(img_a)
    fb = extractor(img_b)
    total = None
    for a, b in zip(fa, fb):
        term = ((a - b) ** 2).mean()
        total = term if total is None else total + term
    return total


def pixel_refine_loss(i_fine: torch.Tensor, i_coarse: torch.Tensor,
                      lambda_lp: float = 0.01, extractor=None) -> torch.Tensor:
    """MSE + lambda_lp * perceptual, with the refined image as a frozen target."""
    target = i_fine.detach()
    mse = ((target - i_coarse) ** 2).mean()
    return mse + lambda_lp * perceptual_loss(target, i_coarse, extractor)
