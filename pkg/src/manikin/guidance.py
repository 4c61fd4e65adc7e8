"""Score-distillation gradients and the shared-noise multi-view mechanism.

The distillation gradient is omega(t) * (eps_hat - eps), computed with no autodiff
through the denoiser and injected into the render via a pseudo-loss; the caller's
autodiff then chains it through dI/dtheta. Model parameters never accumulate
gradients from these ops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .diffusion import Conditions, forward_diffuse, predict_noise_cfg
from .errors import ArgumentError

MAX_CONCAT_WIDTH = 4096


@dataclass
class GuidanceConfig:
    lambda_2d: float = 0.1
    lambda_3d: float = 0.1
    cfg_scale: float = 20.0
    t_min: float = 0.02
    t_max: float = 0.8

    def __post_init__(self):
        if self.lambda_2d < 0 or self.lambda_3d < 0:
            raise ArgumentError("guidance weights must be >= 0")
        if self.cfg_scale < 1.0:
            raise ArgumentError("cfg_scale must be >= 1")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ArgumentError(f"need 0 <= t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")

    def sample_t(self, rng: torch.Generator) -> float:
        return self.t_min + (self.t_max - self.t_min) * float(torch.rand((), generator=rng))


def _predict(model, x_t, t, cond, cfg_scale):
    # mock seam: anything with .predict_cfg bypasses the real denoiser
    custom = getattr(model, "predict_cfg", None)
    if callable(custom):
        return custom(x_t, t, cond, cfg_scale)
    return predict_noise_cfg(model, x_t, t, cond, cfg_scale)


def sds_pixel_grad(model, image: torch.Tensor, cond: Conditions, t: float,
                   eps: torch.Tensor, schedule, *, cfg_scale: float = 1.0,
                   t_range=None) -> torch.Tensor:
    """omega(t) * (eps_hat(x_t) - eps), detached from both model and image."""
    if t_range is not None and not (t_range[0] <= t <= t_range[1]):
        raise ArgumentError(f"t={t} outside guidance range {tuple(t_range)}")
    with torch.no_grad():
        x_t = forward_diffuse(image.detach(), t, eps, schedule)
        eps_hat = _predict(model, x_t, t, cond, cfg_scale)
        return schedule.omega(t) * (eps_hat - eps)


def sds_pixel_grad_3d(model, image: torch.Tensor, ref_image: torch.Tensor, rel_camera,
                      cond, t: float, eps: torch.Tensor, schedule, *,
                      cfg_scale: float = 1.0, t_range=None) -> torch.Tensor:
    """View-conditioned variant: the reference image and relative camera ride along."""
    text = cond.text if isinstance(cond, Conditions) else cond
    full = Conditions(text=text, ref_image=ref_image, rel_camera=tuple(rel_camera))
    return sds_pixel_grad(model, image, full, t, eps, schedule,
                          cfg_scale=cfg_scale, t_range=t_range)


def apply_pixel_grad(image: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Pseudo-loss whose backward sends `grad` into `image`'s graph."""
    return (grad.detach() * image).sum()


def hybrid_guidance_step(render_fn, cameras, job, models: dict, config: GuidanceConfig,
                         rng: torch.Generator, schedule=None) -> dict:
    """One hybrid 2D+3D distillation step over a camera batch.

    Renders each camera through `render_fn`, forms lambda_2d * L2D + lambda_3d * L3D
    with one shared t draw and per-branch noise draws, and backpropagates into
    whatever parameters the renders depend on. Returns a scalar log record.
    Noise draws happen regardless of zero weights so the rng stream is stable.
    """
    if schedule is None:
        schedule = models["rgb2d"].schedule if "rgb2d" in models else models["view3d"].schedule
    t = config.sample_t(rng)
    t_range = (config.t_min, config.t_max)
    total = None
    g2_norm = g3_norm = 0.0
    for camera in cameras:
        image = render_fn(camera)
        eps_2d = torch.randn(image.shape, generator=rng, dtype=image.dtype)
        eps_3d = torch.randn(image.shape, generator=rng, dtype=image.dtype)
        if config.lambda_2d > 0:
            g2 = sds_pixel_grad(models["rgb2d"], image, Conditions(text=job.text), t,
                                eps_2d, schedule, cfg_scale=config.cfg_scale, t_range=t_range)
            term = config.lambda_2d * apply_pixel_grad(image, g2)
            total = term if total is None else total + term
            g2_norm += float(g2.norm())
        if config.lambda_3d > 0:
            rel = camera.relative_to(job.ref_camera)
            ref = job.ref_image_t(image.shape[0])
            g3 = sds_pixel_grad_3d(models["view3d"], image, ref, rel,
                                   Conditions(text=job.text), t, eps_3d, schedule,
                                   cfg_scale=config.cfg_scale, t_range=t_range)
            term = config.lambda_3d * apply_pixel_grad(image, g3)
            total = term if total is None else total + term
            g3_norm += float(g3.norm())
    if total is not None and total.requires_grad:
        total.backward()
    return {
        "t": t,
        "sds_2d_grad_norm": g2_norm,
        "sds_3d_grad_norm": g3_norm,
        "loss_proxy": float(total.detach()) if total is not None else 0.0,
    }


def shared_noise_multiview(model, images, t: float, cond: Conditions,
                           rng: torch.Generator, *, cfg_scale: float = 1.0):
    """Denoise K views with one shared noise tile via horizontal concatenation.

    One eps of a single view's shape is drawn and replicated to every view; the
    views are concatenated along width, denoised in a single predict call, and
    split back in order. Returns (K noise estimates, the shared eps tile).
    """
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) != 1:
        raise ArgumentError(f"all views must share one shape, got {sorted(shapes)}")
    h, w, c = images[0].shape
    k = len(images)
    if k * w > MAX_CONCAT_WIDTH:
        raise ArgumentError(f"concatenated width {k * w} exceeds maximum {MAX_CONCAT_WIDTH}")
    eps = torch.randn(h, w, c, generator=rng, dtype=images[0].dtype)
    with torch.no_grad():
        wide = torch.cat([im.detach() for im in images], dim=1)
        eps_wide = torch.cat([eps] * k, dim=1)
        x_t = forward_diffuse(wide, t, eps_wide, model.schedule)
        est_wide = _predict(model, x_t, t, cond, cfg_scale)
    return [est_wide[:, i * w : (i + 1) * w] for i in range(k)], eps


class GuidanceLogger:
    """Newline-delimited JSON log of per-step scalars."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def append(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
