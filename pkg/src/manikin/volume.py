"""Differentiable volume rendering of density/color fields.

Standard transmittance compositing: w_i = T_i * (1 - exp(-sigma_i * delta_i))
with stratified-uniform samples over a fixed near/far interval around the
camera distance. Everything is a pure function of its inputs.
"""

from __future__ import annotations

import torch

from .cameras import CameraPose, generate_rays, world_to_camera_normals
from .errors import ArgumentError, DegenerateFieldError
from .fields import field_params_finite
from .views import ALL_CHANNELS, ALPHA_CUTOFF, RenderedView

# half-width of the sampled depth interval around the camera distance, scene units
RAY_INTERVAL = 1.5
# density-gradient normals are only evaluated where a sample carries weight
NORMAL_WEIGHT_CUTOFF = 1e-3


def ray_interval(camera: CameraPose):
    near = max(camera.distance - RAY_INTERVAL, 1e-3)
    far = camera.distance + RAY_INTERVAL
    return near, far


def volume_render(field, camera: CameraPose, n_samples_per_ray: int = 32, *,
                  channels=ALL_CHANNELS, background=1.0, rng=None,
                  pixel_idx=None) -> RenderedView:
    """Render a field from a camera; differentiable w.r.t. field parameters.

    `rng` (torch.Generator) enables stratified jitter; without it samples sit at
    bin midpoints. `pixel_idx` restricts rendering to a flat subset of pixels,
    in which case channel tensors come back as (N,) / (N,3) instead of (H,W,...).
    """
    if n_samples_per_ray <= 0:
        raise ArgumentError(f"n_samples_per_ray must be positive, got {n_samples_per_ray}")
    if not field_params_finite(field):
        raise DegenerateFieldError("degenerate field: non-finite parameters")
    channels = set(channels)

    origins, dirs = generate_rays(camera, pixel_idx=pixel_idx)
    n_rays = origins.shape[0]
    near, far = ray_interval(camera)
    width = (far - near) / n_samples_per_ray
    edges = torch.linspace(near, far, n_samples_per_ray + 1, dtype=origins.dtype)
    if rng is None:
        offsets = torch.full((n_rays, n_samples_per_ray), 0.5)
    else:
        offsets = torch.rand(n_rays, n_samples_per_ray, generator=rng)
    t = edges[:-1] + offsets * width  # (R, S)

    points = origins[:, None, :] + dirs[:, None, :] * t[..., None]
    flat = points.reshape(-1, 3)

    need_rgb = "rgb" in channels
    if need_rgb:
        sigma, rgb_samples = field.query(flat)
        rgb_samples = rgb_samples.reshape(n_rays, n_samples_per_ray, 3)
    else:
        sigma = field.query_density(flat)
    if not torch.isfinite(sigma).all():
        raise DegenerateFieldError("degenerate field: non-finite densities")
    sigma = sigma.reshape(n_rays, n_samples_per_ray)

    alpha_i = 1.0 - torch.exp(-sigma * width)
    trans = torch.cumprod(torch.cat([torch.ones(n_rays, 1), 1.0 - alpha_i + 1e-10], dim=1), dim=1)[:, :-1]
    weights = trans * alpha_i  # (R, S), sum <= 1 per ray
    acc = weights.sum(dim=1).clamp(0.0, 1.0)

    view = RenderedView(camera)
    if "alpha" in channels:
        view.alpha = acc
    if need_rgb:
        rgb = (weights[..., None] * rgb_samples).sum(dim=1)
        view.rgb = rgb + (1.0 - acc[..., None]) * background
        if not torch.isfinite(view.rgb).all():
            raise DegenerateFieldError("degenerate field: non-finite colors")
    if "depth" in channels:
        expected = (weights * t).sum(dim=1) / acc.clamp_min(1e-8)
        view.depth = torch.where(acc > ALPHA_CUTOFF, expected, torch.zeros_like(expected))
    if "normal" in channels:
        with torch.no_grad():
            active = weights > NORMAL_WEIGHT_CUTOFF
        flat_active = active.reshape(-1)
        normals_flat = torch.zeros(flat.shape[0], 3, dtype=flat.dtype)
        if flat_active.any():
            normals_flat[flat_active] = field.density_normals(flat[flat_active])
        sample_normals = normals_flat.reshape(n_rays, n_samples_per_ray, 3)
        n_acc = (weights[..., None] * sample_normals).sum(dim=1)
        n_cam = world_to_camera_normals(n_acc, camera)
        norm = n_cam.norm(dim=-1, keepdim=True)
        unit = n_cam / norm.clamp_min(1e-12)
        view.normal = torch.where(norm > 1e-6, unit, torch.zeros_like(unit))

    if pixel_idx is None:
        n = camera.image_size
        if view.rgb is not None:
            view.rgb = view.rgb.reshape(n, n, 3)
        if view.alpha is not None:
            view.alpha = view.alpha.reshape(n, n)
        if view.depth is not None:
            view.depth = view.depth.reshape(n, n)
        if view.normal is not None:
            view.normal = view.normal.reshape(n, n, 3)
    return view
