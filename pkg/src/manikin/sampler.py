"""Part-aware camera sampling for novel-view guidance.

Most draws frame the whole figure; with fixed probabilities the camera zooms
onto the head or the upper/lower body, recentering the orbit on that part's 3D
anchor. All randomness flows through one numpy Generator with a fixed draw
order (part, distance, elevation, azimuth, fov), so streams are replayable.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .cameras import CameraPose, generate_rays
from .errors import ArgumentError

PART_ORDER = ("full", "head", "upper", "lower")


@dataclass
class SamplerConfig:
    dist_range: tuple = (3.0, 3.5)
    elev_range: tuple = (-10.0, 45.0)
    azim_range: tuple = (-180.0, 180.0)
    fov_range: tuple = (20.0, 25.0)
    part_probs: dict = dc_field(default_factory=lambda: {"full": 0.7, "head": 0.1, "upper": 0.1, "lower": 0.1})
    zoom_head: tuple = (0.8, 1.0)
    zoom_half: tuple = (1.5, 2.0)

    def __post_init__(self):
        total = sum(self.part_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ArgumentError(f"part_probs must sum to 1, got {total}")
        for name, rng_ in (("dist", self.dist_range), ("elev", self.elev_range),
                           ("azim", self.azim_range), ("fov", self.fov_range),
                           ("zoom_head", self.zoom_head), ("zoom_half", self.zoom_half)):
            if rng_[1] < rng_[0]:
                raise ArgumentError(f"{name} range is empty: {rng_}")

    def distance_range(self, part: str) -> tuple:
        if part == "head":
            return self.zoom_head
        if part in ("upper", "lower"):
            return self.zoom_half
        return self.dist_range


@dataclass
class Keypoints3D:
    """Named 3D anchors with visibility flags; `full` must always be present."""

    anchors: dict  # name -> np.ndarray (3,)
    visibility: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if "full" not in self.anchors:
            raise ArgumentError("Keypoints3D requires at least the 'full' anchor")
        self.anchors = {k: np.asarray(v, dtype=np.float64) for k, v in self.anchors.items()}
        for k in self.anchors:
            self.visibility.setdefault(k, True)

    def visible_parts(self):
        return [p for p in PART_ORDER if self.visibility.get(p, False) and p in self.anchors]


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo + (hi - lo) * rng.random())


def sample_camera(config: SamplerConfig, anchors: Keypoints3D, rng: np.random.Generator,
                  image_size: int = 64):
    """Draw one (CameraPose, part label); invisible parts renormalize the rest."""
    parts = anchors.visible_parts()
    if not parts:
        raise ArgumentError("no visible anchors to sample from")
    probs = np.array([config.part_probs.get(p, 0.0) for p in parts])
    total = probs.sum()
    if total <= 0:
        raise ArgumentError("visible anchors all have zero sampling probability")
    probs /= total
    u = rng.random()
    part = parts[int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(parts) - 1))]
    lo, hi = config.distance_range(part)
    distance = _uniform(rng, lo, hi)
    elevation = _uniform(rng, *config.elev_range)
    azimuth = _uniform(rng, *config.azim_range)
    fov = _uniform(rng, *config.fov_range)
    pose = CameraPose(distance, elevation, azimuth, fov,
                      tuple(anchors.anchors[part]), image_size)
    return pose, part


def back_project_keypoints(keypoints2d: dict, render, camera: CameraPose) -> Keypoints3D:
    """Lift named pixel keypoints to 3D anchors through the render's depth.

    Out-of-frame keypoints and keypoints on background (alpha <= 0.5) come back
    with visibility False. A 'full' anchor is synthesized from the silhouette
    centroid when the input has none.
    """
    n = camera.image_size
    depth = render.depth.detach() if torch.is_tensor(render.depth) else torch.as_tensor(render.depth)
    alpha = render.alpha.detach() if torch.is_tensor(render.alpha) else torch.as_tensor(render.alpha)

    kps = dict(keypoints2d)
    if "full" not in kps:
        inside = alpha > 0.5
        if inside.any():
            ys, xs = torch.nonzero(inside, as_tuple=True)
            kps["full"] = (float(xs.float().mean()), float(ys.float().mean()))

    anchors = {"full": np.asarray(camera.look_at, dtype=np.float64)}
    visibility = {"full": True}
    for name, kp in kps.items():
        if len(kp) == 3:  # already a scene-space anchor
            anchors[name] = np.asarray(kp, dtype=np.float64)
            visibility[name] = True
            continue
        x, y = kp
        px, py = int(round(x)), int(round(y))
        if not (0 <= px < n and 0 <= py < n) or float(alpha[py, px]) <= 0.5:
            visibility[name] = False
            continue
        pix = py * n + px
        origin, direction = generate_rays(camera, pixel_idx=[pix])
        point = origin[0] + direction[0] * float(depth[py, px])
        anchors[name] = point.numpy().astype(np.float64)
        visibility[name] = True
    return Keypoints3D(anchors, visibility)


def anchors_from_job(job) -> Keypoints3D:
    """Job keypoints -> 3D anchors, back-projecting pixel pairs through the
    reference depth/mask maps."""
    from .views import RenderedView  # local import to avoid cycles

    ref_view = RenderedView(job.ref_camera,
                            alpha=torch.from_numpy(np.ascontiguousarray(job.ref_mask, dtype=np.float32)),
                            depth=torch.from_numpy(np.ascontiguousarray(job.ref_depth, dtype=np.float32)))
    return back_project_keypoints(job.keypoints, ref_view, job.ref_camera)
