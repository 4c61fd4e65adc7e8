"""RenderedView: the common output record of the volume renderer and rasterizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

ALL_CHANNELS = ("rgb", "alpha", "depth", "normal")

# depth/normals are undefined where coverage is this low; excluded from losses
ALPHA_CUTOFF = 0.05


@dataclass
class RenderedView:
    """Camera-parameterized render. Channels are HxW(x3) torch tensors.

    `rgb` in [0,1] composited over a constant background; `alpha` in [0,1];
    `depth` is camera-ray distance, 0 where alpha < 0.05; `normal` is unit-length
    in camera space where alpha > 0.5, zero on background. Channels that were
    not requested are None.
    """

    camera: object
    rgb: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    depth: Optional[torch.Tensor] = None
    normal: Optional[torch.Tensor] = None

    @property
    def image_size(self) -> int:
        return self.camera.image_size

    def detached(self) -> "RenderedView":
        take = lambda t: None if t is None else t.detach()
        return RenderedView(self.camera, take(self.rgb), take(self.alpha),
                            take(self.depth), take(self.normal))

    def numpy(self):
        take = lambda t: None if t is None else t.detach().cpu().numpy()
        return {
            "rgb": take(self.rgb),
            "alpha": take(self.alpha),
            "depth": take(self.depth),
            "normal": take(self.normal),
        }


def encode_depth_map(depth, mask, camera) -> torch.Tensor:
    """Ray depth -> single-channel [0,1] image (nearer is brighter, background 0).

    Uses the fixed near/far interval around the camera distance so renders and
    dataset images share one encoding.
    """
    near = camera.distance - 1.5
    far = camera.distance + 1.5
    d = depth if torch.is_tensor(depth) else torch.as_tensor(depth)
    m = mask if torch.is_tensor(mask) else torch.as_tensor(mask)
    enc = ((far - d) / (far - near)).clamp(0.0, 1.0) * m
    return enc.unsqueeze(-1) if enc.dim() == 2 else enc


def encode_normal_map(normal) -> torch.Tensor:
    """Unit camera-space normals -> [0,1] RGB."""
    n = normal if torch.is_tensor(normal) else torch.as_tensor(normal)
    return n * 0.5 + 0.5
