"""ReconstructionJob: the single-image input bundle (image, mask, depth, normal,
camera, text, optional keypoints) with its on-disk structured-text format."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .cameras import CameraPose
from .diffusion import TextCondition
from .errors import ArgumentError, IOFormatError
from .fileio import dump_json, load_json, read_pfm, read_png, write_pfm, write_png


@dataclass
class ReconstructionJob:
    """Everything the pipeline needs about the reference view."""

    ref_image: np.ndarray  # (H,W,3) [0,1]
    ref_mask: np.ndarray  # (H,W) [0,1]
    ref_depth: np.ndarray  # (H,W)
    ref_normal: np.ndarray  # (H,W,3) unit inside mask, camera space
    ref_camera: CameraPose
    text: TextCondition
    keypoints: dict = dc_field(default_factory=dict)  # name -> (x,y) pixels or (x,y,z) scene
    name: str = "job"

    def __post_init__(self):
        shapes = {self.ref_image.shape[:2], self.ref_mask.shape,
                  self.ref_depth.shape, self.ref_normal.shape[:2]}
        if len(shapes) != 1:
            raise ArgumentError(f"reference maps disagree on resolution: {shapes}")
        if float(self.ref_mask.sum()) <= 0:
            raise ArgumentError("reference mask is empty")
        self._cache = {}

    @property
    def resolution(self) -> int:
        return self.ref_image.shape[0]

    def _resized(self, arr: np.ndarray, size: int, is_mask=False) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
        if arr.shape[0] == size:
            return t
        chw = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
        mode = "nearest" if is_mask else "area"
        out = torch.nn.functional.interpolate(chw, size=(size, size), mode=mode)
        return out[0, 0] if t.dim() == 2 else out[0].permute(1, 2, 0)

    def ref_image_t(self, size: Optional[int] = None) -> torch.Tensor:
        size = size or self.resolution
        key = ("image", size)
        if key not in self._cache:
            self._cache[key] = self._resized(self.ref_image, size)
        return self._cache[key]

    def ref_mask_t(self, size: Optional[int] = None) -> torch.Tensor:
        size = size or self.resolution
        key = ("mask", size)
        if key not in self._cache:
            self._cache[key] = self._resized(self.ref_mask, size, is_mask=True)
        return self._cache[key]

    def ref_depth_t(self, size: Optional[int] = None) -> torch.Tensor:
        size = size or self.resolution
        key = ("depth", size)
        if key not in self._cache:
            self._cache[key] = self._resized(self.ref_depth, size, is_mask=True)
        return self._cache[key]

    def ref_normal_t(self, size: Optional[int] = None) -> torch.Tensor:
        size = size or self.resolution
        key = ("normal", size)
        if key not in self._cache:
            self._cache[key] = self._resized(self.ref_normal, size, is_mask=True)
        return self._cache[key]

    def save(self, directory) -> Path:
        """Write the job as PNG/PFM maps plus a structured-text index file."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_png(d / "image.png", self.ref_image)
        write_png(d / "mask.png", self.ref_mask)
        write_pfm(d / "depth.pfm", self.ref_depth)
        write_pfm(d / "normal.pfm", self.ref_normal)
        cam = self.ref_camera
        dump_json(d / "job.json", {
            "image": "image.png",
            "mask": "mask.png",
            "depth": "depth.pfm",
            "normal": "normal.pfm",
            "camera": {
                "distance": cam.distance, "elevation": cam.elevation,
                "azimuth": cam.azimuth, "fov": cam.fov,
                "look_at": list(cam.look_at), "image_size": cam.image_size,
            },
            "keypoints": {k: list(v) for k, v in self.keypoints.items()},
            "prompt": list(self.text.tokens),
            "name": self.name,
        })
        return d / "job.json"

    @classmethod
    def load(cls, job_file) -> "ReconstructionJob":
        path = Path(job_file)
        if path.is_dir():
            path = path / "job.json"
        spec = load_json(path)
        base = path.parent
        try:
            cam = spec["camera"]
            camera = CameraPose(cam["distance"], cam["elevation"], cam["azimuth"],
                                cam.get("fov", 22.5), tuple(cam.get("look_at", (0, 0, 0))),
                                int(cam.get("image_size", 128)))
            return cls(
                ref_image=read_png(base / spec["image"]),
                ref_mask=read_png(base / spec["mask"]),
                ref_depth=read_pfm(base / spec["depth"]),
                ref_normal=read_pfm(base / spec["normal"]),
                ref_camera=camera,
                text=TextCondition.from_tokens(tuple(spec.get("prompt", ()))),
                keypoints={k: tuple(v) for k, v in spec.get("keypoints", {}).items()},
                name=spec.get("name", path.parent.name),
            )
        except KeyError as e:
            raise IOFormatError(f"job file {path} missing key {e}") from None
