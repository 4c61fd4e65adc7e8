"""Procedural figure scenes: articulated capsule/sphere "manikins" with flat
part colors, multi-view renders (48 uniform azimuths by default), body-ratio
crop augmentation, and the on-disk dataset the toy priors train on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .cameras import CameraPose
from .diffusion import VOCAB, tokens_to_multihot
from .errors import ArgumentError
from .fileio import digest_arrays, dump_json, load_json, read_pfm, read_png, write_pfm, write_png
from .meshes import IsoMesh, mesh_from_sdf_grid
from .raster import rasterize_mesh
from .sampler import Keypoints3D
from .training import PriorDataset
from .views import encode_depth_map, encode_normal_map

PALETTE = {
    "red": (0.78, 0.22, 0.20), "green": (0.25, 0.62, 0.28), "blue": (0.23, 0.38, 0.76),
    "yellow": (0.87, 0.78, 0.22), "purple": (0.52, 0.30, 0.65), "orange": (0.88, 0.52, 0.18),
    "teal": (0.18, 0.60, 0.60), "pink": (0.88, 0.52, 0.65), "gray": (0.48, 0.48, 0.50),
    "tan": (0.82, 0.66, 0.50),
}

DATASET_DISTANCE = 3.2
DATASET_FOV = 22.5
DATASET_ELEVATION = 10.0


@dataclass
class Part:
    name: str
    a: np.ndarray  # capsule segment start (== b for spheres)
    b: np.ndarray
    radius: float
    color_word: str

    @property
    def color(self):
        return np.asarray(PALETTE[self.color_word], dtype=np.float32)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        ab = self.b - self.a
        denom = float(ab @ ab)
        if denom < 1e-12:
            return np.linalg.norm(p - self.a, axis=-1) - self.radius
        t = np.clip(((p - self.a) @ ab) / denom, 0.0, 1.0)
        proj = self.a + t[..., None] * ab
        return np.linalg.norm(p - proj, axis=-1) - self.radius


@dataclass
class SyntheticScene:
    seed: int
    parts: list
    descriptor: tuple  # closed-vocabulary tokens
    gt_mesh: IsoMesh
    gt_anchors: Keypoints3D
    face_colors: np.ndarray  # (F,3) for the gt_mesh

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min(np.stack([part.sdf(p) for part in self.parts]), axis=0)

    def color_at(self, p: np.ndarray) -> np.ndarray:
        d = np.stack([part.sdf(p) for part in self.parts])
        owner = np.argmin(d, axis=0)
        colors = np.stack([part.color for part in self.parts])
        return colors[owner]

    def digest(self) -> str:
        return digest_arrays(self.gt_mesh.vertices, self.gt_mesh.faces, self.face_colors,
                             np.frombuffer(" ".join(self.descriptor).encode(), dtype=np.uint8))


def generate_scene(seed: int, mc_res: int = 96, bound: float = 1.0) -> SyntheticScene:
    """Deterministic articulated figure: torso, head, two arms, two legs, and an
    optional held prop sphere. Limb angles stay inside joint limits so parts
    only overlap at their joints."""
    rng = np.random.default_rng(seed)
    family = "slim" if rng.random() < 0.5 else "wide"
    color_words = list(PALETTE)
    torso_w, limb_w, head_w, prop_w = (color_words[i] for i in rng.choice(len(color_words), 4, replace=False))

    torso_r = rng.uniform(0.085, 0.105) if family == "slim" else rng.uniform(0.115, 0.145)
    torso_bottom = np.array([0.0, -0.08, 0.0])
    torso_top = np.array([0.0, 0.22, 0.0])
    parts = [Part("torso", torso_bottom, torso_top, torso_r, torso_w)]

    head_r = rng.uniform(0.075, 0.095)
    head_c = torso_top + np.array([0.0, 0.035 + head_r, 0.0])
    parts.append(Part("head", head_c, head_c, head_r, head_w))

    arm_r = rng.uniform(0.034, 0.044)
    arm_len = rng.uniform(0.26, 0.33)
    for side in (-1.0, 1.0):
        shoulder = np.array([side * (torso_r + 0.6 * arm_r), 0.19, 0.0])
        abduct = np.radians(rng.uniform(18.0, 55.0))
        tilt = np.radians(rng.uniform(-12.0, 12.0))
        direction = np.array([side * np.sin(abduct) * np.cos(tilt), -np.cos(abduct), np.sin(tilt)])
        name = "arm_l" if side < 0 else "arm_r"
        parts.append(Part(name, shoulder, shoulder + arm_len * direction, arm_r, limb_w))

    leg_r = rng.uniform(0.042, 0.055)
    leg_len = rng.uniform(0.32, 0.40)
    for side in (-1.0, 1.0):
        hip = np.array([side * 0.55 * torso_r, -0.07, 0.0])
        splay = np.radians(rng.uniform(2.0, 16.0))
        direction = np.array([side * np.sin(splay), -np.cos(splay), 0.0])
        name = "leg_l" if side < 0 else "leg_r"
        parts.append(Part(name, hip, hip + leg_len * direction, leg_r, limb_w))

    has_prop = rng.random() < 0.5
    if has_prop:
        hand = parts[2 if rng.random() < 0.5 else 3]
        prop_r = rng.uniform(0.05, 0.075)
        center = hand.b + np.array([0.0, -prop_r * 0.7, 0.0])
        parts.append(Part("prop", center, center, prop_r, prop_w))

    descriptor = (family, torso_w, limb_w, head_w) + (("prop",) if has_prop else ())

    scene = SyntheticScene(seed, parts, descriptor, None, None, None)
    axis = np.linspace(-bound, bound, mc_res + 1, dtype=np.float64)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    sdf = scene.sdf(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    mesh = mesh_from_sdf_grid(sdf, bound).largest_component()
    scene.gt_mesh = mesh
    scene.face_colors = scene.color_at(mesh.face_corners().mean(axis=1)).astype(np.float32)

    hips = np.array([0.0, -0.07, 0.0])
    lo, hi = mesh.bbox()
    scene.gt_anchors = Keypoints3D({
        "full": (lo + hi) / 2.0,
        "head": head_c,
        "upper": np.array([0.0, 0.13, 0.0]),
        "lower": hips + np.array([0.0, -0.5 * leg_len, 0.0]),
    })
    return scene


@dataclass
class ViewRecord:
    rgb: np.ndarray  # (H,W,3)
    mask: np.ndarray  # (H,W) {0,1}
    depth: np.ndarray  # (H,W)
    normal: np.ndarray  # (H,W,3) camera space
    camera: CameraPose
    crop: str = "full"
    descriptor: tuple = ()


def render_views(scene: SyntheticScene, n_views: int = 48, resolution: int = 128,
                 elevation: float = DATASET_ELEVATION, distance: float = DATASET_DISTANCE,
                 fov: float = DATASET_FOV) -> list:
    """Uniform-azimuth rig renders of the ground-truth mesh, all channels."""
    records = []
    for k in range(n_views):
        camera = CameraPose(distance, elevation, k * 360.0 / n_views, fov, (0.0, 0.0, 0.0), resolution)
        view = rasterize_mesh(scene.gt_mesh, camera, face_colors=scene.face_colors, background=1.0)
        alpha = view.alpha.numpy()
        mask = (alpha > 0.5).astype(np.float32)
        records.append(ViewRecord(
            rgb=view.rgb.numpy(),
            mask=mask,
            depth=view.depth.numpy() * mask,
            normal=view.normal.numpy(),
            camera=camera,
            crop="full",
            descriptor=scene.descriptor,
        ))
    return records


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    yi = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    xi = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return img[yi][:, xi]


def crop_augment(view: ViewRecord, mode: str, rng: np.random.Generator) -> ViewRecord:
    """Crop at half or three-quarters of the figure's vertical mask extent
    (measured from the top), re-pad to square, rescale to the original size."""
    fracs = {"half": 0.5, "three-quarter": 0.75}
    if mode not in fracs:
        raise ArgumentError(f"crop mode must be one of {sorted(fracs)}, got {mode!r}")
    rows = np.where(view.mask.max(axis=1) > 0.5)[0]
    if len(rows) == 0:
        raise ArgumentError("cannot crop a view with an empty mask")
    top, bottom = int(rows[0]), int(rows[-1])
    jitter = float(rng.uniform(-0.5, 0.5))
    cut = int(round(top + fracs[mode] * (bottom - top) + jitter))
    cut = max(top + 1, min(cut, view.mask.shape[0]))
    size = view.mask.shape[0]

    def crop_pad(arr, fill):
        kept = arr[:cut]
        pad_shape = (size - cut,) + arr.shape[1:]
        padded = np.concatenate([kept, np.full(pad_shape, fill, dtype=arr.dtype)], axis=0)
        return _resize_nearest(padded, size)

    return ViewRecord(
        rgb=crop_pad(view.rgb, 1.0),
        mask=crop_pad(view.mask, 0.0),
        depth=crop_pad(view.depth, 0.0),
        normal=crop_pad(view.normal, 0.0),
        camera=view.camera,
        crop=mode,
        descriptor=tuple(view.descriptor) + (mode,),
    )


# ---------------------------------------------------------------------------
# On-disk dataset


def build_prior_dataset(n_scenes: int, out_dir, n_views: int = 48, resolution: int = 64,
                        seed: int = 0, crop_prob: float = 0.25, mc_res: int = 80,
                        null_prob: float = 0.10, scene_seed_offset: int = 0,
                        progress=None) -> Path:
    """Render scenes to out_dir and write a manifest.

    Layout: scene_####/view_##.png|mask_##.png|depth_##.pfm|normal_##.pfm (crops
    get a mode suffix). Manifest rows carry file names, descriptors, cameras,
    view3d pairing (reference view 0, relative azimuth), and a null-condition
    flag on ~10% of rows for classifier-free-guidance training.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for si in range(n_scenes):
        scene = generate_scene(scene_seed_offset + si, mc_res=mc_res)
        sdir = out / f"scene_{si:04d}"
        sdir.mkdir(exist_ok=True)
        records = render_views(scene, n_views=n_views, resolution=resolution)
        for vi, rec in enumerate(records):
            variants = [("", rec)]
            if vi > 0 and rng.random() < crop_prob:
                mode = "half" if rng.random() < 0.5 else "three-quarter"
                variants.append((f"_{mode}", crop_augment(rec, mode, rng)))
            for suffix, r in variants:
                base = f"{vi:02d}{suffix}"
                write_png(sdir / f"view_{base}.png", r.rgb)
                write_png(sdir / f"mask_{base}.png", r.mask)
                write_pfm(sdir / f"depth_{base}.pfm", r.depth)
                write_pfm(sdir / f"normal_{base}.pfm", r.normal)
                rows.append({
                    "scene": si,
                    "view": vi,
                    "crop": r.crop,
                    "files": {
                        "rgb": f"scene_{si:04d}/view_{base}.png",
                        "mask": f"scene_{si:04d}/mask_{base}.png",
                        "depth": f"scene_{si:04d}/depth_{base}.pfm",
                        "normal": f"scene_{si:04d}/normal_{base}.pfm",
                    },
                    "descriptor": list(r.descriptor),
                    "camera": {"distance": r.camera.distance, "elevation": r.camera.elevation,
                               "azimuth": r.camera.azimuth, "fov": r.camera.fov,
                               "image_size": r.camera.image_size},
                    "rel_azimuth": (vi * 360.0 / n_views) % 360.0,
                    "ref_view": 0,
                    "null_flag": bool(rng.random() < null_prob),
                    "digest": digest_arrays(r.rgb, r.mask, r.depth, r.normal),
                })
        if progress is not None:
            progress(si + 1, n_scenes)
    manifest = {
        "n_scenes": n_scenes,
        "n_views": n_views,
        "resolution": resolution,
        "seed": seed,
        "scene_seed_offset": scene_seed_offset,
        "rows": rows,
        "digest": digest_arrays(np.frombuffer(
            json.dumps([r["digest"] for r in rows]).encode(), dtype=np.uint8)),
    }
    dump_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_prior_dataset(manifest_path, kind: str, image_size: int = None) -> PriorDataset:
    """Assemble the in-memory training set a given prior kind expects."""
    manifest = load_json(Path(manifest_path))
    base = Path(manifest_path).parent
    rows = manifest["rows"]
    full_rows = [r for r in rows if r["crop"] == "full"]

    def load_rgb(row):
        return read_png(base / row["files"]["rgb"])

    def maybe_resize(img):
        if image_size is None or img.shape[0] == image_size:
            return img
        return _resize_nearest(img, image_size)

    def multihot(row):
        toks = tuple(row["descriptor"])
        return np.zeros(len(VOCAB), dtype=np.float32) if row["null_flag"] else tokens_to_multihot(toks)

    if kind in ("rgb2d", "refiner"):
        images = np.stack([maybe_resize(load_rgb(r)) for r in rows])
        mh = np.stack([multihot(r) for r in rows])
        if kind == "rgb2d":
            return PriorDataset(images, mh)
        # the refiner conditions on a degraded (blurred) version of its target
        cond = np.stack([_degrade(im) for im in images])
        return PriorDataset(images, mh, cond_images=cond)
    if kind == "view3d":
        refs = {}
        for r in full_rows:
            if r["view"] == 0:
                refs[r["scene"]] = maybe_resize(load_rgb(r))
        images, mh, ref_images, rel = [], [], [], []
        for r in full_rows:
            images.append(maybe_resize(load_rgb(r)))
            mh.append(multihot(r))
            ref_images.append(refs[r["scene"]])
            rel.append((0.0, r["rel_azimuth"], 0.0))
        return PriorDataset(np.stack(images), np.stack(mh), ref_images=np.stack(ref_images),
                            rel_cameras=np.asarray(rel, dtype=np.float32))
    if kind == "normal":
        images, mh = [], []
        for r in full_rows:
            n = read_pfm(base / r["files"]["normal"])
            images.append(maybe_resize(encode_normal_map(torch.from_numpy(n)).numpy()))
            mh.append(multihot(r))
        return PriorDataset(np.stack(images), np.stack(mh))
    if kind == "depth":
        images, mh = [], []
        for r in full_rows:
            d = read_pfm(base / r["files"]["depth"])
            m = read_png(base / r["files"]["mask"])
            cam = CameraPose(r["camera"]["distance"], r["camera"]["elevation"],
                             r["camera"]["azimuth"], r["camera"]["fov"],
                             (0, 0, 0), r["camera"]["image_size"])
            enc = encode_depth_map(torch.from_numpy(d), torch.from_numpy(m), cam).numpy()
            images.append(maybe_resize(enc))
            mh.append(multihot(r))
        return PriorDataset(np.stack(images), np.stack(mh))
    raise ArgumentError(f"unknown prior kind {kind!r}")


def _degrade(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Box-downsample then nearest-upsample: the 'coarse render' stand-in the
    refiner learns to sharpen."""
    h, w = img.shape[:2]
    hh, ww = h // factor, w // factor
    small = img[: hh * factor, : ww * factor].reshape(hh, factor, ww, factor, -1).mean(axis=(1, 3))
    return _resize_nearest(small, h).astype(np.float32)
