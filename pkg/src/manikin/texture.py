"""UV parameterization and differentiable texel sampling.

Faces are projected along their dominant normal axis, clustered into charts by
same-bin edge connectivity (self-overlapping clusters fall back to per-face
charts), and shelf-packed into the atlas with a one-texel gutter. Baking fills
uncovered texels from their nearest covered texel to keep bilinear reads at
chart borders seam-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components

from .errors import ArgumentError, AtlasOverflowError
from .fileio import read_blob, write_blob, write_obj, write_png
from .meshes import IsoMesh

_AXIS_UV = {0: (1, 2), 1: (0, 2), 2: (0, 1)}  # dominant axis -> projection axes


@dataclass
class TexturedMesh:
    """IsoMesh plus a packed UV atlas and a float texture.

    `uv` is per-face-corner in [0,1]^2; `texel_face`/`texel_bary` record which
    face owns each covered texel (for baking and coverage audits);
    `face_rect` is each face's chart rectangle in texel units (for clamped reads).
    """

    mesh: IsoMesh
    uv: np.ndarray  # (F,3,2)
    texture: torch.Tensor  # (T,T,3)
    texel_coverage: np.ndarray  # (T,T) bool
    texel_face: np.ndarray  # (T,T) int64, -1 where uncovered
    texel_bary: np.ndarray  # (T,T,3) float32
    face_rect: np.ndarray  # (F,4) texel-space [x0,y0,x1,y1] of the owning chart

    @property
    def vertices(self):
        return self.mesh.vertices

    @property
    def faces(self):
        return self.mesh.faces

    @property
    def n_faces(self):
        return self.mesh.n_faces

    def vertex_normals(self):
        return self.mesh.vertex_normals()

    @property
    def texture_size(self) -> int:
        return self.texture.shape[0]

    def sample_at(self, face_ids, weights: torch.Tensor) -> torch.Tensor:
        """Bilinear texture colors for (face, barycentric) pairs; differentiable
        w.r.t. the texture and the weights."""
        uv_tab = torch.as_tensor(self.uv, dtype=weights.dtype)
        fidx = torch.as_tensor(np.asarray(face_ids), dtype=torch.long)
        uv = (weights[:, :, None] * uv_tab[fidx]).sum(dim=1)
        return sample_texture_uv(self, fidx, uv)

    def with_texture(self, texture: torch.Tensor) -> "TexturedMesh":
        return TexturedMesh(self.mesh, self.uv, texture, self.texel_coverage,
                            self.texel_face, self.texel_bary, self.face_rect)

    def save(self, stem) -> None:
        """Write <stem>.obj + <stem>.png (8-bit) + <stem>.tex (full-float atlas)."""
        stem = Path(stem)
        tex = self.texture.detach().clamp(0, 1).numpy()
        write_png(stem.with_suffix(".png"), tex)
        write_obj(stem.with_suffix(".obj"), self.mesh.vertices, self.mesh.faces,
                  uvs=self.uv, normals=self.mesh.vertex_normals(),
                  texture_png=stem.with_suffix(".png").name)
        write_blob(stem.with_suffix(".tex"), b"GMTX", [self.texture_size, self.n_faces, 1], {
            "texture": tex,
            "uv": self.uv,
            "coverage": self.texel_coverage.astype(np.float32),
            "texel_face": self.texel_face.astype(np.float32),
            "texel_bary": self.texel_bary,
            "face_rect": self.face_rect.astype(np.float32),
            "vertices": self.mesh.vertices,
            "faces": self.mesh.faces.astype(np.float32),
        })

    @classmethod
    def load(cls, stem) -> "TexturedMesh":
        _, arrays = read_blob(Path(stem).with_suffix(".tex"), b"GMTX")
        mesh = IsoMesh(arrays["vertices"], arrays["faces"].astype(np.int64))
        return cls(mesh, arrays["uv"].reshape(-1, 3, 2),
                   torch.from_numpy(arrays["texture"]),
                   arrays["coverage"] > 0.5,
                   arrays["texel_face"].astype(np.int64),
                   arrays["texel_bary"],
                   arrays["face_rect"].astype(np.int64))


def sample_texture_uv(tm: TexturedMesh, face_ids: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample at continuous UV, clamped into each face's chart rect."""
    t_size = tm.texture_size
    rect = torch.as_tensor(tm.face_rect, dtype=uv.dtype)[face_ids]
    p = uv * t_size - 0.5
    px = p[:, 0].clamp(min=0.0, max=t_size - 1.0)
    py = p[:, 1].clamp(min=0.0, max=t_size - 1.0)
    px = torch.minimum(torch.maximum(px, rect[:, 0]), rect[:, 2])
    py = torch.minimum(torch.maximum(py, rect[:, 1]), rect[:, 3])
    x0 = px.floor()
    y0 = py.floor()
    fx = (px - x0).unsqueeze(-1)
    fy = (py - y0).unsqueeze(-1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=t_size - 1)
    y1l = (y0l + 1).clamp(max=t_size - 1)
    tex = tm.texture
    c00 = tex[y0l, x0l]
    c10 = tex[y0l, x1l]
    c01 = tex[y1l, x0l]
    c11 = tex[y1l, x1l]
    return (c00 * (1 - fx) * (1 - fy) + c10 * fx * (1 - fy)
            + c01 * (1 - fx) * fy + c11 * fx * fy)


def sample_texture(tm: TexturedMesh, face_id: int, barycentric) -> torch.Tensor:
    """Color at one (face, barycentric) location."""
    w = torch.as_tensor(barycentric, dtype=torch.float32)[None]
    return tm.sample_at(np.array([face_id]), w)[0]


# ---------------------------------------------------------------------------
# Unwrap


def _project_faces(mesh: IsoMesh):
    """Per-face dominant-axis bin (0..5) and projected 2D corners."""
    fn = mesh.face_normals()
    axis = np.argmax(np.abs(fn), axis=1)
    sign = np.take_along_axis(fn, axis[:, None], axis=1)[:, 0] >= 0
    bins = axis * 2 + sign.astype(int)
    tri = mesh.face_corners().astype(np.float64)
    proj = np.empty((mesh.n_faces, 3, 2))
    for a in range(3):
        u, v = _AXIS_UV[a]
        sel = axis == a
        proj[sel, :, 0] = tri[sel, :, u]
        proj[sel, :, 1] = tri[sel, :, v]
    return bins, proj


def _face_clusters(mesh: IsoMesh, bins: np.ndarray) -> np.ndarray:
    """Connected components of same-bin faces sharing an edge."""
    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    face_of_edge = np.repeat(np.arange(mesh.n_faces), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    se, sf = edges[order], face_of_edge[order]
    same = (se[1:] == se[:-1]).all(axis=1)
    fa, fb = sf[:-1][same], sf[1:][same]
    keep = bins[fa] == bins[fb]
    adj = sparse.coo_matrix(
        (np.ones(keep.sum()), (fa[keep], fb[keep])), shape=(mesh.n_faces, mesh.n_faces)
    )
    _, labels = connected_components(adj, directed=False)
    return labels


def _rasterize_uv_triangles(face_ids, corners, t_size, strict_eps=0.0):
    """Texel centers covered by UV-space triangles -> (texel_flat_idx, face_id, bary).

    `corners` are texel-space 2D coordinates. First face in id order wins ties.
    """
    x0 = np.maximum(np.ceil(corners[:, :, 0].min(axis=1) - 1e-9), 0)
    x1 = np.minimum(np.floor(corners[:, :, 0].max(axis=1) + 1e-9), t_size - 1)
    y0 = np.maximum(np.ceil(corners[:, :, 1].min(axis=1) - 1e-9), 0)
    y1 = np.minimum(np.floor(corners[:, :, 1].max(axis=1) + 1e-9), t_size - 1)
    ok = (x1 >= x0) & (y1 >= y0)
    idx = np.where(ok)[0]
    if len(idx) == 0:
        return (np.empty(0, np.int64),) * 2 + (np.empty((0, 3)),)
    x0, x1 = x0[idx].astype(np.int64), x1[idx].astype(np.int64)
    y0, y1 = y0[idx].astype(np.int64), y1[idx].astype(np.int64)
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    counts = w * h
    rep = np.repeat(np.arange(len(idx)), counts)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    off = np.arange(int(counts.sum())) - np.repeat(start, counts)
    tx = np.repeat(x0, counts) + off % np.repeat(w, counts)
    ty = np.repeat(y0, counts) + off // np.repeat(w, counts)
    tri = corners[idx][rep]
    p = np.stack([tx, ty], axis=-1).astype(np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]

    def cross2(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    area = cross2(b - a, c - a)
    nz = np.abs(area) > 1e-15
    inv = np.where(nz, area, 1.0)
    la = cross2(b - p, c - p) / inv
    lb = cross2(c - p, a - p) / inv
    lc = cross2(a - p, b - p) / inv
    inside = nz & (la >= strict_eps) & (lb >= strict_eps) & (lc >= strict_eps)
    tex_flat = ty[inside] * t_size + tx[inside]
    fids = face_ids[idx][rep[inside]]
    bary = np.stack([la[inside], lb[inside], lc[inside]], axis=-1)
    return tex_flat, fids, bary


def _cluster_self_overlaps(face_ids, corners, res=256):
    """True when a projected cluster folds onto itself (a texel center strictly
    inside two faces)."""
    lo = corners.reshape(-1, 2).min(axis=0)
    hi = corners.reshape(-1, 2).max(axis=0)
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1e-9)
    scaled = (corners - lo) / span * (res - 1)
    tex, _, _ = _rasterize_uv_triangles(face_ids, scaled, res, strict_eps=1e-7)
    return len(np.unique(tex)) != len(tex)


def unwrap_uv(mesh: IsoMesh, texture_size: int = 512, min_mean_coverage: float = 4.0) -> TexturedMesh:
    """Build a packed UV atlas; texture starts at zero."""
    if mesh.n_faces == 0:
        raise ArgumentError("cannot unwrap an empty mesh")
    t_size = int(texture_size)
    bins, proj = _project_faces(mesh)
    labels = _face_clusters(mesh, bins)

    charts = []  # list of face-id arrays
    for lab in np.unique(labels):
        fids = np.where(labels == lab)[0]
        if len(fids) > 1 and _cluster_self_overlaps(fids, proj[fids]):
            charts.extend(np.array([f]) for f in fids)
        else:
            charts.append(fids)

    lo = np.array([proj[c].reshape(-1, 2).min(axis=0) for c in charts])
    hi = np.array([proj[c].reshape(-1, 2).max(axis=0) for c in charts])
    sizes = np.maximum(hi - lo, 1e-9)

    total_area = float((sizes[:, 0] * sizes[:, 1]).sum())
    scale = np.sqrt(0.55 * t_size * t_size / max(total_area, 1e-12))
    placement = None
    for _ in range(25):
        placement = _shelf_pack(sizes * scale, t_size, gutter=1)
        if placement is not None:
            break
        scale *= 0.9
    if placement is None:
        raise AtlasOverflowError(
            f"atlas overflow: {len(charts)} charts do not fit a {t_size}x{t_size} "
            "texture; increase texture_size")

    uv = np.zeros((mesh.n_faces, 3, 2), dtype=np.float32)
    face_rect = np.zeros((mesh.n_faces, 4), dtype=np.int64)
    tex_corners = np.zeros((mesh.n_faces, 3, 2))
    for ci, fids in enumerate(charts):
        ox, oy = placement[ci]
        local = (proj[fids] - lo[ci]) * scale  # texel units within chart
        tex_xy = local + np.array([ox, oy])
        tex_corners[fids] = tex_xy
        uv[fids] = ((tex_xy + 0.5) / t_size).astype(np.float32)
        w, h = sizes[ci] * scale
        face_rect[fids] = (ox, oy, ox + int(np.ceil(w)), oy + int(np.ceil(h)))

    tex_flat, fids, bary = _rasterize_uv_triangles(np.arange(mesh.n_faces), tex_corners, t_size)
    order = np.lexsort((fids, tex_flat))
    tex_flat, fids, bary = tex_flat[order], fids[order], bary[order]
    first = np.unique(tex_flat, return_index=True)[1]
    tex_flat, fids, bary = tex_flat[first], fids[first], bary[first]

    coverage = np.zeros(t_size * t_size, dtype=bool)
    coverage[tex_flat] = True
    texel_face = np.full(t_size * t_size, -1, dtype=np.int64)
    texel_face[tex_flat] = fids
    texel_bary = np.zeros((t_size * t_size, 3), dtype=np.float32)
    texel_bary[tex_flat] = bary.astype(np.float32)

    covered_faces = np.unique(fids)
    mean_cov = len(tex_flat) / max(mesh.n_faces, 1)
    if mean_cov < min_mean_coverage:
        raise AtlasOverflowError(
            f"atlas overflow: mean face coverage {mean_cov:.2f} texels < {min_mean_coverage}; "
            "increase texture_size")
    del covered_faces

    return TexturedMesh(
        mesh, uv, torch.zeros(t_size, t_size, 3),
        coverage.reshape(t_size, t_size),
        texel_face.reshape(t_size, t_size),
        texel_bary.reshape(t_size, t_size, 3),
        face_rect,
    )


def _shelf_pack(sizes: np.ndarray, t_size: int, gutter: int = 1):
    """Sort-by-height shelf packing; returns per-chart (x, y) or None if it
    does not fit."""
    w = np.ceil(sizes[:, 0]).astype(np.int64) + 2 * gutter
    h = np.ceil(sizes[:, 1]).astype(np.int64) + 2 * gutter
    if (w > t_size).any() or (h > t_size).any():
        return None
    order = np.argsort(-h, kind="stable")
    pos = [None] * len(sizes)
    x = y = shelf_h = 0
    for i in order:
        if x + w[i] > t_size:
            y += shelf_h
            x = 0
            shelf_h = 0
        if y + h[i] > t_size:
            return None
        pos[i] = (x + gutter, y + gutter)
        x += w[i]
        shelf_h = max(shelf_h, h[i])
    return pos


def chart_overlap_count(tm: TexturedMesh) -> int:
    """Texels strictly inside two different faces (should be zero)."""
    t_size = tm.texture_size
    corners = tm.uv.astype(np.float64) * t_size - 0.5
    tex, fids, _ = _rasterize_uv_triangles(np.arange(tm.n_faces), corners, t_size,
                                           strict_eps=1e-7)
    uniq, counts = np.unique(tex, return_counts=True)
    return int((counts > 1).sum())


def bake_surface_color(mesh: IsoMesh, color_fn, tm: TexturedMesh, chunk: int = 65536) -> TexturedMesh:
    """Fill covered texels with color_fn at their surface points, then flood-fill
    the rest from the nearest covered texel."""
    t_size = tm.texture_size
    cov = tm.texel_coverage.reshape(-1)
    fids = tm.texel_face.reshape(-1)[cov]
    bary = torch.from_numpy(tm.texel_bary.reshape(-1, 3)[cov])
    tri = torch.from_numpy(mesh.vertices[mesh.faces[fids]])
    points = (bary[:, :, None] * tri).sum(dim=1)
    colors = torch.empty(len(points), 3)
    with torch.no_grad():
        for i in range(0, len(points), chunk):
            colors[i : i + chunk] = color_fn(points[i : i + chunk])
    flat = torch.zeros(t_size * t_size, 3)
    flat[torch.from_numpy(np.where(cov)[0])] = colors
    texture = flat.reshape(t_size, t_size, 3)

    # nearest-covered flood fill for gutters and unclaimed texels
    missing = ~tm.texel_coverage
    if missing.any():
        _, (iy, ix) = ndimage.distance_transform_edt(missing, return_indices=True)
        texture = texture[iy, ix]
    return tm.with_texture(texture)
