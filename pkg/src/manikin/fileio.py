"""File formats: PNG images, PFM float maps, Wavefront OBJ, and binary checkpoints.

PFM files are written little-endian (negative scale field). Checkpoints are flat
binary blobs behind a fixed 32-byte header so they stay bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IOFormatError

HEADER_SIZE = 32


# ---------------------------------------------------------------------------
# PNG


def write_png(path, image: np.ndarray) -> None:
    """Write a float image in [0,1] (HxW or HxWx3) as an 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(str(path))


def read_png(path) -> np.ndarray:
    """Read a PNG into float32 in [0,1]; keeps HxW for grayscale, HxWx3 for RGB."""
    img = Image.open(str(path))
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
    return np.asarray(img, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# PFM (portable float map)


def write_pfm(path, data: np.ndarray) -> None:
    """Write HxW (grayscale, 'Pf') or HxWx3 (color, 'PF') float32 data."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise IOFormatError(f"PFM expects HxW or HxWx3 data, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little-endian
        # PFM row order is bottom-to-top
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise IOFormatError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if magic == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    if magic == b"PF":
        data = data.reshape(h, w, 3)
    else:
        data = data.reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


# ---------------------------------------------------------------------------
# Wavefront OBJ


def write_obj(path, vertices, faces, uvs=None, normals=None, texture_png=None) -> None:
    """Write an OBJ mesh. `uvs` is per-face-corner (F,3,2); `normals` per-vertex (V,3).

    When a texture filename is given, a minimal .mtl referencing it is written
    next to the OBJ.
    """
    path = Path(path)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    lines = []
    if texture_png is not None:
        mtl_path = path.with_suffix(".mtl")
        mtl_path.write_text(
            "newmtl material0\nKa 1 1 1\nKd 1 1 1\nmap_Kd %s\n" % texture_png
        )
        lines.append(f"mtllib {mtl_path.name}")
        lines.append("usemtl material0")
    for p in v:
        lines.append("v %.8g %.8g %.8g" % (p[0], p[1], p[2]))
    if normals is not None:
        for n in np.asarray(normals, dtype=np.float64):
            lines.append("vn %.8g %.8g %.8g" % (n[0], n[1], n[2]))
    if uvs is not None:
        uv = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        for t in uv:
            lines.append("vt %.8g %.8g" % (t[0], t[1]))
        for i, face in enumerate(f):
            corners = []
            for c in range(3):
                vi = face[c] + 1
                ti = 3 * i + c + 1
                corners.append(f"{vi}/{ti}/{vi}" if normals is not None else f"{vi}/{ti}")
            lines.append("f " + " ".join(corners))
    else:
        for face in f:
            if normals is not None:
                lines.append("f " + " ".join(f"{i + 1}//{i + 1}" for i in face))
            else:
                lines.append("f " + " ".join(str(i + 1) for i in face))
    path.write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read an OBJ; returns (vertices, faces, uvs or None, normals or None).

    UVs come back per-face-corner (F,3,2), matching the writer.
    """
    verts, norms, coords = [], [], []
    faces, face_uv_idx = [], []
    has_uv = False
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            coords.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            idx = []
            uvi = []
            for tok in parts[1:4]:
                comps = tok.split("/")
                idx.append(int(comps[0]) - 1)
                if len(comps) > 1 and comps[1]:
                    uvi.append(int(comps[1]) - 1)
                    has_uv = True
            faces.append(idx)
            face_uv_idx.append(uvi if len(uvi) == 3 else None)
    vertices = np.asarray(verts, dtype=np.float32)
    faces_arr = np.asarray(faces, dtype=np.int64)
    uvs = None
    if has_uv and coords:
        uv_table = np.asarray(coords, dtype=np.float32)
        uvs = np.zeros((len(faces), 3, 2), dtype=np.float32)
        for i, uvi in enumerate(face_uv_idx):
            if uvi is not None:
                uvs[i] = uv_table[uvi]
    normals = np.asarray(norms, dtype=np.float32) if norms else None
    if normals is not None and len(normals) != len(vertices):
        normals = None
    return vertices, faces_arr, uvs, normals


# ---------------------------------------------------------------------------
# Binary checkpoints: 32-byte header + named float32 arrays


def _pack_header(magic: bytes, fields) -> bytes:
    """Header layout: 4s magic + 7 int32 fields, zero-padded to 32 bytes."""
    if len(magic) != 4:
        raise IOFormatError("checkpoint magic must be 4 bytes")
    vals = list(fields) + [0] * (7 - len(fields))
    return struct.pack("<4s7i", magic, *vals)


def write_blob(path, magic: bytes, fields, arrays: dict) -> None:
    """Write named float32 arrays behind a fixed header, in sorted name order."""
    chunks = [_pack_header(magic, fields)]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        nb = name.encode()
        chunks.append(struct.pack("<i", len(nb)) + nb)
        chunks.append(struct.pack("<i", arr.ndim) + struct.pack(f"<{arr.ndim}i", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_blob(path, magic: bytes):
    """Read a checkpoint written by `write_blob`; returns (fields, arrays)."""
    buf = Path(path).read_bytes()
    got_magic, *fields = struct.unpack_from("<4s7i", buf, 0)
    if got_magic != magic:
        raise IOFormatError(f"bad checkpoint magic in {path}: {got_magic!r} != {magic!r}")
    off = HEADER_SIZE
    arrays = {}
    while off < len(buf):
        (nlen,) = struct.unpack_from("<i", buf, off)
        off += 4
        name = buf[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<i", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}i", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    return list(fields), arrays


# ---------------------------------------------------------------------------
# Digests and JSON


def digest_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def digest_arrays(*arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        arr = np.ascontiguousarray(a)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def digest_file(path) -> str:
    return digest_bytes(Path(path).read_bytes())


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_sanitize_json(obj), indent=2, sort_keys=True, default=_json_default) + "\n")


def _sanitize_json(obj):
    # strict JSON has no inf/nan literals; report them as strings
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _sanitize_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize_json(v) for v in obj]
    return obj


def load_json(path):
    return json.loads(Path(path).read_text())
