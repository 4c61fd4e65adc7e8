"""Implicit fields: a multiresolution hash-grid radiance field and a surface color field.

Density goes through softplus, color through sigmoid. Query points are expected
in [-bound, bound]^3; densities outside the bound are zero.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

# large primes for spatial hashing; the x coordinate is left unmixed on purpose
_HASH_PRIMES = (1, 2654435761, 805459861)


class HashGrid(nn.Module):
    """Multiresolution feature grid with spatial hashing and trilinear interpolation."""

    def __init__(self, n_levels=6, base_res=16, max_res=96, features_per_level=2,
                 table_size_log2=13, bound=1.0):
        super().__init__()
        self.n_levels = n_levels
        self.features_per_level = features_per_level
        self.bound = float(bound)
        self.table_size = 1 << table_size_log2
        if n_levels > 1:
            growth = (max_res / base_res) ** (1.0 / (n_levels - 1))
        else:
            growth = 1.0
        res = [int(round(base_res * growth**i)) for i in range(n_levels)]
        self.resolutions = res
        self.tables = nn.Parameter(torch.empty(n_levels, self.table_size, features_per_level))
        nn.init.uniform_(self.tables, -1e-4, 1e-4)

    @property
    def out_dim(self):
        return self.n_levels * self.features_per_level

    def _corner_index(self, ix, iy, iz, res):
        if (res + 1) ** 3 <= self.table_size:
            return (ix * (res + 1) + iy) * (res + 1) + iz
        h = (ix * _HASH_PRIMES[0]) ^ (iy * _HASH_PRIMES[1]) ^ (iz * _HASH_PRIMES[2])
        return h & (self.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N,3) points in [-bound, bound] -> (N, n_levels*features) features."""
        u = (x / self.bound + 1.0) * 0.5  # [0,1]
        u = u.clamp(0.0, 1.0)
        feats = []
        for level in range(self.n_levels):
            res = self.resolutions[level]
            pos = u * res
            cell = pos.floor().long().clamp(0, res - 1)
            frac = pos - cell.to(pos.dtype)
            fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
            acc = 0.0
            for dx in (0, 1):
                wx = (1 - fx) if dx == 0 else fx
                for dy in (0, 1):
                    wy = (1 - fy) if dy == 0 else fy
                    for dz in (0, 1):
                        wz = (1 - fz) if dz == 0 else fz
                        idx = self._corner_index(cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz, res)
                        acc = acc + self.tables[level][idx] * (wx * wy * wz)
            feats.append(acc)
        return torch.cat(feats, dim=-1)


def _mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))


class RadianceField(nn.Module):
    """Density + color field over [-bound, bound]^3.

    A fixed soft density blob at the origin seeds the optimization; the heads
    learn deviations from it.
    """

    def __init__(self, n_levels=6, base_res=16, max_res=96, features_per_level=2,
                 table_size_log2=13, hidden=32, bound=1.0, blob_scale=4.0, blob_radius=0.35,
                 raw_density_bias=-2.0, seed=0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.grid = HashGrid(n_levels, base_res, max_res, features_per_level,
                                 table_size_log2, bound)
            self.density_head = _mlp(self.grid.out_dim, hidden, 1)
            self.color_head = _mlp(self.grid.out_dim, hidden, 3)
        self.bound = float(bound)
        self.max_res = max_res
        self.blob_scale = blob_scale
        self.blob_radius = blob_radius
        self.raw_density_bias = raw_density_bias
        # finite-difference step for density-gradient normals: half the finest cell
        self.normal_fd_step = (2.0 * bound / max_res) / 2.0

    def _raw_density(self, x, feats):
        raw = self.density_head(feats)[:, 0]
        blob = self.blob_scale * torch.exp(-(x * x).sum(-1) / (2.0 * self.blob_radius**2))
        return raw + blob + self.raw_density_bias

    def query_density(self, x: torch.Tensor) -> torch.Tensor:
        """(N,3) -> (N,) nonnegative densities; zero outside the bound."""
        inside = (x.abs() <= self.bound).all(dim=-1)
        feats = self.grid(x)
        sigma = torch.nn.functional.softplus(self._raw_density(x, feats))
        return sigma * inside.to(sigma.dtype)

    def query_color(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.color_head(self.grid(x)))

    def query(self, x: torch.Tensor):
        """Fused density+color query (single grid evaluation)."""
        inside = (x.abs() <= self.bound).all(dim=-1)
        feats = self.grid(x)
        sigma = torch.nn.functional.softplus(self._raw_density(x, feats)) * inside.to(x.dtype)
        rgb = torch.sigmoid(self.color_head(feats))
        return sigma, rgb

    def density_normals(self, x: torch.Tensor) -> torch.Tensor:
        """Unit normals as the normalized negative density gradient (central differences)."""
        step = self.normal_fd_step
        grads = []
        for axis in range(3):
            offset = torch.zeros(3, dtype=x.dtype)
            offset[axis] = step
            grads.append((self.query_density(x + offset) - self.query_density(x - offset)) / (2 * step))
        g = torch.stack(grads, dim=-1)
        return -g / (g.norm(dim=-1, keepdim=True) + 1e-12)


class AnalyticField:
    """Closed-form density/color field for tests and oracles (no parameters)."""

    def __init__(self, density_fn, color_fn=None, bound=1.0, normal_fd_step=1e-3):
        self.density_fn = density_fn
        self.color_fn = color_fn or (lambda x: torch.full((x.shape[0], 3), 0.5, dtype=x.dtype))
        self.bound = float(bound)
        self.normal_fd_step = normal_fd_step

    def query_density(self, x):
        return self.density_fn(x)

    def query_color(self, x):
        return self.color_fn(x)

    def query(self, x):
        return self.density_fn(x), self.color_fn(x)

    def density_normals(self, x):
        step = self.normal_fd_step
        grads = []
        for axis in range(3):
            offset = torch.zeros(3, dtype=x.dtype)
            offset[axis] = step
            grads.append((self.query_density(x + offset) - self.query_density(x - offset)) / (2 * step))
        g = torch.stack(grads, dim=-1)
        return -g / (g.norm(dim=-1, keepdim=True) + 1e-12)


class SurfaceColorField(nn.Module):
    """Color-only field used for texturing a frozen mesh (hash grid + sigmoid head)."""

    def __init__(self, n_levels=6, base_res=16, max_res=128, features_per_level=2,
                 table_size_log2=13, hidden=32, bound=1.0, seed=0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.grid = HashGrid(n_levels, base_res, max_res, features_per_level,
                                 table_size_log2, bound)
            self.head = _mlp(self.grid.out_dim, hidden, 3)
        self.bound = float(bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.grid(x)))


def field_params_finite(field) -> bool:
    if not isinstance(field, nn.Module):
        return True
    return all(torch.isfinite(p).all().item() for p in field.parameters())


def make_hard_sphere(radius=0.5, density=60.0, color=(0.8, 0.3, 0.2), bound=1.0):
    """Constant density inside a sphere, zero outside; the standard render oracle scene."""
    col = torch.tensor(color, dtype=torch.float32)

    def density_fn(x):
        return torch.where((x * x).sum(-1).sqrt() <= radius,
                           torch.full((x.shape[0],), float(density)),
                           torch.zeros(x.shape[0]))

    def color_fn(x):
        return col.expand(x.shape[0], 3).clone()

    return AnalyticField(density_fn, color_fn, bound=bound, normal_fd_step=1e-3)
