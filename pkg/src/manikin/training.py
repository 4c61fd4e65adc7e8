"""Noise-prediction training for the toy priors.

Minimizes E[ ||eps_hat(alpha_t x0 + sigma_t eps, t) - eps||^2 ] with t ~ U(0,1),
dropping the condition with probability 0.1 (null embedding / zeroed condition
channels) so classifier-free guidance works at inference. Deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch

from .diffusion import (
    KIND_SPECS,
    VOCAB,
    CosineSchedule,
    Denoiser,
    build_unet,
    camera_features,
)
from .errors import ArgumentError, TrainingStalledError


@dataclass
class PriorDataset:
    """Conditioned image set, channels-last float32 in [0,1].

    `ref_images`/`rel_cameras` are required for view3d pairs; `cond_images`
    for the refiner (the degraded render it conditions on).
    """

    images: np.ndarray  # (N,H,W,C)
    multihot: np.ndarray  # (N,V) descriptor bags
    ref_images: Optional[np.ndarray] = None
    rel_cameras: Optional[np.ndarray] = None  # (N,3) (d_elev, d_azim, d_dist)
    cond_images: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.multihot = np.ascontiguousarray(self.multihot, dtype=np.float32)

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[1]


@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 4
    lr: float = 2e-3
    weight_decay: float = 0.0
    eval_every: int = 100
    patience: int = 8
    target_loss: Optional[float] = None
    drop_prob: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0
    base_width: int = 16
    n_levels: int = 3
    emb_dim: int = 64


def _camera_feature_batch(rel_cams: torch.Tensor) -> torch.Tensor:
    return torch.stack([camera_features(tuple(rc.tolist())) for rc in rel_cams])


def _batch_forward(net, kind, images, multihot, cams, cond_imgs, t, eps, schedule):
    x_t = schedule.alpha(t)[:, None, None, None] * images + schedule.sigma(t)[:, None, None, None] * eps
    x = x_t
    if KIND_SPECS[kind][1]:
        x = torch.cat([x, cond_imgs], dim=1)
    cam_vec = _camera_feature_batch(cams) if (cams is not None and kind == "view3d") else None
    emb = net.embed(t, multihot, cam_vec)
    return net(x, emb)


def eq1_loss(net, kind, images, multihot, cams, cond_imgs, t, eps, schedule) -> torch.Tensor:
    """Per-element mean squared noise-prediction error (uniform weighting)."""
    pred = _batch_forward(net, kind, images, multihot, cams, cond_imgs, t, eps, schedule)
    return ((pred - eps) ** 2).mean()


class _Batcher:
    """Deterministic shuffled index stream."""

    def __init__(self, n, batch_size, gen):
        self.n = n
        self.batch = batch_size
        self.gen = gen
        self._order = torch.randperm(n, generator=gen)
        self._pos = 0

    def next(self):
        if self._pos + self.batch > self.n:
            self._order = torch.randperm(self.n, generator=self.gen)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return idx


def _tensors(dataset: PriorDataset, kind: str):
    imgs = torch.from_numpy(dataset.images).permute(0, 3, 1, 2).contiguous()
    mh = torch.from_numpy(dataset.multihot)
    cams = torch.from_numpy(np.ascontiguousarray(dataset.rel_cameras, dtype=np.float32)) \
        if dataset.rel_cameras is not None else None
    cond_src = dataset.ref_images if kind == "view3d" else dataset.cond_images
    cond = torch.from_numpy(np.ascontiguousarray(cond_src, dtype=np.float32)).permute(0, 3, 1, 2).contiguous() \
        if cond_src is not None else None
    return imgs, mh, cams, cond


def train_denoiser(dataset: PriorDataset, kind: str, schedule: Optional[CosineSchedule] = None,
                   config: Optional[TrainConfig] = None) -> Denoiser:
    """Train a denoiser of the given kind; returns it with a training report.

    Raises TrainingStalledError when the held-out loss stops improving for
    `patience` evaluations or misses `target_loss` by the end.
    """
    if len(dataset) == 0:
        raise ArgumentError("dataset is empty")
    schedule = schedule or CosineSchedule()
    cfg = config or TrainConfig()
    img_ch = KIND_SPECS[kind][0]
    if dataset.images.shape[-1] != img_ch:
        raise ArgumentError(
            f"{kind} expects {img_ch}-channel images, dataset has {dataset.images.shape[-1]}"
        )
    if kind == "view3d" and (dataset.ref_images is None or dataset.rel_cameras is None):
        raise ArgumentError("view3d training needs ref_images and rel_cameras")
    if kind == "refiner" and dataset.cond_images is None:
        raise ArgumentError("refiner training needs cond_images")

    gen = torch.Generator().manual_seed(cfg.seed)
    imgs, mh, cams, cond = _tensors(dataset, kind)

    n_val = max(1, int(round(len(dataset) * cfg.val_fraction)))
    perm = torch.randperm(len(dataset), generator=gen)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx
    # frozen validation noise so the eval trace is deterministic and comparable
    val_t = torch.rand(len(val_idx), generator=gen)
    val_eps = torch.randn((len(val_idx),) + tuple(imgs.shape[1:]), generator=gen)

    net = build_unet(kind, dataset.image_size, base=cfg.base_width, n_levels=cfg.n_levels,
                     emb_dim=cfg.emb_dim, seed=cfg.seed)
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, betas=(0.9, 0.99),
                            weight_decay=cfg.weight_decay)

    batcher = _Batcher(len(train_idx), min(cfg.batch_size, len(train_idx)), gen)
    trace = []
    val_trace = []
    best_val = float("inf")
    best_state = None
    evals_since_best = 0
    n_seen = 0
    n_dropped = 0

    def run_val():
        net.eval()
        with torch.no_grad():
            losses = []
            for i in range(0, len(val_idx), 32):
                sl = val_idx[i : i + 32]
                tl = slice(i, min(i + 32, len(val_idx)))
                losses.append(
                    eq1_loss(net, kind, imgs[sl], mh[sl],
                             None if cams is None else cams[sl],
                             None if cond is None else cond[sl],
                             val_t[tl], val_eps[tl], schedule).item() * len(sl)
                )
        net.train()
        return float(np.sum(losses) / len(val_idx))

    for step in range(cfg.steps):
        bi = train_idx[batcher.next()]
        b = len(bi)
        t = torch.rand(b, generator=gen)
        eps = torch.randn((b,) + tuple(imgs.shape[1:]), generator=gen)
        drop = torch.rand(b, generator=gen) < cfg.drop_prob
        n_seen += b
        n_dropped += int(drop.sum())
        mh_b = mh[bi].clone()
        mh_b[drop] = 0.0  # null embedding row
        cams_b = None
        if cams is not None:
            cams_b = cams[bi].clone()
            cams_b[drop] = 0.0
        cond_b = None
        if cond is not None:
            cond_b = cond[bi].clone()
            if kind == "view3d":
                cond_b[drop] = 0.0  # the view condition is (ref image, camera) jointly

        loss = eq1_loss(net, kind, imgs[bi], mh_b, cams_b, cond_b, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.item()))

        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            v = run_val()
            val_trace.append((step + 1, v))
            if v < best_val - 1e-6:
                best_val = v
                best_state = {k: p.detach().clone() for k, p in net.state_dict().items()}
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    raise TrainingStalledError(
                        f"training stalled: no held-out improvement in {cfg.patience} evals "
                        f"(best {best_val:.5f})", trace=val_trace)

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    if cfg.target_loss is not None and best_val > cfg.target_loss:
        raise TrainingStalledError(
            f"held-out loss {best_val:.5f} missed target {cfg.target_loss}", trace=val_trace)

    report = {
        "loss_trace": trace,
        "val_trace": val_trace,
        "best_val_loss": best_val,
        "drop_rate": n_dropped / max(n_seen, 1),
        "steps": cfg.steps,
        "seed": cfg.seed,
    }
    return Denoiser(kind, net, schedule, dataset.image_size,
                    {"base": cfg.base_width, "n_levels": net.n_levels, "emb_dim": cfg.emb_dim},
                    report)


def heldout_eq1_loss(model: Denoiser, dataset: PriorDataset, seed: int = 123, n: int = 256) -> float:
    """Eq-1 loss of a trained model on a dataset with frozen noise draws."""
    gen = torch.Generator().manual_seed(seed)
    imgs, mh, cams, cond = _tensors(dataset, model.kind)
    idx = torch.randperm(len(dataset), generator=gen)[: min(n, len(dataset))]
    t = torch.rand(len(idx), generator=gen)
    eps = torch.randn((len(idx),) + tuple(imgs.shape[1:]), generator=gen)
    model.net.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, len(idx), 32):
            sl = idx[i : i + 32]
            tl = slice(i, min(i + 32, len(idx)))
            total += eq1_loss(model.net, model.kind, imgs[sl], mh[sl],
                              None if cams is None else cams[sl],
                              None if cond is None else cond[sl],
                              t[tl], eps[tl], model.schedule).item() * len(sl)
    return total / len(idx)
