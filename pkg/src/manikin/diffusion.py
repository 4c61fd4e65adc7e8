"""Toy denoising diffusion priors.

One noise-prediction UNet per prior role: text-to-image (rgb2d), view-conditioned
(view3d), normal- and depth-adapted variants, and an image-conditioned refiner.
All use a variance-preserving cosine schedule over continuous t in [0,1] and a
closed descriptor vocabulary instead of a text encoder. Images are channels-last
float tensors in [0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ArgumentError, IOFormatError
from .fileio import read_blob, write_blob

# closed descriptor vocabulary: body families, palette words, prop and crop tags
VOCAB = (
    "slim", "wide",
    "red", "green", "blue", "yellow", "purple", "orange", "teal", "pink", "gray", "tan",
    "prop", "full", "half", "three-quarter",
)

KIND_SPECS = {
    # kind: (image channels, conditioning-image channels, uses relative camera)
    "rgb2d": (3, 0, False),
    "view3d": (3, 3, True),
    "normal": (3, 0, False),
    "depth": (1, 0, False),
    "refiner": (3, 3, False),
}
_KIND_CODES = {k: i + 1 for i, k in enumerate(KIND_SPECS)}


# ---------------------------------------------------------------------------
# Schedule


class CosineSchedule:
    """Variance-preserving: alpha = cos(pi t / 2), sigma = sin(pi t / 2).

    `omega` is the distillation weighting (sigma^2 by default); the training
    objective itself uses uniform weighting so a zero predictor scores exactly
    1.0 per noise element.
    """

    name = "cosine"
    schedule_id = 1

    def __init__(self, omega_mode: str = "sigma2"):
        if omega_mode not in ("sigma2", "uniform"):
            raise ArgumentError(f"unknown omega mode {omega_mode!r}")
        self.omega_mode = omega_mode

    def alpha(self, t):
        if torch.is_tensor(t):
            return torch.cos(0.5 * math.pi * t)
        return math.cos(0.5 * math.pi * t)

    def sigma(self, t):
        if torch.is_tensor(t):
            return torch.sin(0.5 * math.pi * t)
        return math.sin(0.5 * math.pi * t)

    def omega(self, t):
        if self.omega_mode == "uniform":
            return torch.ones_like(t) if torch.is_tensor(t) else 1.0
        s = self.sigma(t)
        return s * s


SCHEDULES = {"cosine": CosineSchedule}


def forward_diffuse(x0: torch.Tensor, t: float, eps: torch.Tensor, schedule) -> torch.Tensor:
    """x_t = alpha(t) * x0 + sigma(t) * eps."""
    if not (0.0 <= float(t) <= 1.0):
        raise ArgumentError(f"t must lie in [0,1], got {t}")
    if eps.shape != x0.shape:
        raise ArgumentError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    return schedule.alpha(t) * x0 + schedule.sigma(t) * eps


# ---------------------------------------------------------------------------
# Conditions


def tokens_to_multihot(tokens, vocab=VOCAB) -> np.ndarray:
    v = np.zeros(len(vocab), dtype=np.float32)
    for tok in tokens:
        try:
            v[vocab.index(tok)] = 1.0
        except ValueError:
            raise ArgumentError(f"token {tok!r} not in the closed vocabulary") from None
    return v


@dataclass(frozen=True)
class TextCondition:
    """Bag-of-descriptors embedding over the closed vocabulary.

    The embedding is the fixed-length multi-hot vector; models apply their own
    learned per-token table to it. `null_flag` marks the unconditional row used
    for classifier-free guidance (embedding all zeros).
    """

    embedding: tuple
    null_flag: bool = False
    tokens: tuple = ()

    @classmethod
    def from_tokens(cls, tokens, vocab=VOCAB) -> "TextCondition":
        return cls(tuple(tokens_to_multihot(tokens, vocab).tolist()), False, tuple(tokens))

    @classmethod
    def null(cls, vocab=VOCAB) -> "TextCondition":
        return cls((0.0,) * len(vocab), True, ())

    def vector(self) -> torch.Tensor:
        return torch.tensor(self.embedding, dtype=torch.float32)


@dataclass
class Conditions:
    """Everything a denoiser may be conditioned on; kinds pick what they need."""

    text: Optional[TextCondition] = None
    ref_image: Optional[torch.Tensor] = None  # (H,W,3)
    rel_camera: Optional[tuple] = None  # (d_elevation, d_azimuth, d_distance), degrees/units
    cond_image: Optional[torch.Tensor] = None  # (H,W,C)

    def nulled(self) -> "Conditions":
        """The classifier-free-guidance unconditional counterpart."""
        return Conditions(
            text=TextCondition.null() if self.text is not None else None,
            ref_image=None if self.ref_image is None else torch.zeros_like(self.ref_image),
            rel_camera=None if self.rel_camera is None else (0.0, 0.0, 0.0),
            cond_image=self.cond_image,  # structural conditioning is kept under CFG
        )


def camera_features(rel_camera) -> torch.Tensor:
    d_el, d_az, d_dist = rel_camera
    az = math.radians(d_az)
    return torch.tensor([math.sin(az), math.cos(az), d_el / 90.0, d_dist], dtype=torch.float32)


# ---------------------------------------------------------------------------
# Network


class _ResBlock(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        groups = max(1, min(8, ch // 4))
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class TinyUNet(nn.Module):
    """Small conv encoder/decoder with additive time/condition embeddings."""

    def __init__(self, in_ch, out_ch, base=16, n_levels=3, emb_dim=64,
                 vocab_size=len(VOCAB), use_camera=False):
        super().__init__()
        self.n_levels = n_levels
        widths = [base * min(2**i, 4) for i in range(n_levels + 1)]
        self.t_freqs = nn.Parameter(
            torch.exp(torch.linspace(0.0, math.log(1000.0), 8)), requires_grad=False
        )
        self.t_mlp = nn.Sequential(nn.Linear(16, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.text_table = nn.Linear(vocab_size, emb_dim)  # bias row doubles as the null embedding
        self.cam_mlp = nn.Linear(4, emb_dim) if use_camera else None

        self.conv_in = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(n_levels):
            self.down_blocks.append(_ResBlock(widths[i], emb_dim))
            self.downs.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid = _ResBlock(widths[n_levels], emb_dim)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(n_levels)):
            self.ups.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.up_blocks.append(_ResBlock(widths[i], emb_dim))
        self.conv_out = nn.Sequential(nn.SiLU(), nn.Conv2d(widths[0], out_ch, 3, padding=1))

    def embed(self, t: torch.Tensor, text_vec=None, cam_vec=None) -> torch.Tensor:
        arg = t[:, None] * self.t_freqs[None, :]
        emb = self.t_mlp(torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1))
        if text_vec is not None:
            emb = emb + self.text_table(text_vec)
        if self.cam_mlp is not None and cam_vec is not None:
            emb = emb + self.cam_mlp(cam_vec)
        return emb

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        mult = 2**self.n_levels
        h, w = x.shape[2], x.shape[3]
        ph = (mult - h % mult) % mult
        pw = (mult - w % mult) % mult
        if ph or pw:
            x = nn.functional.pad(x, (0, pw, 0, ph), mode="replicate")
        y = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            y = block(y, emb)
            skips.append(y)
            y = down(y)
        y = self.mid(y, emb)
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            y = nn.functional.interpolate(y, scale_factor=2, mode="nearest")
            y = up(y) + skip
            y = block(y, emb)
        y = self.conv_out(y)
        if ph or pw:
            y = y[:, :, :h, :w]
        return y


# ---------------------------------------------------------------------------
# Denoiser


@dataclass
class Denoiser:
    """A trained noise predictor plus everything needed to call it."""

    kind: str
    net: TinyUNet
    schedule: CosineSchedule
    image_size: int
    hyper: dict = dc_field(default_factory=dict)
    train_report: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in KIND_SPECS:
            raise ArgumentError(f"unknown denoiser kind {self.kind!r}")

    @property
    def channels(self):
        return KIND_SPECS[self.kind][0]

    def save(self, path, version: int = 1):
        arrays = {f"param:{k}": v.detach().numpy() for k, v in self.net.state_dict().items()}
        arrays["hyper"] = np.array(
            [self.hyper.get("base", 16), self.hyper.get("n_levels", 3), self.hyper.get("emb_dim", 64)],
            dtype=np.float32,
        )
        write_blob(path, b"GMPR", [_KIND_CODES[self.kind], self.image_size,
                                   self.schedule.schedule_id, version], arrays)

    @classmethod
    def load(cls, path) -> "Denoiser":
        (kind_code, image_size, schedule_id, _version, *_), arrays = read_blob(path, b"GMPR")
        kinds = {v: k for k, v in _KIND_CODES.items()}
        if kind_code not in kinds:
            raise IOFormatError(f"unknown denoiser kind code {kind_code}")
        if schedule_id != CosineSchedule.schedule_id:
            raise IOFormatError(f"unknown schedule id {schedule_id}")
        kind = kinds[kind_code]
        base, n_levels, emb_dim = (int(x) for x in arrays.pop("hyper"))
        net = build_unet(kind, image_size, base=base, n_levels=n_levels, emb_dim=emb_dim)
        state = {k[len("param:"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param:")}
        net.load_state_dict(state)
        net.eval()
        return cls(kind, net, CosineSchedule(), image_size,
                   {"base": base, "n_levels": n_levels, "emb_dim": emb_dim})


def build_unet(kind: str, image_size: int, base=16, n_levels=3, emb_dim=64, seed: int = 0) -> TinyUNet:
    img_ch, cond_ch, use_cam = KIND_SPECS[kind]
    levels = min(n_levels, max(0, int(math.log2(max(image_size, 1)))))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = TinyUNet(img_ch + cond_ch, img_ch, base=base, n_levels=levels,
                       emb_dim=emb_dim, use_camera=use_cam)
    return net


def _validate_conditions(model: Denoiser, x_t: torch.Tensor, cond: Conditions):
    img_ch, cond_ch, use_cam = KIND_SPECS[model.kind]
    if x_t.dim() != 3 or x_t.shape[-1] != img_ch:
        raise ArgumentError(
            f"{model.kind} expects an (H,W,{img_ch}) image, got {tuple(x_t.shape)}"
        )
    if model.kind == "view3d":
        if cond.ref_image is None:
            raise ArgumentError("view3d denoiser requires condition 'ref_image'")
        if cond.rel_camera is None:
            raise ArgumentError("view3d denoiser requires condition 'rel_camera'")
    if model.kind == "refiner" and cond.cond_image is None:
        raise ArgumentError("refiner denoiser requires condition 'cond_image'")


def _net_input(model: Denoiser, x_t: torch.Tensor, cond: Conditions) -> torch.Tensor:
    chw = x_t.permute(2, 0, 1)[None]
    _, cond_ch, _ = KIND_SPECS[model.kind]
    if cond_ch:
        extra = cond.ref_image if model.kind == "view3d" else cond.cond_image
        if extra.shape[:2] != x_t.shape[:2]:
            # conditioning image rides along at the model's native resolution
            ex = extra.permute(2, 0, 1)[None]
            ex = nn.functional.interpolate(ex, size=x_t.shape[:2], mode="bilinear", align_corners=False)
        else:
            ex = extra.permute(2, 0, 1)[None]
        chw = torch.cat([chw, ex], dim=1)
    return chw


def predict_noise(model: Denoiser, x_t: torch.Tensor, t: float, cond: Conditions) -> torch.Tensor:
    """Deterministic noise estimate; output shape equals x_t's."""
    _validate_conditions(model, x_t, cond)
    was_training = model.net.training
    model.net.eval()
    with torch.no_grad():
        tt = torch.tensor([float(t)], dtype=torch.float32)
        text_vec = cond.text.vector()[None] if cond.text is not None else None
        cam_vec = camera_features(cond.rel_camera)[None] if (cond.rel_camera is not None and model.kind == "view3d") else None
        emb = model.net.embed(tt, text_vec, cam_vec)
        out = model.net(_net_input(model, x_t, cond), emb)[0].permute(1, 2, 0)
    if was_training:
        model.net.train()
    if not torch.isfinite(out).all():
        raise ArgumentError("denoiser produced non-finite output")
    return out


def predict_noise_cfg(model: Denoiser, x_t: torch.Tensor, t: float, cond: Conditions,
                      scale: float = 1.0) -> torch.Tensor:
    """Classifier-free guidance: eps_null + scale * (eps_cond - eps_null)."""
    eps_cond = predict_noise(model, x_t, t, cond)
    if scale == 1.0:
        return eps_cond
    eps_null = predict_noise(model, x_t, t, cond.nulled())
    return eps_null + scale * (eps_cond - eps_null)


def sdedit_refine(model: Denoiser, image: torch.Tensor, t_start: float, cond: Conditions,
                  n_steps: int = 8, rng_seed: int = 0, cfg_scale: float = 1.0) -> torch.Tensor:
    """Perturb to noise level t_start, then denoise deterministically to t=0.

    The input image itself is the structural conditioning channel. DDIM-style
    updates with eta=0; output clamped to [0,1]; bit-deterministic per seed.
    """
    if model.kind != "refiner":
        raise ArgumentError(f"sdedit_refine requires a refiner denoiser, got {model.kind!r}")
    if not (0.0 <= t_start < 1.0):
        raise ArgumentError(f"t_start must lie in [0,1), got {t_start}")
    if n_steps <= 0:
        raise ArgumentError("n_steps must be positive")
    if t_start == 0.0:
        return image
    cond = Conditions(text=cond.text, ref_image=cond.ref_image,
                      rel_camera=cond.rel_camera, cond_image=image)
    gen = torch.Generator().manual_seed(rng_seed)
    eps = torch.randn(image.shape, generator=gen, dtype=image.dtype)
    sched = model.schedule
    x = forward_diffuse(image, t_start, eps, sched)
    times = torch.linspace(t_start, 0.0, n_steps + 1).tolist()
    for t_cur, t_next in zip(times[:-1], times[1:]):
        eps_hat = predict_noise_cfg(model, x, t_cur, cond, cfg_scale)
        alpha, sigma = sched.alpha(t_cur), sched.sigma(t_cur)
        x0_hat = (x - sigma * eps_hat) / max(alpha, 1e-6)
        x = sched.alpha(t_next) * x0_hat + sched.sigma(t_next) * eps_hat
    return x.clamp(0.0, 1.0)
