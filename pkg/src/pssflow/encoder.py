"""Event-representation encoder: strided stem plus stacked 2-D scanning SSM blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import NumericError, ValidationError
from .events import EventRepresentation
from .ssm import PARALLEL, SelectiveSSM

STRIDE = 8


@dataclass(frozen=True)
class FeatureMap:
    """Batched ``(B, d, h, w)`` feature tensor and its stride w.r.t. the input."""

    data: torch.Tensor
    stride: int = STRIDE


def system_seed(seed: int, block: int, direction: int) -> int:
    return int(np.random.SeedSequence([seed, block, direction]).generate_state(1)[0])


def pad_to_multiple(x: torch.Tensor, multiple: int = STRIDE) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad (B, C, H, W) at the bottom/right; returns the padded tensor and an H' x W' valid mask."""
    h, w = x.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    mask = torch.zeros(h + ph, w + pw, dtype=torch.bool, device=x.device)
    mask[:h, :w] = True
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x, mask


def rep_to_tensor(rep: EventRepresentation | np.ndarray) -> torch.Tensor:
    """H x W x C representation to a (1, C, H, W) float tensor."""
    data = rep.data if isinstance(rep, EventRepresentation) else rep
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1), dtype=np.float32)).unsqueeze(0)


class Stem(nn.Module):
    def __init__(self, in_channels: int, d: int):
        super().__init__()
        mid = max(d // 2, 1)
        self.conv1 = nn.Conv2d(in_channels, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, d, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(d, d, 3, stride=2, padding=1)

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise NumericError("non-finite encoder input")
        if x.shape[-2] % STRIDE or x.shape[-1] % STRIDE:
            raise ValidationError(f"stem input {tuple(x.shape[-2:])} not divisible by {STRIDE}; pad first")
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


def _to_sequences(u: torch.Tensor, scan_dirs: int) -> list[torch.Tensor]:
    """Channels-last (B, h, w, d) map to per-direction (B, h*w, d) sequences.

    Order: row-major, reversed row-major, column-major, reversed column-major.
    """
    b, h, w, d = u.shape
    rows = u.reshape(b, h * w, d)
    seqs = [rows, rows.flip(1)]
    if scan_dirs == 4:
        cols = u.transpose(1, 2).reshape(b, h * w, d)
        seqs += [cols, cols.flip(1)]
    return seqs


def _from_sequences(ys: list[torch.Tensor], h: int, w: int) -> list[torch.Tensor]:
    b, _, d = ys[0].shape
    maps = [ys[0].reshape(b, h, w, d), ys[1].flip(1).reshape(b, h, w, d)]
    if len(ys) == 4:
        maps.append(ys[2].reshape(b, w, h, d).transpose(1, 2))
        maps.append(ys[3].flip(1).reshape(b, w, h, d).transpose(1, 2))
    return maps


class PSEBlock(nn.Module):
    """Pre-norm residual block: gated average of directional selective scans."""

    def __init__(self, d: int, cfg: ModelConfig, block_index: int = 0):
        super().__init__()
        self.block_index = block_index
        self.norm = nn.LayerNorm(d)
        self.in_proj = nn.Linear(d, 2 * d)
        self.ssms = nn.ModuleList(
            SelectiveSSM(
                d,
                cfg.d_state,
                init=cfg.init,
                seed=system_seed(cfg.seed, block_index, k),
                perturb_scale=cfg.perturb_scale,
                delta_min=cfg.delta_min,
                delta_max=cfg.delta_max,
                train_perturbation=cfg.train_perturbation,
            )
            for k in range(cfg.scan_dirs)
        )
        self.out_proj = nn.Linear(d, d)
        self.scan_mode = PARALLEL

    def scan_maps(self, u: torch.Tensor) -> list[torch.Tensor]:
        """Per-direction SSM outputs of ``u`` mapped back onto the (B, h, w, d) grid."""
        _, h, w, _ = u.shape
        seqs = _to_sequences(u, len(self.ssms))
        ys = [ssm(s, self.scan_mode) for ssm, s in zip(self.ssms, seqs)]
        return _from_sequences(ys, h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is channels-last (B, h, w, d); the output has the same shape."""
        try:
            u, z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
            y = torch.stack(self.scan_maps(u)).mean(0)
            out = x + self.out_proj(y * F.silu(z))
        except NumericError as exc:
            raise NumericError(f"encoder block {self.block_index}: {exc}", self.block_index) from exc
        if not torch.isfinite(out).all():
            raise NumericError("encoder block overflow", self.block_index)
        return out


class Encoder(nn.Module):
    """Shared trunk with separate feature and context heads, both at stride 8."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.stem = Stem(cfg.in_channels, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.pos_grid[0], cfg.pos_grid[1], d) * 0.02)
        self.blocks = nn.ModuleList(PSEBlock(d, cfg, i) for i in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(d)
        self.feature_head = nn.Linear(d, d)
        self.context_head = nn.Linear(d, cfg.hidden_dim)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        f = self.stem(x).permute(0, 2, 3, 1)
        h, w = f.shape[1:3]
        if h > self.pos_embed.shape[0] or w > self.pos_embed.shape[1]:
            raise ValidationError(
                f"{h}x{w} feature grid exceeds positional table {tuple(self.pos_embed.shape[:2])}"
            )
        f = f + self.pos_embed[:h, :w]
        for blk in self.blocks:
            f = blk(f)
        return self.norm(f)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, H, W) with H, W divisible by 8 -> features, context as (B, d, H/8, W/8)."""
        f = self.trunk(x)
        feat = self.feature_head(f).permute(0, 3, 1, 2).contiguous()
        ctx = self.context_head(f).permute(0, 3, 1, 2).contiguous()
        return feat, ctx


def encode(rep: EventRepresentation | torch.Tensor, encoder: Encoder) -> tuple[FeatureMap, FeatureMap]:
    """Encode one representation (padding to a multiple of 8 as needed)."""
    x = rep if isinstance(rep, torch.Tensor) else rep_to_tensor(rep)
    x, _ = pad_to_multiple(x)
    feat, ctx = encoder(x)
    return FeatureMap(feat), FeatureMap(ctx)
