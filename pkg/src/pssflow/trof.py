"""Bidirectional triplet flow: correlation pyramids and K-step recurrent refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoder import STRIDE, Encoder, pad_to_multiple
from .errors import NumericError, ValidationError
from .flow import FlowField, base_grid, bilinear_sample, check_finite


@dataclass
class CorrelationVolume:
    """All-pairs similarity pyramid.

    ``pyramid[l]`` has shape (B*h*w, 1, h_l, w_l): one pooled target map per
    source cell, with ``h_l = ceil(h / 2**l)``.
    """

    pyramid: list[torch.Tensor]
    radius: int
    batch: int
    h: int
    w: int

    @property
    def levels(self) -> int:
        return len(self.pyramid)

    def dense(self, level: int = 0) -> torch.Tensor:
        """Level as (B, h, w, h_l, w_l)."""
        p = self.pyramid[level]
        return p.reshape(self.batch, self.h, self.w, *p.shape[-2:])


def build_correlation_volume(
    f_src: torch.Tensor, f_tgt: torch.Tensor, levels: int = 2, radius: int = 3
) -> CorrelationVolume:
    if f_src.shape != f_tgt.shape:
        raise ValidationError(f"feature maps differ in shape: {tuple(f_src.shape)} vs {tuple(f_tgt.shape)}")
    if levels < 1 or radius < 0:
        raise ValidationError("need levels >= 1 and radius >= 0")
    b, d, h, w = f_src.shape
    corr = torch.einsum("bdp,bdq->bpq", f_src.reshape(b, d, h * w), f_tgt.reshape(b, d, h * w))
    lvl = (corr / math.sqrt(d)).reshape(b * h * w, 1, h, w)
    pyramid = [lvl]
    for _ in range(levels - 1):
        lvl = F.avg_pool2d(lvl, 2, stride=2, ceil_mode=True)
        pyramid.append(lvl)
    return CorrelationVolume(pyramid, radius, b, h, w)


def window_offsets(radius: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Flattened ``(dx, dy)`` offsets, row-major over ``dy`` then ``dx``."""
    r = torch.arange(-radius, radius + 1, dtype=like.dtype, device=like.device)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return dx.reshape(-1), dy.reshape(-1)


def lookup(vol: CorrelationVolume, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``(2r+1)^2`` windows around ``(p + flow) / 2**l`` on every level.

    ``flow`` is (B, 2, h, w) in cells of the source grid. Returns
    (B, levels*(2r+1)^2, h, w); channel ``l*(2r+1)^2 + iy*(2r+1) + ix`` holds
    offset ``(ix - r, iy - r)`` on level ``l``.
    """
    check_finite(flow, "flow in correlation lookup")
    b, _, h, w = flow.shape
    if (b, h, w) != (vol.batch, vol.h, vol.w):
        raise ValidationError("flow grid does not match the correlation volume")
    xs, ys = base_grid(h, w, flow)
    cx = (xs + flow[:, 0]).reshape(b * h * w, 1)
    cy = (ys + flow[:, 1]).reshape(b * h * w, 1)
    dx, dy = window_offsets(vol.radius, flow)
    out = []
    for lvl, corr in enumerate(vol.pyramid):
        s = 2.0**lvl
        px = cx / s + dx
        py = cy / s + dy
        out.append(bilinear_sample(corr, px, py).reshape(b, h, w, -1))
    return torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()


def upsample_flow(flow: torch.Tensor | FlowField, stride: int = STRIDE):
    """Bilinear x8 upsampling (half-pixel centres) with vectors scaled by 8."""
    if isinstance(flow, FlowField):
        if flow.stride != STRIDE:
            raise ValidationError(f"upsample_flow expects stride {STRIDE}, got {flow.stride}")
        up = upsample_flow(flow.to_tensor().unsqueeze(0))[0]
        return FlowField.from_tensor(up, 1, flow.direction)
    if stride != STRIDE:
        raise ValidationError(f"upsample_flow expects stride {STRIDE}, got {stride}")
    return STRIDE * F.interpolate(flow, scale_factor=STRIDE, mode="bilinear", align_corners=False)


class CorrelationFusion(nn.Module):
    def __init__(self, corr_channels: int, out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(2 * corr_channels, 96, 1)
        self.conv2 = nn.Conv2d(96, out, 3, padding=1)

    def forward(self, c_bwd, c_fwd):
        return F.gelu(self.conv2(F.gelu(self.conv1(torch.cat([c_bwd, c_fwd], 1)))))


class FlowFusion(nn.Module):
    def __init__(self, out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(4, 64, 7, padding=3)
        self.conv2 = nn.Conv2d(64, out, 3, padding=1)

    def forward(self, f_bwd, f_fwd):
        return F.gelu(self.conv2(F.gelu(self.conv1(torch.cat([f_bwd, f_fwd], 1)))))


class MotionEncoder(nn.Module):
    """Pointwise in, depth-wise 7x7 aggregation, pointwise out to (motion features, motion state)."""

    def __init__(self, in_channels: int, motion_feat: int, motion_state: int, hidden: int = 96):
        super().__init__()
        self.motion_feat = motion_feat
        self.pw_in = nn.Conv2d(in_channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 7, padding=3, groups=hidden)
        self.pw_out = nn.Conv2d(hidden, motion_feat + motion_state, 1)

    def forward(self, f_corr, f_flow, f_mop):
        if not f_corr.shape[-2:] == f_flow.shape[-2:] == f_mop.shape[-2:]:
            raise ValidationError("motion encoder inputs differ in spatial shape")
        x = F.gelu(self.pw_in(torch.cat([f_corr, f_flow, f_mop], 1)))
        x = self.pw_out(F.gelu(self.dw(x)))
        motion, state = x.split([self.motion_feat, x.shape[1] - self.motion_feat], 1)
        return F.gelu(motion), torch.tanh(state)


class GatedUpdate(nn.Module):
    """Two-gate (update, reset) convolutional recurrent cell."""

    def __init__(self, hidden: int, inp: int):
        super().__init__()
        self.convz = nn.Conv2d(hidden + inp, hidden, 3, padding=1)
        self.convr = nn.Conv2d(hidden + inp, hidden, 3, padding=1)
        self.convq = nn.Conv2d(hidden + inp, hidden, 3, padding=1)

    def forward(self, h, x):
        hx = torch.cat([h, x], 1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], 1)))
        return (1 - z) * h + z * q


class FlowDecoder(nn.Module):
    """Hidden state to 4 channels: (du, dv) backward then (du, dv) forward."""

    def __init__(self, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden, 64, 3, padding=1)
        self.conv2 = nn.Conv2d(64, 4, 3, padding=1)

    def forward(self, h):
        return self.conv2(F.gelu(self.conv1(h)))


@dataclass
class Triplet:
    """Per-sample quantities fixed across refinement: volumes and context."""

    corr_fwd: CorrelationVolume
    corr_bwd: CorrelationVolume
    context: torch.Tensor
    size: tuple[int, int]


@dataclass
class RefinementState:
    h: torch.Tensor
    f_fwd: torch.Tensor
    f_bwd: torch.Tensor
    motion: torch.Tensor
    k: int = 0
    deltas: list[torch.Tensor] = field(default_factory=list)


@dataclass
class TrofOutput:
    flow_fwd: torch.Tensor
    flow_bwd: torch.Tensor
    motion: torch.Tensor
    fwd_iters: list[torch.Tensor]
    bwd_iters: list[torch.Tensor]
    state: RefinementState


def initial_motion_state(shape, seed: int, like: torch.Tensor) -> torch.Tensor:
    """Seeded standard normal scaled by 0.01."""
    g = torch.Generator().manual_seed(int(seed))
    return (torch.randn(shape, generator=g, dtype=torch.float64) * 0.01).to(like.dtype)


class ETROF(nn.Module):
    """Encoder plus bidirectional refinement head, shared by triplet and five-window modes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        corr_ch = cfg.corr_levels * (2 * cfg.corr_radius + 1) ** 2
        self.encoder = Encoder(cfg)
        self.corr_fusion = CorrelationFusion(corr_ch, cfg.corr_dim)
        self.flow_fusion = FlowFusion(cfg.flow_dim)
        self.motion_encoder = MotionEncoder(
            cfg.corr_dim + cfg.flow_dim + 3 * cfg.motion_dim, cfg.motion_feat_dim, cfg.motion_dim
        )
        self.update = GatedUpdate(cfg.hidden_dim, cfg.motion_feat_dim + cfg.hidden_dim)
        self.decoder = FlowDecoder(cfg.hidden_dim)

    @property
    def mop_channels(self) -> int:
        return 3 * self.cfg.motion_dim

    def encode(self, rep: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x, _ = pad_to_multiple(rep)
        return self.encoder(x)

    def prepare(self, enc_prev, enc_ctr, enc_next, size) -> Triplet:
        cfg = self.cfg
        feat_ctr, ctx = enc_ctr
        return Triplet(
            corr_fwd=build_correlation_volume(feat_ctr, enc_next[0], cfg.corr_levels, cfg.corr_radius),
            corr_bwd=build_correlation_volume(feat_ctr, enc_prev[0], cfg.corr_levels, cfg.corr_radius),
            context=ctx,
            size=size,
        )

    def init_state(self, trip: Triplet, motion_seed: int) -> RefinementState:
        ctx = trip.context
        b, _, h, w = ctx.shape
        zeros = ctx.new_zeros(b, 2, h, w)
        motion = initial_motion_state((b, self.cfg.motion_dim, h, w), motion_seed, ctx)
        return RefinementState(h=torch.tanh(ctx), f_fwd=zeros, f_bwd=zeros.clone(), motion=motion)

    def fuse(self, c_bwd, c_fwd, f_bwd, f_fwd):
        if c_bwd.shape != c_fwd.shape or f_bwd.shape != f_fwd.shape:
            raise ValidationError("fusion inputs must have matching shapes")
        return self.corr_fusion(c_bwd, c_fwd), self.flow_fusion(f_bwd, f_fwd)

    def update_and_decode(self, f_motion, context, state: RefinementState, motion_next=None) -> RefinementState:
        h = self.update(state.h, torch.cat([f_motion, context], 1))
        delta = self.decoder(h)
        if not torch.isfinite(delta).all():
            raise NumericError("flow update overflow", state.k)
        d_bwd, d_fwd = delta.split(2, 1)
        return RefinementState(
            h=h,
            f_fwd=state.f_fwd + d_fwd,
            f_bwd=state.f_bwd + d_bwd,
            motion=state.motion if motion_next is None else motion_next,
            k=state.k + 1,
            deltas=state.deltas + [delta],
        )

    def step(self, trip: Triplet, state: RefinementState, f_mop: torch.Tensor) -> RefinementState:
        """One refinement iteration, given the motion-propagation feature for this step."""
        c_bwd = lookup(trip.corr_bwd, state.f_bwd)
        c_fwd = lookup(trip.corr_fwd, state.f_fwd)
        f_corr, f_flow = self.fuse(c_bwd, c_fwd, state.f_bwd, state.f_fwd)
        f_motion, m_next = self.motion_encoder(f_corr, f_flow, f_mop)
        return self.update_and_decode(f_motion, trip.context, state, m_next)

    def full_res(self, f: torch.Tensor, size) -> torch.Tensor:
        return upsample_flow(f)[..., : size[0], : size[1]]

    def forward(
        self,
        e_prev: torch.Tensor,
        e_ctr: torch.Tensor,
        e_next: torch.Tensor,
        iters: int | None = None,
        f_mop_source: torch.Tensor | Callable | None = None,
        motion_seed: int | None = None,
    ) -> TrofOutput:
        """Flows centred on ``e_ctr``; inputs are (B, C, H, W) representations.

        ``f_mop_source`` is either a fixed (B, 3m, h, w) tensor or a callable
        ``(k, state) -> tensor``; by default the motion-propagation input is zero.
        """
        iters = self.cfg.iters if iters is None else iters
        if iters < 1:
            raise ValidationError("need at least one refinement iteration")
        size = tuple(e_ctr.shape[-2:])
        trip = self.prepare(self.encode(e_prev), self.encode(e_ctr), self.encode(e_next), size)
        state = self.init_state(trip, self.cfg.seed if motion_seed is None else motion_seed)
        fwd, bwd = [], []
        for _ in range(iters):
            state = self.step(trip, state, self.mop_input(f_mop_source, state, trip))
            fwd.append(self.full_res(state.f_fwd, size))
            bwd.append(self.full_res(state.f_bwd, size))
        return TrofOutput(fwd[-1], bwd[-1], state.motion, fwd, bwd, state)

    def mop_input(self, source, state: RefinementState, trip: Triplet) -> torch.Tensor:
        if source is None:
            b, _, h, w = trip.context.shape
            return trip.context.new_zeros(b, self.mop_channels, h, w)
        if callable(source):
            return source(state.k, state)
        return source


def trof_forward(model: ETROF, e_prev, e_ctr, e_next, iters: int | None = None, f_mop_source=None) -> TrofOutput:
    return model(e_prev, e_ctr, e_next, iters=iters, f_mop_source=f_mop_source)
