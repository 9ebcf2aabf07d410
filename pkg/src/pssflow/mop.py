"""Motion propagation across three overlapping triplets of five representations."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError
from .flow import base_grid, bilinear_sample, check_finite
from .trof import ETROF, TrofOutput


def warp(m: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp: output at cell ``p`` samples ``m`` at ``p + flow(p)``; outside is zero."""
    check_finite(flow, "warp flow")
    b, c, h, w = m.shape
    if flow.shape != (b, 2, h, w):
        raise ValidationError(f"flow {tuple(flow.shape)} does not match map {tuple(m.shape)}")
    xs, ys = base_grid(h, w, flow)
    px = (xs + flow[:, 0]).reshape(b, h * w)
    py = (ys + flow[:, 1]).reshape(b, h * w)
    return bilinear_sample(m, px, py).reshape(b, c, h, w)


def mop_fuse(m_center: torch.Tensor, m_f: torch.Tensor, m_b: torch.Tensor) -> torch.Tensor:
    """Channel layout ``[center | forward-warped | backward-warped]``."""
    if not m_center.shape == m_f.shape == m_b.shape:
        raise ValidationError("motion maps must share one shape")
    return torch.cat([m_center, m_f, m_b], 1)


@dataclass
class MopOutput:
    triplets: list[TrofOutput]

    @property
    def central(self) -> TrofOutput:
        return self.triplets[1]


def mop_forward(
    model: ETROF,
    reps: list[torch.Tensor],
    iters: int | None = None,
    exchange: bool = True,
    motion_seeds: tuple[int, int, int] | None = None,
) -> MopOutput:
    """Refine triplets (1,2,3), (2,3,4), (3,4,5) in lockstep.

    Before each iteration every centre warps its neighbours' motion states
    with its current flows; a missing neighbour contributes zeros. With
    ``exchange=False`` the propagation feature is zero, which makes each
    triplet identical to a standalone ``trof_forward`` call.
    """
    if len(reps) != 5:
        raise ValidationError(f"motion propagation needs exactly 5 representations, got {len(reps)}")
    iters = model.cfg.iters if iters is None else iters
    if iters < 1:
        raise ValidationError("need at least one refinement iteration")
    seeds = motion_seeds or (model.cfg.seed,) * 3
    size = tuple(reps[2].shape[-2:])
    enc = [model.encode(r) for r in reps]
    trips = [model.prepare(enc[j], enc[j + 1], enc[j + 2], size) for j in range(3)]
    states = [model.init_state(t, s) for t, s in zip(trips, seeds)]
    hist = [([], []) for _ in range(3)]
    for _ in range(iters):
        if exchange:
            feats = []
            for j, st in enumerate(states):
                zero = torch.zeros_like(st.motion)
                m_f = warp(states[j + 1].motion, st.f_fwd) if j < 2 else zero
                m_b = warp(states[j - 1].motion, st.f_bwd) if j > 0 else zero
                feats.append(mop_fuse(st.motion, m_f, m_b))
        else:
            feats = [model.mop_input(None, st, t) for st, t in zip(states, trips)]
        # barrier: every feature above was built from the pre-step states
        states = [model.step(t, st, f) for t, st, f in zip(trips, states, feats)]
        for (fw, bw), st in zip(hist, states):
            fw.append(model.full_res(st.f_fwd, size))
            bw.append(model.full_res(st.f_bwd, size))
    return MopOutput(
        [TrofOutput(fw[-1], bw[-1], st.motion, fw, bw, st) for (fw, bw), st in zip(hist, states)]
    )
