"""Flow fields, the ``FLO1`` file format, and zero-padded bilinear sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import NumericError, ValidationError

FLOW_MAGIC = b"FLO1"
_FLOW_HEADER = struct.Struct("<4sII")

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class FlowField:
    """Dense ``h x w x 2`` displacement field, ``(u, v)`` in pixels of ``stride``."""

    data: np.ndarray
    stride: int = 1
    direction: str = FORWARD

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != 2:
            raise ValidationError(f"flow must be h x w x 2, got {self.data.shape}")
        if self.direction not in (FORWARD, BACKWARD):
            raise ValidationError(f"unknown flow direction {self.direction!r}")
        if not np.isfinite(self.data).all():
            raise NumericError("flow field contains non-finite values")

    @classmethod
    def from_tensor(cls, t: torch.Tensor, stride: int = 1, direction: str = FORWARD) -> "FlowField":
        """From a ``2 x h x w`` tensor."""
        return cls(t.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32), stride, direction)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.data.transpose(2, 0, 1)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def write_flow(flow, path) -> None:
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, h, w))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flow(path, stride: int = 1, direction: str = FORWARD) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < _FLOW_HEADER.size or raw[:4] != FLOW_MAGIC:
        raise ValidationError(f"{path}: not a FLO1 file")
    _, h, w = _FLOW_HEADER.unpack_from(raw, 0)
    expect = _FLOW_HEADER.size + h * w * 2 * 4
    if len(raw) != expect:
        raise ValidationError(f"{path}: expected {expect} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FLOW_HEADER.size).reshape(h, w, 2)
    return FlowField(data.astype(np.float32), stride, direction)


def check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite {what}")


def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (N, C, H, W) at pixel coordinates ``x, y`` (N, P).

    Corners outside the image contribute zero, so a point entirely outside
    returns zero and a point on the border blends with zero. Returns (N, C, P).
    """
    n, c, h, w = img.shape
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = img.reshape(n, c, h * w)
    out = 0
    for dx, dy, wgt in (
        (0, 0, (1 - wx1) * (1 - wy1)),
        (1, 0, wx1 * (1 - wy1)),
        (0, 1, (1 - wx1) * wy1),
        (1, 1, wx1 * wy1),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(1).expand(n, c, -1)
        vals = torch.gather(flat, 2, idx)
        out = out + vals * (wgt * inside).unsqueeze(1)
    return out


def base_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cell-centre coordinates ``(x, y)`` each of shape (h, w)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=like.dtype, device=like.device),
        torch.arange(w, dtype=like.dtype, device=like.device),
        indexing="ij",
    )
    return xs, ys
