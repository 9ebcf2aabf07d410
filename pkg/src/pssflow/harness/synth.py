"""Synthetic event sequences with analytic ground-truth flow.

A procedural pattern moves under piecewise affine motion (rotation about the
image centre plus translation, constant within each window). Log intensity
is rendered at sub-steps, and a pixel fires an event each time its log
intensity moves a contrast threshold away from its last reference level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import SpecError, ValidationError
from ..events import EventStream
from ..flow import BACKWARD, FORWARD, FlowField

PATTERNS = ("checkerboard", "gradient_blobs", "textured_noise")


@dataclass
class SceneSpec:
    pattern: str = "checkerboard"
    # one (tx, ty, rot_deg) triple per window, in pixels / degrees per window
    motion: list = field(default_factory=lambda: [(0.0, 0.0, 0.0)] * 3)
    noise_rate: float = 0.0
    size: tuple[int, int] = (64, 64)
    windows: int = 3
    window_us: int = 10_000
    substeps: int = 8
    threshold: float = 0.15
    max_displacement: float = 16.0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.motion = [tuple(float(v) for v in m) for m in self.motion]
        if self.pattern not in PATTERNS:
            raise SpecError(f"unknown pattern {self.pattern!r}")
        if self.windows < 1 or len(self.motion) != self.windows:
            raise SpecError(f"need one motion triple per window ({self.windows}), got {len(self.motion)}")
        if any(len(m) != 3 for m in self.motion):
            raise SpecError("motion entries are (tx, ty, rot_deg)")
        if min(self.size) < 1 or self.window_us < self.substeps or self.substeps < 1:
            raise SpecError("invalid size, window length or sub-step count")
        if self.threshold <= 0 or self.noise_rate < 0:
            raise SpecError("threshold must be positive and noise_rate non-negative")


@dataclass
class SyntheticSequence:
    stream: EventStream
    bounds: list[int]
    # keyed by boundary index j (time bounds[j])
    gt_fwd: dict[int, FlowField]
    gt_bwd: dict[int, FlowField]
    spec: SceneSpec


def _affine(tx: float, ty: float, rot_deg: float, centre) -> np.ndarray:
    """3x3 homogeneous map p -> R (p - c) + c + t."""
    th = math.radians(rot_deg)
    c, s = math.cos(th), math.sin(th)
    r = np.array([[c, -s], [s, c]])
    m = np.eye(3)
    m[:2, :2] = r
    m[:2, 2] = np.asarray(centre) - r @ np.asarray(centre) + np.array([tx, ty])
    return m


def _flow_of(m: np.ndarray, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    py = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return np.stack([px - xs, py - ys], axis=-1).astype(np.float32)


def _max_disp(m: np.ndarray, h: int, w: int) -> float:
    # displacement norm is convex in p, so its maximum sits on a grid corner
    corners = np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]], float).T
    d = (m @ corners)[:2] - corners[:2]
    return float(np.sqrt((d**2).sum(0)).max())


class Pattern:
    """Seeded procedural intensity in (0, 1), evaluable at real coordinates."""

    def __init__(self, kind: str, rng: np.random.Generator, size):
        self.kind = kind
        h, w = size
        if kind == "checkerboard":
            self.square = rng.uniform(10.0, 16.0)
            self.phase = rng.uniform(0, 2 * self.square, size=2)
        elif kind == "gradient_blobs":
            n = 24
            self.cx = rng.uniform(-0.25 * w, 1.25 * w, n)
            self.cy = rng.uniform(-0.25 * h, 1.25 * h, n)
            self.sig = rng.uniform(4.0, 10.0, n)
            self.amp = rng.choice([-1.0, 1.0], n) * rng.uniform(0.6, 1.2, n)
        else:
            n = 12
            freq = rng.uniform(0.15, 0.6, n)
            ang = rng.uniform(0, 2 * np.pi, n)
            self.kx, self.ky = freq * np.cos(ang), freq * np.sin(ang)
            self.phi = rng.uniform(0, 2 * np.pi, n)
            self.amp = rng.uniform(0.3, 1.0, n) / np.sqrt(n) * 2.0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == "checkerboard":
            s = self.square
            v = np.tanh(3.0 * np.sin(np.pi * (x + self.phase[0]) / s)) * np.tanh(
                3.0 * np.sin(np.pi * (y + self.phase[1]) / s)
            )
            return 0.5 + 0.35 * v
        if self.kind == "gradient_blobs":
            d2 = (x[..., None] - self.cx) ** 2 + (y[..., None] - self.cy) ** 2
            v = (self.amp * np.exp(-d2 / (2 * self.sig**2))).sum(-1)
            return 0.5 + 0.35 * np.tanh(v)
        v = (self.amp * np.sin(x[..., None] * self.kx + y[..., None] * self.ky + self.phi)).sum(-1)
        return 0.5 + 0.35 * np.tanh(v)


def gen_synthetic_sequence(spec: SceneSpec, seed: int) -> SyntheticSequence:
    rng = np.random.default_rng(seed)
    h, w = spec.size
    centre = ((w - 1) / 2.0, (h - 1) / 2.0)
    pattern = Pattern(spec.pattern, rng, spec.size)

    seg = [_affine(*m, centre) for m in spec.motion]
    for j, m in enumerate(seg):
        for mat in (m, np.linalg.inv(m)):
            if _max_disp(mat, h, w) > spec.max_displacement:
                raise SpecError(
                    f"window {j} displacement {_max_disp(mat, h, w):.2f} exceeds bound {spec.max_displacement}"
                )

    bounds = [j * spec.window_us for j in range(spec.windows + 1)]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])

    def log_frame(pose: np.ndarray) -> np.ndarray:
        q = np.linalg.solve(pose, pix)
        return np.log(pattern(q[0], q[1])).reshape(h, w)

    pose = np.eye(3)
    l_ref = log_frame(pose)
    l_prev = l_ref.copy()
    t_prev = 0.0
    chunks = []
    flat_ref = l_ref.ravel()
    c = spec.threshold
    for j, (tx, ty, rot) in enumerate(spec.motion):
        start_pose = pose
        for s in range(1, spec.substeps + 1):
            frac = s / spec.substeps
            pose = _affine(tx * frac, ty * frac, rot * frac, centre) @ start_pose
            t_cur = bounds[j] + frac * spec.window_us
            l_cur = log_frame(pose).ravel()
            chunks.append(_crossings(flat_ref, l_prev.ravel(), l_cur, t_prev, t_cur, c, w))
            l_prev = l_cur.reshape(h, w)
            t_prev = t_cur
        pose = seg[j] @ start_pose

    t = np.concatenate([k[0] for k in chunks]) if chunks else np.zeros(0)
    x = np.concatenate([k[1] for k in chunks]) if chunks else np.zeros(0, int)
    y = np.concatenate([k[2] for k in chunks]) if chunks else np.zeros(0, int)
    p = np.concatenate([k[3] for k in chunks]) if chunks else np.zeros(0, int)

    if spec.noise_rate > 0:
        for j in range(spec.windows):
            n = rng.poisson(spec.noise_rate * h * w)
            t = np.concatenate([t, rng.uniform(bounds[j], bounds[j + 1], n)])
            x = np.concatenate([x, rng.integers(0, w, n)])
            y = np.concatenate([y, rng.integers(0, h, n)])
            p = np.concatenate([p, rng.choice([-1, 1], n)])

    t = np.clip(np.round(t), 0, bounds[-1]).astype(np.int64)
    order = np.lexsort((x, y, t))
    stream = EventStream(t[order], x[order].astype(np.int64), y[order].astype(np.int64), p[order].astype(np.int64), h, w)

    gt_fwd = {j: FlowField(_flow_of(seg[j], h, w), 1, FORWARD) for j in range(spec.windows)}
    gt_bwd = {
        j + 1: FlowField(_flow_of(np.linalg.inv(seg[j]), h, w), 1, BACKWARD) for j in range(spec.windows)
    }
    return SyntheticSequence(stream, bounds, gt_fwd, gt_bwd, spec)


def _crossings(l_ref, l_prev, l_cur, t_prev, t_cur, c, w):
    """Threshold crossings between two sub-steps; updates ``l_ref`` in place.

    Each crossing is timestamped by linear interpolation of log intensity
    over the sub-step.
    """
    diff = l_cur - l_ref
    n = np.floor(np.abs(diff) / c).astype(np.int64)
    fired = np.flatnonzero(n)
    if not len(fired):
        return np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
    counts = n[fired]
    sign = np.sign(diff[fired])
    idx = np.repeat(fired, counts)
    k = np.concatenate([np.arange(1, m + 1) for m in counts])
    sg = np.repeat(sign, counts)
    level = l_ref[idx] + sg * k * c
    span = l_cur[idx] - l_prev[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(np.abs(span) > 1e-12, (level - l_prev[idx]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    times = t_prev + frac * (t_cur - t_prev)
    l_ref[fired] += sign * counts * c
    return times, idx % w, idx // w, sg.astype(np.int64)
