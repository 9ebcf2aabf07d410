"""On-disk synthetic datasets and their in-memory tensor view.

Layout written by :func:`generate_dataset`::

    manifest.json
    train/00000.evt  train/00000.json  train/00000_fwd_c2.flo  train/00000_bwd_c2.flo ...
    eval/...

Sample ``k`` holds ``arity`` windows with bounds ``tau_0 .. tau_arity``;
representation ``j`` (0-based) aggregates ``[tau_j, tau_{j+1})`` and the
flows are stored for each triplet centre ``c`` at time ``tau_c``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import ValidationError
from ..events import EventStream, build_binned_representation, build_time_surface, load_events, save_events, window_slices
from ..flow import BACKWARD, FORWARD, read_flow, write_flow
from .synth import SceneSpec, gen_synthetic_sequence

FORMAT_VERSION = 1


@dataclass
class DatasetSpec:
    pattern: str = "checkerboard"
    size: tuple[int, int] = (64, 64)
    arity: int = 3
    n_train: int = 200
    n_eval: int = 20
    max_translation: float = 5.0
    max_rotation_deg: float = 0.0
    static_fraction: float = 0.1
    velocity_jitter: float = 0.0
    noise_rate: float = 0.0
    window_us: int = 10_000
    substeps: int = 8
    threshold: float = 0.15
    max_displacement: float = 5.0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        if self.arity not in (3, 5):
            raise ValidationError("dataset arity must be 3 (triplet) or 5 (motion propagation)")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValidationError("sample counts must be non-negative")
        if not 0 <= self.static_fraction <= 1:
            raise ValidationError("static_fraction must lie in [0, 1]")

    @property
    def centres(self) -> list[int]:
        return list(range(2, self.arity))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size"] = list(self.size)
        return d


def sample_scene(spec: DatasetSpec, rng: np.random.Generator) -> SceneSpec:
    """Draw one scene; per-window motion stays within ``max_displacement``."""
    if rng.uniform() < spec.static_fraction:
        motion = [(0.0, 0.0, 0.0)] * spec.arity
    else:
        rot = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
        h, w = spec.size
        # rotation about the centre moves the farthest corner this much
        rot_reach = 2 * math.sin(math.radians(abs(rot)) / 2) * math.hypot(w - 1, h - 1) / 2
        budget = max(spec.max_translation - spec.velocity_jitter - rot_reach, 0.0)
        mag = budget * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        base = np.array([mag * math.cos(ang), mag * math.sin(ang)])
        motion = []
        for _ in range(spec.arity):
            v = base + rng.uniform(-1, 1, 2) * spec.velocity_jitter / math.sqrt(2)
            motion.append((float(v[0]), float(v[1]), float(rot)))
    return SceneSpec(
        pattern=spec.pattern,
        motion=motion,
        noise_rate=spec.noise_rate,
        size=spec.size,
        windows=spec.arity,
        window_us=spec.window_us,
        substeps=spec.substeps,
        threshold=spec.threshold,
        max_displacement=spec.max_displacement,
    )


def _sample_seed(seed: int, split: str, index: int) -> int:
    tag = 0 if split == "train" else 1
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def generate_dataset(spec: DatasetSpec, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    for split, n in (("train", spec.n_train), ("eval", spec.n_eval)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            s = _sample_seed(seed, split, i)
            scene = sample_scene(spec, np.random.default_rng(s))
            seq = gen_synthetic_sequence(scene, s)
            stem = d / f"{i:05d}"
            save_events(seq.stream, stem.with_suffix(".evt"))
            for c in spec.centres:
                write_flow(seq.gt_fwd[c], f"{stem}_fwd_c{c}.flo")
                write_flow(seq.gt_bwd[c], f"{stem}_bwd_c{c}.flo")
            meta = {"seed": s, "bounds": seq.bounds, "motion": [list(m) for m in scene.motion]}
            stem.with_suffix(".json").write_text(json.dumps(meta))
    manifest = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "spec": spec.to_dict(),
        "splits": {"train": spec.n_train, "eval": spec.n_eval},
        "centres": spec.centres,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{data_dir}: no manifest.json")
    return json.loads(path.read_text())


def build_representations(stream: EventStream, bounds, representation: str = "binned12", tau_us: float = 5000.0):
    reps = []
    for j, win in enumerate(window_slices(stream, bounds)):
        if representation == "binned12":
            reps.append(build_binned_representation(win, bounds[j], bounds[j + 1], 12))
        elif representation == "time_surface":
            reps.append(build_time_surface(win, bounds[j + 1], tau_us, 1, t_start=bounds[j]))
        else:
            raise ValidationError(f"unknown representation {representation!r}")
    return reps


class FlowDataset:
    """All samples of one split, resident as tensors.

    ``reps`` is (N, arity, C, H, W); ``gt_fwd[c]`` / ``gt_bwd[c]`` are (N, 2, H, W).
    """

    def __init__(self, data_dir, split: str = "train", representation: str = "binned12", tau_us: float = 5000.0):
        self.root = Path(data_dir)
        self.manifest = read_manifest(data_dir)
        self.spec = DatasetSpec.from_dict(self.manifest["spec"])
        self.split = split
        n = self.manifest["splits"][split]
        reps, fwd, bwd = [], {c: [] for c in self.centres}, {c: [] for c in self.centres}
        d = self.root / split
        for i in range(n):
            stem = d / f"{i:05d}"
            meta = json.loads(stem.with_suffix(".json").read_text())
            stream = load_events(stem.with_suffix(".evt"))
            rs = build_representations(stream, meta["bounds"], representation, tau_us)
            reps.append(np.stack([r.data.transpose(2, 0, 1) for r in rs]))
            for c in self.centres:
                fwd[c].append(read_flow(f"{stem}_fwd_c{c}.flo", 1, FORWARD).data.transpose(2, 0, 1))
                bwd[c].append(read_flow(f"{stem}_bwd_c{c}.flo", 1, BACKWARD).data.transpose(2, 0, 1))
        h, w = self.spec.size
        if reps:
            self.reps = torch.from_numpy(np.stack(reps).astype(np.float32))
        else:
            self.reps = torch.zeros(0, self.arity, 12, h, w)
        self.gt_fwd = {c: _stack(fwd[c], h, w) for c in self.centres}
        self.gt_bwd = {c: _stack(bwd[c], h, w) for c in self.centres}

    @property
    def arity(self) -> int:
        return self.spec.arity

    @property
    def centres(self) -> list[int]:
        return self.spec.centres

    def __len__(self) -> int:
        return self.reps.shape[0]


def _stack(arrs, h, w) -> torch.Tensor:
    if not arrs:
        return torch.zeros(0, 2, h, w)
    return torch.from_numpy(np.stack(arrs).astype(np.float32))
