"""Model and training configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

# width, blocks; scaled down for CPU training
VARIANTS = {
    "base": (64, 4),
    "small": (48, 3),
    "nano": (32, 2),
}


@dataclass
class ModelConfig:
    variant: str = "nano"
    representation: str = "binned12"
    time_surface_tau_us: float = 5000.0
    in_channels: int | None = None
    d_model: int | None = None
    n_blocks: int | None = None
    d_state: int = 16
    scan_dirs: int = 4
    init: str = "ptd"
    perturb_scale: float = 0.1
    train_perturbation: bool = False
    delta_min: float = 1e-3
    delta_max: float = 1e-1
    pos_grid: tuple[int, int] = (32, 32)
    corr_levels: int = 2
    corr_radius: int = 3
    corr_dim: int = 64
    flow_dim: int = 32
    motion_dim: int = 32
    motion_feat_dim: int = 64
    iters: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.representation not in ("binned12", "time_surface"):
            raise ValidationError(f"unknown representation {self.representation!r}")
        if self.in_channels is None:
            self.in_channels = 12 if self.representation == "binned12" else 2
        d, nb = VARIANTS[self.variant]
        if self.d_model is None:
            self.d_model = d
        if self.n_blocks is None:
            self.n_blocks = nb
        self.pos_grid = tuple(self.pos_grid)
        if self.scan_dirs not in (2, 4):
            raise ValidationError("scan_dirs must be 2 or 4")
        if self.init not in ("ptd", "hippo"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.n_blocks < 1:
            raise ValidationError("need at least one encoder block")
        if self.iters < 1:
            raise ValidationError("need at least one refinement iteration")

    @property
    def hidden_dim(self) -> int:
        return self.d_model

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pos_grid"] = list(self.pos_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    lr_max: float = 4e-4
    total_steps: int = 2000
    batch: int = 4
    seed: int = 0
    lambda_ptd: float | None = None
    gamma: float = 0.8
    variant: str = "nano"
    init: str = "ptd"
    mode: str = "trof"
    iters: int = 6
    train_perturbation: bool = False
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    log_every: int = 1
    # optional warm start, e.g. fine-tuning a triplet checkpoint in five-window mode
    init_checkpoint: str | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValidationError("lr_max must be positive")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must lie in (0, 1]")
        if self.lambda_ptd is None:
            self.lambda_ptd = 1e-4 if self.train_perturbation else 0.0
        if self.lambda_ptd < 0:
            raise ValidationError("lambda_ptd must be non-negative")
        if self.total_steps < 0 or self.batch < 1:
            raise ValidationError("total_steps must be >= 0 and batch >= 1")
        if self.mode not in ("trof", "mop"):
            raise ValidationError(f"unknown mode {self.mode!r}")

    def model_config(self) -> ModelConfig:
        extra = dict(self.model)
        return ModelConfig(
            variant=self.variant,
            init=self.init,
            iters=self.iters,
            train_perturbation=self.train_perturbation,
            seed=self.seed,
            **extra,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)
