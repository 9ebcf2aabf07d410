"""Checkpoint archives: a zip of ``manifest.json`` plus one ``.npy`` per tensor."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import ValidationError
from .trof import ETROF

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.zip"


def build_model(cfg: ModelConfig) -> ETROF:
    """Seeded construction, so equal configs give bitwise-equal initial weights."""
    torch.manual_seed(cfg.seed)
    return ETROF(cfg)


def _resolve(path) -> Path:
    p = Path(path)
    return p / CHECKPOINT_NAME if p.is_dir() or p.suffix == "" else p


def save_checkpoint(model: ETROF, path, extra: dict | None = None) -> Path:
    path = _resolve(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")} for k, v in state.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for k, v in state.items():
            buf = io.BytesIO()
            np.save(buf, v.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(f"tensors/{k}.npy", buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[ETROF, dict]:
    """Rebuild the model from its stored config and load every tensor; returns (model, manifest)."""
    path = _resolve(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ValidationError(f"{path}: not a checkpoint archive") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        model = build_model(ModelConfig.from_dict(manifest["config"]))
        state = {}
        for k, meta in manifest["tensors"].items():
            arr = np.load(io.BytesIO(zf.read(f"tensors/{k}.npy")), allow_pickle=False)
            if list(arr.shape) != meta["shape"]:
                raise ValidationError(f"{path}: tensor {k} has shape {arr.shape}, manifest says {meta['shape']}")
            state[k] = torch.from_numpy(arr)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValidationError(f"{path}: state mismatch (missing {missing}, unexpected {unexpected})")
    model.eval()
    return model, manifest


def state_equal(a: ETROF, b: ETROF) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
