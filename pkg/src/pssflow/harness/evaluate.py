"""Checkpoint evaluation over a dataset split."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from ..checkpoint import load_checkpoint
from ..errors import ValidationError
from ..flow import BACKWARD, FORWARD, FlowField, write_flow
from ..train import arity_for, predict
from ..trof import ETROF
from .dataset import FlowDataset
from .metrics import MetricAccumulator


def run_eval(
    model: ETROF | str | Path,
    dataset: FlowDataset,
    mode: str = "trof",
    report_path=None,
    iters: int | None = None,
    exchange: bool = True,
    chunk: int = 8,
    flow_dir=None,
) -> dict:
    """Per-sample and aggregate forward-flow metrics for every triplet centre.

    The headline ``epe``/``ae``/``npe`` are pooled over all centres; in
    five-window mode ``central`` holds the middle triplet on its own.
    """
    if mode not in ("trof", "mop"):
        raise ValidationError(f"unknown mode {mode!r}")
    if dataset.arity != arity_for(mode):
        raise ValidationError(f"mode {mode!r} needs arity {arity_for(mode)} data, dataset has arity {dataset.arity}")
    if len(dataset) == 0:
        raise ValidationError("evaluation split is empty")
    if not isinstance(model, ETROF):
        model, _ = load_checkpoint(model)
    model.eval()
    if flow_dir is None and report_path is not None:
        flow_dir = Path(report_path).with_suffix("").as_posix() + "_flows"
    if flow_dir is not None:
        Path(flow_dir).mkdir(parents=True, exist_ok=True)

    pooled = MetricAccumulator()
    per_centre = {c: MetricAccumulator() for c in dataset.centres}
    samples = []
    with torch.no_grad():
        for start in range(0, len(dataset), chunk):
            idx = list(range(start, min(start + chunk, len(dataset))))
            outs = predict(model, dataset.reps[idx], mode, iters, exchange)
            for b, i in enumerate(idx):
                entry = {"index": i}
                for c, o in outs.items():
                    pred = FlowField.from_tensor(o.flow_fwd[b], 1, FORWARD)
                    gt = FlowField.from_tensor(dataset.gt_fwd[c][i], 1, FORWARD)
                    r = per_centre[c].add(pred, gt)
                    pooled.add(pred, gt)
                    entry[f"c{c}"] = r.to_dict()
                    if flow_dir is not None:
                        write_flow(pred, Path(flow_dir) / f"{i:05d}_fwd_c{c}.flo")
                        write_flow(FlowField.from_tensor(o.flow_bwd[b], 1, BACKWARD), Path(flow_dir) / f"{i:05d}_bwd_c{c}.flo")
                samples.append(entry)

    report = pooled.report().to_dict()
    report.update(
        {
            "mode": mode,
            "iters": iters if iters is not None else model.cfg.iters,
            "exchange": exchange if mode == "mop" else None,
            "n_samples": len(dataset),
            "centres": {f"c{c}": acc.report().to_dict() for c, acc in per_centre.items()},
            "samples": samples,
        }
    )
    if mode == "mop":
        report["central"] = report["centres"]["c3"]
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report
