"""Supervised training, the regularised objective, and finite-difference gradient checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import CheckError, NumericError, ValidationError
from .flow import FlowField
from .mop import mop_forward
from .ssm import SelectiveSSM
from .trof import ETROF


@dataclass
class LossReport:
    total: torch.Tensor
    flow_l1: torch.Tensor
    ptd_penalty: torch.Tensor
    per_iteration: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "flow_l1": float(self.flow_l1.detach()),
            "ptd_penalty": float(self.ptd_penalty),
            "per_iteration": list(self.per_iteration),
        }


def _as_tensor(f) -> torch.Tensor:
    if isinstance(f, FlowField):
        return f.to_tensor().unsqueeze(0)
    return f if f.dim() == 4 else f.unsqueeze(0)


def bidirectional_l1_loss(per_iter_flows, gt_fwd, gt_bwd, mask=None, gamma: float = 0.8) -> LossReport:
    """``sum_k gamma^(K-1-k) * mean_valid(|fwd_k - gt_fwd|_1 + |bwd_k - gt_bwd|_1)``.

    Flows are (B, 2, H, W) or (2, H, W) tensors or :class:`FlowField`; the mask
    is (B, H, W) or (H, W).
    """
    if not per_iter_flows:
        raise ValidationError("need at least one iteration of predictions")
    g_f, g_b = _as_tensor(gt_fwd), _as_tensor(gt_bwd)
    b, _, h, w = g_f.shape
    if mask is None:
        m = torch.ones(b, h, w, dtype=torch.bool, device=g_f.device)
    else:
        m = torch.as_tensor(mask, dtype=torch.bool, device=g_f.device).expand(b, h, w)
    n_valid = m.sum()
    if n_valid == 0:
        raise ValidationError("valid mask is empty")
    k_total = len(per_iter_flows)
    terms = []
    for f_fwd, f_bwd in per_iter_flows:
        err = (_as_tensor(f_fwd) - g_f).abs().sum(1) + (_as_tensor(f_bwd) - g_b).abs().sum(1)
        terms.append((err * m).sum() / n_valid)
    flow = sum(gamma ** (k_total - 1 - k) * t for k, t in enumerate(terms))
    zero = flow.new_zeros(())
    return LossReport(flow, flow, zero, [float(t.detach()) for t in terms])


def ptd_penalty(e) -> torch.Tensor:
    """Frobenius norm of the perturbation."""
    return torch.linalg.norm(torch.as_tensor(e))


def model_ptd_penalty(model: torch.nn.Module) -> torch.Tensor:
    terms = [m.ptd_penalty() for m in model.modules() if isinstance(m, SelectiveSSM)]
    return torch.stack(terms).sum() if terms else torch.zeros(())


def objective(flow_report: LossReport, penalty: torch.Tensor, lambda_ptd: float) -> LossReport:
    pen = penalty.to(flow_report.flow_l1.dtype)
    total = flow_report.flow_l1 + lambda_ptd * pen if lambda_ptd else flow_report.flow_l1
    return LossReport(total, flow_report.flow_l1, pen.detach(), flow_report.per_iteration)


def lr_schedule(step: int, total_steps: int, lr_max: float) -> float:
    """Linear warm-up from ``lr_max/25`` over the first 30% of steps, then cosine to ``lr_max/1e4``."""
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    lo, hi, end = lr_max / 25.0, lr_max, lr_max / 1e4
    warm = 0.3 * total_steps
    if step <= warm:
        return lo + (hi - lo) * (step / warm if warm > 0 else 1.0)
    span = (total_steps - 1) - warm
    frac = min((step - warm) / span, 1.0) if span > 0 else 1.0
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    eps: float = 1e-4,
    max_params: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps the current parameter values to a scalar. Up to ``max_params``
    scalar entries are drawn at random across ``params``. Run in float64.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValidationError("no differentiable parameters")
    out = fn()
    with torch.no_grad():
        again = fn()
    if not torch.equal(out.detach(), again):
        raise CheckError("fragment is not deterministic: two evaluations differ")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(max_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + eps
            up = float(fn())
            view[j] = orig - eps
            down = float(fn())
            view[j] = orig
            g_fd = (up - down) / (2 * eps)
            g_a = float(grads[i].reshape(-1)[j])
            worst = max(worst, abs(g_a - g_fd) / (abs(g_a) + abs(g_fd) + 1e-8))
    return worst


def spectrum_report(model: torch.nn.Module) -> list[dict]:
    return [m.report() for m in model.modules() if isinstance(m, SelectiveSSM)]


def _spectrum_summary(model: torch.nn.Module) -> str:
    parts = []
    for i, r in enumerate(spectrum_report(model)):
        re = max(z[0] for z in r["eigenvalues"])
        parts.append(f"ssm{i}: max Re(lambda)={re:.3g}, max|a_bar|={r['max_abs_a_bar']:.6f}")
    return "; ".join(parts)


def arity_for(mode: str) -> int:
    return 5 if mode == "mop" else 3


def predict(model: ETROF, reps: torch.Tensor, mode: str, iters: int | None = None, exchange: bool = True):
    """Per-centre outputs for a batch of (B, A, C, H, W) representations, keyed by centre index."""
    if reps.shape[1] != arity_for(mode):
        raise ValidationError(f"mode {mode!r} needs {arity_for(mode)} windows per sample, data has {reps.shape[1]}")
    if mode == "trof":
        return {2: model(reps[:, 0], reps[:, 1], reps[:, 2], iters=iters)}
    out = mop_forward(model, [reps[:, j] for j in range(5)], iters=iters, exchange=exchange)
    return {c: t for c, t in zip((2, 3, 4), out.triplets)}


def batch_loss(model: ETROF, reps, gt_fwd: dict, gt_bwd: dict, cfg: TrainConfig):
    """Training objective for one batch; centres are weighted equally."""
    outs = predict(model, reps, cfg.mode, cfg.iters)
    reports = [
        bidirectional_l1_loss(list(zip(o.fwd_iters, o.bwd_iters)), gt_fwd[c], gt_bwd[c], None, cfg.gamma)
        for c, o in outs.items()
    ]
    n = len(reports)
    flow = sum(r.flow_l1 for r in reports) / n
    per_iter = [sum(r.per_iteration[k] for r in reports) / n for k in range(len(reports[0].per_iteration))]
    report = objective(LossReport(flow, flow, flow.new_zeros(()), per_iter), model_ptd_penalty(model), cfg.lambda_ptd)
    with torch.no_grad():
        epe = sum(
            float(torch.sqrt(((o.flow_fwd - gt_fwd[c]) ** 2).sum(1)).mean()) for c, o in outs.items()
        ) / n
    return report, epe


@dataclass
class TrainResult:
    model: ETROF
    log: list[dict]
    checkpoint: Path | None


def train_toy(cfg: TrainConfig, dataset, out_dir=None) -> TrainResult:
    """Train on an in-memory :class:`FlowDataset`; writes ``metrics.jsonl`` and a checkpoint to ``out_dir``.

    Deterministic given ``cfg.seed``: weights, batch order and the optimiser
    all derive from it, and the loop runs single-threaded over resident tensors.
    """
    if dataset.arity != arity_for(cfg.mode):
        raise ValidationError(
            f"mode {cfg.mode!r} needs arity {arity_for(cfg.mode)} data, dataset has arity {dataset.arity}"
        )
    if len(dataset) == 0 and cfg.total_steps > 0:
        raise ValidationError("training split is empty")
    if cfg.init_checkpoint:
        model, _ = load_checkpoint(cfg.init_checkpoint)
        mc = cfg.model_config()
        if (model.cfg.variant, model.cfg.init) != (mc.variant, mc.init):
            raise ValidationError("init_checkpoint architecture differs from the configured variant/init")
    else:
        model = build_model(cfg.model_config())
    model.train()
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr_max,
        betas=(0.9, 0.999),
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    log: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        log_f = open(out / "metrics.jsonl", "w")
    try:
        for step in range(cfg.total_steps):
            lr = lr_schedule(step, cfg.total_steps, cfg.lr_max)
            for g in opt.param_groups:
                g["lr"] = lr
            if len(order) < cfg.batch:
                order.extend(rng.permutation(len(dataset)).tolist())
            idx, order = order[: cfg.batch], order[cfg.batch :]
            reps = dataset.reps[idx]
            gt_f = {c: dataset.gt_fwd[c][idx] for c in dataset.centres}
            gt_b = {c: dataset.gt_bwd[c][idx] for c in dataset.centres}
            try:
                report, epe_train = batch_loss(model, reps, gt_f, gt_b, cfg)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}; spectra: {_spectrum_summary(model)}", step) from exc
            if not torch.isfinite(report.total):
                raise NumericError(f"non-finite loss at step {step}; spectra: {_spectrum_summary(model)}", step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            rec = {"step": step, "lr": lr, **report.to_dict(), "epe_train": epe_train}
            del rec["per_iteration"]
            log.append(rec)
            if log_f is not None and step % cfg.log_every == 0:
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
    finally:
        if log_f is not None:
            log_f.close()
    model.eval()
    ckpt = None
    if out is not None:
        ckpt = save_checkpoint(model, out, extra={"train": cfg.to_dict(), "steps": cfg.total_steps})
    return TrainResult(model, log, ckpt)
