import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import SMALL_MODEL
from pssflow.checkpoint import build_model, load_checkpoint, state_equal
from pssflow.config import TrainConfig
from pssflow.errors import CheckError, NumericError, ValidationError
from pssflow.flow import FlowField
from pssflow.harness.dataset import FlowDataset
from pssflow import train as train_mod
from pssflow.train import (
    LossReport,
    bidirectional_l1_loss,
    grad_check,
    lr_schedule,
    model_ptd_penalty,
    objective,
    ptd_penalty,
    train_toy,
)


def _flows(b=2, h=4, w=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, 2, h, w, generator=g), torch.randn(b, 2, h, w, generator=g)


def test_loss_zero_at_ground_truth():
    f, b = _flows()
    r = bidirectional_l1_loss([(f, b), (f.clone(), b.clone())], f, b)
    assert float(r.flow_l1) == 0 and r.per_iteration == [0.0, 0.0]


def test_loss_uniform_unit_error():
    f, b = _flows()
    r = bidirectional_l1_loss([(f + 1, b - 1)], f, b)
    assert float(r.flow_l1) == pytest.approx(4.0)


def test_loss_weighting_and_symmetry():
    f, b = _flows()
    its = [(f + k, b) for k in (1.0, 2.0, 3.0)]
    r = bidirectional_l1_loss(its, f, b, gamma=0.5)
    assert float(r.flow_l1) == pytest.approx(0.25 * 2 + 0.5 * 4 + 1 * 6)
    perm = [its[2], its[0], its[1]]
    assert float(bidirectional_l1_loss(its, f, b, gamma=1.0).flow_l1) == pytest.approx(
        float(bidirectional_l1_loss(perm, f, b, gamma=1.0).flow_l1)
    )


def test_loss_mask():
    f, b = _flows(b=1)
    pred = f.clone()
    pred[0, :, 0, 0] += 10
    mask = torch.ones(1, 4, 5, dtype=torch.bool)
    mask[0, 0, 0] = False
    assert float(bidirectional_l1_loss([(pred, b)], f, b, mask).flow_l1) == 0
    with pytest.raises(ValidationError):
        bidirectional_l1_loss([(pred, b)], f, b, torch.zeros(1, 4, 5, dtype=torch.bool))
    ff = FlowField(f[0].permute(1, 2, 0).numpy(), 1)
    fb = FlowField(b[0].permute(1, 2, 0).numpy(), 1)
    assert float(bidirectional_l1_loss([(f[0], b[0])], ff, fb).flow_l1) == 0


def test_ptd_penalty_examples():
    assert float(ptd_penalty(torch.zeros(4, 4))) == 0
    e = torch.zeros(3, 3)
    e[1, 2] = 3
    assert float(ptd_penalty(e)) == 3
    r = np.random.default_rng(0).normal(size=(16, 16))
    assert float(ptd_penalty(torch.from_numpy(r))) == pytest.approx(math.sqrt(sum(v * v for v in r.ravel())), abs=1e-9)


def test_objective_decomposition():
    f, b = _flows()
    flow = bidirectional_l1_loss([(f + 0.5, b)], f, b)
    pen = torch.tensor(2.5)
    rep = objective(flow, pen, 1e-2)
    assert float(rep.total) == pytest.approx(float(rep.flow_l1) + 1e-2 * 2.5)
    assert float(rep.total) >= 0 and float(rep.ptd_penalty) >= 0


def test_hippo_penalty_vanishes(tiny_cfg):
    tiny_cfg.init = "hippo"
    m = build_model(tiny_cfg)
    assert float(model_ptd_penalty(m)) == 0
    f, b = _flows()
    flow = bidirectional_l1_loss([(f + 1, b)], f, b)
    assert float(objective(flow, model_ptd_penalty(m), 1e-4).total) == float(flow.flow_l1)


def test_lr_schedule_examples():
    total, peak = 1000, 4e-4
    assert lr_schedule(0, total, peak) == pytest.approx(peak / 25)
    assert lr_schedule(300, total, peak) == pytest.approx(peak)
    assert abs(lr_schedule(total - 1, total, peak) - peak / 1e4) <= 0.01 * peak / 1e4
    with pytest.raises(ValidationError):
        lr_schedule(total, total, peak)
    with pytest.raises(ValidationError):
        lr_schedule(-1, total, peak)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5000), st.floats(1e-5, 1e-2))
def test_lr_schedule_shape(total, peak):
    lrs = [lr_schedule(s, total, peak) for s in range(total)]
    warm = [s for s in range(total) if s <= 0.3 * total]
    assert all(a <= b + 1e-15 for a, b in zip(lrs[: len(warm)], lrs[1 : len(warm)]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[len(warm) :], lrs[len(warm) + 1 :]))
    assert max(lrs) <= peak * (1 + 1e-12) and min(lrs) >= peak / 1e4 * (1 - 1e-12)


def test_grad_check_linear():
    g = torch.Generator().manual_seed(0)
    lin = torch.nn.Linear(6, 3).double()
    x = torch.randn(4, 6, generator=g, dtype=torch.float64)
    w = torch.randn(4, 3, generator=g, dtype=torch.float64)
    err = grad_check(lambda: (lin(x) * w).sum(), list(lin.parameters()))
    assert err <= 1e-6


def test_grad_check_rejects_nondeterminism():
    p = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
    with pytest.raises(CheckError):
        grad_check(lambda: (p * torch.rand(3, dtype=torch.float64)).sum(), [p])


def _cfg(**kw):
    base = dict(total_steps=3, batch=2, lr_max=1e-3, iters=2, seed=5, model=dict(SMALL_MODEL))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_checkpoint_is_initialisation(data3, tmp_path):
    cfg = _cfg(total_steps=0)
    res = train_toy(cfg, FlowDataset(data3), tmp_path / "run")
    loaded, manifest = load_checkpoint(tmp_path / "run")
    assert state_equal(loaded, build_model(cfg.model_config()))
    assert manifest["seed"] == 5 and res.log == []


def test_training_is_deterministic(data3, tmp_path):
    ds = FlowDataset(data3)
    train_toy(_cfg(), ds, tmp_path / "a")
    train_toy(_cfg(), ds, tmp_path / "b")
    la = (tmp_path / "a" / "metrics.jsonl").read_text()
    assert la == (tmp_path / "b" / "metrics.jsonl").read_text()
    recs = [json.loads(l) for l in la.splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) == {"step", "lr", "total", "flow_l1", "ptd_penalty", "epe_train"}
    a, _ = load_checkpoint(tmp_path / "a")
    b, _ = load_checkpoint(tmp_path / "b")
    assert state_equal(a, b)
    assert not state_equal(a, build_model(_cfg().model_config()))


def test_trainable_perturbation_adds_penalty(data3, tmp_path):
    cfg = _cfg(total_steps=1, train_perturbation=True)
    assert cfg.lambda_ptd == 1e-4
    res = train_toy(cfg, FlowDataset(data3))
    rec = res.log[0]
    assert rec["ptd_penalty"] > 0
    assert rec["total"] == pytest.approx(rec["flow_l1"] + 1e-4 * rec["ptd_penalty"], rel=1e-6)
    assert _cfg().lambda_ptd == 0.0


def test_mop_training_and_arity_checks(data3, data5):
    res = train_toy(_cfg(mode="mop", total_steps=1, batch=1), FlowDataset(data5))
    assert len(res.log) == 1 and np.isfinite(res.log[0]["total"])
    with pytest.raises(ValidationError):
        train_toy(_cfg(mode="mop"), FlowDataset(data3))


def test_warm_start(data3, data5, tmp_path):
    res = train_toy(_cfg(total_steps=2), FlowDataset(data3), tmp_path / "init")
    tuned = train_toy(_cfg(mode="mop", total_steps=0, init_checkpoint=str(tmp_path / "init")), FlowDataset(data5))
    assert state_equal(tuned.model, res.model)
    with pytest.raises(ValidationError):
        train_toy(_cfg(mode="mop", total_steps=0, init="hippo", init_checkpoint=str(tmp_path / "init")),
                  FlowDataset(data5))


def test_nan_loss_aborts_with_step(data3, monkeypatch):
    real = train_mod.batch_loss

    def poisoned(model, reps, gt_f, gt_b, cfg):
        rep, epe = real(model, reps, gt_f, gt_b, cfg)
        nan = rep.total * float("nan")
        return LossReport(nan, rep.flow_l1, rep.ptd_penalty, rep.per_iteration), epe

    monkeypatch.setattr(train_mod, "batch_loss", poisoned)
    with pytest.raises(NumericError) as exc:
        train_toy(_cfg(), FlowDataset(data3))
    assert exc.value.where == 0 and "max Re(lambda)" in str(exc.value)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr_max=0)
    with pytest.raises(ValidationError):
        TrainConfig(gamma=0)
    with pytest.raises(ValidationError):
        TrainConfig(lambda_ptd=-1)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"bogus": 1})
