"""Command line entry point (``pssflow`` / ``python -m pssflow``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import NumericError, ValidationError

log = logging.getLogger("pssflow")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def cmd_gen_data(args) -> int:
    from .harness.dataset import DatasetSpec, generate_dataset

    spec = DatasetSpec.from_dict(_read_json(args.spec))
    out = generate_dataset(spec, args.seed, args.out)
    log.info("wrote %d train / %d eval samples to %s", spec.n_train, spec.n_eval, out)
    return EXIT_OK


def _train_config(path, train_perturbation: bool = False):
    from .config import TrainConfig

    d = _read_json(path)
    if train_perturbation:
        d["train_perturbation"] = True
    return TrainConfig.from_dict(d)


def _dataset(data, split: str, cfg=None):
    from .harness.dataset import FlowDataset

    mc = cfg.model_config() if cfg is not None else None
    if mc is None:
        return FlowDataset(data, split)
    return FlowDataset(data, split, mc.representation, mc.time_surface_tau_us)


def cmd_train(args) -> int:
    from .train import train_toy

    cfg = _train_config(args.config, args.train_perturbation)
    res = train_toy(cfg, _dataset(args.data, "train", cfg), args.out)
    if res.log:
        last = res.log[-1]
        log.info("step %d: loss %.4f, train EPE %.4f", last["step"], last["total"], last["epe_train"])
    log.info("checkpoint: %s", res.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .harness.evaluate import run_eval

    model, _ = load_checkpoint(args.ckpt)
    mc = model.cfg
    from .harness.dataset import FlowDataset

    ds = FlowDataset(args.data, args.split, mc.representation, mc.time_surface_tau_us)
    report = run_eval(model, ds, args.mode, args.report, iters=args.iters, exchange=not args.no_exchange)
    summary = {k: report[k] for k in ("epe", "ae", "npe", "n_valid")}
    if "central" in report:
        summary["central_epe"] = report["central"]["epe"]
    print(json.dumps(summary))
    return EXIT_OK


def cmd_inspect_ssm(args) -> int:
    from .checkpoint import load_checkpoint
    from .ssm import SelectiveSSM

    model, _ = load_checkpoint(args.ckpt)
    systems = []
    for name, mod in model.named_modules():
        if isinstance(mod, SelectiveSSM):
            systems.append({"name": name, **mod.report(args.grid)})
    ratios = [s["frobenius_ratio"] for s in systems]
    out = {
        "init": model.cfg.init,
        "n_systems": len(systems),
        "max_abs_a_bar": max(s["max_abs_a_bar"] for s in systems),
        "frobenius_ratio_range": [min(ratios), max(ratios)],
        "systems": systems,
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def ablation_table(rows: list[dict]) -> str:
    lines = ["| Methods | Initialization | EPE |", "|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['init']} | {r['epe']:.3f} |")
    return "\n".join(lines)


def cmd_ablate_init(args) -> int:
    import dataclasses

    from .harness.evaluate import run_eval
    from .train import train_toy

    base = _train_config(args.config)
    train_ds = _dataset(args.data, "train", base)
    eval_ds = _dataset(args.data, "eval", base)
    method = {"trof": "E-TROF", "mop": "E-MOP"}[base.mode] + f" ({base.variant})"
    rows = []
    for init, label in (("hippo", "HiPPO"), ("ptd", "PTD")):
        cfg = dataclasses.replace(base, init=init, total_steps=args.steps)
        out = Path(args.out) / init if args.out else None
        res = train_toy(cfg, train_ds, out)
        report = run_eval(res.model, eval_ds, cfg.mode)
        rows.append({"method": method, "init": label, "epe": report["epe"], "steps": args.steps})
        log.info("%s: EPE %.4f after %d steps", label, report["epe"], args.steps)
    print(ablation_table(rows))
    if args.report:
        Path(args.report).write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pssflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="dataset spec JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory for checkpoint and metric log")
    t.add_argument("--train-perturbation", action="store_true", help="learn the perturbation under the norm penalty")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("trof", "mop"), default="trof")
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="eval", choices=("train", "eval"))
    e.add_argument("--iters", type=int, default=None)
    e.add_argument("--no-exchange", action="store_true", help="disable motion-state exchange in mop mode")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-ssm", help="spectral report of every SSM in a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--grid", type=int, default=50, help="points on the step-size grid")
    s.set_defaults(func=cmd_inspect_ssm)

    a = sub.add_parser("ablate-init", help="compare HiPPO and perturbed initialisation")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--steps", type=int, default=500)
    a.add_argument("--out", default=None, help="optional directory for both runs")
    a.add_argument("--report", default=None, help="optional JSON copy of the table rows")
    a.set_defaults(func=cmd_ablate_init)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
