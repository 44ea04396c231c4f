"""Command-line entry point: ``mdpd <subcommand> [flags]``.

Exit codes: 0 success, 1 failed grad check, 2 config error, 3 convergence
failure (a failure record is still written), 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import MODES, ConfigError, TrainConfig, parse_config
from .harness import (ConvergenceError, ablate, build_models, finetune, models_state,
                      persist, pretrain, target_task)
from .memory import analytic_memory, measure_ledgers, reconcile
from .trainer import evaluate

# shared parent-parser actions make per-subparser defaults leak, so they live here
DEFAULT_OUT = {"pretrain": "pretrain.ckpt", "finetune": "finetune.jsonl", "ablate": "ablate.jsonl"}

EXIT_OK, EXIT_GRAD, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("mdpd")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--steps", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="mask ratio")
    common.add_argument("--r", type=int, help="side-network reduction factor")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mdpd", description="Side-network distillation on synthetic transfer tasks.")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("pretrain", parents=[common], help="train a backbone on the source task")
    sp = sub.add_parser("finetune", parents=[common], help="adapt a pretrained backbone to the target task")
    sp.add_argument("--checkpoint", help="pretrained backbone; pretrains in-process when omitted")
    sp = sub.add_parser("eval", parents=[common], help="evaluate a finetuned checkpoint on the target task")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--faded-only", action="store_true", help="skip the side-assisted evaluation")
    sp = sub.add_parser("ablate", parents=[common], help="finetune over a one-axis grid and several seeds")
    sp.add_argument("--sweep", required=True, metavar="KEY=V1,V2,...")
    sp.add_argument("--seeds", default="0", help="comma-separated seed list")
    sp = sub.add_parser("mem-report", parents=[common], help="analytic and measured activation memory")
    sp = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op and the objective")
    sp.add_argument("--tol", type=float, default=1e-4)
    sub.add_parser("dump-config", parents=[common], help="print the effective configuration")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.mode is not None:
        out["mode"] = args.mode
    if args.steps is not None:
        out["steps"] = str(args.steps)
    if args.lam is not None:
        out["distill.lambda"] = repr(args.lam)
    if args.r is not None:
        out["arch.r"] = str(args.r)
    return out


def _load_backbone(cfg: TrainConfig, path):
    if path:
        state = ckpt.load(path)
        # accept both a bare pretrain checkpoint and a finetune one
        if any(k.startswith("backbone.") for k in state):
            state = ckpt.unprefixed("backbone", state)
        return state
    log.info("no --checkpoint given, pretraining seed %d in-process", cfg.seed)
    state, _ = pretrain(cfg)
    return state


def cmd_pretrain(cfg: TrainConfig, args) -> int:
    try:
        state, rec = pretrain(cfg)
    except ConvergenceError as exc:
        print(f"pretraining failed: {exc}", file=sys.stderr)
        persist([exc.record], Path(args.out).with_suffix(".failure.jsonl"))
        return EXIT_CONVERGENCE
    ckpt.save(args.out, state)
    print(json.dumps({"checkpoint": str(args.out), "seed": cfg.seed, **rec.final}))
    return EXIT_OK


def cmd_finetune(cfg: TrainConfig, args) -> int:
    try:
        backbone = _load_backbone(cfg, args.checkpoint)
    except ConvergenceError as exc:
        print(f"pretraining failed: {exc}", file=sys.stderr)
        persist([exc.record], args.out)
        return EXIT_CONVERGENCE
    rec, models = finetune(cfg, backbone)
    persist([rec], args.out, lam=cfg.distill.lam)
    ckpt.save(Path(args.out).with_suffix(".ckpt"), models_state(models))
    print(json.dumps({"mode": rec.mode, "seed": rec.seed, **rec.final}))
    return EXIT_OK


def cmd_eval(cfg: TrainConfig, args) -> int:
    state = ckpt.load(args.checkpoint)
    if not any(k.startswith("backbone.") for k in state):
        state = ckpt.prefixed("backbone", state)
    has_side = any(k.startswith("side.") for k in state)
    has_distill = any(k.startswith("distill.") for k in state)
    mode = "mdpd" if has_distill else "side_only" if has_side else "partial"
    models = build_models(dataclasses.replace(cfg, mode=mode), ckpt.unprefixed("backbone", state), mode)
    for prefix, mod in (("side", models.side), ("distill", models.distill)):
        if mod is not None:
            mod.load_state_dict(ckpt.unprefixed(prefix, state))
    # head was reinitialised by build_models; restore the trained one
    models.backbone.load_state_dict(ckpt.unprefixed("backbone", state))
    task = target_task(cfg)
    out = {"faded": evaluate(models, task.eval, "faded")}
    if has_side and not args.faded_only:
        out["assisted"] = evaluate(models, task.eval, "assisted", cfg.distill)
    print(json.dumps(out))
    return EXIT_OK


def cmd_ablate(cfg: TrainConfig, args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from None
    try:
        records = ablate(cfg, args.sweep, seeds)
    except ConvergenceError as exc:
        print(f"pretraining failed: {exc}", file=sys.stderr)
        persist([exc.record], args.out)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    persist(records, args.out, lam=cfg.distill.lam)
    print(f"{len(records)} runs written to {args.out}")
    return EXIT_OK


def cmd_mem_report(cfg: TrainConfig, args) -> int:
    spec = cfg.arch
    rep = analytic_memory(spec)
    side, full = measure_ledgers(spec)
    rec = reconcile(side, full, rep, tol=0.15)
    rows = [("a_total", rep.a_total), ("sigma_total", rep.sigma_total), ("full_ft", rep.full_ft),
            ("petl_lower_bound", rep.petl_lower_bound), ("side_network", rep.side_network)]
    print(f"{'quantity':<18}{'scalars':>12}{'/ full_ft':>12}")
    for name, v in rows:
        print(f"{name:<18}{v:>12.6g}{v / rep.full_ft:>12.4f}")
    print(f"{'ratio_empirical':<18}{'':>12}{rec.ratio_empirical:>12.4f}")
    payload = {"spec": spec.as_dict(), "a_total": rep.a_total, "sigma_total": rep.sigma_total,
               "full_ft": rep.full_ft, "petl_lower_bound": rep.petl_lower_bound,
               "side_network": rep.side_network, "ratio_empirical": rec.ratio_empirical}
    print(json.dumps(payload))
    if args.out:
        Path(args.out).write_text(json.dumps(payload) + "\n")
    return EXIT_OK


def cmd_grad_check(cfg: TrainConfig, args) -> int:
    from .checks import check_all

    results = check_all()
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:<16}{err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    return EXIT_OK if worst < args.tol else EXIT_GRAD


def cmd_dump_config(cfg: TrainConfig, args) -> int:
    text = cfg.dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mem-report": cmd_mem_report,
    "grad-check": cmd_grad_check,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.out is None:
        args.out = DEFAULT_OUT.get(args.command)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
