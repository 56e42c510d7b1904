"""Command-line interface: train, eval, grad-check, probe-dump."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import write_checkpoint
from .config import TrainConfig, load_config
from .gradcheck import TOLERANCE, run_grad_checks
from .training import (
    aggregate_reports,
    build_task,
    checkpoint_params,
    evaluate,
    format_value,
    probe_csv,
    probe_dump,
    restore,
    train,
)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in config.seeds:
        task = build_task(config, seed)
        result = train(task, config, seed)
        _write_text(out_dir / f"metrics_seed{seed}.csv", result.csv_text)
        write_checkpoint(out_dir / f"ckpt_seed{seed}.ispw",
                         config.with_run_seed(seed).to_text(),
                         checkpoint_params(result.encoder, result.prompts))
        report = evaluate(result.encoder, result.prompts, task, config)
        report["seed"] = seed
        per_seed.append(report)
        print(f"seed {seed}: base {report['base_acc']:.2f}  "
              f"new {report['new_acc']:.2f}  hm {report['hm']:.2f}")
    aggregate = aggregate_reports(per_seed, config)
    payload = {
        "base_acc": aggregate.base_acc,
        "new_acc": aggregate.new_acc,
        "hm": aggregate.hm,
        "per_seed": aggregate.per_seed,
        "config_hash": aggregate.config_hash,
        "config": config.to_text(),
    }
    _write_text(out_dir / "report.json", json.dumps(payload, indent=2) + "\n")
    print(f"average: base {aggregate.base_acc:.2f}  new {aggregate.new_acc:.2f}  "
          f"hm {aggregate.hm:.2f}")
    return 0


def cmd_eval(args) -> int:
    config, encoder, prompts, run_seed = restore(args.ckpt)
    task_seed = args.task_seed if args.task_seed is not None else run_seed
    if task_seed < 0:
        print("error: checkpoint has no recorded seed; pass --task-seed",
              file=sys.stderr)
        return 2
    task = build_task(config, task_seed, encoder)
    encoder.bind_class_identities(task.class_identities)
    report = evaluate(encoder, prompts, task, config)
    print(f"base {report['base_acc']:.2f}  new {report['new_acc']:.2f}  "
          f"hm {report['hm']:.2f}")
    if args.out:
        payload = dict(report)
        payload.update(task_seed=task_seed, config_hash=config.hash(),
                       config=config.to_text())
        _write_text(Path(args.out), json.dumps(payload, indent=2) + "\n")
    if args.trace_out:
        _dump_trace(encoder, prompts, task, config, Path(args.trace_out))
    return 0


def _dump_trace(encoder, prompts, task, config, path: Path) -> None:
    """Per-layer refined prompts and affinity matrices for the first
    base-test image."""
    from .pipeline import forward
    from .tensor import no_grad

    image, _ = task.base_test[0]
    with no_grad():
        out = forward(image, prompts, encoder, task.base_classes,
                      beta=config.beta, ssp_residual=config.ssp_residual,
                      csp_text_context=config.csp_text_context,
                      text_pool=config.text_pool, trace=True)
    layers = []
    for entry in out.trace or []:
        pair = entry["affinities"]
        layers.append({
            "layer": entry["layer"],
            "visual_prompts": entry["visual_prompts"].tolist(),
            "a_vt": pair.a_vt.data.tolist(),
            "a_tv": pair.a_tv.data.tolist(),
            "a_vv": pair.a_vv.data.tolist(),
            "a_tt": pair.a_tt.data.tolist(),
            "beta": pair.beta,
        })
    _write_text(path, json.dumps({"layers": layers}, indent=2) + "\n")


def cmd_grad_check(args) -> int:
    reports = run_grad_checks(args.op)
    failed = 0
    for report in reports:
        ok = report.max_rel_err <= TOLERANCE
        failed += int(not ok)
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {report.op_name:<28} max_rel_err={report.max_rel_err:.3e}")
    print(f"{len(reports) - failed}/{len(reports)} checks within {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_probe_dump(args) -> int:
    config, encoder, prompts, run_seed = restore(args.ckpt)
    task_seed = args.task_seed if args.task_seed is not None else run_seed
    if task_seed < 0:
        print("error: checkpoint has no recorded seed; pass --task-seed",
              file=sys.stderr)
        return 2
    task = build_task(config, task_seed, encoder)
    encoder.bind_class_identities(task.class_identities)
    records = probe_dump(encoder, prompts, task, config)
    text = probe_csv(records, config.with_run_seed(task_seed).to_text())
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    counts = np.bincount([r["bucket"] for r in records], minlength=5)
    print(f"# {len(records)} samples; bucket counts {counts.tolist()}",
          file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isp",
        description="Desk-scale dual-encoder prompt tuning with structural "
                    "refinement and difficulty-weighted training")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train prompts on a synthetic task")
    p_train.add_argument("--config", help="flat key = value config file "
                                          "(defaults apply when omitted)")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--task-seed", type=int, default=None,
                        help="task generator seed (defaults to the seed "
                             "recorded in the checkpoint)")
    p_eval.add_argument("--out", help="write a JSON report here")
    p_eval.add_argument("--trace-out",
                        help="write per-layer affinity traces here")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("grad-check",
                            help="finite-difference gradient verification")
    p_grad.add_argument("--op", default=None,
                        help="single named check (default: all)")
    p_grad.set_defaults(func=cmd_grad_check)

    p_probe = sub.add_parser("probe-dump",
                             help="per-sample difficulty records")
    p_probe.add_argument("--ckpt", required=True)
    p_probe.add_argument("--task-seed", type=int, default=None)
    p_probe.add_argument("--out", help="write CSV here instead of stdout")
    p_probe.set_defaults(func=cmd_probe_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
