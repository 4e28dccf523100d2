"""Command line entry point: ``fedpft <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration or usage error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write, encode_tensors, load_model, save_model
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .data import generate_synthetic
from .distill import pre_fl_distill
from .experiment import distill_corpus, emit_plot_data, metrics_csv, prepare, pretrain_fm, run_mode
from .fed import MODES
from .subfm import compress_model, cost_report
from .theory import ConvexTestbed, convex_descent_experiment, proportional_gap, theorem2_check
from .transformer import ContractError, accuracy

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class CheckFailed(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(doc, out: Path, name: str) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    atomic_write(out / name, text + "\n")
    print(text)


def cmd_build_sub(args, cfg) -> int:
    out = _out(args, cfg)
    fm = load_model(args.fm) if args.fm else pretrain_fm(cfg)
    sub, report, _ = compress_model(fm, cfg.compression)
    save_model(fm, out / "fm.fpft")
    save_model(sub, out / "subfm.fpft")
    atomic_write(out / "saliency.json", report.to_json())
    _emit({"layer_d_ff": [sub.layer_d_ff(i) for i in range(sub.num_layers)]}, out, "build_sub.json")
    return EXIT_OK


def cmd_distill(args, cfg) -> int:
    out = _out(args, cfg)
    fm_path, sub_path = out / "fm.fpft", out / "subfm.fpft"
    if fm_path.exists() and sub_path.exists():
        fm, sub = load_model(fm_path), load_model(sub_path)
    else:
        fm = pretrain_fm(cfg)
        sub = compress_model(fm, cfg.compression)[0]
        save_model(fm, fm_path)
        save_model(sub, sub_path)
    corpus = distill_corpus(cfg)
    aligned, history = pre_fl_distill(fm, sub, corpus, cfg.distill, seed=cfg.seed)
    save_model(aligned, out / "subfm_aligned.fpft")
    summary = {"steps": len(history), "first_loss": history[0] if history else None, "last_loss": history[-1] if history else None}
    atomic_write(out / "distill_history.json", json.dumps(history))
    _emit(summary, out, "distill.json")
    return EXIT_OK


def cmd_federate(args, cfg) -> int:
    if args.mode:
        cfg = cfg.with_federation(mode=args.mode)
    if args.workers:
        cfg = cfg.with_federation(workers=args.workers)
    out = _out(args, cfg)
    atomic_write(out / "config.json", cfg.to_json() + "\n")
    result = run_mode(cfg, prepare(cfg))
    atomic_write(out / "metrics.csv", metrics_csv(result.records))
    emit_plot_data(result.records, out)
    save_model(result.fm, out / "fm_final.fpft")
    atomic_write(out / "adapters.fpft", encode_tensors(result.adapters.tensors))
    last = result.records[-1] if result.records else None
    _emit(
        {"mode": cfg.federation.mode, "rounds": len(result.records), "final_eval_acc": last.eval_acc if last else None},
        out,
        "federate.json",
    )
    return EXIT_OK


def cmd_report_cost(args, cfg) -> int:
    out = _out(args, cfg)
    fc = cfg.federation
    report = cost_report(
        cfg.model, cfg.compression, lora_rank=fc.lora_rank, align_interval=fc.align_interval, neuron_proportion=fc.neuron_proportion
    )
    atomic_write(out / "cost.json", report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_check_theory(args, cfg) -> int:
    out = _out(args, cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "convex-testbed"))
    descent_failures, bound_checked = 0, 0
    for _ in range(args.quadratics):
        tb = ConvexTestbed.random(5, rng)
        trace = convex_descent_experiment(tb, 1.0 / tb.lipschitz, args.steps, proportional_gap(0.4), rng.standard_normal(5), rng)
        descent_failures += not trace.ok
        bound_checked += trace.bound_checked
    k1 = 0.0 if args.self_test else args.inject_k1
    t2 = theorem2_check(args.trials, sizes=(4,), seed=derive_seed(cfg.seed, "gap-bound"), k1_override=k1)
    doc = {
        "descent": {"quadratics": args.quadratics, "failures": descent_failures, "bound_checked": bound_checked},
        "gradient_gap": {
            "trials": t2.trials,
            "violations_A": t2.violations_A,
            "violations_B": t2.violations_B,
            "max_ratio_A": t2.max_ratio_A,
            "max_ratio_B": t2.max_ratio_B,
            "k1_override": k1,
        },
    }
    _emit(doc, out, "theory.json")
    if descent_failures or not t2.passed:
        raise CheckFailed("theory check failed")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = _out(args, cfg)
    model = load_model(args.checkpoint)
    spec = replace(cfg.dataset, n=cfg.test_size, noise_rate=0.0, rule=args.rule or cfg.dataset.rule)
    data = generate_synthetic(spec, derive_seed(cfg.seed, "test"))
    acc = accuracy(model, data.tokens, data.labels)
    _emit({"checkpoint": str(args.checkpoint), "rule": spec.rule, "samples": len(data.labels), "accuracy": acc}, out, "eval.json")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fedpft", description="Desk-scale federated sub-model fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-sub", parents=[common], help="compress the full model and save both")
    p.add_argument("--fm", help="existing full-model checkpoint (default: train one)")
    p.set_defaults(func=cmd_build_sub)

    p = sub.add_parser("distill", parents=[common], help="pre-federation alignment of the sub-model")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("federate", parents=[common], help="full federated pipeline")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_federate)

    p = sub.add_parser("report-cost", parents=[common], help="compute/communication cost report")
    p.set_defaults(func=cmd_report_cost)

    p = sub.add_parser("check-theory", parents=[common], help="convex testbed and gradient-gap bound check")
    p.add_argument("--quadratics", type=int, default=20)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-k1", type=float, default=None, help="replace the weight-gap constant (fault injection)")
    p.add_argument("--self-test", action="store_true", help="inject K1 = 0; the check is expected to fail")
    p.set_defaults(func=cmd_check_theory)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on generated data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rule", choices=("majority", "shifted"))
    p.set_defaults(func=cmd_eval)
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
