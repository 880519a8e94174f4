"""Command-line surface: gen-data, train, decode, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every command is
reproducible from its flags plus the seed, and the resolved configuration is
echoed into the artifacts it writes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import codec, evaluation, world
from .config import RunConfig
from .decoder import DecodeConfig, decode_autoregressive, decode_diffusion
from .model import MaskPredictor, load_checkpoint
from .training import ConfigError, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part]


def _float_list(raw: str) -> list[float]:
    return [float(part) for part in raw.split(",") if part]


def _onoff_list(raw: str) -> list[str]:
    modes = [part.strip() for part in raw.split(",") if part.strip()]
    for mode in modes:
        if mode not in ("on", "off"):
            raise argparse.ArgumentTypeError("expected comma-separated on/off")
    return modes


def build_parser() -> _Parser:
    parser = _Parser(prog="diffplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    common.add_argument("--out", type=Path, default=None, help="output path")

    p = sub.add_parser("gen-data", parents=[common], help="emit a synthetic dataset file")
    p.add_argument("--kind", choices=("driving", "parking"), default=None)
    p.add_argument("--count", type=_positive_int, default=None)

    p = sub.add_parser("train", parents=[common], help="fine-tune a mask predictor")

    p = sub.add_parser("decode", parents=[common], help="decode one scene and print it")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--cache", default=None, help="prompt-cache refresh interval K, or 'off'")
    p.add_argument("--ar", action="store_true", help="use the left-to-right baseline decoder")
    p.add_argument("--trace-out", type=Path, default=None)

    p = sub.add_parser("bench", parents=[common], help="benchmark sweeps, CSV output")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--ckpt-off", type=Path, default=None, help="checkpoint trained without the fixed pattern")
    p.add_argument("--ablate", choices=("tau", "steps"), default=None)
    p.add_argument("--compare", choices=("ar",), default=None)
    p.add_argument("--taus", type=_float_list, default=[0.9, 0.7, 0.5, 0.3])
    p.add_argument("--steps", type=_int_list, default=[16, 32, 64, 128])
    p.add_argument("--fp", type=_onoff_list, default=["on"])
    p.add_argument("--fixed-steps", type=_positive_int, default=32)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--count", type=_positive_int, default=50)
    p.add_argument("--eval-seed", type=int, default=1_000_000)
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _checkpoint_model(path):
    model, extra = load_checkpoint(path)
    waypoints = extra.get("waypoints", 6)
    widths = (extra.get("int_digits", 2), extra.get("frac_digits", 1))
    tpl = codec.build_template(waypoints, widths)
    if not extra.get("fixed_pattern", True):
        tpl = codec.degenerate_template(tpl)
    return model, tpl, extra.get("kind", "driving")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    kind = args.kind or cfg["data.kind"]
    count = args.count or cfg["data.count"]
    out = args.out or (cfg["data.out"] and Path(cfg["data.out"]))
    if not out:
        raise UsageError("gen-data requires --out or data.out")
    path = world.emit_dataset(count, cfg["seed"], kind, out)
    print(f"wrote {count} {kind} samples to {path}")
    return 0


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train requires --config")
    cfg = _load_config(args)
    dataset_path = cfg["train.dataset"]
    if not dataset_path:
        raise UsageError("config must set train.dataset")
    dataset = world.load_dataset(dataset_path)
    tpl = cfg.template()

    model = MaskPredictor(cfg.model_config(tpl.length), seed=cfg["seed"])
    ckpt = args.out or (cfg["train.checkpoint"] and Path(cfg["train.checkpoint"]))
    if not ckpt:
        raise UsageError("train requires --out or train.checkpoint")
    extra = {
        "kind": dataset[0].scenario_id.split("/")[0] if "/" in dataset[0].scenario_id else "driving",
        "waypoints": tpl.waypoint_count,
        "int_digits": tpl.int_width,
        "frac_digits": tpl.frac_width,
        "fixed_pattern": tpl.fixed_pattern,
        "config": cfg.echo(),
    }
    report = train(
        model,
        dataset,
        cfg.train_config(),
        tpl,
        checkpoint_path=ckpt,
        log_path=cfg["train.log"] or None,
        checkpoint_extra=extra,
    )
    print(f"epoch losses: {[round(l, 4) for l in report.epoch_losses]}")
    print(f"checkpoint: {report.checkpoint_path}")
    return 0


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    model, tpl, kind = _checkpoint_model(args.ckpt)
    sample = world.generate(args.sample_seed, kind)

    if args.ar:
        traj, trace = decode_autoregressive(model, sample.raster, sample.instruction, tpl)
    else:
        decode_cfg = DecodeConfig(
            steps=args.steps or cfg["decode.steps"],
            tau=cfg["decode.tau"] if args.tau is None else args.tau,
            cache_refresh=_parse_cache(args.cache, cfg),
        )
        traj, trace = decode_diffusion(model, sample.raster, sample.instruction, tpl, decode_cfg)

    final = codec.encode(traj, tpl)
    print(codec.render(final, tpl.vocab))
    for (x, y), t in zip(traj.waypoints, traj.timestamps):
        print(f"  t={t:.1f}s  x={x:+.1f}  y={y:+.1f}")
    print(f"steps={len(trace.steps)} model_calls={trace.model_calls} time={trace.wallclock_s * 1e3:.1f}ms")
    if args.trace_out:
        trace.write_jsonl(args.trace_out)
        print(f"trace: {args.trace_out}")
    return 0


def _parse_cache(raw, cfg: RunConfig):
    if raw is None:
        return cfg["decode.cache"]
    if str(raw).lower() in ("off", "none"):
        return None
    return int(raw)


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if not args.out:
        raise UsageError("bench requires --out")
    if args.ablate is None and args.compare is None:
        raise UsageError("bench requires --ablate or --compare")
    model, tpl, kind = _checkpoint_model(args.ckpt)
    samples = [world.generate(args.eval_seed + i, kind) for i in range(args.count)]
    echo = f"{cfg.echo()} bench.count={args.count} bench.eval_seed={args.eval_seed}"

    if args.compare == "ar":
        decode_cfg = DecodeConfig(steps=args.fixed_steps, tau=args.tau)
        rows = []
        for decoder in ("diffusion", "ar"):
            res = evaluation.evaluate(model, samples, tpl, decode_cfg, decoder=decoder)
            rows.append(
                {
                    "decoder": decoder,
                    "l2_1s": res.metrics.l2_at.get(1.0, float("nan")),
                    "l2_2s": res.metrics.l2_at.get(2.0, float("nan")),
                    "l2_3s": res.metrics.l2_at.get(3.0, float("nan")),
                    "l2_avg": res.metrics.l2_avg,
                    "failure_rate": res.metrics.failure_rate,
                    "mean_calls": res.latency.mean_model_calls,
                    "mean_time_s": res.latency.mean_wallclock_s,
                }
            )
        evaluation.write_csv(args.out, evaluation.COMPARE_CSV_HEADER, rows, echo)
    elif args.ablate == "tau":
        rows = evaluation.ablate_threshold(model, samples, tpl, args.taus, steps=args.fixed_steps)
        evaluation.write_csv(args.out, evaluation.THRESHOLD_CSV_HEADER, rows, echo)
    else:
        rows = []
        for mode in args.fp:
            if mode == "on":
                rows += evaluation.ablate_steps(model, samples, tpl, args.steps, True, args.tau)
            else:
                if args.ckpt_off is None:
                    raise UsageError("--fp off requires --ckpt-off")
                model_off, tpl_off, _ = _checkpoint_model(args.ckpt_off)
                rows += evaluation.ablate_steps(model_off, samples, tpl_off, args.steps, False, args.tau)
        evaluation.write_csv(args.out, evaluation.STEPS_CSV_HEADER, rows, echo)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
