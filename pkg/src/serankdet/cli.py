"""Command-line interface.

Exit codes: 0 success, 2 usage/config error, 3 I/O or data error,
4 numeric-check failure.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .counting import count_ops
from .data import (FormatError, SynthParams, load_checkpoint, read_dataset,
                   save_checkpoint, synth_dataset, write_dataset)
from .gradcheck import CHECKS, run_checks
from .metrics import evaluate, roc_sweep, write_report, write_roc_csv
from .network import Model, NetConfig
from .serank import SeRankBlock, serank_forward
from .tensor import Tensor
from .train import TrainParams, train, write_trace_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_DEFAULTS = {
    "epochs": "500",
    "lr": "0.0001",
    "batch": "4",
    "resolution": "256",
    "channels": "64,128,256,512,1024",
    "offset_o": "3",
    "seed": "0",
    "deep_supervision": "true",
    "use_ddc": "true",
    "use_serank": "true",
    "use_lsff": "true",
    "use_pe": "true",
    "threshold": "0.5",
    "noise_sigma": "0",
}


class ConfigError(Exception):
    pass


def parse_config(path: str | None) -> dict:
    """Flat key=value settings; '#' comments; duplicate keys last-wins."""
    raw = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            raw[key] = value
    return _typed_config(raw)


def _parse_bool(key: str, value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}")


def _typed_config(raw: dict) -> dict:
    cfg = {}
    try:
        cfg["epochs"] = int(raw["epochs"])
        cfg["lr"] = float(raw["lr"])
        cfg["batch"] = int(raw["batch"])
        cfg["resolution"] = int(raw["resolution"])
        cfg["channels"] = tuple(int(v) for v in raw["channels"].split(","))
        cfg["offset_o"] = int(raw["offset_o"])
        cfg["seed"] = int(raw["seed"])
        cfg["threshold"] = float(raw["threshold"])
        cfg["noise_sigma"] = float(raw["noise_sigma"])
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}") from None
    for key in ("deep_supervision", "use_ddc", "use_serank", "use_lsff", "use_pe"):
        cfg[key] = _parse_bool(key, raw[key])
    if cfg["resolution"] % 16:
        raise ConfigError(f"resolution must be divisible by 16, got {cfg['resolution']}")
    return cfg


def net_config(cfg: dict) -> NetConfig:
    return NetConfig(
        channels=cfg["channels"],
        offset_o=cfg["offset_o"],
        deep_supervision=cfg["deep_supervision"],
        use_ddc=cfg["use_ddc"],
        use_serank=cfg["use_serank"],
        use_lsff=cfg["use_lsff"],
        use_pe=cfg["use_pe"],
    )


def cmd_synth(args) -> int:
    if args.size % 16:
        print(f"error: size must be divisible by 16, got {args.size}", file=sys.stderr)
        return EXIT_USAGE
    params = SynthParams(count=args.count, size=args.size,
                         noise_sigma=args.noise_sigma, seed=args.seed)
    samples = synth_dataset(params)
    try:
        write_dataset(args.out, samples)
    except OSError as e:
        print(f"error: cannot write dataset: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(samples)} samples of {args.size}x{args.size} "
          f"(noise sigma {args.noise_sigma}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        dataset = read_dataset(args.data)
    except (FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if not dataset:
        print("data error: dataset is empty", file=sys.stderr)
        return EXIT_DATA
    h, w = dataset[0].image.shape[-2:]
    if h != cfg["resolution"] or w != cfg["resolution"]:
        print(f"config error: resolution {cfg['resolution']} conflicts with "
              f"dataset samples of {h}x{w}", file=sys.stderr)
        return EXIT_USAGE

    if args.resume:
        try:
            model = load_checkpoint(args.resume)
        except (FormatError, OSError) as e:
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        if tuple(model.cfg.channels) != cfg["channels"]:
            print("config error: resumed checkpoint channels "
                  f"{model.cfg.channels} conflict with config {cfg['channels']}",
                  file=sys.stderr)
            return EXIT_USAGE
    else:
        model = Model(net_config(cfg), seed=cfg["seed"])

    hp = TrainParams(epochs=cfg["epochs"], lr=cfg["lr"], batch=cfg["batch"], seed=cfg["seed"])
    trace = train(model, dataset, hp)
    try:
        save_checkpoint(model, args.out)
        write_trace_csv(args.out + ".trace.csv", trace)
    except OSError as e:
        print(f"error: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"trained to step {trace.final_step}; final epoch loss "
          f"{trace.epoch_losses[-1]:.4f}; checkpoint at {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        dataset = read_dataset(args.data)
        model = load_checkpoint(args.ckpt)
    except (FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    rep = evaluate(model, dataset, threshold=args.threshold)
    for line in rep.lines():
        print(line)
    if args.report:
        try:
            write_report(args.report, rep)
        except OSError as e:
            print(f"error: cannot write report: {e}", file=sys.stderr)
            return EXIT_DATA
    return EXIT_OK


def cmd_roc(args) -> int:
    try:
        dataset = read_dataset(args.data)
        model = load_checkpoint(args.ckpt)
    except (FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    steps = args.steps
    interior = [(steps - i) / (steps + 1) for i in range(steps)]
    points = roc_sweep(model, dataset, interior)
    try:
        write_roc_csv(args.out, points)
    except OSError as e:
        print(f"error: cannot write csv: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(points)} roc points to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.module == "all":
        names = list(CHECKS)
    elif args.module in CHECKS:
        names = [args.module]
    else:
        print(f"error: unknown module {args.module!r} "
              f"(choose from all, {', '.join(CHECKS)})", file=sys.stderr)
        return EXIT_USAGE
    results = run_checks(names, seed=args.seed)
    width = max(len(n) for n in results)
    failed = False
    for name, (err, tol, ok) in results.items():
        status = "ok" if ok else "FAIL"
        print(f"{name:<{width}}  max rel err {err:.3e}  tolerance {tol:.0e}  {status}")
        failed = failed or not ok
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args) -> int:
    if args.module != "serank":
        print(f"error: unknown bench module {args.module!r} (only: serank)", file=sys.stderr)
        return EXIT_USAGE
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        print(f"error: bad sizes list {args.sizes!r}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    channels = 64
    block = SeRankBlock.create(channels, offset=0, stage=1, rng=rng)
    print(f"channels {channels}, selection k {block.k}")
    print(f"{'size':>6} {'pixels':>8} {'core ops':>12} {'total ops':>12} {'seconds':>10}")
    core_counts = []
    for s in sizes:
        x = Tensor(rng.random((1, channels, s, s)).astype(np.float32))
        with count_ops() as counter:
            serank_forward(x, block)
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            serank_forward(x, block)
            times.append(time.perf_counter() - t0)
        core = counter.buckets["attention_core"]
        core_counts.append(core)
        print(f"{s:>6} {s * s:>8} {core:>12} {counter.total:>12} {min(times):>10.4f}")
    if len(set(core_counts)) == 1:
        print("attention-core op count is constant across sizes")
        return EXIT_OK
    print("attention-core op count varies with spatial size", file=sys.stderr)
    return EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serankdet",
        description="Small-target segmentation: synthesize data, train, evaluate, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="sweep thresholds and write a ROC csv")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("gradcheck", help="tape gradients vs finite differences")
    p.add_argument("--module", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="attention cost across spatial sizes")
    p.add_argument("--module", default="serank")
    p.add_argument("--sizes", default="32,64,128")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
