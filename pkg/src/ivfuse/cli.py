"""Command-line surface: fuse, eval, train, bench.

Exit codes: 0 success, 1 usage error, 2 data error (missing/corrupt files,
bad configuration), 3 numeric failure (non-finite training state).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import report as rep
from . import trainer as tr
from . import weights as wio
from .images import ImageError, load_image, save_image, to_visible
from .loss import LossConfig
from .metrics import WindowConfig, luminance
from .model import ConfigError, NetConfig, build_network, crop_to, forward, pad_to_multiple
from .tensor import ShapeError, Tensor
from .trainer import Schedule, TrainingError

IMAGE_EXTENSIONS = (".png", ".pgm", ".ppm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Context only; measured on desktop GPU hardware, never asserted against.
GPU_REFERENCE_NOTE = (
    "note: a 0.0056 s/frame (~178 fps) figure has been reported for this "
    "architecture class on a desktop GPU; CPU timings above are not comparable."
)


class DataError(ValueError):
    """Input files or directories cannot be used as requested."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_ir(path):
    img = load_image(path)
    if img.shape[0] == 3:
        img = luminance(img)[None]
    return img


# ---------------------------------------------------------------------------
# fuse


def cmd_fuse(args):
    vis = to_visible(load_image(args.vis))
    ir = _load_ir(args.ir)
    if vis.shape[1:] != ir.shape[1:]:
        raise DataError(
            f"visible {vis.shape[1:]} and infrared {ir.shape[1:]} sizes differ"
        )
    net = _load_network_checked(args.weights)
    m = net.config.multiple
    vis_t, size = pad_to_multiple(Tensor(tr.normalize(vis)[None]), m)
    ir_t, _ = pad_to_multiple(Tensor(tr.normalize(ir)[None]), m)
    start = time.perf_counter()
    fused = forward(net, vis_t, ir_t)
    elapsed = time.perf_counter() - start
    out = crop_to(fused, size)
    save_image(tr.denormalize(out.data[0]), args.out)
    print(f"fused {size[1]}x{size[0]} pair -> {args.out} "
          f"(forward pass: {elapsed * 1e3:.1f} ms)")
    return EXIT_OK


def _load_network_checked(path):
    if not os.path.exists(path):
        raise DataError(f"weights file not found: {path}")
    return wio.load_network(path)


# ---------------------------------------------------------------------------
# eval


def _find_fused(fused_dir, stem):
    for suffix in ("", "_fused"):
        for ext in IMAGE_EXTENSIONS:
            candidate = Path(fused_dir) / f"{stem}{suffix}{ext}"
            if candidate.exists():
                return candidate
    return None


def collect_triples(pairs_dir, fused_dir):
    """(stem, vis, ir, fused) paths matched by filename stem, plus skips."""
    pairs = Path(pairs_dir)
    if not pairs.is_dir():
        raise DataError(f"pairs directory not found: {pairs_dir}")
    if not Path(fused_dir).is_dir():
        raise DataError(f"fused directory not found: {fused_dir}")
    triples, skipped = [], []
    for vis_path in sorted(pairs.iterdir()):
        if vis_path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if not vis_path.stem.endswith("_vis"):
            continue
        stem = vis_path.stem[: -len("_vis")]
        ir_path = None
        for ext in IMAGE_EXTENSIONS:
            candidate = pairs / f"{stem}_ir{ext}"
            if candidate.exists():
                ir_path = candidate
                break
        fused_path = _find_fused(fused_dir, stem)
        if ir_path is None or fused_path is None:
            skipped.append(stem)
            continue
        triples.append((stem, vis_path, ir_path, fused_path))
    return sorted(triples), sorted(skipped)


def cmd_eval(args):
    triples, skipped = collect_triples(args.pairs, args.fused)
    for stem in skipped:
        print(f"warning: skipping {stem!r} (incomplete vis/ir/fused triple)",
              file=sys.stderr)
    if not triples:
        raise DataError(f"no complete (vis, ir, fused) triples under {args.pairs}")
    cfg = WindowConfig(stride=args.stride)

    def score(item):
        stem, vis_path, ir_path, fused_path = item
        vis = to_visible(load_image(vis_path))
        ir = _load_ir(ir_path)
        fused = to_visible(load_image(fused_path))
        if vis.shape[1:] != ir.shape[1:] or vis.shape[1:] != fused.shape[1:]:
            raise DataError(f"triple {stem!r} images differ in size")
        return rep.score_triple(stem, vis, ir, fused, cfg)

    with ThreadPoolExecutor(max_workers=min(8, os.cpu_count() or 1)) as pool:
        rows = list(pool.map(score, triples))
    report = rep.ScoreReport(rows=rows)
    rep.write_score_csv(report, args.out)
    figure = rep.figure_path(args.out)
    rep.render_score_figure(report, figure)
    mean = report.mean_row()
    print(f"scored {len(rows)} pairs -> {args.out} and {figure}")
    print(f"mean qw={mean.qw:.5f} qe={mean.qe:.5f} qw*qe={mean.qw_qe:.5f} "
          f"mse_vis={mean.mse_vis:.5f} mse_ir={mean.mse_ir:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_CONFIG_DEFAULTS = {
    "data": None,            # required: synth:n,size,seed or a directory
    "out_dir": None,         # required
    "epochs": 30,
    "batch_size": 1,
    "seed": 0,
    "base_channels": 16,
    "levels": 5,
    "kernel_size": 3,
    "alpha": 1.0,
    "beta": 1.0,
    "gamma": 1.0,
    "window_size": 8,
    "train_stride": 4,
    "epsilon": 1e-8,
    "lr": 0.001,
    "milestones": (10, 20, 30),
    "lr_factor": 0.5,
    "blur_sigma_max": 1.5,
    "noise_sigma_max": 0.05,
    "augment_prob": 0.5,
    "heldout_fraction": 0.25,
    "loss_on_augmented": False,
    "checkpoint_every": 1,
    "resume": None,
}


def _parse_value(key, raw, lineno, path):
    default = _CONFIG_DEFAULTS[key]
    try:
        if key == "milestones":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None


def parse_config(path):
    """Strict key = value training config; unknown keys are hard errors."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    cfg = dict(_CONFIG_DEFAULTS)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _CONFIG_DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _parse_value(key, raw, lineno, path)
    for required in ("data", "out_dir"):
        if not cfg[required]:
            raise ConfigError(f"{path}: missing required key {required!r}")
    return cfg


def _load_pairs(data, multiple):
    if data.startswith("synth:"):
        parts = data[len("synth:"):].split(",")
        if len(parts) != 3:
            raise ConfigError(f"data spec must be synth:n,size,seed; got {data!r}")
        try:
            n, size, seed = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"data spec must be synth:n,size,seed; got {data!r}") from None
        return tr.synth_pairs(n, size, seed)
    root = Path(data)
    if not root.is_dir():
        raise DataError(f"data directory not found: {data}")
    pairs = []
    for vis_path in sorted(root.iterdir()):
        if vis_path.suffix.lower() not in IMAGE_EXTENSIONS or not vis_path.stem.endswith("_vis"):
            continue
        stem = vis_path.stem[: -len("_vis")]
        ir_path = next((root / f"{stem}_ir{ext}" for ext in IMAGE_EXTENSIONS
                        if (root / f"{stem}_ir{ext}").exists()), None)
        if ir_path is None:
            print(f"warning: skipping {stem!r} (no infrared file)", file=sys.stderr)
            continue
        vis = to_visible(load_image(vis_path))
        ir = _load_ir(ir_path)
        if vis.shape[1:] != ir.shape[1:]:
            raise DataError(f"pair {stem!r} images differ in size")
        pairs.append((vis, ir))
    if not pairs:
        raise DataError(f"no (vis, ir) training pairs under {data}")
    shape = pairs[0][0].shape[1:]
    for vis, _ in pairs:
        if vis.shape[1:] != shape:
            raise DataError("training pairs must all share one image size")
    if shape[0] % multiple or shape[1] % multiple:
        raise DataError(
            f"training image size {shape} must be divisible by {multiple}"
        )
    return pairs


def cmd_train(args):
    cfg = parse_config(args.config)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    net_cfg = NetConfig(base_channels=cfg["base_channels"], levels=cfg["levels"],
                        kernel_size=cfg["kernel_size"])
    if cfg["resume"]:
        if not os.path.exists(cfg["resume"]):
            raise DataError(f"resume checkpoint not found: {cfg['resume']}")
        net, adam, start_epoch = wio.load_checkpoint(cfg["resume"])
        print(f"resuming from {cfg['resume']} at epoch {start_epoch}")
    else:
        net = build_network(net_cfg, seed=cfg["seed"])
        adam, start_epoch = None, 0

    pairs = _load_pairs(cfg["data"], net.config.multiple)
    loss_cfg = LossConfig(
        alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
        window=WindowConfig(size=cfg["window_size"], stride=cfg["train_stride"],
                            epsilon=cfg["epsilon"]),
    )
    schedule = Schedule(milestones=cfg["milestones"], factor=cfg["lr_factor"],
                        base_lr=cfg["lr"])
    augment_cfg = tr.AugmentConfig(
        blur_sigma=(0.0, cfg["blur_sigma_max"]),
        noise_sigma=(0.0, cfg["noise_sigma_max"]),
        prob=cfg["augment_prob"], seed=cfg["seed"],
    )
    print(f"training on {len(pairs)} pairs, {net.parameter_count()} parameters, "
          f"epochs {start_epoch}..{cfg['epochs']}")

    def log_fn(row):
        print(f"epoch {row.epoch:3d}  lr {row.lr:.6f}  loss {row.loss:.5f}  "
              f"heldout qw {row.heldout_qw:.4f} qe {row.heldout_qe:.4f}")

    log = tr.fit(net, pairs, loss_cfg=loss_cfg, schedule=schedule,
                 epochs=cfg["epochs"], seed=cfg["seed"],
                 batch_size=cfg["batch_size"],
                 heldout_fraction=cfg["heldout_fraction"],
                 augment_cfg=augment_cfg, out_dir=out_dir, adam=adam,
                 start_epoch=start_epoch,
                 loss_on_augmented=cfg["loss_on_augmented"],
                 checkpoint_every=cfg["checkpoint_every"], log_fn=log_fn)

    weights_path = os.path.join(out_dir, "weights.fsn")
    wio.save_network(net, weights_path)
    log_path = os.path.join(out_dir, "training_log.csv")
    rep.write_training_csv(log, log_path)
    if log:
        rep.render_training_figure(log, rep.figure_path(log_path))
    print(f"final weights -> {weights_path}; log -> {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args):
    net = _load_network_checked(args.weights)
    m = net.config.multiple
    if args.size < m or args.size % m:
        raise DataError(f"bench size must be a positive multiple of {m}")
    if args.iters < 1:
        raise DataError("iters must be >= 1")
    rng = np.random.default_rng(args.seed)
    vis = rng.uniform(size=(3, args.size, args.size))
    ir = rng.uniform(size=(1, args.size, args.size))
    vis_t = Tensor(tr.normalize(vis)[None])
    ir_t = Tensor(tr.normalize(ir)[None])

    warmup = 2
    forward_s, e2e_s = [], []
    for i in range(warmup + args.iters):
        start = time.perf_counter()
        forward(net, vis_t, ir_t)
        fwd = time.perf_counter() - start

        start = time.perf_counter()
        pv, size = pad_to_multiple(Tensor(tr.normalize(vis)[None]), m)
        pi, _ = pad_to_multiple(Tensor(tr.normalize(ir)[None]), m)
        out = forward(net, pv, pi)
        tr.denormalize(crop_to(out, size).data[0])
        e2e = time.perf_counter() - start
        if i >= warmup:
            forward_s.append(fwd)
            e2e_s.append(e2e)

    result = rep.BenchResult(size=args.size, iters=args.iters,
                             forward_s=forward_s, end_to_end_s=e2e_s)
    fwd = result.forward_stats()
    e2e = result.end_to_end_stats()
    print(f"benchmark {args.size}x{args.size}, {args.iters} iterations "
          f"({warmup} warm-up excluded), {net.parameter_count()} parameters")
    print(f"forward     mean {fwd['mean_s'] * 1e3:8.2f} ms  "
          f"median {fwd['median_s'] * 1e3:8.2f} ms  p95 {fwd['p95_s'] * 1e3:8.2f} ms  "
          f"-> {fwd['fps']:.2f} fps (= 1 / mean)")
    print(f"end to end  mean {e2e['mean_s'] * 1e3:8.2f} ms  "
          f"median {e2e['median_s'] * 1e3:8.2f} ms  p95 {e2e['p95_s'] * 1e3:8.2f} ms  "
          f"-> {e2e['fps']:.2f} fps (= 1 / mean)")
    print(GPU_REFERENCE_NOTE)
    if args.out:
        rep.write_bench_csv(result, args.out)
        rep.render_bench_figure(result, rep.figure_path(args.out))
        print(f"samples -> {args.out} and {rep.figure_path(args.out)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = _Parser(prog="ivfuse",
                     description="infrared/visible image fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse one aligned visible/infrared pair")
    p.add_argument("--vis", required=True, help="visible image (PNG/PGM/PPM)")
    p.add_argument("--ir", required=True, help="infrared image")
    p.add_argument("--weights", required=True, help="trained weights file")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="score fused results against source pairs")
    p.add_argument("--pairs", required=True,
                   help="directory of <stem>_vis.* and <stem>_ir.* images")
    p.add_argument("--fused", required=True,
                   help="directory of fused <stem>.* images")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--stride", type=int, default=1,
                   help="window stride for qw/qe (default 1)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True, help="training config path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="measure CPU inference throughput")
    p.add_argument("--weights", required=True, help="trained weights file")
    p.add_argument("--size", type=int, default=256, help="square input size")
    p.add_argument("--iters", type=int, default=100, help="timed iterations")
    p.add_argument("--seed", type=int, default=0, help="input noise seed")
    p.add_argument("--out", default=None, help="optional CSV for raw samples")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DataError, ConfigError, ImageError, wio.WeightsError, ShapeError,
            FileNotFoundError) as exc:
        print(f"ivfuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ZeroDivisionError, FloatingPointError) as exc:
        print(f"ivfuse {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
