"""``pydnet`` command line: analyze, train, eval, bench, selftest.

Training options may come from a flat ``key=value`` file (``--config``);
command-line flags override file values.  Accepted keys::

    model          canonical model name, e.g. PydMobileNet-Concat-29-0.25
    dataset        cifar10 | cifar100 | synthetic
    data_dir       CIFAR binary directory (falls back to $PYDNET_DATA_DIR)
    out            output directory for metrics.csv and checkpoints
    epochs, base_lr, lr_drops (comma separated), lr_factor, momentum,
    weight_decay, batch_size, seed, augment, mixup, mixup_alpha, record_time
    train_limit    use only the first N training images (0 = all)
    synthetic_size number of synthetic images (train split; test is a quarter)
    resume         checkpoint to continue from

All randomness derives from ``seed``: stream 0 initializes weights, 1 shuffles,
2 augments, 3 drives mixup, 9 generates synthetic data.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .cost import MACS, TWO_MACS, analyze_network
from .data import (NUM_CLASSES, BatchIterator, DatasetError, Normalizer, default_data_dir,
                   load_cifar, synthetic_quadrants)
from .models import NetworkConfig, build_network, model_grid
from .tensor import make_rng
from .train import TrainConfig, Trainer, evaluate

log = logging.getLogger("pydnet")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "PydMobileNet-Concat-29-0.25"
    dataset: str = "cifar10"
    data_dir: str = ""
    out: str = "runs/default"
    epochs: int = 320
    base_lr: float = 0.1
    lr_drops: str = "150,225"
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    mixup: bool = False
    mixup_alpha: float = 0.2
    record_time: bool = True
    train_limit: int = 0
    synthetic_size: int = 512
    resume: str = ""

    def train_config(self) -> TrainConfig:
        drops = tuple(int(t) for t in str(self.lr_drops).split(",") if t.strip())
        return TrainConfig(epochs=self.epochs, base_lr=self.base_lr, lr_drops=drops,
                           lr_factor=self.lr_factor, momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           seed=self.seed, augment=self.augment, mixup=self.mixup,
                           mixup_alpha=self.mixup_alpha, record_time=self.record_time)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw):
    kind = _FIELDS[key].type
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float}.get(kind, str)(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve_run_config(config_path=None, overrides=None) -> RunConfig:
    values = parse_config_file(config_path) if config_path else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise UsageError(f"unknown option {key!r}")
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    if not cfg.data_dir:
        cfg.data_dir = default_data_dir() or ""
    return cfg


# -- datasets ------------------------------------------------------------------

def load_dataset(cfg: RunConfig):
    """Returns ((train_px, train_y), (test_px, test_y), classes)."""
    if cfg.dataset == "synthetic":
        px, y = synthetic_quadrants(cfg.synthetic_size, make_rng(cfg.seed, 9))
        tpx, ty = synthetic_quadrants(max(4, cfg.synthetic_size // 4), make_rng(cfg.seed, 9, 1))
        return (px, y), (tpx, ty), NUM_CLASSES["synthetic"]
    if cfg.dataset not in ("cifar10", "cifar100"):
        raise UsageError(f"unknown dataset {cfg.dataset!r}")
    if not cfg.data_dir:
        raise UsageError("no --data-dir given and PYDNET_DATA_DIR is unset")
    train = load_cifar(cfg.data_dir, cfg.dataset, "train")
    test = load_cifar(cfg.data_dir, cfg.dataset, "test")
    if cfg.train_limit:
        train = (train[0][:cfg.train_limit], train[1][:cfg.train_limit])
    return train, test, NUM_CLASSES[cfg.dataset]


def _normalizer_for(cfg: RunConfig, out: Path, train_px) -> Normalizer:
    return Normalizer.cached(out / f"normalization_{cfg.dataset}.txt", train_px)


# -- subcommands -----------------------------------------------------------------

def cmd_analyze(args) -> int:
    convention = TWO_MACS if args.flops_convention == "2macs" else MACS
    if args.all_grid:
        lines = []
        if args.format == "csv":
            lines.append("model,depth,params,flops")
            for cfg in model_grid():
                r = analyze_network(cfg, convention)
                lines.append(f"{cfg.name},{cfg.depth},{r.total_params},{r.total_flops}")
        else:
            lines.append(f"{'model':<30}{'depth':>6}{'params':>12}{'FLOPs':>14}")
            for cfg in model_grid():
                r = analyze_network(cfg, convention)
                lines.append(f"{cfg.name:<30}{cfg.depth:>6}{r.total_params:>12,}{r.total_flops:>14,}")
        text = "\n".join(lines) + "\n"
    else:
        if not args.model:
            raise UsageError("give a model name or --all-grid")
        cfg = NetworkConfig.from_name(args.model, classes=args.classes)
        report = analyze_network(cfg, convention)
        text = report.to_csv() if args.format == "csv" else report.to_text()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k, None) for k in _FIELDS}
    cfg = resolve_run_config(args.config, overrides)
    train_cfg = cfg.train_config()
    (px, y), (tpx, ty), classes = load_dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    norm = _normalizer_for(cfg, out, px)
    net_cfg = NetworkConfig.from_name(cfg.model, classes=classes)
    model = build_network(net_cfg, make_rng(cfg.seed, 0))
    augment = train_cfg.augment and cfg.dataset != "synthetic"
    train = BatchIterator(px, y, norm, min(train_cfg.batch_size, len(y)), train=True,
                          augment=augment, seed=cfg.seed)
    test = BatchIterator(tpx, ty, norm, train_cfg.batch_size, train=False)
    trainer = Trainer(model, train_cfg, train, test, out_dir=str(out),
                      extra_tensors={"meta/normalization": normalization_tensor(norm)})
    if cfg.resume:
        saved = ckpt_io.load_checkpoint(cfg.resume)
        ckpt_io.restore(saved, model, trainer.optimizer)
        trainer.start_epoch = saved.epoch
        log.info("resumed %s at epoch %d", saved.model_name, saved.epoch)
    print(f"training {net_cfg.name} on {cfg.dataset} ({len(y)} images) for "
          f"{train_cfg.epochs - trainer.start_epoch} epochs -> {out}")
    while trainer.start_epoch < train_cfg.epochs:
        trainer.run(1)
        print(trainer.history[-1].csv_row(), flush=True)
    return 0


def normalization_tensor(norm: Normalizer) -> np.ndarray:
    """Stored with the weights so ``eval`` needs no training data."""
    return np.concatenate([norm.mean, norm.std]).astype(np.float32)


def cmd_eval(args) -> int:
    saved = ckpt_io.load_checkpoint(args.checkpoint)
    model = ckpt_io.build_from_checkpoint(saved)
    cfg = resolve_run_config(None, {"dataset": args.dataset, "data_dir": args.data_dir,
                                    "seed": args.seed, "synthetic_size": args.synthetic_size})
    (px, _), (tpx, ty), classes = load_dataset(cfg)
    if classes != model.cfg.classes:
        raise UsageError(f"checkpoint has {model.cfg.classes} classes, {cfg.dataset} has {classes}")
    meta = saved.tensors.get("meta/normalization")
    if meta is not None and meta.shape != (6,):
        raise UsageError(f"meta/normalization has shape {meta.shape}, expected (6,)")
    norm = Normalizer(meta[:3], meta[3:]) if meta is not None else Normalizer.fit(px)
    err = evaluate(model, BatchIterator(tpx, ty, norm, args.batch_size, train=False))
    print(f"{saved.model_name} epoch {saved.epoch}: top-1 error {err:.4f}")
    return 0


def bench(model_name: str, batch_size: int = 128, repeat: int = 10, warmup: int = 1,
          classes: int = 10, seed: int = 0):
    """Per-batch inference latencies in milliseconds (BN in eval mode)."""
    if repeat < 1 or batch_size < 1:
        raise UsageError("repeat and batch size must be positive")
    model = build_network(NetworkConfig.from_name(model_name, classes=classes), make_rng(seed, 0)).eval()
    x = make_rng(seed, 4).standard_normal((batch_size, 3, 32, 32)).astype(np.float32)
    for _ in range(warmup):
        model.forward(x)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        model.forward(x)
        times.append((time.perf_counter() - t0) * 1000.0)
    return times


def cmd_bench(args) -> int:
    times = bench(args.model, args.batch_size, args.repeat, args.warmup, args.classes)
    print(f"{args.model} batch {args.batch_size}: mean {np.mean(times):.1f} ms, "
          f"min {np.min(times):.1f} ms over {len(times)} runs")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(seeds=args.seeds)
    print("selftest: all checks passed" if ok else "selftest: FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pydnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="parameter / FLOP report")
    a.add_argument("model", nargs="?")
    a.add_argument("--all-grid", action="store_true", help="summary of all 22 grid models")
    a.add_argument("--flops-convention", choices=["macs", "2macs"], default="macs")
    a.add_argument("--format", choices=["text", "csv"], default="text")
    a.add_argument("--classes", type=int, default=10)
    a.add_argument("--output", "-o")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train a model", description=__doc__,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("config", nargs="?", help="key=value config file")
    t.add_argument("--model")
    t.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"])
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--base-lr", dest="base_lr", type=float)
    t.add_argument("--lr-drops", dest="lr_drops")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--train-limit", dest="train_limit", type=int)
    t.add_argument("--synthetic-size", dest="synthetic_size", type=int)
    t.add_argument("--mixup", action="store_const", const=True)
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--no-timing", dest="record_time", action="store_const", const=False)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 error of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", default="cifar10", choices=["cifar10", "cifar100", "synthetic"])
    e.add_argument("--data-dir", dest="data_dir")
    e.add_argument("--batch-size", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--synthetic-size", type=int, default=512)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference latency")
    b.add_argument("model")
    b.add_argument("--batch-size", type=int, default=128)
    b.add_argument("--repeat", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--classes", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="gradient and oracle checks")
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, DatasetError, ckpt_io.CheckpointError, OSError) as exc:
        print(f"pydnet {args.command}: error: {exc}", file=sys.stderr)
        if args.command == "analyze":
            print("usage hint: pydnet analyze PydMobileNet-Add-29-0.5 | --all-grid", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
