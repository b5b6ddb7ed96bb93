"""Command-line entry point: ``advmix train | eval | export-mixed | selftest``.

Exit codes: 0 ok, 2 bad configuration or incompatible inputs, 3 training
diverged, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys

import numpy as np

from .config import ConfigError, DatasetSpec, TrainConfig, parse_config, serialize_config
from .data import load_dataset, sample_mix_ratios
from .export import write_mix_set
from .metrics import (
    FGSM_EPS,
    PredictionSet,
    ece,
    fgsm_accuracy,
    format_eps,
    occlusion_eval,
    summary_block,
    top_k_accuracy,
)
from .mixblock import generate, mix_labels
from .model import Architecture, load_checkpoint, predict_proba, save_checkpoint
from .objectives import network_fn
from .trainer import DivergenceError, Trainer, write_log

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "ADVMIX_OUT"

log = logging.getLogger("advmix")


def _out_dir(arg: str | None, default_name: str) -> str:
    return arg or os.path.join(os.environ.get(OUT_ENV, "runs"), default_name)


def _read_config(path: str | None, overrides: list[str], seed: int | None) -> tuple[TrainConfig, DatasetSpec]:
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    extra = list(overrides or [])
    if seed is not None:
        extra.append(f"train.seed={seed}")
    return parse_config(text, extra)


def run_id(train: TrainConfig, data: DatasetSpec) -> str:
    return hashlib.sha1(serialize_config(train, data).encode("utf-8")).hexdigest()[:12]


def write_manifest(path, train: TrainConfig, data: DatasetSpec, out_dir: str, rid: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# run_id = {rid}\n# out_dir = {out_dir}\n# seed = {train.seed}\n")
        fh.write(serialize_config(train, data))


def architecture_for(train: TrainConfig, data: DatasetSpec) -> Architecture:
    return Architecture(data.channels, data.image_size, data.num_classes, train.widths, train.blocks_per_stage)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    train, data = _read_config(args.config, args.override, args.seed)
    rid = run_id(train, data)
    out = _out_dir(args.out, f"run-{rid}")
    os.makedirs(out, exist_ok=True)
    write_manifest(os.path.join(out, "manifest.ini"), train, data, out, rid)
    (x_tr, y_tr), _ = load_dataset(data)
    trainer = Trainer(train, architecture_for(train, data))
    log_path = os.path.join(out, "train_log.csv")
    history = []

    def on_epoch(epoch, rows):
        history.extend(rows)
        if rows:
            log.info("epoch %d  loss %.4f", epoch, rows[-1].classifier_total)
        if train.checkpoint_every and (epoch + 1) % train.checkpoint_every == 0:
            save_checkpoint(os.path.join(out, f"epoch{epoch + 1:04d}.ckpt"), trainer.state)

    try:
        trainer.fit(x_tr, y_tr, on_epoch)
    finally:
        write_log(log_path, history)
    digest = save_checkpoint(os.path.join(out, "final.ckpt"), trainer.state)
    print(f"run {rid}: {len(history)} steps, checkpoint sha256 {digest}")
    return EXIT_OK


def _eval_data(state, args):
    train, data = _read_config(args.config, args.override, None)
    arch = state.arch
    if (data.channels, data.image_size, data.num_classes) != (arch.in_channels, arch.image_size, arch.num_classes):
        raise ConfigError(
            f"dataset {data.channels}x{data.image_size}x{data.image_size}/{data.num_classes} classes "
            f"does not match checkpoint {arch.in_channels}x{arch.image_size}x{arch.image_size}/{arch.num_classes}",
            "image_size",
        )
    return load_dataset(data)


def _floats(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "/" in part:
            a, b = part.split("/", 1)
            out.append(float(a) / float(b))
        elif part:
            out.append(float(part))
    return out


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    train_split, test_split = _eval_data(state, args)
    x, y = train_split if args.split == "train" else test_split
    arch, net = state.arch, state.classifier

    def proba(images):
        return predict_proba(arch, net, images)

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    row: dict[str, float] = {}
    preds = PredictionSet(proba(x), y)
    for m in wanted:
        if m == "top1":
            row["top1"] = top_k_accuracy(preds, 1)
        elif m == "top5":
            row["top5"] = top_k_accuracy(preds, min(5, arch.num_classes))
        elif m == "ece":
            row["ece"] = ece(preds, args.bins)
        elif m == "fgsm":
            model = network_fn(arch, net)
            for eps in _floats(args.eps):
                row[f"fgsm@{format_eps(eps)}"] = fgsm_accuracy(model, proba, x, y, eps)
        elif m == "occlusion":
            accs = occlusion_eval(proba, x, y, (args.patch, args.patch), _floats(args.ratios), args.seed)
            for r, acc in accs.items():
                row[f"occlusion@{r:g}"] = acc
        else:
            raise ConfigError(f"unknown metric {m!r}", "metrics")
    out = _out_dir(args.out, "eval")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(row))
        writer.writerow([repr(v) for v in row.values()])
    print(summary_block(row))
    return EXIT_OK


def cmd_export_mixed(args) -> int:
    state = load_checkpoint(args.checkpoint)
    (x, y), _ = _eval_data(state, args)
    rng = np.random.default_rng(args.seed)
    n = args.n_mix
    if n < 2:
        raise ConfigError("need at least 2 images per set", "n_mix")
    if args.sets * n > len(x):
        raise ConfigError("not enough images for the requested sets", "sets")
    fixed = None if args.lam == "dirichlet" else np.array(_floats(args.lam))
    if fixed is not None and (len(fixed) != n or np.any(fixed < 0) or abs(fixed.sum() - 1) > 1e-9):
        raise ConfigError(f"fixed ratios must be {n} simplex entries", "lam")
    out = _out_dir(args.out, "export")
    os.makedirs(out, exist_ok=True)
    pick = rng.permutation(len(x))[: args.sets * n].reshape(args.sets, n)
    eye = np.eye(state.arch.num_classes)
    lines = []
    for k, idx in enumerate(pick):
        lam = fixed if fixed is not None else sample_mix_ratios(n, args.concentration, rng)
        x_mix, masks = generate(state.arch, x[idx], lam, state.generator, state.encoder, state.feature_layer)
        names = write_mix_set(out, f"set{k:03d}", x[idx], masks.data, x_mix.data)
        y_mix = mix_labels(eye[y[idx]], lam)
        lines.append(f"set{k:03d}.indices = {' '.join(str(int(i)) for i in idx)}")
        lines.append(f"set{k:03d}.labels = {' '.join(str(int(c)) for c in y[idx])}")
        lines.append(f"set{k:03d}.lambda = {' '.join(repr(float(v)) for v in lam)}")
        lines.append(f"set{k:03d}.y_mix = {' '.join(repr(float(v)) for v in y_mix)}")
        lines.append(f"set{k:03d}.files = {' '.join(names)}")
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {args.sets} mix sets to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all(verbose=True) else 1


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="INI config file ([train] / [data] sections)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/... or ./runs/...)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--metrics", default="top1,ece,fgsm,occlusion")
    p.add_argument("--eps", default=format_eps(FGSM_EPS), help="comma list, fractions allowed")
    p.add_argument("--ratios", default="0,0.25,0.5,0.75,1")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mixed", help="write mixed samples and masks as PNG")
    common(p, checkpoint=True)
    p.add_argument("--sets", type=int, default=4)
    p.add_argument("--n-mix", type=int, default=2)
    p.add_argument("--lam", default="dirichlet", help="'dirichlet' or fixed ratios like 1,0")
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_mixed)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
