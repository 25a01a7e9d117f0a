"""Command-line entry point.

Subcommands: synth, train, eval, gradcheck, bench, ratefield.
Exit codes: 0 success, 1 usage error, 2 runtime error, 3 gradcheck failure.
stdout carries machine-readable results, stderr diagnostics.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import data, models, tensor, training


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _positive_int(value):
    iv = int(value)
    if iv < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return iv


def _build_parser():
    parser = _Parser(prog="ascnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file overriding corpus defaults")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--model", required=True,
                   choices=["classic7", "dilated7", "ascnet7", "ascnet14"])
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=_positive_int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report CSV path")
    p.add_argument("--log-every", type=_positive_int, default=100)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pooled", action="store_true",
                   help="pool counts over the dataset instead of per-image means")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--target", required=True,
                   choices=["classic", "dilated", "asc", "ratenet", "model"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="train and compare the three 7-layer models")
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=_positive_int, default=2000)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("ratefield", help="export the learned rate field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", required=True)

    return parser


def _split_dir(root, split):
    root = Path(root)
    candidate = root / split
    return candidate if candidate.is_dir() else root


def _load_split(root, split):
    return data.load_image_dir(_split_dir(root, split))


def _cmd_synth(args):
    cfg_kwargs = {}
    if args.config:
        with open(args.config) as f:
            cfg_kwargs = json.load(f)
        for key in ("small_radius", "large_radius", "small_per_image",
                    "large_per_image"):
            if key in cfg_kwargs:
                cfg_kwargs[key] = tuple(cfg_kwargs[key])
    if args.seed is not None:
        cfg_kwargs["seed"] = args.seed
    cfg = data.SynthConfig(**cfg_kwargs)
    train_set, test_set = data.generate_synth(cfg)
    out = Path(args.out)
    data.write_samples(train_set, out / "train")
    data.write_samples(test_set, out / "test")
    manifest = dataclasses.asdict(cfg)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(train_set)} train + {len(test_set)} test pairs to {out}")
    return 0


def _train_one(variant, train_set, cfg, num_classes=2):
    h, w = train_set[0].image.shape[2:]
    in_ch = train_set[0].image.shape[1]
    spec = models.ModelSpec(variant, num_classes, h, w, in_ch)
    model = models.build_model(spec, tensor.make_rng(cfg.seed))
    return training.train(model, train_set, cfg)


def _cmd_train(args):
    train_set = _load_split(args.data, "train")
    cfg = training.TrainConfig(
        iterations=args.iters, lr=args.lr, beta1=args.beta1, beta2=args.beta2,
        eps=args.eps, seed=args.seed, deterministic=args.deterministic,
        log_every=args.log_every,
    )
    try:
        model, report = _train_one(args.model, train_set, cfg)
    except training.TrainingDiverged as exc:
        print(f"training diverged at iteration {exc.iteration}", file=sys.stderr)
        return 2
    models.save_checkpoint(model, args.out)
    if args.report:
        report.to_csv(args.report)

    test_dir = Path(args.data) / "test"
    if test_dir.is_dir():
        result = training.evaluate(model, data.load_image_dir(test_dir))
        lines = [f"dice={result.dice:.4f}", f"precision={result.precision:.4f}",
                 f"recall={result.recall:.4f}"]
        print("\n".join(lines))
        if args.report:
            with open(str(args.report) + ".metrics.txt", "w") as f:
                f.write("\n".join(lines) + "\n")
    return 0


def _cmd_eval(args):
    model = models.load_checkpoint(args.ckpt)
    samples = _load_split(args.data, "test")
    for s in samples:
        if s.image.shape[2:] != (model.spec.height, model.spec.width):
            print(
                f"data dims {s.image.shape[2:]} do not match checkpoint "
                f"({model.spec.height},{model.spec.width})", file=sys.stderr,
            )
            return 2
    result = training.evaluate(model, samples, pooled=args.pooled)
    print(f"dice={result.dice:.4f} precision={result.precision:.4f} "
          f"recall={result.recall:.4f}")
    return 0


def _cmd_gradcheck(args):
    report = training.grad_check(args.target, seed=args.seed)
    print(f"target={report.target}")
    for e in report.entries:
        err = "-" if np.isnan(e.max_rel_err) else f"{e.max_rel_err:.3e}"
        print(f"{e.status:4s} {e.group:24s} max_rel_err={err} tol={e.tol:.0e}")
    return 0 if report.passed else 3


def _cmd_bench(args):
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        print("--seeds must be a comma-separated list of integers", file=sys.stderr)
        return 1
    if not seeds:
        print("--seeds must name at least one seed", file=sys.stderr)
        return 1

    train_set = _load_split(args.data, "train")
    test_set = _load_split(args.data, "test")
    print("note: synthetic desk-scale benchmark; absolute metric values are "
          "not comparable to full-scale published results", file=sys.stderr)

    rows = []
    for variant in ("classic7", "dilated7", "ascnet7"):
        per_seed = []
        for seed in seeds:
            cfg = training.TrainConfig(iterations=args.iters, lr=args.lr,
                                       seed=seed)
            model, _ = _train_one(variant, train_set, cfg)
            per_seed.append(training.evaluate(model, test_set))
        rows.append((
            variant,
            statistics.median(r.dice for r in per_seed),
            statistics.median(r.precision for r in per_seed),
            statistics.median(r.recall for r in per_seed),
        ))
    rows.sort(key=lambda r: r[1], reverse=True)

    print("| Model | Dice | Precision | Recall |")
    print("|-------|------|-----------|--------|")
    for name, d, p, r in rows:
        print(f"| {name} | {d:.4f} | {p:.4f} | {r:.4f} |")
    return 0


def _cmd_ratefield(args):
    model = models.load_checkpoint(args.ckpt)
    if not model.is_adaptive:
        print(f"checkpoint variant {model.spec.variant!r} has no rate field "
              "(only ascnet variants learn one)", file=sys.stderr)
        return 2

    img_path = Path(args.image)
    raw = data.read_pgm(img_path)
    maxval = 65535 if raw.dtype.itemsize == 2 else 255
    h, w = raw.shape
    image = data.preprocess(raw.astype(np.float32) / maxval).reshape(1, 1, h, w)
    rates = models.rate_network_forward(image, model.ratenet)
    data.export_rate_field(rates, args.out_prefix)

    stats_lines = [f"mean={rates.mean()!r}"]
    lbl_path = img_path.with_name(img_path.name.replace("img_", "lbl_"))
    meta_path = img_path.parent / "meta.csv"
    if lbl_path.exists() and lbl_path != img_path:
        labels = data.read_pgm(lbl_path).astype(np.int64)
        meta = []
        if meta_path.exists():
            import csv as _csv
            import re as _re

            idx = int(_re.search(r"img_(\d+)\.pgm", img_path.name).group(1))
            with open(meta_path, newline="") as f:
                for row in _csv.DictReader(f):
                    if int(row["index"]) == idx:
                        meta.append((float(row["cy"]), float(row["cx"]),
                                     float(row["radius"])))
        stats = data.rate_stats(rates, labels, meta)
        stats_lines += [f"{k}={v!r}" for k, v in stats.items()]
    with open(str(args.out_prefix) + ".stats.txt", "w") as f:
        f.write("\n".join(stats_lines) + "\n")
    print("\n".join(stats_lines))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "ratefield": _cmd_ratefield,
}


def main(argv=None) -> int:
    if os.environ.get("ASC_THREADS"):
        # Cap BLAS threading; also keeps fast-mode runs reproducible.
        os.environ.setdefault("OMP_NUM_THREADS", os.environ["ASC_THREADS"])
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
