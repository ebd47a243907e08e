"""Command-line entry point: ``mscnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import fileio, metrics, trainer
from . import model as mdl
from .density import KernelParams, count_from_density, downsample_sum, render_density_map
from .rng import stream

log = logging.getLogger("mscnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _spec(name: str) -> mdl.ModelSpec:
    if name == "default":
        return mdl.default_spec()
    if name == "reduced":
        return mdl.default_spec(divisor=8)
    raise ValueError(f"unknown model spec {name!r} (expected 'default' or 'reduced')")


def _kernel(args) -> KernelParams:
    return KernelParams(args.beta, args.knn, args.fallback_sigma, args.truncation)


def cmd_densitymap(args) -> int:
    image_path, ann = fileio.load_annotation(args.ann)
    dmap = render_density_map(ann, _kernel(args))
    if args.downsample != 1:
        dmap = downsample_sum(dmap, args.downsample)
    fileio.write_dmap(args.out, dmap)
    print(f"{count_from_density(dmap):.2f}")
    return 0


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                               epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                               init_std=args.init_std, subtract_mean=args.subtract_mean)


def _augment(samples: list[trainer.Sample], args) -> list[trainer.Sample]:
    if args.augment == "none":
        return samples
    if args.augment == "ninecrop":
        return [a for s in samples for a in trainer.augment_ninecrop(s)]
    rng = stream(args.seed, "crops")
    return [a for s in samples for a in trainer.augment_randomcrop(s, args.crop_n, args.crop_size, rng)]


def _fit(samples: list[trainer.Sample], args) -> tuple[mdl.Model, list[trainer.LossRecord]]:
    config = _train_config(args)
    model = mdl.build_mscnn(_spec(args.model_spec), config.init_std, args.seed,
                            rng=stream(args.seed, "init"))
    log.info("training on %d samples: %s", len(samples), config)
    return trainer.train(model, _augment(samples, args), config)


def cmd_train(args) -> int:
    samples = fileio.load_dataset(args.data, _kernel(args))
    model, history = _fit(samples, args)
    mdl.save_checkpoint(model, args.out)
    if args.loss_csv:
        trainer.write_loss_csv(history, args.loss_csv)
    print(f"trained {len(history)} iterations, final loss {history[-1].loss:.6g}")
    return 0


def _print_report(report: metrics.EvalReport) -> None:
    print(f"MAE {report.mae:.4f}")
    print(f"MSE {report.mse:.4f} (root-mean-square)")
    print(f"PARAMS {report.params}")


def cmd_eval(args) -> int:
    samples = fileio.load_dataset(args.data, _kernel(args))
    report = metrics.evaluate(mdl.load_checkpoint(args.model), samples, args.subtract_mean)
    report.write(args.report)
    _print_report(report)
    return 0


def cmd_predict(args) -> int:
    model = mdl.load_checkpoint(args.model)
    image = fileio.load_image_grayscale(args.image)
    h, w = image.shape[1:]
    fh, fw = h - h % 4, w - w % 4
    y0, x0 = (h - fh) // 2, (w - fw) // 2
    image = trainer.model_input(image[:, y0:y0 + fh, x0:x0 + fw], args.subtract_mean)
    pred = mdl.forward(model, image)[0]
    fileio.write_dmap(args.out, pred)
    print(f"{count_from_density(pred):.2f}")
    return 0


def cmd_params(args) -> int:
    total, rows = mdl.param_count(_spec(args.model_spec))
    width = max(len(name) for name, _ in rows)
    for name, n in rows:
        print(f"{name:<{width}} {n:>9d}")
    published = mdl.PUBLISHED_PARAMS
    delta = total - published
    print(f"PUBLISHED {published} (reported as 2.9M) deviation {delta:+d} ({delta / published:+.2%})")
    print(f"TOTAL {total}")
    return 0


def cmd_synth(args) -> int:
    config = fileio.SyntheticSceneConfig(
        image_size=(args.size, args.size), head_count=(args.min_heads, args.max_heads),
        dot_radius=args.dot_radius, noise=args.noise, seed=args.seed)
    written = fileio.write_synthetic_dataset(args.out, config, args.count)
    print(f"wrote {len(written)} scenes to {args.out}")
    return 0


def cmd_kfold(args) -> int:
    samples = fileio.load_dataset(args.data, _kernel(args))
    splits = trainer.kfold_splits(samples, args.k, args.seed)
    models = []
    for i, (train_set, val_set) in enumerate(splits):
        log.info("fold %d: %d train / %d validation", i, len(train_set), len(val_set))
        model, history = _fit(train_set, args)
        models.append(model)
        if args.out_dir:
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            mdl.save_checkpoint(model, Path(args.out_dir) / f"fold{i}.ckpt")
            trainer.write_loss_csv(history, Path(args.out_dir) / f"fold{i}_loss.csv")
    report = metrics.kfold_evaluate(models, splits, args.subtract_mean)
    if args.report:
        report.write(args.report)
    _print_report(report)
    return 0


def _add_kernel_flags(p: argparse.ArgumentParser, knn_flag: str = "--k") -> None:
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument(knn_flag, dest="knn", type=int, default=10, help="neighbours averaged per head")
    p.add_argument("--fallback-sigma", type=float, default=15.0)
    p.add_argument("--truncation", type=float, default=3.0, help="kernel radius in sigmas")


def _add_train_flags(p: argparse.ArgumentParser, knn_flag: str = "--k") -> None:
    p.add_argument("--lr", type=float, default=trainer.TrainConfig.lr)
    p.add_argument("--momentum", type=float, default=trainer.TrainConfig.momentum)
    p.add_argument("--weight-decay", type=float, default=trainer.TrainConfig.weight_decay)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-std", type=float, default=trainer.TrainConfig.init_std)
    p.add_argument("--augment", choices=("none", "ninecrop", "randomcrop"), default="none")
    p.add_argument("--crop-n", type=int, default=36)
    p.add_argument("--crop-size", type=int, default=225)
    p.add_argument("--model-spec", default="default", choices=("default", "reduced"))
    p.add_argument("--subtract-mean", action="store_true")
    _add_kernel_flags(p, knn_flag)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mscnn", description="Multi-scale CNN crowd counting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("densitymap", help="render a ground-truth density map")
    p.add_argument("--ann", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--downsample", type=int, default=1)
    _add_kernel_flags(p)
    p.set_defaults(func=cmd_densitymap)

    p = sub.add_parser("train", help="train a model on an annotated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--subtract-mean", action="store_true")
    _add_kernel_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="estimate the density map of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subtract-mean", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", help="print the parameter table")
    p.add_argument("--model-spec", default="default", choices=("default", "reduced"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic dot dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-heads", type=int, default=3)
    p.add_argument("--max-heads", type=int, default=10)
    p.add_argument("--dot-radius", type=float, default=fileio.SyntheticSceneConfig.dot_radius)
    p.add_argument("--noise", type=float, default=fileio.SyntheticSceneConfig.noise)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("kfold", help="k-fold cross-validated training and pooled evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--report")
    p.add_argument("--out-dir")
    _add_train_flags(p, knn_flag="--knn")
    p.set_defaults(func=cmd_kfold)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"mscnn: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
