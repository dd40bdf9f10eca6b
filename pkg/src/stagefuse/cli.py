"""stagefuse command line

    stagefuse synth DIR [--real N] [--fake N] [--size PX] [--seed S]
    stagefuse train --config exp.json [--seed S] [--out DIR] [--stages K]
    stagefuse evaluate --config exp.json [--fusion equal|optimized|majority]
    stagefuse evaluate --predictions predictions.csv [--out DIR]
        [--threshold T] [--alpha A]
    stagefuse attack --config exp.json [--epsilons 0.005,0.01]
        [--adversarial-train]
    stagefuse extract-wavelet IMAGE... --out DIR [--size PX]
    stagefuse verify-run RUN_DIR

Exit codes: 0 success, 1 failed verification, 2 invalid configuration,
3 I/O or decode failure, 4 missing checkpoint.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError
from torch.utils.data import TensorDataset

from .adversarial import adversarial_train, robustness_sweep
from .artifacts import (
    run_lock,
    verify_manifest,
    write_frame,
    write_json,
    write_manifest,
)
from .backbones import create_backbone, predict_proba
from .checkpoints import load_checkpoint, save_checkpoint
from .config import load_config
from .datasets import (
    ImageStore,
    Preprocessor,
    Split,
    scan_image_folder,
    split_validation,
    stack_inputs,
)
from .ensemble import (
    FusionWeights,
    ablation_table,
    fusion_report,
    prediction_frame,
    search_weights,
)
from .errors import (
    DecodeError,
    InvalidConfig,
    InvalidInput,
    MissingCheckpoint,
    RunLocked,
)
from .evalsuite import (
    evaluate_predictions,
    mcnemar_frame,
    model_names_of,
    read_predictions,
)
from .imagecore import load_image
from .plots import plot_confusion, plot_roc
from .staging import partition_fakes, run_multistage
from .synthetic import write_synthetic_dataset
from .wavelet import feature_image, save_feature_image

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except ValidationError as exc:
        for error in exc.errors():
            field = ".".join(str(part) for part in error["loc"]) or "config"
            print(f"invalid config: {field}: {error['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DecodeError, OSError, RunLocked) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfig, InvalidInput) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _epsilons(text):
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of floats: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("at least one epsilon is required")
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stagefuse",
        description="Multistage-trained, late-fused fake image detection.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment(name, func, help):
        sub = commands.add_parser(name, help=help)
        sub.add_argument("--config", required=True, type=Path)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out", type=Path)
        sub.add_argument("--stages", type=int)
        sub.set_defaults(func=func)
        return sub

    sub = commands.add_parser("synth", help="write the synthetic dataset")
    sub.add_argument("root", type=Path)
    sub.add_argument("--real", type=int, default=100)
    sub.add_argument("--fake", type=int, default=500)
    sub.add_argument("--size", type=int, default=64)
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=cmd_synth)

    experiment("train", cmd_train, "run multistage training")

    sub = commands.add_parser("evaluate", help="evaluate a trained run")
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path)
    source.add_argument("--predictions", type=Path)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", type=Path)
    sub.add_argument("--stages", type=int)
    sub.add_argument("--fusion", choices=["equal", "optimized", "majority"])
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--alpha", type=float)
    sub.set_defaults(func=cmd_evaluate)

    sub = experiment("attack", cmd_attack, "FGSM robustness sweep")
    sub.add_argument("--fusion", choices=["equal", "optimized", "majority"])
    sub.add_argument("--epsilons", type=_epsilons)
    sub.add_argument("--adversarial-train", action="store_true", default=None)

    sub = commands.add_parser(
        "extract-wavelet", help="write tiled wavelet feature images")
    sub.add_argument("images", nargs="+", type=Path)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--size", type=int, default=296)
    sub.set_defaults(func=cmd_extract_wavelet)

    sub = commands.add_parser("verify-run", help="check a run manifest")
    sub.add_argument("run", type=Path)
    sub.set_defaults(func=cmd_verify_run)
    return parser


def _config(args):
    return load_config(args.config, {
        "seed": args.seed,
        "out": None if args.out is None else str(args.out),
        "stages": args.stages,
        "fusion": getattr(args, "fusion", None),
        "threshold": getattr(args, "threshold", None),
        "alpha": getattr(args, "alpha", None),
        "attack.epsilons": getattr(args, "epsilons", None),
        "attack.adversarial_train": getattr(args, "adversarial_train", None),
    })


def _split(cfg):
    real, fake = scan_image_folder(cfg.dataset_root)
    if cfg.validation_root is None:
        return split_validation(real, fake, cfg.validation_fraction, cfg.seed)
    val_real, val_fake = scan_image_folder(cfg.validation_root)
    return Split(tuple(real), tuple(fake), tuple(val_real), tuple(val_fake))


def _backbone(cfg, name):
    return create_backbone(name, cfg.input_size(name), seed=cfg.seed)


def cmd_synth(args):
    counts = write_synthetic_dataset(
        args.root, args.real, args.fake, args.size, args.seed)
    print(json.dumps(counts, sort_keys=True))


def cmd_train(args):
    cfg = _config(args)
    if cfg.distill and not {"conv", "attention"} <= set(cfg.backbones):
        raise InvalidConfig("distillation needs both conv and attention")
    stats = cfg.normalization_stats()
    with run_lock(cfg.out) as out:
        split = _split(cfg)
        plan = partition_fakes(
            split.train_fake, cfg.stages, cfg.seed, split.train_real)
        write_json(out / "partition.json", plan.manifest())
        val_ids, val_labels = split.validation()
        val_root = cfg.validation_root or cfg.dataset_root
        trained = {}
        for name in cfg.backbones:
            backbone = _backbone(cfg, name)
            size = cfg.input_size(name)
            eval_pre = Preprocessor.for_backbone(backbone, stats)
            train_pre = Preprocessor.for_backbone(
                backbone, stats, cfg.augment_for(name))
            val_x = stack_inputs(ImageStore(val_root, size), val_ids,
                                 eval_pre, cfg.load_workers)
            teacher = None
            if name == "attention" and cfg.distill:
                teacher = trained["conv"]
            logger.info("training %r: %d stages, %d parameters", name,
                        plan.k, backbone.parameter_count())
            result = run_multistage(
                backbone, plan, cfg.stage_hyperparams(name),
                fetch=ImageStore(cfg.dataset_root, size).fetcher(train_pre),
                out_dir=out / name,
                validation=TensorDataset(val_x, torch.as_tensor(val_labels)),
                teacher=teacher,
            )
            write_frame(result.log_frame(), out / name / "training_log.csv")
            trained[name] = backbone
        write_manifest(out)


def _load_models(cfg, out):
    models = {}
    for name in cfg.backbones:
        checkpoint = load_checkpoint(out / name / f"stage-{cfg.stages}.pt")
        backbone = _backbone(cfg, name)
        backbone.set_parameters(checkpoint.state)
        models[name] = backbone
    return models


def _inputs(cfg, models, root, ids):
    stats = cfg.normalization_stats()
    return {
        name: stack_inputs(
            ImageStore(root, cfg.input_size(name)), ids,
            Preprocessor.for_backbone(backbone, stats), cfg.load_workers)
        for name, backbone in models.items()
    }


def _write_report(frame, names, out, threshold, alpha):
    report = evaluate_predictions(frame, names, threshold, alpha)
    write_json(out / "evaluation.json", report.to_dict())
    write_frame(report.roc.frame(), out / "roc.csv")
    if report.mcnemar:
        write_frame(mcnemar_frame(report.mcnemar), out / "mcnemar.csv")
    plot_roc(report.roc.fpr, report.roc.tpr, report.roc.auc, out / "roc.png")
    plot_confusion(report.confusion.as_array(), out / "confusion.png")
    for key, value in report.metrics.items():
        print(f"{key}: {value:.6f}")
    return report


def _recorded_settings(predictions):
    """Threshold and alpha of the report saved beside ``predictions``"""
    path = predictions.parent / "evaluation.json"
    if not path.is_file():
        return 0.5, 0.05
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DecodeError(f"{str(path)!r} is not valid JSON: {exc}") from exc
    return report.get("threshold", 0.5), report.get("alpha", 0.05)


def cmd_evaluate(args):
    if args.predictions is not None:
        frame = read_predictions(args.predictions)
        out = args.out or args.predictions.parent
        out.mkdir(parents=True, exist_ok=True)
        threshold, alpha = _recorded_settings(args.predictions)
        if args.threshold is not None:
            threshold = args.threshold
        if args.alpha is not None:
            alpha = args.alpha
        _write_report(frame, model_names_of(frame), out, threshold, alpha)
        return
    cfg = _config(args)
    with run_lock(cfg.out) as out:
        models = _load_models(cfg, out)
        names = list(models)
        split = _split(cfg)
        ids, labels = split.validation()
        inputs = _inputs(cfg, models, cfg.validation_root or cfg.dataset_root,
                         ids)
        probs = np.stack([predict_proba(models[n], inputs[n]) for n in names])
        weights = None
        strategy = cfg.fusion if len(names) > 1 else "equal"
        if len(names) > 1:
            search = search_weights(probs, labels, cfg.search_step,
                                    cfg.threshold, cfg.fusion_objective)
            weights = search.weights
            write_json(out / "fusion.json", fusion_report(
                probs, labels, names, search, cfg.threshold))
            write_frame(ablation_table(
                probs, labels, names, weights,
                [models[n].parameter_count() for n in names], cfg.threshold,
            ), out / "ablation.csv")
        frame = prediction_frame(ids, labels, probs, names, strategy, weights,
                                 cfg.threshold)
        write_frame(frame, out / "predictions.csv")
        _write_report(frame, names, out, cfg.threshold, cfg.alpha)
        write_manifest(out)


def _fusion_weights(out, names):
    path = out / "fusion.json"
    if not path.is_file():
        return FusionWeights.equal(len(names))
    searched = json.loads(path.read_text())["weights"]
    if sorted(searched) != sorted(names):
        return FusionWeights.equal(len(names))
    return FusionWeights([searched[name] for name in names])


def cmd_attack(args):
    cfg = _config(args)
    stats = cfg.normalization_stats()
    with run_lock(cfg.out) as out:
        models = _load_models(cfg, out)
        names = list(models)
        split = _split(cfg)
        ids, labels = split.validation()
        inputs = _inputs(cfg, models, cfg.validation_root or cfg.dataset_root,
                         ids)
        clamp = stats.clamp_bounds()
        clamps = dict.fromkeys(names, clamp)
        if cfg.fusion == "equal":
            weights = FusionWeights.equal(len(names))
        else:
            weights = _fusion_weights(out, names)
        epsilons = cfg.attack.epsilons
        before = robustness_sweep(models, inputs, labels, epsilons, weights,
                                  clamps=clamps, threshold=cfg.threshold)
        before.index.name = "model"
        write_frame(before, out / "robustness.csv", index=True)
        tables = {"before": before.to_dict(orient="index")}
        if cfg.attack.adversarial_train:
            train_ids, train_labels = split.training()
            train_x = _inputs(cfg, models, cfg.dataset_root, train_ids)
            for name in names:
                logger.info("adversarial fine-tuning of %r", name)
                adversarial_train(models[name], train_x[name],
                                  torch.as_tensor(train_labels),
                                  cfg.adversarial_training(clamp))
                save_checkpoint(
                    out / name / "adversarial.pt",
                    models[name].get_parameters(),
                    {"backbone": name, "seed": cfg.seed,
                     "stage": cfg.stages, "epoch": cfg.attack.epochs,
                     "epsilon": cfg.attack.epsilon},
                )
            after_eps = [0.0] + [eps for eps in epsilons if eps != 0]
            after = robustness_sweep(models, inputs, labels, after_eps,
                                     weights, clamps=clamps,
                                     threshold=cfg.threshold)
            after.index.name = "model"
            write_frame(after, out / "robustness_adversarial.csv", index=True)
            tables["after"] = after.to_dict(orient="index")
        write_json(out / "robustness.json", tables)
        print(before.to_string())
        write_manifest(out)


def cmd_extract_wavelet(args):
    for path in args.images:
        features = feature_image(load_image(path, args.size))
        written = save_feature_image(features, args.out / f"{path.stem}.png")
        print(written)


def cmd_verify_run(args):
    check = verify_manifest(args.run)
    for kind in ("missing", "modified", "unlisted"):
        for name in getattr(check, kind):
            print(f"{kind}: {name}")
    if not check.ok:
        return EXIT_FAILED
    print("ok")


if __name__ == "__main__":
    sys.exit(main())
