"""Command-line entry point wiring the library into reproducible runs.

Subcommands: gen-data, train, eval, gradcam, pca, report. Every command
is deterministic under fixed flags and seed; run directories carry a
config snapshot, the split datasets, and a content manifest so any run
can be reproduced byte-identically. Timestamps live only in run.log.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    experiment_from_mapping,
    experiment_to_mapping,
    read_kv_file,
    write_kv_file,
)
from .datagen import (
    GenSpec,
    LabeledImageSet,
    augment_to_share,
    class_distribution,
    generate,
    holdout_extract,
    read_dataset,
    write_dataset,
)
from .evalkit import (
    build_report,
    overfit_deltas,
    parse_report,
    write_report,
    write_roc_csv,
    write_scatter_pairs,
    write_table1,
    write_table2,
)
from .interpret import (
    _capture_features,
    cam_case_gallery,
    pca,
    select_feature_layer,
    write_projections,
    write_variance_curve,
)
from .layers import build_model
from .losses import cross_entropy
from .trainer import TrainingDiverged, fit, predict, stratified_split, write_history


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(run_dir: Path, paths: list[Path]) -> Path:
    lines = sorted(f"{_sha256(p)}  {p.name}" for p in paths)
    manifest = run_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _log(run_dir: Path, message: str) -> None:
    with open(run_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{datetime.now().isoformat()} {message}\n")


def _class_index(name: str, class_names) -> int:
    if name.isdigit():
        idx = int(name)
        if not 0 <= idx < len(class_names):
            raise ValueError(f"class index {idx} out of range")
        return idx
    try:
        return list(class_names).index(name)
    except ValueError:
        raise ValueError(f"unknown class {name!r}; choose from {', '.join(class_names)}") from None


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    seed = args.seed if args.seed is not None else 0
    spec = GenSpec(counts=counts, side=args.side, noise_level=args.noise, seed=seed)
    data = generate(spec)
    if args.augment:
        class_name, _, share = args.augment.partition(":")
        if not share:
            raise ValueError(f"--augment expects CLASS:SHARE, got {args.augment!r}")
        target = _class_index(class_name, data.class_names)
        data = augment_to_share(data, target, float(share), seed=seed)
    if args.holdout:
        if not args.holdout_out:
            raise ValueError("--holdout requires --holdout-out")
        blind, data = holdout_extract(data, args.holdout, seed=seed)
        write_dataset(args.holdout_out, blind)
    write_dataset(args.out, data)
    cnts, shares = class_distribution(data)
    print(f"wrote {args.out}: {len(data)} images, side {data.images.shape[1]}")
    for name, c, s in zip(data.class_names, cnts, shares):
        print(f"  {name}: {c} ({100.0 * s:.1f}%)")
    if args.holdout:
        print(f"wrote {args.holdout_out}: {args.holdout} blind images")
    return 0


# ---------------------------------------------------------------------------
# train


def _merge_config(args) -> ExperimentConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(read_kv_file(args.config))
    overrides = {
        "conv_widths": args.conv_widths,
        "kernel": args.kernel,
        "head_units": args.head_units,
        "dropout_rate": args.dropout_rate,
        "classes": args.classes,
        "enable_gagm": args.gagm,
        "enable_sevector": args.sevector,
        "reduction_ratio": args.reduction_ratio,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "max_epochs": args.max_epochs,
        "lambda_fs": args.lambda_fs,
        "val_fraction": args.val_fraction,
        "test_fraction": args.test_fraction,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            mapping[key] = str(value)
    return experiment_from_mapping(mapping)


def cmd_train(args) -> int:
    exp = _merge_config(args)
    data = read_dataset(args.data)
    if len(data.class_names) != exp.model.classes:
        raise ValueError(
            f"dataset has {len(data.class_names)} classes but the model is configured for {exp.model.classes}"
        )
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    _log(run_dir, f"train start: data={args.data} seed={exp.seed}")

    if exp.test_fraction > 0:
        pool, test_set = stratified_split(data, exp.test_fraction, exp.seed, ("trainpool", "test"))
    else:
        pool, test_set = data, None

    model = build_model(exp.model)
    artifacts: list[Path] = []
    snapshot = run_dir / "config.snapshot"
    write_kv_file(snapshot, experiment_to_mapping(exp))
    artifacts.append(snapshot)

    try:
        run = fit(model, pool, exp.train)
    except TrainingDiverged as exc:
        if exc.run is not None:
            write_history(exc.run.history, run_dir / "history.csv")
        _log(run_dir, f"train diverged: {exc}")
        print(f"error: {exc} (partial history kept)", file=sys.stderr)
        return 1

    history_path = run_dir / "history.csv"
    write_history(run.history, history_path)
    artifacts.append(history_path)
    ckpt_path = run_dir / "checkpoint.pfnn"
    save_checkpoint(ckpt_path, model.state_arrays())
    artifacts.append(ckpt_path)
    for split_name, split_set in (("train", run.train_set), ("val", run.val_set), ("test", test_set)):
        if split_set is None:
            continue
        split_path = run_dir / f"{split_name}.mids"
        write_dataset(split_path, split_set)
        artifacts.append(split_path)
    _write_manifest(run_dir, artifacts)
    _log(run_dir, f"train done: {len(run.history)} epochs, best epoch {run.best_epoch}")

    last = run.history[-1]
    print(f"run dir: {run_dir}")
    print(f"epochs: {len(run.history)} (best {run.best_epoch}, "
          f"{'stopped early' if run.stopped_early else 'ran to max_epochs'})")
    print(f"final: train acc {last.train_acc:.4f}, val acc {last.val_acc:.4f}, lr {last.lr:.2e}")
    return 0


# ---------------------------------------------------------------------------
# model loading shared by eval/gradcam/pca


def _load_run(run_dir: Path):
    snapshot = run_dir / "config.snapshot"
    if not snapshot.exists():
        raise ValueError(f"{run_dir} has no config.snapshot (not a run directory?)")
    exp = experiment_from_mapping(read_kv_file(snapshot))
    model = build_model(exp.model)
    model.load_state(load_checkpoint(run_dir / "checkpoint.pfnn"))
    return exp, model


def _load_split(run_dir: Path, split: str, override: str | None) -> LabeledImageSet:
    if override:
        return read_dataset(override)
    path = run_dir / f"{split}.mids"
    if not path.exists():
        raise ValueError(f"no {path.name} in {run_dir}; pass --data FILE or train with that split")
    return read_dataset(path)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    exp, model = _load_run(run_dir)
    out_dir = Path(args.out) if args.out else run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    model_name = args.model_name or run_dir.name

    splits = args.split or ["test"]
    reports = {}
    for split in splits:
        dataset = _load_split(run_dir, split, args.data if split == "data" else None)
        if len(dataset.class_names) != exp.model.classes:
            raise ValueError(
                f"split {split!r} has {len(dataset.class_names)} classes, model expects {exp.model.classes}"
            )
        labels = dataset.labels.astype(np.intp)
        probs, _ = predict(model, dataset.images)
        loss = float(cross_entropy(Tensor(probs), labels).data)
        reports[split] = build_report(model_name, split, labels, probs.argmax(axis=1),
                                      probs, loss, dataset.class_names)

    if "train" in reports and "test" in reports:
        oa, of, ol = overfit_deltas(reports["train"], reports["test"])
        reports["test"].overfit_acc = oa
        reports["test"].overfit_f1 = of
        reports["test"].overfit_loss = ol

    artifacts: list[Path] = []
    for split, report in reports.items():
        path = out_dir / f"report_{split}.json"
        write_report(report, path)
        artifacts.append(path)
        artifacts.extend(write_roc_csv(report, out_dir))
    primary = reports.get("test") or reports[splits[0]]
    write_table1([primary], out_dir / "table1.csv")
    write_table2([primary], out_dir / "table2.csv")
    write_scatter_pairs([primary], out_dir / "scatter_pairs.csv")
    artifacts += [out_dir / "table1.csv", out_dir / "table2.csv", out_dir / "scatter_pairs.csv"]

    for split, report in reports.items():
        print(f"{split}: acc {report.accuracy:.4f}, loss {report.loss:.4f}, "
              f"macro F1 {report.macro_f1:.4f}, recall_min {report.recall_min:.4f}")
        aucs = {name: (f"{curve.auc:.4f}" if curve else "n/a") for name, curve in report.roc.items()}
        print(f"  auc: {aucs}")
    if reports.get("test") and reports["test"].overfit_acc is not None:
        r = reports["test"]
        print(f"overfit: acc {r.overfit_acc:+.4f}, f1 {r.overfit_f1:+.4f}, loss {r.overfit_loss:+.4f}")
    print(f"wrote {len(artifacts)} files to {out_dir}")
    return 0


def cmd_gradcam(args) -> int:
    run_dir = Path(args.run)
    exp, model = _load_run(run_dir)
    dataset = _load_split(run_dir, args.split, args.data)
    if not getattr(model, "cam_layer", None):
        raise ValueError("model designates no cam layer")
    target = _class_index(args.target_class, dataset.class_names)
    out_dir = Path(args.out) if args.out else run_dir / "gradcam"
    gallery = cam_case_gallery(model, dataset, args.correct, args.wrong, out_dir, target)
    print(f"wrote {len(gallery.cases)} overlays to {out_dir} ({gallery.note})")
    return 0


def cmd_pca(args) -> int:
    run_dir = Path(args.run)
    exp, model = _load_run(run_dir)
    dataset = _load_split(run_dir, args.split, args.data)
    out_dir = Path(args.out) if args.out else run_dir / "pca"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.layer == "auto":
        choice = select_feature_layer(model, dataset)
        layer = choice.layer
        for name, (ratios, cumulative) in choice.curves.items():
            write_variance_curve(ratios, cumulative, out_dir / f"variance_{name}.csv")
        selection_note = "highest cumulative explained variance over the first 3 components"
        if choice.tie:
            selection_note += " (tie broken by network order)"
    else:
        layer = args.layer
        if layer not in model.feature_candidates:
            raise ValueError(
                f"unknown feature layer {layer!r}; candidates: {', '.join(model.feature_candidates)}"
            )
        selection_note = "explicitly requested"

    feats = _capture_features(model, dataset.images, layer)
    k = min(args.components, feats.shape[0] - 1, feats.shape[1])
    result = pca(feats, k, layer=layer)
    probs, _ = predict(model, dataset.images)
    write_projections(result, dataset.labels, probs.argmax(axis=1), out_dir / "projections.csv")
    write_variance_curve(result.ratios, np.cumsum(result.ratios),
                         out_dir / "variance_selected.csv")
    meta = {
        "layer": layer,
        "selection": selection_note,
        "components": k,
        "cumulative_ratio": repr(float(np.sum(result.ratios))),
    }
    write_kv_file(out_dir / "pca_meta.txt", meta)
    print(f"layer {layer}: top-{k} components explain {100 * float(np.sum(result.ratios)):.1f}% of variance")
    print(f"wrote projections and variance curves to {out_dir}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for run in args.compare:
        path = Path(run) / "eval" / f"report_{args.split}.json"
        if not path.exists():
            raise ValueError(f"{path} missing; run `pfnn eval --run {run}` first")
        reports.append(parse_report(path))
    out_dir = Path(args.out) if args.out else Path("comparison")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table1(reports, out_dir / "table1.csv")
    write_table2(reports, out_dir / "table2.csv")
    write_scatter_pairs(reports, out_dir / "scatter_pairs.csv")
    print(f"compared {len(reports)} models into {out_dir}")
    for r in reports:
        print(f"  {r.model}: acc {r.accuracy:.4f}, macro F1 {r.macro_f1:.4f}, recall_min {r.recall_min:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfnn",
        description="Synthetic imbalanced-image experiments: data generation, training "
        "with pooling-fusion/channel-gate ablations, evaluation, and interpretability.",
        epilog="Flag values override config-file keys; config-file keys override defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output file or directory")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic MIDS1 dataset")
    p.add_argument("--counts", required=True, help="per-class counts, e.g. 152,820,1028")
    p.add_argument("--side", type=int, default=32, help="image side length (default 32)")
    p.add_argument("--noise", type=float, default=0.05, help="pixel noise level (default 0.05)")
    p.add_argument("--augment", metavar="CLASS:SHARE",
                   help="augment CLASS up to SHARE of the dataset, e.g. normal:0.331")
    p.add_argument("--holdout", type=int, help="extract N blind images before writing")
    p.add_argument("--holdout-out", help="where to write the blind holdout")
    p.set_defaults(func=cmd_gen_data, seed=None)

    p = sub.add_parser("train", parents=[common], help="train a model into a run directory")
    p.add_argument("--data", required=True, help="MIDS1 dataset file")
    p.add_argument("--conv-widths", dest="conv_widths", help="backbone widths, e.g. 8,16")
    p.add_argument("--kernel", type=int)
    p.add_argument("--head-units", dest="head_units", type=int)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--gagm", choices=["on", "off"], help="dual-pooling fusion ablation switch")
    p.add_argument("--sevector", choices=["on", "off"], help="channel-gate ablation switch")
    p.add_argument("--reduction-ratio", dest="reduction_ratio", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--lambda-fs", dest="lambda_fs", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a run on stored splits")
    p.add_argument("--run", required=True, help="run directory from `pfnn train`")
    p.add_argument("--split", action="append", choices=["train", "val", "test", "data"],
                   help="split(s) to evaluate (repeatable; default test)")
    p.add_argument("--data", help="external MIDS1 file for --split data")
    p.add_argument("--model-name", dest="model_name", help="row label for tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", parents=[common], help="emit CAM overlays for picked cases")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data", help="external MIDS1 file instead of a stored split")
    p.add_argument("--class", dest="target_class", default="malignant",
                   help="class name or index to explain (default malignant)")
    p.add_argument("--correct", type=int, default=3, help="high-confidence correct cases")
    p.add_argument("--wrong", type=int, default=3, help="misclassified cases")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("pca", parents=[common], help="project a feature layer")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data", help="external MIDS1 file instead of a stored split")
    p.add_argument("--layer", default="auto", help="feature layer name or 'auto'")
    p.add_argument("--components", type=int, default=3)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("report", parents=[common], help="cross-model comparison tables")
    p.add_argument("--compare", nargs="+", required=True, metavar="RUN",
                   help="run directories (evaluated already)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ConfigError, OSError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
