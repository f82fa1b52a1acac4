"""Command-line surface: phantom generation, training, inference, evaluation.

Exit codes: 0 success, 2 bad input, 3 missing artifact, 4 localization failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import netgraph as ng
from .errors import (
    ConfigError,
    DimensionError,
    FatsegError,
    LocalizationError,
    MissingArtifactError,
    VolumeFormatError,
)
from .experiment import (
    ALL_TARGETS,
    ExperimentConfig,
    SEG_TARGETS,
    CaseVolumes,
    case_from_phantom,
    train_target,
)
from .metrics import dice_per_class, reliability_from_volumes
from .phantom import (
    PhantomConfig,
    generate_cohort,
    read_cohort,
    write_cohort,
    TISSUE_SAT,
    TISSUE_VAT,
)
from .pipeline import Model, ModelBundle, VolumesReport, apply_thread_cap, run_pipeline
from .train import write_training_log
from .volume import LabelMap, Volume3D, read_volume, write_volume


def _dataclass_from_json(instance, overrides: dict):
    valid = {f.name for f in fields(instance)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for key, value in overrides.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return replace(instance, **coerced)


def _load_config_overrides(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file {p} does not exist")
    return json.loads(p.read_text())


def cmd_phantom(args: argparse.Namespace) -> int:
    overrides = _load_config_overrides(args.config)
    cfg = _dataclass_from_json(PhantomConfig(), overrides)
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    cases = generate_cohort(cfg, args.n, seed=args.seed)
    manifest = write_cohort(cases, args.out)
    for i, case in enumerate(cases):
        print(
            f"case{i:03d} sat_ml={case.true_volumes_ml[TISSUE_SAT]:.3f} "
            f"vat_ml={case.true_volumes_ml[TISSUE_VAT]:.3f}"
        )
    print(f"wrote {len(cases)} cases and manifest to {manifest}")
    return 0


def _load_cases(manifest: str) -> list[CaseVolumes]:
    path = Path(manifest)
    if not path.exists():
        raise MissingArtifactError(f"cohort manifest {path} does not exist")
    return [
        CaseVolumes(
            case_id=r.case_id,
            fat=r.load_fat(),
            tissue=r.load_tissue(),
            region=r.load_region(),
        )
        for r in read_cohort(path)
    ]


def _experiment_from_args(args: argparse.Namespace, overrides: dict) -> ExperimentConfig:
    exp = ExperimentConfig(
        canvas=tuple(args.canvas),
        fusion=ng.FusionMode(args.fusion),
        train_seed=args.seed,
    )
    exp_keys = {f.name for f in fields(ExperimentConfig)}
    exp_overrides = {k: v for k, v in overrides.items() if k in exp_keys}
    if exp_overrides:
        exp = _dataclass_from_json(exp, exp_overrides)
    return exp


def _print_param_counts(num_classes: int, canvas: tuple[int, int]) -> None:
    mx = ng.count_parameters(ng.segmentation_net(num_classes, ng.FusionMode.MAXOUT, canvas=canvas))
    cc = ng.count_parameters(ng.segmentation_net(num_classes, ng.FusionMode.CONCAT, canvas=canvas))
    print(f"segmentation net ({num_classes} classes) maxout params: {mx}")
    print(f"segmentation net ({num_classes} classes) concat params: {cc}")
    print(f"maxout/concat ratio: {mx / cc:.3f}")


def _train_one(
    target: str,
    cases: list[CaseVolumes],
    exp: ExperimentConfig,
    out_root: Path,
    train_overrides: dict,
    epochs: int | None,
) -> None:
    seg_models = None
    if target == "view-agg":
        seg_models = {}
        for seg_name, plane in SEG_TARGETS.items():
            part = out_root / seg_name
            if not (part / "manifest.json").exists():
                raise MissingArtifactError(
                    f"view-agg needs trained {seg_name} weights under {out_root}"
                )
            seg_models[plane] = Model.load(part)
    base_epochs = epochs if epochs is not None else (
        exp.agg_epochs if target == "view-agg"
        else exp.seg_epochs if target in SEG_TARGETS
        else exp.loc_epochs
    )
    cfg = exp.train_config(base_epochs)
    if train_overrides:
        cfg = _dataclass_from_json(cfg, train_overrides)
    model, log = train_target(target, cases, exp, seg_models=seg_models, train_cfg=cfg)
    out_dir = out_root / target
    model.save(out_dir)
    write_training_log(log, out_dir / "training_log.csv")
    print(f"{target}: trained {len(log)} epochs, final val loss {log[-1].val_loss:.4f}")
    print(f"{target}: weights and log written to {out_dir}")


def cmd_train(args: argparse.Namespace) -> int:
    if args.target not in ALL_TARGETS:
        raise ConfigError(f"--target must be one of {ALL_TARGETS}, got {args.target!r}")
    overrides = _load_config_overrides(args.config)
    from .train import TrainConfig

    train_keys = {f.name for f in fields(TrainConfig)}
    train_overrides = {k: v for k, v in overrides.items() if k in train_keys}
    exp = _experiment_from_args(args, overrides)
    cases = _load_cases(args.manifest)
    num_classes = 5 if args.target in (*SEG_TARGETS, "view-agg") else 4
    if args.target != "view-agg":
        _print_param_counts(num_classes, exp.canvas)
    out_root = Path(args.out)

    if args.folds > 1:
        order = np.random.default_rng(args.seed).permutation(len(cases))
        folds = np.array_split(order, args.folds)
        for j, held in enumerate(folds):
            train_cases = [cases[i] for i in order if i not in set(held.tolist())]
            print(f"fold {j}: training on {len(train_cases)} cases")
            _train_one(
                args.target, train_cases, exp, out_root / f"fold{j}", train_overrides, args.epochs
            )
        return 0

    _train_one(args.target, cases, exp, out_root, train_overrides, args.epochs)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    fat = read_volume(args.input)
    if not isinstance(fat, Volume3D):
        raise ConfigError(f"{args.input} is a label map, expected a fat image volume")
    bundle = ModelBundle.load(args.bundle, require_agg=args.aggregation == "learned")
    labels, report = run_pipeline(fat, bundle, args.aggregation, args.canvas_mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(labels, out_dir / "labels.fsv")
    (out_dir / "report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_eval_dice(args: argparse.Namespace) -> int:
    rows = []
    if args.manifest:
        with open(args.manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            base = Path(args.manifest).parent
            for row in reader:
                rows.append((row["case_id"], row["mode"], base / row["pred_path"], base / row["truth_path"]))
    else:
        if not (args.pred and args.truth):
            raise ConfigError("eval dice needs --pred/--truth or --manifest")
        rows.append(("case", "single", Path(args.pred), Path(args.truth)))
    print("case_id,mode,dice_background,dice_sat,dice_vat,dice_bone,dice_other")
    for case_id, mode, pred_path, truth_path in rows:
        pred = read_volume(pred_path)
        truth = read_volume(truth_path)
        if pred.data.shape != truth.data.shape:
            raise DimensionError(
                f"{case_id}: prediction {pred.data.shape} vs truth {truth.data.shape}"
            )
        scores = dice_per_class(pred.data, truth.data, 5)
        print(f"{case_id},{mode}," + ",".join(f"{s:.6f}" for s in scores))
    return 0


def cmd_eval_retest(args: argparse.Namespace) -> int:
    pairs_path = Path(args.pairs)
    if not pairs_path.exists():
        raise MissingArtifactError(f"pairs manifest {pairs_path} does not exist")
    base = pairs_path.parent
    session1: list[VolumesReport] = []
    session2: list[VolumesReport] = []
    with open(pairs_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            session1.append(VolumesReport.from_json((base / row["report_a"]).read_text()))
            session2.append(VolumesReport.from_json((base / row["report_b"]).read_text()))
    report = reliability_from_volumes(
        {
            "SAT": (np.array([r.sat_ml for r in session1]), np.array([r.sat_ml for r in session2])),
            "VAT": (np.array([r.vat_ml for r in session1]), np.array([r.vat_ml for r in session2])),
        }
    )
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reliability.json").write_text(report.to_json())
        (out / "reliability.csv").write_text(report.to_csv())
    return 0


def cmd_param_count(args: argparse.Namespace) -> int:
    _print_param_counts(args.classes, tuple(args.canvas))
    agg = ng.aggregation_net(args.classes)
    print(f"aggregation net ({args.classes} classes) trainable params: {ng.count_parameters(agg)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fatseg",
        description="Abdominal adipose tissue segmentation pipeline and phantom harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file overriding phantom parameters")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one pipeline network on a cohort")
    p.add_argument("--target", required=True, help=f"one of {', '.join(ALL_TARGETS)}")
    p.add_argument("--manifest", required=True, help="cohort manifest csv")
    p.add_argument("--out", required=True, help="bundle root directory")
    p.add_argument("--fusion", choices=["maxout", "concat"], default="maxout")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--canvas", type=int, nargs=2, default=list(ng.DEFAULT_CANVAS))
    p.add_argument("--folds", type=int, default=1, help="k-fold cross-validation splits")
    p.add_argument("--config", help="JSON overrides for training/experiment settings")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the full pipeline on a fat volume")
    p.add_argument("--input", required=True)
    p.add_argument("--bundle", required=True, help="model bundle directory")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--aggregation",
        choices=["learned", "balanced", "axial-focus"],
        default="learned",
    )
    p.add_argument("--canvas-mode", choices=["tight", "full"], default="tight")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions or paired sessions")
    esub = p.add_subparsers(dest="eval_command", required=True)
    pd = esub.add_parser("dice", help="Dice per class between label volumes")
    pd.add_argument("--pred")
    pd.add_argument("--truth")
    pd.add_argument("--manifest", help="csv: case_id,mode,pred_path,truth_path")
    pd.set_defaults(func=cmd_eval_dice)
    pr = esub.add_parser("retest", help="reliability over paired volume reports")
    pr.add_argument("--pairs", required=True, help="csv: case_id,report_a,report_b")
    pr.add_argument("--out", help="directory for reliability.json/.csv")
    pr.set_defaults(func=cmd_eval_retest)

    p = sub.add_parser("param-count", help="print exact network parameter counts")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--canvas", type=int, nargs=2, default=list(ng.DEFAULT_CANVAS))
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LocalizationError as exc:
        print(f"localization failure: {exc}", file=sys.stderr)
        return 4
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DimensionError, VolumeFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FatsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
