"""Experiment orchestration: dataset assembly, per-network training, held-out
evaluation, and the test-retest reliability run.

Everything here is deterministic given the seeds in ExperimentConfig; the
acceptance suite and the scripts/ entry points drive these functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .errors import MissingArtifactError
from .metrics import ReliabilityReport, compare_sessions, dice_per_class
from .phantom import PhantomCase, PhantomConfig, generate_cohort, perturb_retest
from .pipeline import (
    AbdominalRegion,
    Model,
    ModelBundle,
    VolumesReport,
    localize_abdominal_region,
    predict_view_probs,
    run_pipeline,
    segment_view,
    stack_views,
)
from .train import EpochRecord, TrainConfig, train_model
from .volume import (
    LabelMap,
    REGION_ABDOMINAL,
    REGION_CLASS_COUNT,
    SlicePlane,
    TISSUE_CLASS_COUNT,
    Volume3D,
    extract_slices,
    pad_to_canvas,
)

SEG_TARGETS = {
    "seg-axial": SlicePlane.AXIAL,
    "seg-coronal": SlicePlane.CORONAL,
    "seg-sagittal": SlicePlane.SAGITTAL,
}
LOC_TARGETS = {
    "loc-coronal": SlicePlane.CORONAL,
    "loc-sagittal": SlicePlane.SAGITTAL,
}
ALL_TARGETS = (*SEG_TARGETS, *LOC_TARGETS, "view-agg")


@dataclass
class CaseVolumes:
    """The three volumes a training/evaluation case consists of."""

    case_id: str
    fat: Volume3D
    tissue: LabelMap
    region: LabelMap


def case_from_phantom(case: PhantomCase, case_id: str) -> CaseVolumes:
    return CaseVolumes(
        case_id=case_id,
        fat=case.fat_image,
        tissue=case.tissue_labels,
        region=case.region_labels,
    )


def true_abdominal_region(region: LabelMap) -> AbdominalRegion:
    zs = np.flatnonzero((region.data == REGION_ABDOMINAL).any(axis=(1, 2)))
    if zs.size == 0:
        raise ValueError("region labels contain no abdominal slice")
    return AbdominalRegion(z_low=int(zs.min()), z_high=int(zs.max()))


def _paired_slices(
    image: np.ndarray,
    labels: np.ndarray,
    plane: SlicePlane,
    canvas: tuple[int, int],
    stride: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    img_slices = extract_slices(image, plane)
    lab_slices = extract_slices(labels, plane)
    out = []
    for i in range(0, len(img_slices), stride):
        pi, _ = pad_to_canvas(img_slices[i].astype(np.float32), canvas)
        pl, _ = pad_to_canvas(lab_slices[i], canvas)
        out.append((pi, pl))
    return out


def loc_dataset(
    cases: list[CaseVolumes], plane: SlicePlane, canvas: tuple[int, int], stride: int = 1
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Whole-volume slices paired with region labels (4 classes)."""
    data = []
    for case in cases:
        data.extend(_paired_slices(case.fat.data, case.region.data, plane, canvas, stride))
    return data


def seg_dataset(
    cases: list[CaseVolumes], plane: SlicePlane, canvas: tuple[int, int], stride: int = 1
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Abdominal-band slices paired with tissue labels (5 classes)."""
    data = []
    for case in cases:
        band = true_abdominal_region(case.region)
        img = case.fat.data[band.z_low : band.z_high + 1]
        lab = case.tissue.data[band.z_low : band.z_high + 1]
        data.extend(_paired_slices(img, lab, plane, canvas, stride))
    return data


def agg_dataset(
    cases: list[CaseVolumes],
    seg_models: dict[SlicePlane, Model],
    canvas_mode: str = "tight",
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stacked per-view probability volumes over the abdominal band, paired
    with the band's tissue labels."""
    data = []
    for case in cases:
        band = true_abdominal_region(case.region)
        block = case.fat.data[band.z_low : band.z_high + 1]
        views = {
            plane: predict_view_probs(model, block, plane, canvas_mode)
            for plane, model in seg_models.items()
        }
        target = case.tissue.data[band.z_low : band.z_high + 1]
        data.append((stack_views(views), target))
    return data


def aggregation_warm_start(spec: ng.NetworkSpec, seed: int) -> ng.WeightStore:
    """Initialize the fusion net close to summing the three views per class.

    The first five filters pick the matching class channel from each view;
    remaining filters keep small random kernels so training can move away
    from plain averaging.
    """
    store = ng.init_weights(spec, seed)
    k = spec.num_classes
    w1 = store.arrays["agg_conv1"]["weight"]
    w1 *= 0.05
    for c in range(k):
        for view in range(3):
            w1[c, view * k + c, 1, 1, 1] = 1.0
    w2 = store.arrays["agg_conv2"]["weight"]
    w2 *= 0.05
    for c in range(k):
        w2[c, c, 0, 0, 0] = 1.0
    return store


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale experiment knobs (cohort sizes, strides, epoch budgets)."""

    canvas: tuple[int, int] = (112, 128)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    n_train: int = 10
    n_eval: int = 4
    cohort_seed: int = 2024
    train_seed: int = 11
    retest_seed: int = 7001
    n_retest_pairs: int = 17
    fusion: ng.FusionMode = ng.FusionMode.MAXOUT
    loc_stride: dict[str, int] = field(
        default_factory=lambda: {"loc-coronal": 6, "loc-sagittal": 7}
    )
    seg_stride: dict[str, int] = field(
        default_factory=lambda: {"seg-axial": 1, "seg-coronal": 8, "seg-sagittal": 9}
    )
    loc_epochs: int = 4
    seg_epochs: int = 5
    agg_epochs: int = 10
    canvas_mode: str = "tight"

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(max_epochs=epochs, seed=self.train_seed)


def build_training_data(
    target: str,
    cases: list[CaseVolumes],
    exp: ExperimentConfig,
    seg_models: dict[SlicePlane, Model] | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    if target in LOC_TARGETS:
        return loc_dataset(cases, LOC_TARGETS[target], exp.canvas, exp.loc_stride[target])
    if target in SEG_TARGETS:
        return seg_dataset(cases, SEG_TARGETS[target], exp.canvas, exp.seg_stride[target])
    if target == "view-agg":
        if seg_models is None:
            raise MissingArtifactError("view-agg training needs the three trained view models")
        return agg_dataset(cases, seg_models, exp.canvas_mode)
    raise ValueError(f"unknown training target {target!r}")


def build_network(target: str, exp: ExperimentConfig) -> ng.NetworkSpec:
    if target in LOC_TARGETS:
        return ng.segmentation_net(REGION_CLASS_COUNT, exp.fusion, canvas=exp.canvas)
    if target in SEG_TARGETS:
        return ng.segmentation_net(TISSUE_CLASS_COUNT, exp.fusion, canvas=exp.canvas)
    if target == "view-agg":
        return ng.aggregation_net(TISSUE_CLASS_COUNT)
    raise ValueError(f"unknown training target {target!r}")


def train_target(
    target: str,
    cases: list[CaseVolumes],
    exp: ExperimentConfig,
    seg_models: dict[SlicePlane, Model] | None = None,
    train_cfg: TrainConfig | None = None,
) -> tuple[Model, list[EpochRecord]]:
    spec = build_network(target, exp)
    data = build_training_data(target, cases, exp, seg_models)
    if train_cfg is None:
        epochs = {
            **{t: exp.loc_epochs for t in LOC_TARGETS},
            **{t: exp.seg_epochs for t in SEG_TARGETS},
            "view-agg": exp.agg_epochs,
        }[target]
        train_cfg = exp.train_config(epochs)
    initial = (
        aggregation_warm_start(spec, train_cfg.seed) if target == "view-agg" else None
    )
    store, log = train_model(spec, data, train_cfg, initial_weights=initial)
    return Model(spec=spec, weights=store), log


def train_bundle(
    cases: list[CaseVolumes], exp: ExperimentConfig
) -> tuple[ModelBundle, dict[str, list[EpochRecord]]]:
    """Train all six networks on the given cases."""
    logs: dict[str, list[EpochRecord]] = {}
    trained: dict[str, Model] = {}
    for target in (*LOC_TARGETS, *SEG_TARGETS):
        trained[target], logs[target] = train_target(target, cases, exp)
    seg_models = {SEG_TARGETS[t]: trained[t] for t in SEG_TARGETS}
    trained["view-agg"], logs["view-agg"] = train_target(
        "view-agg", cases, exp, seg_models=seg_models
    )
    bundle = ModelBundle(
        loc_coronal=trained["loc-coronal"],
        loc_sagittal=trained["loc-sagittal"],
        seg_axial=trained["seg-axial"],
        seg_coronal=trained["seg-coronal"],
        seg_sagittal=trained["seg-sagittal"],
        view_agg=trained["view-agg"],
    )
    return bundle, logs


@dataclass
class EvalRow:
    case_id: str
    mode: str
    dice: tuple[float, ...]  # per tissue class


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def mean_dice(self, mode: str, class_id: int) -> float:
        vals = [r.dice[class_id] for r in self.rows if r.mode == mode]
        return float(np.mean(vals))

    def modes(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.mode not in seen:
                seen.append(r.mode)
        return seen

    def to_csv(self) -> str:
        lines = ["case_id,mode,dice_background,dice_sat,dice_vat,dice_bone,dice_other"]
        for r in self.rows:
            lines.append(f"{r.case_id},{r.mode}," + ",".join(repr(d) for d in r.dice))
        return "\n".join(lines) + "\n"


def evaluate_cases(
    bundle: ModelBundle,
    cases: list[CaseVolumes],
    canvas_mode: str = "tight",
    single_views: bool = True,
) -> EvalReport:
    """Dice of the aggregated pipeline output (and per-view argmax labels)
    against ground-truth tissue labels, per held-out case."""
    rows: list[EvalRow] = []
    for case in cases:
        labels, _ = run_pipeline(case.fat, bundle, "learned", canvas_mode)
        rows.append(
            EvalRow(
                case_id=case.case_id,
                mode="aggregated",
                dice=tuple(dice_per_class(labels.data, case.tissue.data, 5)),
            )
        )
        if not single_views:
            continue
        region = localize_abdominal_region(
            case.fat, bundle.loc_sagittal, bundle.loc_coronal, canvas_mode
        )
        for plane in SlicePlane:
            probs = segment_view(case.fat, region, plane, bundle.seg_model(plane), canvas_mode)
            view_labels = np.argmax(probs, axis=0).astype(np.uint8)
            rows.append(
                EvalRow(
                    case_id=case.case_id,
                    mode=plane.value,
                    dice=tuple(dice_per_class(view_labels, case.tissue.data, 5)),
                )
            )
    return EvalReport(rows=rows)


@dataclass
class RetestResult:
    report: ReliabilityReport
    session_volumes: list[tuple[VolumesReport, VolumesReport]]

    def to_csv(self) -> str:
        lines = ["pair,sat_ml_1,sat_ml_2,vat_ml_1,vat_ml_2"]
        for i, (a, b) in enumerate(self.session_volumes):
            lines.append(
                f"{i},{a.sat_ml!r},{b.sat_ml!r},{a.vat_ml!r},{b.vat_ml!r}"
            )
        return "\n".join(lines) + "\n"


def retest_experiment(
    bundle: ModelBundle,
    exp: ExperimentConfig,
    n_pairs: int | None = None,
) -> RetestResult:
    """Segment matched phantom pairs (original + re-rendered shifted copy)
    and summarize volume agreement across the two sessions."""
    n = exp.n_retest_pairs if n_pairs is None else n_pairs
    originals = generate_cohort(exp.phantom, n, seed=exp.retest_seed)
    session_volumes = []
    for i, case in enumerate(originals):
        twin = perturb_retest(case, seed=exp.retest_seed + 10_000 + i)
        _, rep1 = run_pipeline(case.fat_image, bundle, "learned", exp.canvas_mode)
        _, rep2 = run_pipeline(twin.fat_image, bundle, "learned", exp.canvas_mode)
        session_volumes.append((rep1, rep2))
    report = compare_sessions(session_volumes)
    return RetestResult(report=report, session_volumes=session_volumes)
