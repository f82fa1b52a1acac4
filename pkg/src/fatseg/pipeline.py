"""Three-stage orchestration: localization, per-view segmentation, aggregation.

Stage one finds the abdominal slice span from region predictions on the
sagittal and coronal views. Stage two segments tissue on all three views
inside that span. Stage three fuses the per-view probability maps (learned
3D net or fixed convex weights) into one label map from which volumes are
reported.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import netgraph as ng
from .errors import DimensionError, LocalizationError, MissingArtifactError
from .volume import (
    LabelMap,
    LabelScheme,
    REGION_ABDOMINAL,
    SlicePlane,
    Volume3D,
    crop_from_canvas,
    extract_slices,
    pad_to_canvas,
)

ABDOMINAL_COVERAGE = 0.85
INFERENCE_BATCH = 16

HARDCODED_WEIGHTS = {
    "balanced": (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    "axial-focus": (0.5, 0.25, 0.25),
}


def apply_thread_cap() -> None:
    """Honor the FATSEG_THREADS environment variable for torch parallelism."""
    cap = os.environ.get("FATSEG_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


@dataclass(frozen=True)
class AbdominalRegion:
    """Inclusive axial slice span of the abdominal region."""

    z_low: int
    z_high: int

    def __post_init__(self) -> None:
        if not 0 <= self.z_low <= self.z_high:
            raise ValueError(f"invalid region bounds [{self.z_low}, {self.z_high}]")

    def length(self) -> int:
        return self.z_high - self.z_low + 1


@dataclass
class Model:
    """A network spec paired with its weights; caches the torch runtime."""

    spec: ng.NetworkSpec
    weights: ng.WeightStore
    _net: ng.TorchNet | None = field(default=None, repr=False, compare=False)

    def runtime(self) -> ng.TorchNet:
        if self._net is None:
            self._net = ng.TorchNet(self.spec, self.weights)
            self._net.eval()
        return self._net

    def save(self, out_dir: str | Path) -> None:
        ng.save_weights(self.weights, out_dir, ng.spec_config(self.spec))

    @classmethod
    def load(cls, in_dir: str | Path) -> "Model":
        store, cfg = ng.load_weights(in_dir)
        return cls(spec=ng.build_from_config(cfg), weights=store)


BUNDLE_PARTS = (
    "loc-coronal",
    "loc-sagittal",
    "seg-axial",
    "seg-coronal",
    "seg-sagittal",
    "view-agg",
)


@dataclass
class ModelBundle:
    loc_coronal: Model
    loc_sagittal: Model
    seg_axial: Model
    seg_coronal: Model
    seg_sagittal: Model
    view_agg: Model | None = None

    def seg_model(self, plane: SlicePlane) -> Model:
        return {
            SlicePlane.AXIAL: self.seg_axial,
            SlicePlane.CORONAL: self.seg_coronal,
            SlicePlane.SAGITTAL: self.seg_sagittal,
        }[plane]

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        parts = {
            "loc-coronal": self.loc_coronal,
            "loc-sagittal": self.loc_sagittal,
            "seg-axial": self.seg_axial,
            "seg-coronal": self.seg_coronal,
            "seg-sagittal": self.seg_sagittal,
            "view-agg": self.view_agg,
        }
        for name, model in parts.items():
            if model is not None:
                model.save(out_dir / name)

    @classmethod
    def load(cls, in_dir: str | Path, require_agg: bool = True) -> "ModelBundle":
        in_dir = Path(in_dir)
        models = {}
        for name in BUNDLE_PARTS:
            part_dir = in_dir / name
            if not (part_dir / "manifest.json").exists():
                if name == "view-agg" and not require_agg:
                    models[name] = None
                    continue
                raise MissingArtifactError(f"model bundle is missing {name} at {part_dir}")
            models[name] = Model.load(part_dir)
        return cls(
            loc_coronal=models["loc-coronal"],
            loc_sagittal=models["loc-sagittal"],
            seg_axial=models["seg-axial"],
            seg_coronal=models["seg-coronal"],
            seg_sagittal=models["seg-sagittal"],
            view_agg=models["view-agg"],
        )


def _ceil16(n: int) -> int:
    return ((n + 15) // 16) * 16


def _predict_stack(
    model: Model, slices: list[np.ndarray], canvas_mode: str
) -> np.ndarray:
    """Forward a list of equal-shape 2D slices; returns (n, C, h, w) probs.

    canvas_mode "full" pads to the model canvas; "tight" pads to the smallest
    pooling-compatible canvas that holds the content (the net is fully
    convolutional, so only runtime changes).
    """
    h, w = slices[0].shape
    model_canvas = model.spec.input_canvas
    if h > model_canvas[0] or w > model_canvas[1]:
        raise DimensionError(f"slice {slices[0].shape} exceeds canvas {model_canvas}")
    canvas = model_canvas if canvas_mode == "full" else (_ceil16(h), _ceil16(w))
    padded = []
    offsets = None
    for sl in slices:
        p, offsets = pad_to_canvas(np.asarray(sl, dtype=np.float32), canvas)
        padded.append(p)
    stack = np.stack(padded)[:, None]  # (n, 1, ch, cw)
    net = model.runtime()
    outs = []
    with torch.inference_mode():
        for start in range(0, len(stack), INFERENCE_BATCH):
            chunk = torch.from_numpy(stack[start : start + INFERENCE_BATCH])
            outs.append(net(chunk).numpy())
    probs = np.concatenate(outs, axis=0)
    return crop_from_canvas(probs, offsets)


def _restack_probs(probs: np.ndarray, plane: SlicePlane) -> np.ndarray:
    """(n_slices, C, sh, sw) per-slice probabilities -> (C, D, H, W) frame."""
    if plane is SlicePlane.AXIAL:
        return np.transpose(probs, (1, 0, 2, 3))
    if plane is SlicePlane.CORONAL:
        return np.transpose(probs, (1, 2, 0, 3))
    return np.transpose(probs, (1, 2, 3, 0))


def predict_view_probs(
    model: Model,
    data: np.ndarray,
    plane: SlicePlane,
    canvas_mode: str = "tight",
) -> np.ndarray:
    """Slice a volume block along `plane`, run the model, re-stack to (C, *block)."""
    slices = extract_slices(data, plane)
    probs = _predict_stack(model, slices, canvas_mode)
    return _restack_probs(probs, plane)


def abdominal_bounds(
    region_labels: np.ndarray, coverage: float = ABDOMINAL_COVERAGE
) -> tuple[int, int] | None:
    """Lowest and highest axial index whose abdominal fraction reaches coverage.

    The fraction at z is abdominal voxels over non-background voxels; slices
    without any non-background voxel count as zero coverage.
    """
    labels = np.asarray(region_labels)
    non_bg = (labels != 0).sum(axis=(1, 2))
    abdominal = (labels == REGION_ABDOMINAL).sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(non_bg > 0, abdominal / np.maximum(non_bg, 1), 0.0)
    passing = np.flatnonzero(ratio >= coverage)
    if passing.size == 0:
        return None
    return int(passing.min()), int(passing.max())


def average_bounds(bounds: list[tuple[int, int]]) -> AbdominalRegion:
    """Arithmetic mean of per-view bounds, rounded to the nearest slice with
    ties pushed outward (enlarging the region)."""
    lows = [b[0] for b in bounds]
    highs = [b[1] for b in bounds]
    z_low = math.ceil(sum(lows) / len(lows) - 0.5)
    z_high = math.floor(sum(highs) / len(highs) + 0.5)
    return AbdominalRegion(z_low=z_low, z_high=z_high)


def localize_abdominal_region(
    fat: Volume3D,
    sag_model: Model,
    cor_model: Model,
    canvas_mode: str = "tight",
    coverage: float = ABDOMINAL_COVERAGE,
) -> AbdominalRegion:
    """Average the per-view abdominal spans from sagittal and coronal region
    predictions; fails when either view has no slice passing the rule."""
    per_view = []
    for model, plane in ((sag_model, SlicePlane.SAGITTAL), (cor_model, SlicePlane.CORONAL)):
        probs = predict_view_probs(model, fat.data, plane, canvas_mode)
        labels = np.argmax(probs, axis=0).astype(np.uint8)
        b = abdominal_bounds(labels, coverage)
        if b is None:
            raise LocalizationError(
                f"no {plane.value}-view slice reaches {coverage:.0%} abdominal coverage"
            )
        per_view.append(b)
    region = average_bounds(per_view)
    d = fat.shape[0]
    return AbdominalRegion(z_low=max(0, region.z_low), z_high=min(d - 1, region.z_high))


def segment_view(
    fat: Volume3D,
    region: AbdominalRegion,
    plane: SlicePlane,
    model: Model,
    canvas_mode: str = "tight",
) -> np.ndarray:
    """Per-view class probabilities (C, D, H, W) in the volume frame.

    Only slices inside the abdominal span are segmented; everything outside
    carries probability 1 for background.
    """
    d = fat.shape[0]
    if not region.z_high < d:
        raise ValueError(f"region {region} outside volume of depth {d}")
    block = fat.data[region.z_low : region.z_high + 1]
    block_probs = predict_view_probs(model, block, plane, canvas_mode)
    c = block_probs.shape[0]
    out = np.zeros((c, *fat.shape), dtype=np.float32)
    out[0] = 1.0
    out[:, region.z_low : region.z_high + 1] = block_probs
    return out


def _check_views(views: dict[SlicePlane, np.ndarray]) -> tuple[int, ...]:
    for plane in (SlicePlane.AXIAL, SlicePlane.CORONAL, SlicePlane.SAGITTAL):
        if plane not in views:
            raise ValueError(f"missing {plane.value} view probabilities")
    shapes = {views[p].shape for p in views}
    if len(shapes) != 1:
        raise DimensionError(f"view probability shapes differ: {sorted(shapes)}")
    return next(iter(shapes))


def stack_views(views: dict[SlicePlane, np.ndarray]) -> np.ndarray:
    """Concatenate per-view class probabilities into the fusion input
    (3 * num_classes channels, axial first, then coronal, then sagittal)."""
    _check_views(views)
    return np.concatenate(
        [views[SlicePlane.AXIAL], views[SlicePlane.CORONAL], views[SlicePlane.SAGITTAL]],
        axis=0,
    ).astype(np.float32)


def aggregate_learned(
    views: dict[SlicePlane, np.ndarray],
    agg_model: Model,
    spacing_mm: tuple[float, float, float],
) -> LabelMap:
    """Fuse the three views through the 3D aggregation net and take the
    per-voxel argmax (ties go to the lower class id)."""
    stacked = stack_views(views)
    net = agg_model.runtime()
    with torch.inference_mode():
        probs = net(torch.from_numpy(stacked[None])).numpy()[0]
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return LabelMap(labels, LabelScheme.TISSUE, spacing_mm)


def aggregate_hardcoded(
    views: dict[SlicePlane, np.ndarray],
    weights: tuple[float, float, float],
    spacing_mm: tuple[float, float, float],
) -> LabelMap:
    """Per-voxel convex combination of the three views, then argmax."""
    wa, wc, ws = (float(w) for w in weights)
    if min(wa, wc, ws) < 0 or abs(wa + wc + ws - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be non-negative and sum to 1: {weights}")
    _check_views(views)
    combo = (
        wa * views[SlicePlane.AXIAL]
        + wc * views[SlicePlane.CORONAL]
        + ws * views[SlicePlane.SAGITTAL]
    )
    labels = np.argmax(combo, axis=0).astype(np.uint8)
    return LabelMap(labels, LabelScheme.TISSUE, spacing_mm)


TISSUE_NAMES = {0: "background", 1: "sat", 2: "vat", 3: "bone", 4: "other"}


@dataclass
class VolumesReport:
    sat_ml: float
    vat_ml: float
    aat_ml: float
    region: AbdominalRegion
    voxel_counts: dict[str, int]
    runtime_s: float

    def to_json(self) -> str:
        payload = {
            "sat_ml": self.sat_ml,
            "vat_ml": self.vat_ml,
            "aat_ml": self.aat_ml,
            "z_low": self.region.z_low,
            "z_high": self.region.z_high,
            "voxel_counts": self.voxel_counts,
            "runtime_s": self.runtime_s,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VolumesReport":
        d = json.loads(text)
        return cls(
            sat_ml=d["sat_ml"],
            vat_ml=d["vat_ml"],
            aat_ml=d["aat_ml"],
            region=AbdominalRegion(d["z_low"], d["z_high"]),
            voxel_counts=d["voxel_counts"],
            runtime_s=d["runtime_s"],
        )


def volumes_from_labels(
    labels: LabelMap, region: AbdominalRegion, runtime_s: float = 0.0
) -> VolumesReport:
    """Volume report over the abdominal span: count * voxel volume / 1000 mL."""
    slab = labels.data[region.z_low : region.z_high + 1]
    counts = np.bincount(slab.ravel(), minlength=5)
    voxel_ml = labels.voxel_volume_mm3() / 1000.0
    sat_ml = int(counts[1]) * voxel_ml
    vat_ml = int(counts[2]) * voxel_ml
    return VolumesReport(
        sat_ml=sat_ml,
        vat_ml=vat_ml,
        aat_ml=sat_ml + vat_ml,
        region=region,
        voxel_counts={TISSUE_NAMES[c]: int(counts[c]) for c in range(5)},
        runtime_s=runtime_s,
    )


def run_pipeline(
    fat: Volume3D,
    bundle: ModelBundle,
    aggregation: str = "learned",
    canvas_mode: str = "tight",
) -> tuple[LabelMap, VolumesReport]:
    """Localize, segment each view, aggregate, and report volumes."""
    t0 = time.perf_counter()
    region = localize_abdominal_region(
        fat, bundle.loc_sagittal, bundle.loc_coronal, canvas_mode
    )
    views = {
        plane: segment_view(fat, region, plane, bundle.seg_model(plane), canvas_mode)
        for plane in (SlicePlane.AXIAL, SlicePlane.CORONAL, SlicePlane.SAGITTAL)
    }
    slab = {
        plane: probs[:, region.z_low : region.z_high + 1] for plane, probs in views.items()
    }
    if aggregation == "learned":
        if bundle.view_agg is None:
            raise MissingArtifactError("bundle has no aggregation net weights")
        slab_labels = aggregate_learned(slab, bundle.view_agg, fat.spacing_mm)
    else:
        weights = HARDCODED_WEIGHTS.get(aggregation)
        if weights is None:
            raise ValueError(f"unknown aggregation mode {aggregation!r}")
        slab_labels = aggregate_hardcoded(slab, weights, fat.spacing_mm)
    full = np.zeros(fat.shape, dtype=np.uint8)
    full[region.z_low : region.z_high + 1] = slab_labels.data
    labels = LabelMap(full, LabelScheme.TISSUE, fat.spacing_mm)
    report = volumes_from_labels(labels, region, runtime_s=time.perf_counter() - t0)
    return labels, report
