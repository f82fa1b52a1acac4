"""Deterministic synthetic abdominal phantoms with exact ground truth.

Each phantom is an elliptical body column: a bright subcutaneous fat ring,
a posterior bone column, random bright visceral blobs confined to the
abdominal band, and dimmer soft tissue elsewhere. The z axis is split into
thoracic / abdominal / pelvic bands whose transitions are visible in the
image (taper kinks, blob extent, extra pelvic bone discs), so the band is
learnable from the image alone. Tissue labels are only defined inside the
abdominal band, matching the region-restricted volume reporting downstream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume import (
    LabelMap,
    LabelScheme,
    REGION_ABDOMINAL,
    REGION_PELVIC,
    REGION_THORACIC,
    TISSUE_BONE,
    TISSUE_OTHER,
    TISSUE_SAT,
    TISSUE_VAT,
    Volume3D,
    read_volume,
    write_volume,
)

ADIPOSE_MEAN = 0.9
BONE_MEAN = 0.6
OTHER_MEAN = 0.2

INPLANE_MARGIN = 4.0  # voxels kept free at y/x borders (retest shift room)
BODY_SCALE_RANGE = (0.70, 0.92)


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    shape: tuple[int, int, int] = (32, 96, 112)
    spacing_mm: tuple[float, float, float] = (5.0, 2.0, 2.0)
    sat_thickness_range: tuple[float, float] = (2.0, 5.0)
    vat_blob_count_range: tuple[int, int] = (4, 9)
    vat_blob_radius_range: tuple[float, float] = (2.0, 6.0)
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.10
    region_fractions: tuple[float, float, float] = (0.30, 0.45, 0.25)

    def validate(self) -> None:
        d, h, w = self.shape
        if d < 3 or h < 12 or w < 12:
            raise ConfigError(f"shape {self.shape} too small for a phantom body")
        for name in ("sat_thickness_range", "vat_blob_count_range", "vat_blob_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} has min > max: {(lo, hi)}")
        if self.sat_thickness_range[0] < 1.0:
            raise ConfigError("sat ring thickness must be at least 1 voxel")
        if self.vat_blob_count_range[0] < 0:
            raise ConfigError("vat blob count cannot be negative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.bias_amplitude < 1.0:
            raise ConfigError("bias_amplitude must lie in [0, 1)")
        if any(f <= 0 for f in self.region_fractions):
            raise ConfigError("region fractions must be positive")
        if abs(sum(self.region_fractions) - 1.0) > 1e-9:
            raise ConfigError("region fractions must sum to 1")
        if any(s <= 0 for s in self.spacing_mm):
            raise ConfigError("spacing must be positive")


@dataclass
class PhantomCase:
    fat_image: Volume3D
    tissue_labels: LabelMap
    region_labels: LabelMap
    true_volumes_ml: dict[int, float]
    # full-body class map used to re-render the image (visceral blobs only
    # inside the abdominal band); kept so retest perturbation can re-render
    anatomy_labels: LabelMap | None = None
    config: PhantomConfig | None = None


def _region_band_lengths(body_len: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_thor = max(1, int(round(fractions[0] * body_len)))
    n_pelv = max(1, int(round(fractions[2] * body_len)))
    n_abd = body_len - n_thor - n_pelv
    if n_abd < 1:
        raise ConfigError(f"body of {body_len} slices cannot host three regions")
    return n_thor, n_abd, n_pelv


def _radius_profile(d: int, z0: int, z1: int, bands: tuple[int, int, int]) -> np.ndarray:
    """Per-slice radius multiplier; kinks exactly at the region boundaries."""
    n_thor, n_abd, n_pelv = bands
    prof = np.zeros(d)
    t_end = z0 + n_thor
    a_end = t_end + n_abd
    for z in range(z0, t_end):
        frac = (z - z0 + 1) / n_thor
        prof[z] = 0.80 + 0.20 * frac
    for z in range(t_end, a_end):
        frac = (z - t_end + 0.5) / n_abd
        prof[z] = 1.0 + 0.05 * np.sin(np.pi * frac)
    for z in range(a_end, z1 + 1):
        frac = (z - a_end + 1) / n_pelv
        prof[z] = 1.0 - 0.28 * frac
    return prof


def _ellipse_field(
    ry: np.ndarray, rx: np.ndarray, cy: float, cx: float, h: int, w: int
) -> np.ndarray:
    """Normalized elliptical distance per slice; <= 1 is inside."""
    y = np.arange(h, dtype=np.float64)[None, :, None]
    x = np.arange(w, dtype=np.float64)[None, None, :]
    ry = np.maximum(ry, 1e-6)[:, None, None]
    rx = np.maximum(rx, 1e-6)[:, None, None]
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2


def _smooth_bias(rng: np.random.Generator, shape: tuple[int, int, int], amplitude: float) -> np.ndarray:
    d, h, w = shape
    z = np.arange(d)[:, None, None] / max(d, 1)
    y = np.arange(h)[None, :, None] / max(h, 1)
    x = np.arange(w)[None, None, :] / max(w, 1)
    g = np.zeros(shape)
    for _ in range(3):
        fz, fy, fx = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        g = g + amp * np.cos(2.0 * np.pi * (fz * z + fy * y + fx * x) + phase)
    peak = np.abs(g).max()
    if peak > 0:
        g = g / peak
    return 1.0 + amplitude * g


def _render_image(
    anatomy: np.ndarray, rng: np.random.Generator, noise_sigma: float, bias_amplitude: float
) -> np.ndarray:
    means = np.zeros(5, dtype=np.float64)
    means[TISSUE_SAT] = ADIPOSE_MEAN
    means[TISSUE_VAT] = ADIPOSE_MEAN
    means[TISSUE_BONE] = BONE_MEAN
    means[TISSUE_OTHER] = OTHER_MEAN
    img = means[anatomy]
    img = img * _smooth_bias(rng, anatomy.shape, bias_amplitude)
    img = img + rng.normal(0.0, noise_sigma, anatomy.shape)
    return img.astype(np.float32)


def _volumes_from_labels(labels: np.ndarray, spacing_mm: tuple[float, float, float]) -> dict[int, float]:
    voxel_ml = (spacing_mm[0] * spacing_mm[1] * spacing_mm[2]) / 1000.0
    counts = np.bincount(labels.ravel(), minlength=5)
    return {c: int(counts[c]) * voxel_ml for c in range(5)}


def generate_phantom(cfg: PhantomConfig) -> PhantomCase:
    """Build one phantom; identical configs give bitwise-identical cases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, h, w = cfg.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    z0, z1 = Z_MARGIN, d - 1 - Z_MARGIN
    body_len = z1 - z0 + 1
    bands = _region_band_lengths(body_len, cfg.region_fractions)
    n_thor, n_abd, n_pelv = bands
    abd_lo, abd_hi = z0 + n_thor, z0 + n_thor + n_abd - 1

    scale = rng.uniform(*BODY_SCALE_RANGE)
    thickness = rng.uniform(*cfg.sat_thickness_range)
    ry_base = scale * (h / 2.0 - INPLANE_MARGIN)
    rx_base = scale * (w / 2.0 - INPLANE_MARGIN)

    prof = _radius_profile(d, z0, z1, bands)
    ry = ry_base * prof
    rx = rx_base * prof
    inner_min = min((ry[z0 : z1 + 1] - thickness).min(), (rx[z0 : z1 + 1] - thickness).min())
    if inner_min < 3.0:
        raise ConfigError(
            f"shape {cfg.shape} leaves an interior radius of {inner_min:.1f} voxels (< 3)"
        )

    body_z = np.zeros(d, dtype=bool)
    body_z[z0 : z1 + 1] = True
    body = (_ellipse_field(ry, rx, cy, cx, h, w) <= 1.0) & body_z[:, None, None]
    inner = (_ellipse_field(ry - thickness, rx - thickness, cy, cx, h, w) <= 1.0) & body_z[
        :, None, None
    ]
    core = (
        _ellipse_field(ry - thickness - 1.5, rx - thickness - 1.5, cy, cx, h, w) <= 1.0
    ) & body_z[:, None, None]

    anatomy = np.zeros(cfg.shape, dtype=np.uint8)
    anatomy[inner] = TISSUE_OTHER
    anatomy[body & ~inner] = TISSUE_SAT

    abd_z = np.zeros(d, dtype=bool)
    abd_z[abd_lo : abd_hi + 1] = True

    # visceral blobs, clipped to the abdominal band and strictly inside the ring
    n_blobs = int(rng.integers(cfg.vat_blob_count_range[0], cfg.vat_blob_count_range[1] + 1))
    rmin, rmax = cfg.vat_blob_radius_range
    for _ in range(n_blobs):
        zc = rng.uniform(abd_lo + 0.5, abd_hi + 0.5)
        yc = rng.uniform(cy - 0.55 * (ry_base - thickness), cy + 0.55 * (ry_base - thickness))
        xc = rng.uniform(cx - 0.55 * (rx_base - thickness), cx + 0.55 * (rx_base - thickness))
        rz = rng.uniform(rmin, max(rmin, min(rmax, n_abd / 2.5)))
        by = rng.uniform(rmin, rmax)
        bx = rng.uniform(rmin, rmax)
        zz = np.arange(d, dtype=np.float64)[:, None, None]
        yy = np.arange(h, dtype=np.float64)[None, :, None]
        xx = np.arange(w, dtype=np.float64)[None, None, :]
        blob = ((zz - zc) / rz) ** 2 + ((yy - yc) / by) ** 2 + ((xx - xc) / bx) ** 2 <= 1.0
        anatomy[blob & core & abd_z[:, None, None]] = TISSUE_VAT

    # posterior bone column along the whole body; two extra discs in the pelvis
    r_bone = max(2.0, 0.10 * min(ry_base, rx_base))
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    spine = (yy - (cy + 0.55 * (ry_base - thickness))) ** 2 + (xx - cx) ** 2 <= r_bone**2
    anatomy[body_z[:, None, None] & spine[None] & inner] = TISSUE_BONE
    pelv_z = np.zeros(d, dtype=bool)
    pelv_z[abd_hi + 1 : z1 + 1] = True
    for side in (-1.0, 1.0):
        hip = (yy - (cy + 0.30 * (ry_base - thickness))) ** 2 + (
            xx - (cx + side * 0.45 * (rx_base - thickness))
        ) ** 2 <= r_bone**2
        anatomy[pelv_z[:, None, None] & hip[None] & inner] = TISSUE_BONE

    tissue = np.where(abd_z[:, None, None], anatomy, 0).astype(np.uint8)

    region = np.zeros(cfg.shape, dtype=np.uint8)
    region[body] = REGION_THORACIC
    region[(body & abd_z[:, None, None])] = REGION_ABDOMINAL
    region[(body & pelv_z[:, None, None])] = REGION_PELVIC

    image = _render_image(anatomy, rng, cfg.noise_sigma, cfg.bias_amplitude)

    return PhantomCase(
        fat_image=Volume3D(image, cfg.spacing_mm),
        tissue_labels=LabelMap(tissue, LabelScheme.TISSUE, cfg.spacing_mm),
        region_labels=LabelMap(region, LabelScheme.REGION, cfg.spacing_mm),
        true_volumes_ml=_volumes_from_labels(tissue, cfg.spacing_mm),
        anatomy_labels=LabelMap(anatomy, LabelScheme.TISSUE, cfg.spacing_mm),
        config=cfg,
    )


def _thickness_window(base: tuple[float, float], index: int) -> tuple[float, float]:
    """Per-case subcutaneous thickness window sweeping the configured range,
    cycling through four strata so a cohort spans thin to thick rings."""
    lo, hi = base
    if hi - lo <= 0:
        return base
    center = lo + (hi - lo) * (index % 4) / 3.0
    half = (hi - lo) / 8.0
    return (max(lo, center - half), min(hi, center + half))


def generate_cohort(base_cfg: PhantomConfig, n: int, seed: int) -> list[PhantomCase]:
    """n phantoms with per-case seeds seed + index and stratified ring
    thickness (body size varies through each case's own draws)."""
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    cases = []
    for i in range(n):
        cfg = replace(
            base_cfg,
            seed=seed + i,
            sat_thickness_range=_thickness_window(base_cfg.sat_thickness_range, i),
        )
        cases.append(generate_phantom(cfg))
    return cases


MANIFEST_HEADER = ["case_id", "fat_path", "tissue_path", "region_path", "sat_ml", "vat_ml"]


@dataclass
class CohortRecord:
    """One row of a cohort manifest, with volumes loaded lazily by path."""

    case_id: str
    fat_path: Path
    tissue_path: Path
    region_path: Path
    sat_ml: float
    vat_ml: float

    def load_fat(self) -> Volume3D:
        v = read_volume(self.fat_path)
        assert isinstance(v, Volume3D)
        return v

    def load_tissue(self) -> LabelMap:
        m = read_volume(self.tissue_path)
        assert isinstance(m, LabelMap)
        return m

    def load_region(self) -> LabelMap:
        m = read_volume(self.region_path)
        assert isinstance(m, LabelMap)
        return m


def write_cohort(cases: list[PhantomCase], out_dir: str | Path) -> Path:
    """Write case volumes and the cohort manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, case in enumerate(cases):
        cid = f"case{i:03d}"
        names = (f"{cid}_fat.fsv", f"{cid}_tissue.fsv", f"{cid}_region.fsv")
        write_volume(case.fat_image, out_dir / names[0])
        write_volume(case.tissue_labels, out_dir / names[1])
        write_volume(case.region_labels, out_dir / names[2])
        rows.append(
            [
                cid,
                *names,
                repr(case.true_volumes_ml[TISSUE_SAT]),
                repr(case.true_volumes_ml[TISSUE_VAT]),
            ]
        )
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


def read_cohort(manifest_path: str | Path) -> list[CohortRecord]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ConfigError(
                f"manifest header {reader.fieldnames} != expected {MANIFEST_HEADER}"
            )
        for row in reader:
            records.append(
                CohortRecord(
                    case_id=row["case_id"],
                    fat_path=base / row["fat_path"],
                    tissue_path=base / row["tissue_path"],
                    region_path=base / row["region_path"],
                    sat_ml=float(row["sat_ml"]),
                    vat_ml=float(row["vat_ml"]),
                )
            )
    return records


def retest_shift(seed: int) -> tuple[int, int, int]:
    """The rigid shift (dz, dy, dx) a retest perturbation with this seed applies."""
    rng = np.random.default_rng(seed)
    dz = int(rng.integers(-1, 2))
    dy = int(rng.integers(-2, 3))
    dx = int(rng.integers(-2, 3))
    return dz, dy, dx


def _shift_labels(arr: np.ndarray, shift: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros_like(arr)
    src = []
    dst = []
    for axis, delta in enumerate(shift):
        n = arr.shape[axis]
        if delta >= 0:
            src.append(slice(0, n - delta))
            dst.append(slice(delta, n))
        else:
            src.append(slice(-delta, n))
            dst.append(slice(0, n + delta))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def perturb_retest(case: PhantomCase, seed: int) -> PhantomCase:
    """Re-render the same anatomy after a small rigid shift with fresh noise
    and bias field; labels are shifted identically."""
    if case.anatomy_labels is None or case.config is None:
        raise ValueError("case lacks anatomy/config; regenerate it with generate_phantom")
    shift = retest_shift(seed)
    rng = np.random.default_rng(seed)
    rng.integers(-1, 2)  # consume the shift draws so noise differs per seed
    rng.integers(-2, 3)
    rng.integers(-2, 3)
    spacing = case.fat_image.spacing_mm
    anatomy = _shift_labels(case.anatomy_labels.data, shift)
    tissue = _shift_labels(case.tissue_labels.data, shift)
    region = _shift_labels(case.region_labels.data, shift)
    image = _render_image(anatomy, rng, case.config.noise_sigma, case.config.bias_amplitude)
    return PhantomCase(
        fat_image=Volume3D(image, spacing),
        tissue_labels=LabelMap(tissue, LabelScheme.TISSUE, spacing),
        region_labels=LabelMap(region, LabelScheme.REGION, spacing),
        true_volumes_ml=_volumes_from_labels(tissue, spacing),
        anatomy_labels=LabelMap(anatomy, LabelScheme.TISSUE, spacing),
        config=case.config,
    )
