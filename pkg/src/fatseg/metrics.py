"""Segmentation accuracy and test-retest reliability metrics.

Dice overlap, absolute percent difference of paired volume estimates, and the
two-way absolute-agreement single-measures intraclass correlation with its
F-based confidence interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import f as f_dist

from .errors import DegenerateDataError, DimensionError


def dice(m: np.ndarray, p: np.ndarray) -> float:
    """Dice overlap 2|M∩P| / (|M|+|P|) between two binary masks.

    Defined as 1.0 when both masks are empty (agreement on absence).
    """
    m = np.asarray(m, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if m.shape != p.shape:
        raise DimensionError(f"mask shapes differ: {m.shape} vs {p.shape}")
    denom = int(m.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(m, p).sum()) / denom


def dice_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Dice per class id between two integer label arrays."""
    return np.array([dice(truth == c, pred == c) for c in range(num_classes)], dtype=float)


def apd(n1: float, n2: float) -> float:
    """Absolute percent difference 2|n1-n2| / (n1+n2) * 100 of paired estimates."""
    if n1 + n2 <= 0:
        raise DegenerateDataError("apd undefined when both measurements are zero")
    return 2.0 * abs(n1 - n2) / (n1 + n2) * 100.0


def _mean_squares(session1: np.ndarray, session2: np.ndarray) -> tuple[float, float, float, int]:
    """Two-way mean squares (rows = subjects, columns = sessions, k = 2)."""
    ratings = np.column_stack([session1, session2]).astype(float)
    n, k = ratings.shape
    grand = ratings.mean()
    row_means = ratings.mean(axis=1)
    col_means = ratings.mean(axis=0)
    ss_rows = k * float(((row_means - grand) ** 2).sum())
    ss_cols = n * float(((col_means - grand) ** 2).sum())
    ss_total = float(((ratings - grand) ** 2).sum())
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    return msr, msc, mse, n


def icc_a1(
    session1: list[float] | np.ndarray,
    session2: list[float] | np.ndarray,
    confidence: float = 0.95,
) -> tuple[float, float, float]:
    """Two-way, absolute-agreement, single-measures intraclass correlation.

    Returns (estimate, ci_low, ci_high). The confidence interval follows the
    McGraw-Wong F construction with Satterthwaite degrees of freedom.
    """
    s1 = np.asarray(session1, dtype=float)
    s2 = np.asarray(session2, dtype=float)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise DimensionError("sessions must be 1D arrays of equal length")
    n = s1.size
    if n < 3:
        raise ValueError(f"need at least 3 paired measurements, got {n}")
    k = 2
    msr, msc, mse, n = _mean_squares(s1, s2)
    if msr == 0.0 and msc == 0.0 and mse == 0.0:
        raise DegenerateDataError("icc undefined: zero total variance")

    est = (msr - mse) / (msr + (k - 1) * mse + (k / n) * (msc - mse))

    # mse == 0 means perfect within-subject agreement; the interval collapses.
    if mse == 0.0 or est >= 1.0:
        return float(est), float(est), float(est)

    alpha = 1.0 - confidence
    a = (k * est) / (n * (1.0 - est))
    b = 1.0 + (k * est * (n - 1)) / (n * (1.0 - est))
    v = (a * msc + b * mse) ** 2 / (
        (a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1))
    )
    fl = f_dist.ppf(1.0 - alpha / 2.0, n - 1, v)
    fu = f_dist.ppf(1.0 - alpha / 2.0, v, n - 1)
    lo = n * (msr - fl * mse) / (fl * (k * msc + (k * n - k - n) * mse) + n * msr)
    hi = n * (fu * msr - mse) / (k * msc + (k * n - k - n) * mse + n * fu * msr)
    return float(est), float(lo), float(hi)


@dataclass
class LabelReliability:
    """Reliability summary for one tissue label across paired sessions."""

    apd_mean: float
    apd_sd: float
    icc: float
    icc_ci: tuple[float, float]


@dataclass
class ReliabilityReport:
    """Per-label APD and ICC(A,1) over paired-session volume estimates."""

    n_pairs: int
    labels: dict[str, LabelReliability]

    def to_json(self) -> str:
        payload = {
            "n_pairs": self.n_pairs,
            "labels": {
                name: {
                    "apd_mean": r.apd_mean,
                    "apd_sd": r.apd_sd,
                    "icc": r.icc,
                    "icc_ci": list(r.icc_ci),
                }
                for name, r in self.labels.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Row layout: one metric per row, one column per label."""
        names = list(self.labels)
        lines = ["metric," + ",".join(names)]
        lines.append(
            "ICC [95% CI],"
            + ",".join(
                f"{r.icc:.3f} [{r.icc_ci[0]:.3f} - {r.icc_ci[1]:.3f}]"
                for r in self.labels.values()
            )
        )
        lines.append(
            "APD (SD)," + ",".join(f"{r.apd_mean:.3f}% ({r.apd_sd:.3f})" for r in self.labels.values())
        )
        return "\n".join(lines) + "\n"


def compare_sessions(pairs: list[tuple[object, object]]) -> ReliabilityReport:
    """Reliability report over paired volume reports.

    Each pair holds two objects exposing sat_ml and vat_ml (one per session).
    """
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 session pairs, got {len(pairs)}")
    paired = {
        "SAT": (
            np.array([p[0].sat_ml for p in pairs]),
            np.array([p[1].sat_ml for p in pairs]),
        ),
        "VAT": (
            np.array([p[0].vat_ml for p in pairs]),
            np.array([p[1].vat_ml for p in pairs]),
        ),
    }
    return reliability_from_volumes(paired)


def reliability_from_volumes(
    paired_volumes: dict[str, tuple[np.ndarray, np.ndarray]]
) -> ReliabilityReport:
    """Build a ReliabilityReport from per-label paired volume arrays.

    paired_volumes maps a label name to (session1, session2) volume vectors.
    """
    labels: dict[str, LabelReliability] = {}
    n_pairs = 0
    for name, (v1, v2) in paired_volumes.items():
        v1 = np.asarray(v1, dtype=float)
        v2 = np.asarray(v2, dtype=float)
        n_pairs = v1.size
        apds = np.array([apd(a, b) for a, b in zip(v1, v2)])
        est, lo, hi = icc_a1(v1, v2)
        labels[name] = LabelReliability(
            apd_mean=float(apds.mean()),
            apd_sd=float(apds.std(ddof=1)) if apds.size > 1 else 0.0,
            icc=est,
            icc_ci=(lo, hi),
        )
    return ReliabilityReport(n_pairs=n_pairs, labels=labels)
