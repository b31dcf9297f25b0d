"""Scalar quality metrics, rank statistics and QC report assembly."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations
from typing import Sequence

import numpy as np
from scipy import stats

from .uncmath import UncertaintyBundle, entropy_map, scaled_softmax, volume_error_bars
from .volume import LabelVolume, Volume

CSV_COLUMNS = ("id", "dice", "mean_artefact_variance", "snr", "cnr", "volume", "sigma")


def mean_artefact_variance(bundle: UncertaintyBundle) -> float:
    """Voxel mean of the summed augmentation variances."""
    if bundle.n_aug == 0:
        raise ValueError("bundle has no augmentation channels")
    return float(np.exp(bundle.s_aug).sum(axis=0).mean())


def _region(vol: Volume, mask: LabelVolume, tissue: int) -> np.ndarray:
    if vol.shape != mask.shape:
        raise ValueError("volume and mask shapes differ")
    values = np.asarray(vol.data, dtype=np.float64)[mask.mask(tissue)]
    if values.size < 2:
        raise ValueError(f"tissue {tissue} covers fewer than 2 voxels")
    return values


def snr(vol: Volume, mask: LabelVolume, tissue: int) -> float:
    """Tissue mean over tissue (population) standard deviation; +inf if flat."""
    values = _region(vol, mask, tissue)
    sd = values.std()
    if sd == 0:
        return math.inf
    return float(values.mean() / sd)


def cnr(vol: Volume, mask: LabelVolume, tissue_a: int, tissue_b: int) -> float:
    """``|SNR_a - SNR_b|``."""
    a = snr(vol, mask, tissue_a)
    b = snr(vol, mask, tissue_b)
    if math.isinf(a) or math.isinf(b):
        return 0.0 if a == b else math.inf
    return abs(a - b)


def dice(pred: LabelVolume | np.ndarray, truth: LabelVolume | np.ndarray, class_id: int = 1) -> float:
    p = np.asarray(getattr(pred, "labels", pred)) == class_id
    t = np.asarray(getattr(truth, "labels", truth)) == class_id
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def rankdata(xs: Sequence[float]) -> np.ndarray:
    """1-based fractional ranks; ties share their average rank."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    if denom == 0:
        raise ValueError("correlation undefined for a constant series")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


@dataclass
class Correlation:
    rho: float
    p_value: float
    n: int


def spearman(xs: Sequence[float], ys: Sequence[float]) -> Correlation:
    """Spearman rank correlation with a two-sided t-approximation p-value."""
    if len(xs) != len(ys):
        raise ValueError("series differ in length")
    n = len(xs)
    if n < 3:
        raise ValueError("need at least 3 paired observations")
    rho = _pearson(rankdata(xs), rankdata(ys))
    if abs(rho) == 1.0:
        return Correlation(rho, 0.0, n)
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(stats.t.sf(abs(t), n - 2))
    return Correlation(rho, p, n)


def spearman_permutation_pvalue(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Exact two-sided p-value by enumerating every permutation (n <= 10)."""
    n = len(xs)
    if n > 10:
        raise ValueError("exact permutation p-value is limited to n <= 10")
    rx, ry = rankdata(xs), rankdata(ys)
    observed = abs(_pearson(rx, ry))
    hits = total = 0
    for perm in permutations(range(n)):
        total += 1
        if abs(_pearson(rx, ry[list(perm)])) >= observed - 1e-12:
            hits += 1
    return hits / total


@dataclass
class QCReport:
    mean_artefact_variance: float | None
    snr: float | None
    cnr: float | None
    mean_entropy: float
    volume: float
    sigma: float
    dice: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dice is not None and not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice must lie in [0, 1]")
        if self.mean_artefact_variance is not None and self.mean_artefact_variance < 0:
            raise ValueError("mean artefact variance must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.dice is None:
            del d["dice"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "QCReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "QCReport":
        return cls.from_dict(json.loads(text))

    def csv_row(self, ident: str) -> dict:
        return {"id": ident, "dice": "" if self.dice is None else self.dice,
                "mean_artefact_variance": self.mean_artefact_variance, "snr": self.snr,
                "cnr": self.cnr, "volume": self.volume, "sigma": self.sigma}


def build_report(
    vol: Volume,
    logits: np.ndarray,
    bundle: UncertaintyBundle,
    clean_reference: float,
    mask: LabelVolume | None = None,
    truth: LabelVolume | None = None,
    gm: int = 1,
    wm: int = 2,
    provenance: dict | None = None,
) -> QCReport:
    """Assemble every metric computable from the given inputs.

    ``mask`` is a tissue map used for SNR/CNR (``gm``/``wm`` ids); ``truth`` is a
    binary segmentation used for Dice against the arg-max prediction.
    """
    probs = scaled_softmax(logits, bundle.total_variance())
    if probs.shape[1:] != vol.shape:
        raise ValueError("prediction and volume shapes differ")
    bar = volume_error_bars(probs, clean_reference)
    snr_v = cnr_v = None
    if mask is not None:
        snr_v = snr(vol, mask, gm)
        cnr_v = cnr(vol, mask, gm, wm)
    dice_v = None
    if truth is not None:
        dice_v = dice(np.argmax(logits, axis=0), truth.labels)
    mav = mean_artefact_variance(bundle) if bundle.n_aug else None
    return QCReport(
        mean_artefact_variance=mav,
        snr=snr_v,
        cnr=cnr_v,
        mean_entropy=float(entropy_map(probs).mean()),
        volume=bar.volume,
        sigma=bar.sigma,
        dice=dice_v,
        provenance=dict(provenance or {}),
    )


def reports_to_csv(rows: Sequence[tuple[str, QCReport]], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for ident, report in rows:
        writer.writerow(report.csv_row(ident))
    return buf.getvalue()
