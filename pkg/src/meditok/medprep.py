"""Radiology preprocessing, slice filters, quality control, and CT windowing.

CT values are Hounsfield units throughout; windowing remaps a HU interval
affinely onto [-1, 1] with clipping. The quality-control rules operate on
an 8-bit grayscale proxy (colour collapses to the per-pixel channel max).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Window:
    lo: float
    hi: float
    p: float
    name: str = ""

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ValueError(f"window bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"window probability must be in [0, 1], got {self.p}")


# Window sampling table for CT augmentation: (bounds, probability).
WINDOW_TABLE = (
    Window(-1000.0, 2000.0, 0.2, "full"),
    Window(-1000.0, 1000.0, 0.3, "common"),
    Window(-150.0, 250.0, 0.3, "soft_tissue"),
    Window(-1400.0, 200.0, 0.15, "lung"),
    Window(-500.0, 1300.0, 0.05, "bone"),
)


def window_table_probability_sum(table=WINDOW_TABLE) -> float:
    total = 0.0
    for w in table:
        total += w.p
    return total


def apply_window(img_hu: np.ndarray, window: Window) -> np.ndarray:
    """Clip to [lo, hi] and affinely map onto [-1, 1]."""
    if window.lo >= window.hi:
        raise ValueError(f"window bounds must satisfy lo < hi, got [{window.lo}, {window.hi}]")
    arr = np.asarray(img_hu, dtype=np.float64)
    clipped = np.clip(arr, window.lo, window.hi)
    return 2.0 * (clipped - window.lo) / (window.hi - window.lo) - 1.0


def sample_window(rng: np.random.Generator, table=WINDOW_TABLE) -> Window:
    """Categorical draw over the window table."""
    u = rng.random()
    cum = 0.0
    for w in table:
        cum += w.p
        if u < cum:
            return w
    return table[-1]


@dataclass
class Slice:
    plane: str   # axial | coronal | sagittal
    index: int
    data: np.ndarray = field(repr=False, default=None)


def extract_slices(volume: np.ndarray) -> list:
    """All D + H + W slices along the three orthogonal planes."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"slice extraction needs a 3-D volume, got {vol.ndim}-D")
    out = []
    d, h, w = vol.shape
    for k in range(d):
        out.append(Slice("axial", k, vol[k, :, :]))
    for k in range(h):
        out.append(Slice("coronal", k, vol[:, k, :]))
    for k in range(w):
        out.append(Slice("sagittal", k, vol[:, :, k]))
    return out


@dataclass(frozen=True)
class CTFilterConfig:
    """Retention thresholds for CT slices.

    The std rule keeps slices whose HU standard deviation compares
    ``std_comparator`` against ``std_threshold``; the shipped default
    keeps std < 100 exactly as specified, with ``"ge"`` available as a
    documented override for the opposite reading.
    """

    background_max: float = 0.6
    body_min: float = 0.1
    std_threshold: float = 100.0
    std_comparator: str = "lt"   # lt: keep std < threshold; ge: keep std >= threshold

    def __post_init__(self):
        if self.std_comparator not in ("lt", "ge"):
            raise ValueError("std comparator must be 'lt' or 'ge'")


@dataclass
class CTSliceVerdict:
    keep: bool
    background_ratio: float
    body_ratio: float
    std: float
    reasons: list


def ct_slice_filter(slice_hu: np.ndarray, cfg: CTFilterConfig = CTFilterConfig()) -> CTSliceVerdict:
    """Keep a slice iff background ratio, body ratio, and the std rule all pass.

    background = fraction of pixels at HU <= -1000; body = fraction at HU >= -300.
    """
    arr = np.asarray(slice_hu, dtype=np.float64)
    background = float(np.mean(arr <= -1000.0))
    body = float(np.mean(arr >= -300.0))
    std = float(arr.std())
    reasons = []
    if background > cfg.background_max:
        reasons.append("background ratio")
    if body < cfg.body_min:
        reasons.append("body ratio")
    std_ok = std < cfg.std_threshold if cfg.std_comparator == "lt" else std >= cfg.std_threshold
    if not std_ok:
        reasons.append("std")
    return CTSliceVerdict(not reasons, background, body, std, reasons)


@dataclass
class MRISliceVerdict:
    plane: str
    index: int
    mean: float
    std: float
    keep: bool


def percentile_inclusive(values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile on the sorted array (inclusive method)."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if flat.size == 0:
        raise ValueError("cannot take a percentile of an empty array")
    pos = (flat.size - 1) * (q / 100.0)
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    frac = pos - lo
    return float(flat[lo] * (1.0 - frac) + flat[hi] * frac)


def mri_preprocess(volume: np.ndarray) -> tuple[np.ndarray, list]:
    """Percentile-clip, min-max normalize to [-1, 1], and grade every slice.

    Slices are kept unless mean <= -0.9 or std <= 0.2 after normalization.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError(f"MRI preprocessing needs a 3-D volume, got {vol.ndim}-D")
    lo = percentile_inclusive(vol, 0.5)
    hi = percentile_inclusive(vol, 99.5)
    clipped = np.clip(vol, lo, hi)
    vmin, vmax = clipped.min(), clipped.max()
    if vmax <= vmin:
        raise ValueError("constant volume: zero intensity range after clipping")
    normalized = 2.0 * (clipped - vmin) / (vmax - vmin) - 1.0
    verdicts = []
    for sl in extract_slices(normalized):
        mu, sd = float(sl.data.mean()), float(sl.data.std())
        verdicts.append(MRISliceVerdict(sl.plane, sl.index, mu, sd, not (mu <= -0.9 or sd <= 0.2)))
    return normalized, verdicts


QC_RULES = ("dynamic_range", "resolution", "information", "palette")
QC_THRESHOLDS = {"dynamic_range": 50, "resolution": 128, "information": 10.0, "palette": 3}


@dataclass
class QCReport:
    verdicts: dict   # rule -> bool (True = pass)
    measured: dict   # rule -> measured value
    keep: bool

    def failed_rules(self) -> list:
        return [r for r in QC_RULES if not self.verdicts[r]]


def to_gray_proxy(img: np.ndarray) -> np.ndarray:
    """8-bit grayscale proxy; colour collapses via the per-pixel channel max."""
    arr = np.asarray(img)
    if arr.size == 0:
        raise ValueError("empty image")
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D gray or (H, W, C) colour, got {arr.ndim}-D")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    return arr


def qc_check(img: np.ndarray) -> QCReport:
    """Apply the four automated exclusion rules to an 8-bit proxy image.

    An image is kept only if intensity range >= 50, min dimension >= 128,
    pixel std >= 10, and more than three unique pixel values.
    """
    proxy = to_gray_proxy(img)
    measured = {
        "dynamic_range": int(proxy.max()) - int(proxy.min()),
        "resolution": int(min(proxy.shape)),
        "information": float(proxy.astype(np.float64).std()),
        "palette": int(np.unique(proxy).size),
    }
    verdicts = {
        "dynamic_range": measured["dynamic_range"] >= QC_THRESHOLDS["dynamic_range"],
        "resolution": measured["resolution"] >= QC_THRESHOLDS["resolution"],
        "information": measured["information"] >= QC_THRESHOLDS["information"],
        "palette": measured["palette"] > QC_THRESHOLDS["palette"],
    }
    return QCReport(verdicts, measured, all(verdicts.values()))


def qc_filter_records(records, root, require_tag: str = None) -> tuple[list, list]:
    """Run qc_check over manifest records; returns (kept records, audit rows).

    The publication-relevance rule reduces to a manifest tag filter: when
    ``require_tag`` is set, records missing that tag are dropped.
    """
    from .datagen import load_image

    kept, audit = [], []
    for rec in records:
        row = {"path": rec.path}
        if require_tag is not None and require_tag not in rec.tags:
            row.update({"keep": False, "reason": "relevance tag"})
            audit.append(row)
            continue
        img, is_hu = load_image(rec, root)
        if is_hu:
            proxy = apply_window(img[:, :, 0], WINDOW_TABLE[0])
            u8 = np.round((proxy + 1.0) / 2.0 * 255.0).astype(np.uint8)
        else:
            u8 = np.round((img.max(axis=-1) + 1.0) / 2.0 * 255.0).astype(np.uint8)
        report = qc_check(u8)
        row.update({"keep": report.keep, "measured": report.measured,
                    "verdicts": report.verdicts})
        if report.keep:
            kept.append(rec)
        audit.append(row)
    if not kept:
        warnings.warn("quality control removed every record")
    return kept, audit
