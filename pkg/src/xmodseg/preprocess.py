"""MR bias correction and landmark standardization; CT HU windowing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xmodseg.errors import ValidationError
from xmodseg.imgio import IntensityKind, Modality, Slice

PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)
# percentiles mapped onto the ends of the standard range when fitting
RANGE_PERCENTILES = (0.0, 99.8)
STANDARD_RANGE = (0.0, 1000.0)
BACKGROUND_PERCENTILE = 5.0
MIN_BODY_PIXELS = 100


def body_mask(px: np.ndarray) -> np.ndarray:
    """Pixels strictly above the slice's 5th percentile."""
    return px > np.percentile(px, BACKGROUND_PERCENTILE)


# --- bias field ------------------------------------------------------------


def _quadratic_design(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    y = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    x = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.stack([np.ones_like(xx), xx, yy, xx * xx, xx * yy, yy * yy], axis=-1)


def _sharpened_expectation(v: np.ndarray, nbins: int, fwhm: float, wiener: float) -> np.ndarray:
    """Per-value E[u | v] under a Wiener-deconvolved (sharpened) histogram of ``v``."""
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return v.copy()
    width = (hi - lo) / (nbins - 1)
    pos = (v - lo) / width
    i0 = np.clip(np.floor(pos).astype(int), 0, nbins - 1)
    frac = pos - i0
    i1 = np.clip(i0 + 1, 0, nbins - 1)
    hist = np.bincount(i0, 1.0 - frac, nbins) + np.bincount(i1, frac, nbins)

    pad = 1 << (int(np.ceil(np.log2(nbins))) + 1)
    off = (pad - nbins) // 2
    padded = np.zeros(pad)
    padded[off : off + nbins] = hist
    k = np.arange(pad)
    k = np.where(k > pad // 2, k - pad, k)
    sigma = fwhm / width / 2.3548
    kern = np.exp(-0.5 * (k / sigma) ** 2)
    kern_f = np.fft.fft(kern / kern.sum())
    sharp_f = np.conj(kern_f) * np.fft.fft(padded) / (np.abs(kern_f) ** 2 + wiener)
    sharp = np.maximum(np.fft.ifft(sharp_f).real, 0.0)
    centers = lo + (np.arange(pad) - off) * width
    num = np.fft.ifft(np.fft.fft(sharp * centers) * kern_f).real
    den = np.fft.ifft(np.fft.fft(sharp) * kern_f).real
    ok = den > 1e-12 * den.max()
    expect = np.where(ok, num / np.where(ok, den, 1.0), centers)[off : off + nbins]
    return np.interp(pos, np.arange(nbins), expect)


def estimate_log_bias(
    slice_: Slice,
    iterations: int = 50,
    fwhm: float = 0.1,
    wiener: float = 0.01,
    nbins: int = 200,
) -> np.ndarray:
    """Log-domain quadratic bias over positive pixels, constant term removed.

    Alternates histogram sharpening of the corrected log image with a
    least-squares quadratic fit of what sharpening attributes to the field.
    """
    px = slice_.pixels
    body = px > 0
    if int(body.sum()) < 6:
        raise ValidationError(f"bias fit needs at least 6 body pixels, found {int(body.sum())}")
    design = _quadratic_design(px.shape)
    a = design[body]
    y = np.log(px[body])
    fit = np.zeros_like(y)
    coef = np.zeros(a.shape[1])
    for _ in range(iterations):
        u = _sharpened_expectation(y - fit, nbins, fwhm, wiener)
        coef, *_ = np.linalg.lstsq(a, y - u, rcond=None)
        new = a @ coef
        new -= new.mean()
        done = np.sqrt(np.mean((new - fit) ** 2)) < 1e-6
        fit = new
        if done:
            break
    coef[0] = 0.0
    return design @ coef


def bias_correct(slice_: Slice) -> Slice:
    if slice_.modality is not Modality.MR:
        raise ValidationError(f"bias_correct expects an MR slice, got {slice_.modality.value}")
    px = slice_.pixels
    body = px > 0
    log_bias = estimate_log_bias(slice_)
    out = np.where(body, px * np.exp(-log_bias), 0.0)
    med_in = np.median(px[body])
    med_out = np.median(out[body])
    out = out * (med_in / med_out)
    return slice_.replace(pixels=out, intensity_kind=IntensityKind.RAW)


# --- histogram standardization --------------------------------------------


@dataclass(frozen=True)
class StandardScale:
    landmarks_std: tuple[float, ...]
    range: tuple[float, float] = STANDARD_RANGE

    def __post_init__(self):
        lm = np.asarray(self.landmarks_std, dtype=float)
        object.__setattr__(self, "landmarks_std", tuple(float(v) for v in lm))
        object.__setattr__(self, "range", tuple(float(v) for v in self.range))
        if lm.size != len(PERCENTILES):
            raise ValidationError(f"expected {len(PERCENTILES)} landmarks, got {lm.size}")
        if np.any(np.diff(lm) <= 0):
            raise ValidationError("standard landmarks must be strictly increasing")
        lo, hi = self.range
        if not (lo < hi and lm[0] >= lo and lm[-1] <= hi):
            raise ValidationError("standard landmarks must lie within the standard range")

    def to_json(self) -> str:
        return json.dumps(
            {"percentiles": list(PERCENTILES), "landmarks_std": list(self.landmarks_std), "range": list(self.range)},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> StandardScale:
        data = json.loads(text)
        if list(data.get("percentiles", PERCENTILES)) != list(PERCENTILES):
            raise ValidationError("standard scale was fitted with a different percentile set")
        return cls(tuple(data["landmarks_std"]), tuple(data["range"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> StandardScale:
        return cls.from_json(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _body_values(slice_: Slice) -> np.ndarray:
    px = slice_.pixels
    vals = px[body_mask(px)]
    if vals.size < MIN_BODY_PIXELS:
        raise ValidationError(
            f"slice {slice_.id!r} has {vals.size} body pixels, need at least {MIN_BODY_PIXELS}"
        )
    return vals


def landmarks(slice_: Slice) -> np.ndarray:
    """Body-region intensity percentiles at ``PERCENTILES``.

    Landmarks are order statistics (no interpolation), so a monotone remap of
    the slice maps its landmarks exactly onto the remapped landmarks.
    """
    return np.percentile(_body_values(slice_), PERCENTILES, method="lower")


def fit_standard_scale(slices: list[Slice]) -> StandardScale:
    """Average the slices' landmarks after mapping each slice's body range onto [0, 1000]."""
    if len(slices) < 2:
        raise ValidationError(f"need at least 2 slices to fit a standard scale, got {len(slices)}")
    s_lo, s_hi = STANDARD_RANGE
    mapped = []
    for sl in slices:
        if sl.modality is not Modality.MR:
            raise ValidationError("standard scale is fitted on MR slices only")
        vals = _body_values(sl)
        p_lo, p_hi = np.percentile(vals, RANGE_PERCENTILES)
        if p_hi <= p_lo:
            raise ValidationError(f"slice {sl.id!r} has a degenerate intensity range")
        lm = np.percentile(vals, PERCENTILES, method="lower")
        mapped.append(s_lo + (lm - p_lo) / (p_hi - p_lo) * (s_hi - s_lo))
    return StandardScale(tuple(np.mean(mapped, axis=0)), STANDARD_RANGE)


def _piecewise_linear(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """np.interp with linear extrapolation from the end segments."""
    y = np.interp(x, xp, fp)
    lo_slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
    hi_slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    y = np.where(x < xp[0], fp[0] + (x - xp[0]) * lo_slope, y)
    return np.where(x > xp[-1], fp[-1] + (x - xp[-1]) * hi_slope, y)


def standardize(slice_: Slice, scale: StandardScale) -> Slice:
    if slice_.modality is not Modality.MR:
        raise ValidationError(f"standardize expects an MR slice, got {slice_.modality.value}")
    lm = landmarks(slice_)
    if np.any(np.diff(lm) <= 0):
        raise ValidationError(f"slice {slice_.id!r} has degenerate landmarks")
    # anchor the background level to the range floor so body pixels stay
    # strictly above it and the body set survives a second pass
    background = np.percentile(slice_.pixels, BACKGROUND_PERCENTILE)
    xp = np.concatenate([[background], lm]) if background < lm[0] else lm
    fp = np.asarray(scale.landmarks_std)
    fp = np.concatenate([[scale.range[0]], fp]) if background < lm[0] else fp
    out = _piecewise_linear(slice_.pixels, xp, fp)
    out = np.clip(out, *scale.range)
    return slice_.replace(pixels=out, intensity_kind=IntensityKind.STANDARDIZED)


# --- CT ----------------------------------------------------------------------


@dataclass(frozen=True)
class HuWindow:
    lo: float = -700.0
    hi: float = 1300.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"HU window needs lo < hi, got ({self.lo}, {self.hi})")

    def to_unit(self, hu: float | np.ndarray) -> float | np.ndarray:
        return (np.clip(hu, self.lo, self.hi) - self.lo) / (self.hi - self.lo)


def hu_window(slice_: Slice, w: HuWindow = HuWindow()) -> Slice:
    if slice_.intensity_kind is not IntensityKind.HU or slice_.modality is Modality.MR:
        raise ValidationError("hu_window expects a CT/SCT slice in HU")
    out = np.clip((np.clip(slice_.pixels, w.lo, w.hi) - w.lo) / (w.hi - w.lo), 0.0, 1.0)
    return slice_.replace(pixels=out, intensity_kind=IntensityKind.NORM01)


def preprocess_mr(slice_: Slice, scale: StandardScale) -> Slice:
    """Inference-time MR chain: bias correction then standardization."""
    return standardize(bias_correct(slice_), scale)
