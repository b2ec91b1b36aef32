"""Segmentation metrics (Dice, FDR, FNR), the rubric score mapping, s-CT fidelity and reports.

Empty-mask conventions: Dice of two empty masks is 1.0; FDR of an empty
prediction is 0.0; FNR against an empty ground truth is 0.0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from xmodseg import imgio
from xmodseg.errors import ValidationError
from xmodseg.imgio import IntensityKind, Mask, Slice, Tissue

# Lower bounds (inclusive) of each band, best score first. A value falls in the
# first band whose upper bound exceeds it; the last band is closed at 1.
FDR_BANDS = ((5, 0.15), (4, 0.30), (3, 0.45), (2, 0.70))
FNR_BANDS = ((5, 0.20), (4, 0.30), (3, 0.50), (2, 0.80))


@dataclass(frozen=True)
class EvalRecord:
    slice_id: str
    tissue: Tissue
    dice: float
    fdr: float
    fnr: float
    score: int

    def __post_init__(self):
        object.__setattr__(self, "tissue", Tissue(self.tissue))
        if self.score != rubric_score(self.fdr, self.fnr):
            raise ValidationError(f"record {self.slice_id!r}: score inconsistent with fdr/fnr")

    def to_dict(self) -> dict:
        return {**asdict(self), "tissue": self.tissue.value}


def _counts(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> tuple[int, int, int]:
    p = pred.pixels if isinstance(pred, Mask) else np.asarray(pred, dtype=bool)
    g = gt.pixels if isinstance(gt, Mask) else np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def dice(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    tp, fp, fn = _counts(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def fdr(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    tp, fp, _ = _counts(pred, gt)
    return 0.0 if tp + fp == 0 else fp / (tp + fp)


def fnr(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    tp, _, fn = _counts(pred, gt)
    return 0.0 if tp + fn == 0 else fn / (tp + fn)


def _band(value: float, bands) -> int:
    for score, upper in bands:
        if value < upper:
            return score
    return 1


def rubric_score(fdr_val: float, fnr_val: float) -> int:
    """Min of the FDR and FNR band scores (half-open bands, lower bound inclusive)."""
    for name, v in (("fdr", fdr_val), ("fnr", fnr_val)):
        if not 0.0 <= v <= 1.0 or not np.isfinite(v):
            raise ValidationError(f"{name} must lie in [0, 1], got {v}")
    return min(_band(fdr_val, FDR_BANDS), _band(fnr_val, FNR_BANDS))


def evaluate_mask(pred: Mask, gt: Mask, slice_id: str | None = None) -> EvalRecord:
    if pred.tissue is not gt.tissue:
        raise ValidationError(f"tissue mismatch: {pred.tissue.value} vs {gt.tissue.value}")
    f, n = fdr(pred, gt), fnr(pred, gt)
    return EvalRecord(slice_id or gt.id, gt.tissue, dice(pred, gt), f, n, rubric_score(f, n))


def sct_fidelity(sct: Slice, act: Slice, body: np.ndarray | None = None) -> dict[str, float]:
    """MSE and Pearson correlation between s-CT and a-CT over the body region.

    The body defaults to pixels where either image exceeds the soft-tissue
    threshold of 0.1 on the NORM01 scale (-500 HU in the default window).
    """
    for s in (sct, act):
        if s.intensity_kind is not IntensityKind.NORM01:
            raise ValidationError(f"sct_fidelity expects NORM01 slices, got {s.intensity_kind.value}")
    if sct.shape != act.shape:
        raise ValidationError(f"slice shapes differ: {sct.shape} vs {act.shape}")
    if body is None:
        body = (sct.pixels > 0.1) | (act.pixels > 0.1)
    a, b = sct.pixels[body], act.pixels[body]
    if a.size == 0:
        raise ValidationError("empty body region")
    mse = float(np.mean((a - b) ** 2))
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    pearson = float(np.sum(da * db) / denom) if denom > 0 else 0.0
    return {"mse": mse, "pearson": pearson}


def summarize(records: list[EvalRecord]) -> dict[str, dict[str, float]]:
    out = {}
    for tissue in Tissue:
        rs = [r for r in records if r.tissue is tissue]
        if not rs:
            continue
        out[tissue.value.lower()] = {
            "n": len(rs),
            "dice": float(np.mean([r.dice for r in rs])),
            "fdr": float(np.mean([r.fdr for r in rs])),
            "fnr": float(np.mean([r.fnr for r in rs])),
            "score": float(np.mean([r.score for r in rs])),
        }
    return out


def _mask_dirs(root: Path) -> dict[Tissue, Path]:
    """Tissue subdirectories of ``root``, or ``root`` itself when named after a tissue."""
    found = {t: root / t.value.lower() for t in Tissue if (root / t.value.lower()).is_dir()}
    if not found:
        try:
            found = {Tissue(root.name.upper()): root}
        except ValueError:
            pass
    return found


def eval_report(pred_dir: str | Path, gt_dir: str | Path, out_path: str | Path | None = None) -> dict:
    """Evaluate predicted masks against ground truth, per tissue subdirectory.

    Both roots contain ``sat/`` and/or ``vat/`` mask directories (or are one).
    Records are ordered by tissue then id.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_t, gt_t = _mask_dirs(pred_dir), _mask_dirs(gt_dir)
    if not gt_t:
        raise ValidationError(f"no ground-truth mask directories under {gt_dir}")
    records: list[EvalRecord] = []
    problems = []
    for tissue, gdir in sorted(gt_t.items(), key=lambda kv: kv[0].value):
        pdir = pred_t.get(tissue)
        gids = set(imgio.list_ids(gdir))
        pids = set(imgio.list_ids(pdir)) if pdir else set()
        if not gids and not pids:
            continue
        unmatched = sorted(gids ^ pids)
        if unmatched:
            problems.append(f"{tissue.value}: {', '.join(unmatched)}")
            continue
        for sid in sorted(gids):
            pred = imgio.load_mask(pdir / f"{sid}.png", tissue)
            gt = imgio.load_mask(gdir / f"{sid}.png", tissue)
            records.append(evaluate_mask(pred, gt, sid))
    if problems:
        raise ValidationError("unmatched ids: " + "; ".join(problems))
    if not records:
        raise ValidationError(f"no masks to evaluate in {pred_dir} / {gt_dir}")
    report = {"records": [r.to_dict() for r in records], "summary": summarize(records)}
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
