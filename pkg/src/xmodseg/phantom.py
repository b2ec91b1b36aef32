"""Synthetic paired pseudo-MR / pseudo-CT abdominal slices with ground-truth fat masks.

Anatomy per slice: body ellipse with a thin skin layer, a subcutaneous fat ring,
a muscle wall, and an abdominal cavity holding organ ellipses, a spine disk and
smooth visceral fat blobs. CT intensities come from fixed HU bands per class; MR
intensities from a different per-class mapping (fat suppressed, visceral fat
overlapping organ intensities) times a smooth log-quadratic bias field.
"""

from __future__ import annotations

import enum
import json
import math
import shutil
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from xmodseg import imgio
from xmodseg.errors import ValidationError
from xmodseg.imgio import IntensityKind, Mask, Modality, Slice, Tissue

SPACING_MM = (1.5, 1.5)


class TissueClass(enum.IntEnum):
    AIR = 0
    SKIN = 1
    SAT = 2
    MUSCLE_WALL = 3
    VAT = 4
    ORGAN = 5
    BONE = 6


# pre-noise CT bands (HU)
HU_BANDS: dict[TissueClass, tuple[float, float]] = {
    TissueClass.AIR: (-1000.0, -1000.0),
    TissueClass.SKIN: (10.0, 40.0),
    TissueClass.SAT: (-190.0, -30.0),
    TissueClass.MUSCLE_WALL: (20.0, 60.0),
    TissueClass.VAT: (-190.0, -30.0),
    TissueClass.ORGAN: (40.0, 80.0),
    TissueClass.BONE: (500.0, 900.0),
}
FAT_HU_BAND = (-190.0, -30.0)

# MR bands (arbitrary units, before bias and noise); VAT and ORGAN overlap on purpose
MR_BANDS: dict[TissueClass, tuple[float, float]] = {
    TissueClass.AIR: (0.0, 0.0),
    TissueClass.SKIN: (90.0, 110.0),
    TissueClass.SAT: (25.0, 45.0),
    TissueClass.MUSCLE_WALL: (60.0, 80.0),
    TissueClass.VAT: (30.0, 55.0),
    TissueClass.ORGAN: (45.0, 85.0),
    TissueClass.BONE: (10.0, 22.0),
}

NOISE_HU_PER_SIGMA = 100.0
NOISE_MR_PER_SIGMA = 100.0


class PhantomWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PhantomParams:
    size: int = 256
    sat_thickness_frac: float = 0.05
    vat_blob_count: int = 6
    vat_area_frac_target: float = 0.15
    bias_amplitude: float = 0.3
    noise_sigma: float = 0.03
    geometry_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ValidationError(f"size must be >= 64, got {self.size}")
        if not 0.0 <= self.sat_thickness_frac <= 0.2:
            raise ValidationError("sat_thickness_frac must lie in [0, 0.2]")
        if self.vat_blob_count < 0:
            raise ValidationError("vat_blob_count must be >= 0")
        if not 0.0 <= self.vat_area_frac_target <= 0.3:
            raise ValidationError("vat_area_frac_target must lie in [0, 0.3]")
        for name in ("bias_amplitude", "noise_sigma", "geometry_jitter"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")

    def replace(self, **changes) -> PhantomParams:
        return PhantomParams(**{**asdict(self), **changes})


@dataclass
class PhantomSample:
    mr: Slice
    ct: Slice
    sat: Mask
    vat: Mask
    tissue_map: np.ndarray
    ct_clean_hu: np.ndarray
    bias_field: np.ndarray
    cavity: np.ndarray
    achieved_vat_frac: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def body(self) -> np.ndarray:
        return self.tissue_map != TissueClass.AIR


def _ellipse(xx, yy, cx, cy, a, b, theta):
    if a <= 0 or b <= 0:
        return np.zeros(xx.shape, dtype=bool)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _bias_field(rng, body: np.ndarray, amplitude: float) -> np.ndarray:
    """exp(quadratic), scaled so the log field peaks at ``amplitude`` inside the body, mean 1."""
    size = body.shape[0]
    coef = rng.uniform(-1.0, 1.0, size=5)
    if amplitude == 0:
        return np.ones((size, size))
    t = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(t, t, indexing="ij")
    poly = coef[0] * xx + coef[1] * yy + coef[2] * xx**2 + coef[3] * xx * yy + coef[4] * yy**2
    poly = poly - poly[body].mean()
    peak = np.abs(poly[body]).max()
    if peak > 0:
        poly *= amplitude / peak
    field_ = np.exp(poly)
    return field_ / field_.mean()


def _vat_blobs(rng, allowed, cavity, xx, yy, params: PhantomParams):
    size = params.size
    cav_area = int(cavity.sum())
    target = int(round(params.vat_area_frac_target * cav_area))
    vat = np.zeros(allowed.shape, dtype=bool)
    if params.vat_blob_count == 0 or target == 0:
        return vat, 0.0
    cand = np.flatnonzero(allowed)
    if cand.size == 0:
        warnings.warn("no room for visceral fat blobs; producing none", PhantomWarning, stacklevel=3)
        return vat, 0.0
    centers = cand[rng.integers(0, cand.size, size=params.vat_blob_count)]
    field_ = np.zeros(allowed.shape)
    for idx in centers:
        cy, cx = divmod(int(idx), size)
        sig = 0.06 * size * rng.uniform(0.7, 1.3)
        field_ += np.exp(-((xx - cx - 0.5) ** 2 + (yy - cy - 0.5) ** 2) / (2.0 * sig * sig))
    support = allowed & (field_ > 0.1)
    n_support = int(support.sum())
    if n_support < target:
        warnings.warn(
            f"visceral fat target {params.vat_area_frac_target:.3f} unreachable; "
            f"achieved {n_support / max(cav_area, 1):.3f}",
            PhantomWarning,
            stacklevel=3,
        )
        vat = support
    else:
        flat = np.where(support, field_, -np.inf).ravel()
        top = np.argsort(-flat, kind="stable")[:target]
        vat.ravel()[top] = True
    return vat, float(vat.sum()) / max(cav_area, 1)


def _anatomy(rng, params: PhantomParams):
    size = params.size
    j = params.geometry_jitter
    t = np.arange(size) + 0.5
    yy, xx = np.meshgrid(t, t, indexing="ij")

    cx = size / 2 + j * 0.3 * size * rng.uniform(-1, 1)
    cy = size / 2 + j * 0.3 * size * rng.uniform(-1, 1)
    a = 0.42 * size * (1 + j * rng.uniform(-1, 1))
    b = 0.32 * size * (1 + j * rng.uniform(-1, 1))
    theta = j * 0.5 * rng.uniform(-1, 1)

    skin_t = max(1.0, 0.015 * size)
    sat_t = 0.0
    if params.sat_thickness_frac > 0:
        sat_t = max(1.5, params.sat_thickness_frac * size * (1 + 0.5 * j * rng.uniform(-1, 1)))
    mus_t = max(1.5, 0.035 * size)

    tmap = np.full((size, size), TissueClass.AIR, dtype=np.uint8)
    body = _ellipse(xx, yy, cx, cy, a, b, theta)
    tmap[body] = TissueClass.SKIN
    d = skin_t
    tmap[_ellipse(xx, yy, cx, cy, a - d, b - d, theta)] = TissueClass.SAT
    d += sat_t
    tmap[_ellipse(xx, yy, cx, cy, a - d, b - d, theta)] = TissueClass.MUSCLE_WALL
    d += mus_t
    ca, cb = a - d, b - d
    cavity = _ellipse(xx, yy, cx, cy, ca, cb, theta)
    tmap[cavity] = TissueClass.ORGAN

    # spine sits on the posterior (bottom) edge of the cavity
    r_sp = 0.055 * size
    sx = cx - math.sin(theta) * (cb - r_sp - 1)
    sy = cy + math.cos(theta) * (cb - r_sp - 1)
    spine = ((xx - sx) ** 2 + (yy - sy) ** 2 <= r_sp**2) & cavity

    organs = []
    for _ in range(int(rng.integers(2, 7))):
        rr = 0.55 * math.sqrt(rng.uniform(0, 1))
        phi = rng.uniform(0, 2 * math.pi)
        ox = cx + rr * ca * math.cos(phi)
        oy = cy + rr * cb * math.sin(phi)
        oa = ca * rng.uniform(0.15, 0.32)
        ob = cb * rng.uniform(0.15, 0.32)
        organs.append(_ellipse(xx, yy, ox, oy, oa, ob, rng.uniform(0, math.pi)) & cavity & ~spine)
    organ_any = np.logical_or.reduce(organs) if organs else np.zeros_like(cavity)

    allowed = cavity & ~organ_any & ~spine
    vat, vat_frac = _vat_blobs(rng, allowed, cavity, xx, yy, params)
    tmap[vat] = TissueClass.VAT
    tmap[spine] = TissueClass.BONE
    return tmap, cavity, organs, vat_frac


def _texture(rng, size: int) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.0, mode="reflect")
    sd = tex.std()
    return tex / sd if sd > 0 else tex


def _paint(rng, tmap, organs, bands, tex, tex_amp, central, per_organ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class level + texture, clipped to each class band. Returns image and per-pixel band."""
    img = np.zeros(tmap.shape)
    lo = np.zeros(tmap.shape)
    hi = np.zeros(tmap.shape)
    for cls, (b_lo, b_hi) in bands.items():
        sel = tmap == cls
        w = b_hi - b_lo
        if central:
            level = rng.uniform(b_lo + 0.25 * w, b_hi - 0.25 * w)
        else:
            level = rng.uniform(b_lo, b_hi)
        img[sel] = level + tex_amp * w * tex[sel]
        lo[sel], hi[sel] = b_lo, b_hi
    b_lo, b_hi = bands[TissueClass.ORGAN]
    w = b_hi - b_lo
    for org in organs if per_organ else ():
        sel = org & (tmap == TissueClass.ORGAN)
        level = rng.uniform(b_lo + 0.25 * w, b_hi - 0.25 * w) if central else rng.uniform(b_lo, b_hi)
        img[sel] = level + tex_amp * w * tex[sel]
    return np.clip(img, lo, hi), lo, hi


def gen_sample(params: PhantomParams, index: int, stream: int = 0, id: str | None = None) -> PhantomSample:
    """Deterministic phantom for ``(params.seed, stream, index)``.

    ``stream`` selects an independent random sequence for the same index; it is
    how unpaired datasets draw MR and CT anatomy from disjoint seeds.
    """
    rng = np.random.default_rng([params.seed, stream, index])
    size = params.size
    tmap, cavity, organs, vat_frac = _anatomy(rng, params)
    tex = _texture(rng, size)

    ct_clean, lo, hi = _paint(rng, tmap, organs, HU_BANDS, tex, 0.15, central=True, per_organ=True)
    ct = ct_clean + rng.normal(size=tmap.shape) * params.noise_sigma * NOISE_HU_PER_SIGMA
    ct = np.clip(ct, lo, hi)

    mr_clean, _, _ = _paint(rng, tmap, organs, MR_BANDS, tex, 0.1, central=False, per_organ=False)
    body = tmap != TissueClass.AIR
    bias = _bias_field(rng, body, params.bias_amplitude)
    mr = mr_clean * bias + rng.normal(size=tmap.shape) * params.noise_sigma * NOISE_MR_PER_SIGMA
    mr = np.where(body, np.maximum(mr, 1.0), 0.0)

    sid = id if id is not None else f"s{stream}_{index:05d}"
    return PhantomSample(
        mr=Slice(mr, Modality.MR, IntensityKind.RAW, SPACING_MM, sid),
        ct=Slice(ct, Modality.CT, IntensityKind.HU, SPACING_MM, sid),
        sat=Mask(tmap == TissueClass.SAT, Tissue.SAT, sid),
        vat=Mask(tmap == TissueClass.VAT, Tissue.VAT, sid),
        tissue_map=tmap,
        ct_clean_hu=ct_clean,
        bias_field=bias,
        cavity=cavity,
        achieved_vat_frac=vat_frac,
    )


def fat_threshold_oracle(ct_hu: np.ndarray, cavity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (SAT, VAT) from CT by thresholding the fat HU band inside/outside the muscle wall."""
    fat = (ct_hu >= FAT_HU_BAND[0]) & (ct_hu <= FAT_HU_BAND[1])
    return fat & ~cavity, fat & cavity


# --- datasets --------------------------------------------------------------

TRANSLATION_TEST_FRAC = 0.15
SEGMENTATION_TEST_FRAC = 0.10

STREAM_MR = 0
STREAM_CT_UNPAIRED = 1
STREAM_SEG = 2


def split_sizes(n: int, test_frac: float) -> tuple[int, int]:
    n_test = math.ceil(round(n * test_frac, 9))
    return n - n_test, n_test


def _write_pair(root: Path, split: str, sample: PhantomSample, which: tuple[str, ...]) -> None:
    sid = sample.mr.id
    if "mr" in which:
        imgio.save_slice(sample.mr, imgio.slice_dir(root, split, Modality.MR) / f"{sid}.png")
    if "ct" in which:
        imgio.save_slice(sample.ct, imgio.slice_dir(root, split, Modality.CT) / f"{sid}.png")
        imgio.save_mask(sample.sat, imgio.mask_dir(root, split, Tissue.SAT) / f"{sid}.png")
        imgio.save_mask(sample.vat, imgio.mask_dir(root, split, Tissue.VAT) / f"{sid}.png")


def gen_dataset(
    params: PhantomParams, n: int, unpaired: bool, root: str | Path, overwrite: bool = False
) -> dict:
    """Write a phantom dataset and return its manifest (also saved as ``manifest.json``).

    Splits: ``train``/``test`` hold translation data (85/15); ``seg_train``/``seg_test``
    hold labeled CT for the segmenters (90/10), drawn from an independent stream.
    Test slices are always paired so MR-space ground truth exists. When ``unpaired``
    is set, training MR and CT come from disjoint random streams and carry
    distinct ids (``mr_*`` vs ``ct_*``).
    """
    if n < 4:
        raise ValidationError(f"dataset needs n >= 4, got {n}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty (pass overwrite=True)")
        shutil.rmtree(root)
    n_train, n_test = split_sizes(n, TRANSLATION_TEST_FRAC)
    n_seg_train, n_seg_test = split_sizes(n, SEGMENTATION_TEST_FRAC)

    for split in ("train", "test", "seg_train", "seg_test"):
        mods = ("ct",) if split.startswith("seg") else ("mr", "ct")
        for m in mods:
            imgio.slice_dir(root, split, m).mkdir(parents=True, exist_ok=True)
        for t in Tissue:
            imgio.mask_dir(root, split, t).mkdir(parents=True, exist_ok=True)

    vat_fracs = []
    modal_ids: dict[str, dict[str, list[str]]] = {s: {} for s in ("train", "test", "seg_train", "seg_test")}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PhantomWarning)
        train_mr, train_ct = [], []
        for i in range(n_train):
            if unpaired:
                a = gen_sample(params, i, STREAM_MR, id=f"mr_{i:05d}")
                b = gen_sample(params, i, STREAM_CT_UNPAIRED, id=f"ct_{i:05d}")
                _write_pair(root, "train", a, ("mr",))
                _write_pair(root, "train", b, ("ct",))
                train_mr.append(a.mr.id)
                train_ct.append(b.ct.id)
                vat_fracs += [a.achieved_vat_frac, b.achieved_vat_frac]
            else:
                s = gen_sample(params, i, STREAM_MR, id=f"case_{i:05d}")
                _write_pair(root, "train", s, ("mr", "ct"))
                train_mr.append(s.mr.id)
                train_ct.append(s.ct.id)
                vat_fracs.append(s.achieved_vat_frac)
        modal_ids["train"] = {"mr": train_mr, "ct": train_ct}

        test_ids = []
        for k in range(n_test):
            s = gen_sample(params, n_train + k, STREAM_MR, id=f"test_{k:05d}")
            _write_pair(root, "test", s, ("mr", "ct"))
            test_ids.append(s.mr.id)
            vat_fracs.append(s.achieved_vat_frac)
        modal_ids["test"] = {"mr": test_ids, "ct": list(test_ids)}

        seg = {"seg_train": [], "seg_test": []}
        for i in range(n):
            split = "seg_train" if i < n_seg_train else "seg_test"
            s = gen_sample(params, i, STREAM_SEG, id=f"seg_{i:05d}")
            _write_pair(root, split, s, ("ct",))
            seg[split].append(s.ct.id)
            vat_fracs.append(s.achieved_vat_frac)
        for split, ids in seg.items():
            modal_ids[split] = {"ct": ids}
    for w in caught:
        warnings.warn(w.message, PhantomWarning, stacklevel=2)

    splits = {
        "train": sorted(set(modal_ids["train"]["mr"]) | set(modal_ids["train"]["ct"])),
        "test": test_ids,
        "seg_train": seg["seg_train"],
        "seg_test": seg["seg_test"],
    }
    manifest = {
        "splits": splits,
        "modalities": modal_ids,
        "unpaired": bool(unpaired),
        "params": asdict(params),
        "achieved_vat_frac": float(np.mean(vat_fracs)) if vat_fracs else 0.0,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
