"""Slice and mask types, PNG persistence, dataset layout, and overlay rendering.

Slices are stored as 16-bit grayscale PNGs with a JSON sidecar (``<file>.png.json``)
that carries the metadata and the affine range used for quantization. Masks are
8-bit PNGs holding {0, 255}.

Dataset layout::

    <root>/<split>/<modality>/<id>.png        modality in {mr, ct, sct}
    <root>/<split>/masks/<tissue>/<id>.png    tissue in {sat, vat}
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from xmodseg.errors import FormatError, ValidationError

MIN_SIDE = 16
_Q16 = 65535

SAT_COLOR = (255, 64, 0)
VAT_COLOR = (0, 160, 255)


class Modality(str, enum.Enum):
    MR = "MR"
    CT = "CT"
    SCT = "SCT"


class IntensityKind(str, enum.Enum):
    RAW = "RAW"
    HU = "HU"
    NORM01 = "NORM01"
    STANDARDIZED = "STANDARDIZED"


class Tissue(str, enum.Enum):
    SAT = "SAT"
    VAT = "VAT"


@dataclass(frozen=True)
class Slice:
    """One 2-D grayscale image plus the metadata needed to interpret it."""

    pixels: np.ndarray
    modality: Modality
    intensity_kind: IntensityKind
    spacing_mm: tuple[float, float] = (1.5, 1.5)
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "intensity_kind", IntensityKind(self.intensity_kind))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if px.ndim != 2:
            raise ValidationError(f"slice must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValidationError(f"slice must be at least {MIN_SIDE}x{MIN_SIDE}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValidationError(f"slice {self.id!r} contains non-finite pixels")
        if len(self.spacing_mm) != 2 or min(self.spacing_mm) <= 0:
            raise ValidationError(f"spacing must be two positive values, got {self.spacing_mm}")
        if self.intensity_kind is IntensityKind.NORM01 and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("NORM01 slice has pixels outside [0, 1]")
        if self.intensity_kind is IntensityKind.HU and self.modality is Modality.MR:
            raise ValidationError("HU intensities are only valid for CT or SCT slices")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, **changes) -> Slice:
        fields = dict(
            pixels=self.pixels,
            modality=self.modality,
            intensity_kind=self.intensity_kind,
            spacing_mm=self.spacing_mm,
            id=self.id,
        )
        fields.update(changes)
        return Slice(**fields)


@dataclass(frozen=True)
class Mask:
    """Binary label map for one tissue class."""

    pixels: np.ndarray
    tissue: Tissue
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        object.__setattr__(self, "tissue", Tissue(self.tissue))
        if px.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {px.shape}")
        if px.dtype != np.bool_:
            if not np.all((px == 0) | (px == 1)):
                raise ValidationError(f"mask {self.id!r} is not strictly binary")
            px = px.astype(bool)
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def empty_like(cls, slice_: Slice, tissue: Tissue) -> Mask:
        return cls(np.zeros(slice_.shape, dtype=bool), tissue, slice_.id)


# --- persistence -----------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_slice(slice_: Slice, path: str | Path) -> None:
    """Write ``slice_`` as a 16-bit PNG plus JSON sidecar."""
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"parent directory does not exist: {path.parent}")
    px = slice_.pixels
    lo, hi = float(px.min()), float(px.max())
    if hi > lo:
        q = np.rint((px - lo) / (hi - lo) * _Q16)
    else:
        q = np.zeros(px.shape)
    q = np.clip(q, 0, _Q16).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")
    meta = {
        "id": slice_.id,
        "modality": slice_.modality.value,
        "intensity_kind": slice_.intensity_kind.value,
        "spacing_mm": list(slice_.spacing_mm),
        "shape": list(px.shape),
        "quant_min": lo,
        "quant_max": hi,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except FileNotFoundError:
        raise FormatError(f"missing image file: {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"unreadable PNG {path}: {exc}") from exc


def load_slice(path: str | Path) -> Slice:
    path = Path(path)
    side = _sidecar(path)
    if not side.is_file():
        raise FormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
        lo, hi = float(meta["quant_min"]), float(meta["quant_max"])
        shape = tuple(meta["shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad sidecar {side}: {exc}") from exc
    q = _read_png(path)
    if q.ndim != 2 or q.shape != shape:
        raise FormatError(f"{path}: image shape {q.shape} does not match sidecar {shape}")
    q = q.astype(np.float64)
    px = lo + q * ((hi - lo) / _Q16) if hi > lo else np.full(shape, lo)
    if meta["intensity_kind"] == IntensityKind.NORM01.value:
        px = np.clip(px, 0.0, 1.0)
    return Slice(
        pixels=px,
        modality=meta["modality"],
        intensity_kind=meta["intensity_kind"],
        spacing_mm=tuple(meta["spacing_mm"]),
        id=meta.get("id") or path.stem,
    )


def save_mask(mask: Mask, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"parent directory does not exist: {path.parent}")
    Image.fromarray(mask.pixels.astype(np.uint8) * 255).save(path, format="PNG")


def load_mask(path: str | Path, tissue: Tissue | str | None = None) -> Mask:
    """Load a {0,255} mask PNG. ``tissue`` defaults to the parent directory name."""
    path = Path(path)
    if tissue is None:
        try:
            tissue = Tissue(path.parent.name.upper())
        except ValueError:
            raise FormatError(f"cannot infer tissue from directory {path.parent}") from None
    arr = _read_png(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: mask must be single-channel")
    if not np.all((arr == 0) | (arr == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return Mask(arr == 255, tissue, path.stem)


# --- dataset layout --------------------------------------------------------


def _enum_name(value: enum.Enum | str) -> str:
    return (value.value if isinstance(value, enum.Enum) else str(value)).lower()


def slice_dir(root: str | Path, split: str, modality: Modality | str) -> Path:
    return Path(root) / split / _enum_name(modality)


def mask_dir(root: str | Path, split: str, tissue: Tissue | str) -> Path:
    return Path(root) / split / "masks" / _enum_name(tissue)


def list_ids(directory: str | Path) -> list[str]:
    """Sorted ids of all ``*.png`` files in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p.stem for p in directory.glob("*.png"))


# --- overlays --------------------------------------------------------------


def _to_gray8(px: np.ndarray) -> np.ndarray:
    lo, hi = float(px.min()), float(px.max())
    if hi <= lo:
        return np.zeros(px.shape, dtype=np.float64)
    return np.rint((px - lo) / (hi - lo) * 255.0)


def overlay_rgb(slice_: Slice, sat: Mask | None = None, vat: Mask | None = None) -> np.ndarray:
    """RGB uint8 array: grayscale base with 50% SAT/VAT tints."""
    for m in (sat, vat):
        if m is not None and m.shape != slice_.shape:
            raise ValidationError(f"mask shape {m.shape} does not match slice shape {slice_.shape}")
    gray = _to_gray8(slice_.pixels)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for m, color in ((sat, SAT_COLOR), (vat, VAT_COLOR)):
        if m is None:
            continue
        sel = m.pixels
        rgb[sel] = np.rint(0.5 * rgb[sel] + 0.5 * np.asarray(color, dtype=np.float64))
    return rgb.astype(np.uint8)


def render_overlay(slice_: Slice, sat: Mask | None, vat: Mask | None, path: str | Path) -> None:
    rgb = overlay_rgb(slice_, sat, vat)
    Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG", optimize=False)
