"""U-Net fat segmentation: model construction, augmentation, training and inference.

Depth counts downsampling stages: 3 for SAT, 5 for VAT.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from xmodseg import diffnet, imgio
from xmodseg.diffnet import CONCAT, MAXPOOL, PUSH, AdamState, Layer, Network, act, conv, conv_t, inorm
from xmodseg.errors import FormatError, ValidationError
from xmodseg.imgio import IntensityKind, Mask, Modality, Slice, Tissue

DEFAULT_DEPTH = {Tissue.SAT: 3, Tissue.VAT: 5}
VALIDATION_FRAC = 0.10


@dataclass(frozen=True)
class UNetConfig:
    depth: int
    base_channels: int = 8
    input_size: int = 64
    tissue: Tissue = Tissue.SAT

    def __post_init__(self):
        object.__setattr__(self, "tissue", Tissue(self.tissue))
        if not 1 <= self.depth <= 6:
            raise ValidationError(f"depth must be in 1..6, got {self.depth}")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        if self.input_size < 1 or self.input_size % (2**self.depth):
            raise ValidationError(
                f"input_size {self.input_size} is not divisible by 2^depth = {2**self.depth}"
            )
        if self.input_size // 2**self.depth < 2:
            # instance norm needs more than one value per channel at the bottleneck
            raise ValidationError(f"input_size {self.input_size} leaves a 1x1 bottleneck at depth {self.depth}")

    def to_dict(self) -> dict:
        return {**asdict(self), "tissue": self.tissue.value}


@dataclass(frozen=True)
class AugmentSpec:
    max_shift_frac: float = 0.10
    zoom_range: tuple[float, float] = (0.9, 1.1)
    hflip: bool = True
    folds: int = 4

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        if self.folds < 1:
            raise ValidationError(f"folds must be >= 1, got {self.folds}")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ValidationError(f"zoom_range must be ordered and positive, got {self.zoom_range}")
        if self.max_shift_frac < 0:
            raise ValidationError("max_shift_frac must be >= 0")


@dataclass
class SegmentationModel:
    net: Network
    cfg: UNetConfig
    threshold: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def tissue(self) -> Tissue:
        return self.cfg.tissue

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities for a (H, W) or (N, H, W) array on the NORM01 scale."""
        arr = np.asarray(x, dtype=np.float32)
        single = arr.ndim == 2
        t = torch.from_numpy(arr[None] if single else arr)[:, None].to(self.net.dtype)
        with torch.no_grad():
            p = self.net(t, frozen=True)[:, 0].double().numpy()
        return p[0] if single else p


def unet_layers(cfg: UNetConfig) -> list[Layer]:
    cap = cfg.base_channels * 16
    chans = [min(cfg.base_channels * 2**i, cap) for i in range(cfg.depth + 1)]

    def block(cin: int, cout: int) -> list[Layer]:
        return [conv(cin, cout), inorm(cout), act("relu"), conv(cout, cout), inorm(cout), act("relu")]

    layers: list[Layer] = []
    cin = 1
    for c in chans[:-1]:
        layers += block(cin, c) + [PUSH, MAXPOOL]
        cin = c
    layers += block(cin, chans[-1])
    for level in reversed(range(cfg.depth)):
        c = chans[level]
        layers += [conv_t(chans[level + 1], c, k=2, stride=2), CONCAT] + block(2 * c, c)
        chans[level + 1] = c
    layers += [conv(chans[0], 1, k=1), act("sigmoid")]
    return layers


def build_unet(cfg: UNetConfig, seed: int = 0) -> SegmentationModel:
    net = Network(unet_layers(cfg), seed=int(np.random.SeedSequence([seed, 0x5E6]).generate_state(1)[0]))
    return SegmentationModel(net, cfg, meta={"seed": seed})


# --- augmentation -----------------------------------------------------------------


def _transform(px: np.ndarray, flip: bool, zoom: float, shift: tuple[float, float], order: int) -> np.ndarray:
    out = np.fliplr(px) if flip else px
    if zoom == 1.0 and shift == (0.0, 0.0):
        return np.ascontiguousarray(out)
    center = (np.asarray(px.shape, dtype=float) - 1.0) / 2.0
    # output coordinate o samples input at center + (o - center - shift) / zoom
    offset = center - (center + np.asarray(shift)) / zoom
    return ndimage.affine_transform(
        out.astype(np.float64), np.eye(2) / zoom, offset=offset, order=order, mode="nearest"
    )


def augment(slice_: Slice, mask: Mask, spec: AugmentSpec = AugmentSpec(), seed: int = 0) -> list[tuple[Slice, Mask]]:
    """The original pair plus ``folds - 1`` jointly transformed copies.

    Image resampling is bilinear, mask resampling nearest-neighbour, so the
    transformed mask is exactly the label map of the transformed image grid.
    """
    if slice_.shape != mask.shape:
        raise ValidationError(f"slice {slice_.shape} and mask {mask.shape} shapes differ")
    rng = np.random.default_rng([seed, 0xA06])
    h, w = slice_.shape
    out = [(slice_, mask)]
    for _ in range(spec.folds - 1):
        flip = bool(spec.hflip and rng.random() < 0.5)
        zoom = float(rng.uniform(*spec.zoom_range))
        shift = (
            float(rng.uniform(-1, 1) * spec.max_shift_frac * h),
            float(rng.uniform(-1, 1) * spec.max_shift_frac * w),
        )
        img = _transform(slice_.pixels, flip, zoom, shift, order=1)
        if slice_.intensity_kind is IntensityKind.NORM01:
            img = np.clip(img, 0.0, 1.0)
        m = _transform(mask.pixels.astype(np.float64), flip, zoom, shift, order=0) > 0.5
        out.append((slice_.replace(pixels=img), Mask(m, mask.tissue, mask.id)))
    return out


def hflip_pair(slice_: Slice, mask: Mask) -> tuple[Slice, Mask]:
    return slice_.replace(pixels=np.fliplr(slice_.pixels)), Mask(np.fliplr(mask.pixels), mask.tissue, mask.id)


# --- loss, training -------------------------------------------------------------------


def seg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """BCE + (1 - soft Dice), equal weights."""
    return diffnet.bce(pred, target) + (1.0 - diffnet.soft_dice(pred, target))


@dataclass
class SegTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0


def _check_input(slice_: Slice) -> None:
    if slice_.modality not in (Modality.CT, Modality.SCT):
        raise ValidationError(f"segmentation expects CT or s-CT, got {slice_.modality.value}")
    if slice_.intensity_kind is not IntensityKind.NORM01:
        raise ValidationError(f"segmentation expects NORM01 input, got {slice_.intensity_kind.value}")


def _hard_dice(p: np.ndarray, g: np.ndarray) -> float:
    s = int(p.sum()) + int(g.sum())
    return 1.0 if s == 0 else 2.0 * int((p & g).sum()) / s


def train_unet_pairs(
    pairs: list[tuple[Slice, Mask]],
    cfg: UNetConfig,
    aug: AugmentSpec,
    train_cfg: SegTrainConfig,
    on_epoch=None,
) -> tuple[SegmentationModel, dict]:
    """Train on in-memory (slice, mask) pairs; returns the model and report."""
    if not pairs:
        raise ValidationError("empty training set")
    for sl, m in pairs:
        _check_input(sl)
        if sl.shape != (cfg.input_size, cfg.input_size):
            raise ValidationError(f"slice {sl.id!r} shape {sl.shape} does not match input_size {cfg.input_size}")
        if m.tissue is not cfg.tissue:
            raise ValidationError(f"mask {m.id!r} is {m.tissue.value}, model is {cfg.tissue.value}")
    diffnet.configure_threads()
    torch.use_deterministic_algorithms(True)
    seed = train_cfg.seed
    model = build_unet(cfg, seed)

    rng = np.random.default_rng([seed, 0x5E7])
    order = rng.permutation(len(pairs))
    n_val = math.ceil(round(len(pairs) * VALIDATION_FRAC, 9)) if len(pairs) > 1 else 0
    val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])
    train_pairs = []
    for k in train_idx:
        sl, m = pairs[k]
        train_pairs += augment(sl, m, aug, seed=int(rng.integers(2**31)))
    x_tr = torch.from_numpy(np.stack([sl.pixels for sl, _ in train_pairs]).astype(np.float32))[:, None]
    y_tr = torch.from_numpy(np.stack([m.pixels for _, m in train_pairs]).astype(np.float32))[:, None]
    val_x = np.stack([pairs[k][0].pixels for k in val_idx]) if val_idx else None
    val_y = [pairs[k][1].pixels for k in val_idx]

    opt = AdamState.for_params(model.net.params)
    n = len(train_pairs)
    n_steps = math.ceil(n / train_cfg.batch_size)
    curves: dict[str, list[float]] = {"loss": [], "val_dice": []}
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for step in range(n_steps):
            idx = torch.from_numpy(perm[step * train_cfg.batch_size : (step + 1) * train_cfg.batch_size])
            loss = seg_loss(model.net(x_tr[idx]), y_tr[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite segmentation loss at epoch {epoch}")
            grads = diffnet.backward(loss, model.net.params)
            diffnet.adam_step(model.net.params, grads, opt, train_cfg.lr, train_cfg.betas)
            total += float(loss.detach()) * len(idx)
        curves["loss"].append(total / n)
        if val_x is not None:
            probs = model.predict_proba(val_x)
            curves["val_dice"].append(
                float(np.mean([_hard_dice(p > model.threshold, g) for p, g in zip(probs, val_y)]))
            )
        if on_epoch is not None:
            on_epoch(epoch, {k: v[-1] for k, v in curves.items() if v})

    report = {
        "epochs": train_cfg.epochs,
        "n_slices": len(pairs),
        "n_train_augmented": n,
        "validation_ids": [pairs[k][0].id for k in val_idx],
        "unet": cfg.to_dict(),
        "augment": {**asdict(aug), "zoom_range": list(aug.zoom_range)},
        "config": {**asdict(train_cfg), "betas": list(train_cfg.betas)},
        "curves": curves,
    }
    return model, report


def load_labeled_dir(ct_dir: str | Path, mask_dir: str | Path, tissue: Tissue) -> list[tuple[Slice, Mask]]:
    ct_dir, mask_dir = Path(ct_dir), Path(mask_dir)
    ids = imgio.list_ids(ct_dir)
    if not ids:
        raise ValidationError(f"no CT slices in {ct_dir}")
    missing = [i for i in ids if not (mask_dir / f"{i}.png").is_file()]
    if missing:
        raise ValidationError(f"missing {tissue.value} masks for ids: {', '.join(missing)}")
    return [(imgio.load_slice(ct_dir / f"{i}.png"), imgio.load_mask(mask_dir / f"{i}.png", tissue)) for i in ids]


def train_unet(
    ct_dir: str | Path,
    mask_dir: str | Path,
    cfg: UNetConfig,
    aug: AugmentSpec,
    train_cfg: SegTrainConfig,
    out_ckpt: str | Path,
) -> dict:
    """Train from a slice directory and a mask directory; write checkpoint and ``<out>.report.json``."""
    out_ckpt = Path(out_ckpt)
    pairs = load_labeled_dir(ct_dir, mask_dir, cfg.tissue)
    model, report = train_unet_pairs(pairs, cfg, aug, train_cfg)
    fp = Path(ct_dir) / "preprocess.json"
    if fp.is_file():
        model.meta["preprocess"] = json.loads(fp.read_text())
    save_model(model, out_ckpt)
    out_ckpt.with_name(out_ckpt.name + ".report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# --- inference, persistence ---------------------------------------------------------


def segment_fat(model: SegmentationModel, slice_: Slice) -> Mask:
    _check_input(slice_)
    prob = model.predict_proba(slice_.pixels)
    return Mask(prob > model.threshold, model.tissue, slice_.id)


def save_model(model: SegmentationModel, path: str | Path) -> None:
    meta = {"kind": "unet", "unet": model.cfg.to_dict(), "threshold": model.threshold, **model.meta}
    diffnet.save_checkpoint(path, {"unet": model.net}, meta)


def load_model(path: str | Path) -> SegmentationModel:
    nets, meta = diffnet.load_checkpoint(path)
    if meta.get("kind") != "unet" or "unet" not in nets:
        raise FormatError(f"{path} is not a segmentation checkpoint")
    meta = dict(meta)
    cfg = UNetConfig(**meta.pop("unet"))
    threshold = float(meta.pop("threshold"))
    meta.pop("kind")
    return SegmentationModel(nets["unet"], cfg, threshold, meta)
