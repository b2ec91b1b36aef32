"""Cycle-consistent MR <-> CT translation: model, losses, training and MR -> s-CT inference.

Domain A is MR, domain B is CT. ``G_B`` maps A -> B (MR to synthetic CT),
``G_A`` maps B -> A. ``D_A`` scores MR realism, ``D_B`` CT realism.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from xmodseg import diffnet, imgio
from xmodseg.diffnet import RES_ADD, RES_BEGIN, UPSAMPLE, AdamState, Layer, Network, act, conv, inorm
from xmodseg.errors import FormatError, ValidationError
from xmodseg.imgio import IntensityKind, Modality, Slice
from xmodseg.preprocess import STANDARD_RANGE

LOSS_TERMS = ("gan_b", "gan_a", "cycle_aba", "cycle_bab", "cross_ba_b", "cross_ab_a")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")


@dataclass
class TranslationModel:
    G_A: Network
    G_B: Network
    D_A: Network
    D_B: Network
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    meta: dict = field(default_factory=dict)

    def networks(self) -> dict[str, Network]:
        return {"G_A": self.G_A, "G_B": self.G_B, "D_A": self.D_A, "D_B": self.D_B}

    def generator_params(self) -> list[torch.Tensor]:
        return self.G_A.params + self.G_B.params

    def discriminator_params(self) -> list[torch.Tensor]:
        return self.D_A.params + self.D_B.params

    def astype(self, dtype: torch.dtype) -> TranslationModel:
        return TranslationModel(
            self.G_A.astype(dtype), self.G_B.astype(dtype), self.D_A.astype(dtype), self.D_B.astype(dtype),
            self.loss_cfg, dict(self.meta),
        )


@dataclass
class CycleBatch:
    I_A: torch.Tensor
    I_B: torch.Tensor
    I_AB: torch.Tensor
    I_BA: torch.Tensor
    I_ABA: torch.Tensor
    I_BAB: torch.Tensor


def generator_layers(c: int) -> list[Layer]:
    """2-down / 2-up encoder-decoder with two residual blocks and a linear 1-channel output.

    Borders are reflect-padded and the up path is nearest upsampling plus a
    3x3 conv, which avoids the checkerboard texture of strided transposed convs.
    """
    r = "reflect"
    layers = [conv(1, c, k=7, pad_mode=r), inorm(c), act("relu")]
    layers += [conv(c, 2 * c, k=3, stride=2, pad_mode=r), inorm(2 * c), act("relu")]
    layers += [conv(2 * c, 4 * c, k=3, stride=2, pad_mode=r), inorm(4 * c), act("relu")]
    for _ in range(2):
        layers += [RES_BEGIN, conv(4 * c, 4 * c, pad_mode=r), inorm(4 * c), act("relu")]
        layers += [conv(4 * c, 4 * c, pad_mode=r), inorm(4 * c), RES_ADD]
    layers += [UPSAMPLE, conv(4 * c, 2 * c, pad_mode=r), inorm(2 * c), act("relu")]
    layers += [UPSAMPLE, conv(2 * c, c, pad_mode=r), inorm(c), act("relu")]
    layers += [conv(c, 1, k=7, pad_mode=r)]
    return layers


def discriminator_layers(c: int) -> list[Layer]:
    """Three-conv patch classifier with a sigmoid patch map."""
    return [
        conv(1, c, k=4, stride=2, pad=1), act("lrelu"),
        conv(c, 2 * c, k=4, stride=2, pad=1), inorm(2 * c), act("lrelu"),
        conv(2 * c, 1, k=3, stride=1, pad=1), act("sigmoid"),
    ]


def build_cgan(
    image_size: int,
    base_channels: int = 8,
    loss_cfg: LossConfig | None = None,
    seed: int = 0,
    disc_channels: int | None = None,
) -> TranslationModel:
    """Two generators and two discriminators; ``disc_channels`` defaults to ``base_channels``."""
    if image_size < 16 or image_size % 4:
        raise ValidationError(f"image_size must be a multiple of 4 and >= 16, got {image_size}")
    disc_channels = base_channels if disc_channels is None else disc_channels
    if base_channels < 1 or disc_channels < 1:
        raise ValidationError("base_channels and disc_channels must be >= 1")
    seeds = np.random.SeedSequence([seed, 0xC6A2]).generate_state(4)
    g, d = generator_layers(base_channels), discriminator_layers(disc_channels)
    return TranslationModel(
        G_A=Network(g, seed=int(seeds[0])),
        G_B=Network(g, seed=int(seeds[1])),
        D_A=Network(d, seed=int(seeds[2])),
        D_B=Network(d, seed=int(seeds[3])),
        loss_cfg=loss_cfg or LossConfig(),
        meta={"image_size": image_size, "base_channels": base_channels, "disc_channels": disc_channels, "seed": seed},
    )


def _check_images(I_A: torch.Tensor, I_B: torch.Tensor) -> None:
    for name, t in (("I_A", I_A), ("I_B", I_B)):
        if t.ndim != 4 or t.shape[1] != 1:
            raise ValidationError(f"{name} must be (N, 1, H, W), got {tuple(t.shape)}")
        if t.shape[-1] % 4 or t.shape[-2] % 4:
            raise ValidationError(f"{name} spatial size must be a multiple of 4, got {tuple(t.shape[-2:])}")
    if tuple(I_A.shape) != tuple(I_B.shape):
        raise ValidationError(f"I_A and I_B shapes differ: {tuple(I_A.shape)} vs {tuple(I_B.shape)}")


def cycle_forward(model: TranslationModel, I_A: torch.Tensor, I_B: torch.Tensor) -> CycleBatch:
    _check_images(I_A, I_B)
    I_AB = model.G_B(I_A)
    I_BA = model.G_A(I_B)
    return CycleBatch(I_A, I_B, I_AB, I_BA, model.G_A(I_AB), model.G_B(I_BA))


def gen_loss_terms(batch: CycleBatch, model: TranslationModel) -> dict[str, torch.Tensor]:
    """The six unweighted MSE terms of the generator objective (discriminators frozen)."""
    shapes = {tuple(getattr(batch, f).shape) for f in ("I_A", "I_B", "I_AB", "I_BA", "I_ABA", "I_BAB")}
    if len(shapes) != 1:
        raise ValidationError(f"cycle batch tensors disagree in shape: {sorted(shapes)}")
    return {
        "gan_b": diffnet.mse(model.D_B(batch.I_AB, frozen=True), 1.0),
        "gan_a": diffnet.mse(model.D_A(batch.I_BA, frozen=True), 1.0),
        "cycle_aba": diffnet.mse(batch.I_ABA, batch.I_A),
        "cycle_bab": diffnet.mse(batch.I_BAB, batch.I_B),
        "cross_ba_b": diffnet.mse(batch.I_BA, batch.I_B),
        "cross_ab_a": diffnet.mse(batch.I_AB, batch.I_A),
    }


def weighted_gen_loss(terms: dict[str, torch.Tensor], cfg: LossConfig) -> torch.Tensor:
    return (
        terms["gan_b"]
        + terms["gan_a"]
        + cfg.alpha * (terms["cycle_aba"] + terms["cycle_bab"])
        + cfg.beta * (terms["cross_ba_b"] + terms["cross_ab_a"])
    )


def gen_loss(batch: CycleBatch, model: TranslationModel) -> torch.Tensor:
    return weighted_gen_loss(gen_loss_terms(batch, model), model.loss_cfg)


def disc_loss(
    model: TranslationModel,
    I_A: torch.Tensor,
    I_B: torch.Tensor,
    I_AB: torch.Tensor,
    I_BA: torch.Tensor,
) -> torch.Tensor:
    """Least-squares discriminator objective; fakes are detached so only D params get gradients."""
    _check_images(I_A, I_B)
    _check_images(I_AB.detach(), I_BA.detach())
    if tuple(I_AB.shape) != tuple(I_A.shape):
        raise ValidationError("fake and real batches differ in shape")
    return (
        diffnet.mse(model.D_A(I_A), 1.0)
        + diffnet.mse(model.D_A(I_BA.detach()), 0.0)
        + diffnet.mse(model.D_B(I_B), 1.0)
        + diffnet.mse(model.D_B(I_AB.detach()), 0.0)
    )


# --- intensity convention ---------------------------------------------------


def to_network_array(slice_: Slice) -> np.ndarray:
    """Map a preprocessed slice onto the [0, 1] scale the networks see."""
    kind = slice_.intensity_kind
    if kind is IntensityKind.NORM01:
        return slice_.pixels.astype(np.float32)
    if kind is IntensityKind.STANDARDIZED:
        lo, hi = STANDARD_RANGE
        return ((slice_.pixels - lo) / (hi - lo)).astype(np.float32)
    raise ValidationError(f"slice {slice_.id!r} is {kind.value}; expected NORM01 or STANDARDIZED")


def _stack(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32))


def translate_mr_to_sct(model: TranslationModel, mr: Slice) -> Slice:
    """G_B applied to a preprocessed MR slice; output clipped to [0, 1] and tagged SCT/NORM01."""
    if mr.modality is not Modality.MR:
        raise ValidationError(f"expected an MR slice, got {mr.modality.value}")
    x = _stack([to_network_array(mr)])
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ValidationError(f"slice size {mr.shape} must be a multiple of 4")
    with torch.no_grad():
        y = model.G_B(x.to(model.G_B.dtype), frozen=True)[0, 0].double().numpy()
    return Slice(np.clip(y, 0.0, 1.0), Modality.SCT, IntensityKind.NORM01, mr.spacing_mm, mr.id)


# --- persistence --------------------------------------------------------------


def save_model(model: TranslationModel, path: str | Path) -> None:
    meta = {"kind": "cgan", "loss_cfg": asdict(model.loss_cfg), **model.meta}
    diffnet.save_checkpoint(path, model.networks(), meta)


def load_model(path: str | Path) -> TranslationModel:
    nets, meta = diffnet.load_checkpoint(path)
    if meta.get("kind") != "cgan" or set(nets) != {"G_A", "G_B", "D_A", "D_B"}:
        raise FormatError(f"{path} is not a translation checkpoint")
    meta = dict(meta)
    cfg = LossConfig(**meta.pop("loss_cfg"))
    meta.pop("kind")
    return TranslationModel(nets["G_A"], nets["G_B"], nets["D_A"], nets["D_B"], cfg, meta)


# --- training -------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CganTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    base_channels: int = 8
    # discriminator width; None uses base_channels
    disc_channels: int | None = None
    seed: int = 0
    # fraction of the final epochs over which lr decays linearly to 0
    lr_decay_frac: float = 0.0

    def lr_at(self, epoch: int) -> float:
        n_decay = round(self.epochs * self.lr_decay_frac)
        start = self.epochs - n_decay
        if n_decay <= 0 or epoch < start:
            return self.lr
        return self.lr * (1.0 - (epoch - start + 1) / (n_decay + 1))


def load_training_dir(directory: str | Path, modality: Modality | None = None) -> tuple[list[str], np.ndarray]:
    directory = Path(directory)
    ids = imgio.list_ids(directory)
    if not ids:
        raise ValidationError(f"no slices found in {directory}")
    arrays = []
    for sid in ids:
        sl = imgio.load_slice(directory / f"{sid}.png")
        if modality is not None and sl.modality is not modality:
            raise ValidationError(f"{sid}: expected {modality.value}, found {sl.modality.value}")
        arrays.append(to_network_array(sl))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"{directory}: slices differ in shape {sorted(shapes)}")
    return ids, np.stack(arrays)


def _read_fingerprint(directory: Path) -> dict | None:
    f = directory / "preprocess.json"
    return json.loads(f.read_text()) if f.is_file() else None


def train_cgan_arrays(
    mr: np.ndarray,
    ct: np.ndarray,
    cfg: CganTrainConfig,
    on_epoch=None,
) -> tuple[TranslationModel, dict]:
    """Train on in-memory (N, H, W) arrays. Returns the model and the loss-curve report."""
    if len(mr) == 0 or len(ct) == 0:
        raise ValidationError("empty training set")
    if mr.shape[1:] != ct.shape[1:]:
        raise ValidationError(f"MR and CT slice shapes differ: {mr.shape[1:]} vs {ct.shape[1:]}")
    diffnet.configure_threads()
    torch.use_deterministic_algorithms(True)
    size = mr.shape[-1]
    model = build_cgan(size, cfg.base_channels, cfg.loss_cfg, cfg.seed, cfg.disc_channels)
    opt_g = AdamState.for_params(model.generator_params())
    opt_d = AdamState.for_params(model.discriminator_params())
    rng = np.random.default_rng([cfg.seed, 0x7A11])
    mr_t = torch.from_numpy(mr.astype(np.float32))[:, None]
    ct_t = torch.from_numpy(ct.astype(np.float32))[:, None]
    n_steps = math.ceil(max(len(mr), len(ct)) / cfg.batch_size)
    curves: dict[str, list[float]] = {k: [] for k in (*LOSS_TERMS, "gen_total", "disc_total")}
    last_good = [p.detach().clone() for net in model.networks().values() for p in net.params]

    for epoch in range(cfg.epochs):
        order_a = _cycled_permutation(rng, len(mr), n_steps * cfg.batch_size)
        order_b = _cycled_permutation(rng, len(ct), n_steps * cfg.batch_size)
        sums = {k: 0.0 for k in curves}
        lr = cfg.lr_at(epoch)
        for step in range(n_steps):
            sl = slice(step * cfg.batch_size, (step + 1) * cfg.batch_size)
            I_A, I_B = mr_t[order_a[sl]], ct_t[order_b[sl]]
            batch = cycle_forward(model, I_A, I_B)

            d_loss = disc_loss(model, I_A, I_B, batch.I_AB, batch.I_BA)
            d_grads = diffnet.backward(d_loss, model.discriminator_params())
            _guard_finite(d_loss, model, last_good)
            diffnet.adam_step(model.discriminator_params(), d_grads, opt_d, lr, cfg.betas)

            terms = gen_loss_terms(batch, model)
            g_loss = weighted_gen_loss(terms, model.loss_cfg)
            _guard_finite(g_loss, model, last_good)
            g_grads = diffnet.backward(g_loss, model.generator_params())
            diffnet.adam_step(model.generator_params(), g_grads, opt_g, lr, cfg.betas)

            for k, v in terms.items():
                sums[k] += float(v.detach())
            sums["gen_total"] += float(g_loss.detach())
            sums["disc_total"] += float(d_loss.detach())
        for k in curves:
            curves[k].append(sums[k] / n_steps)
        last_good = [p.detach().clone() for net in model.networks().values() for p in net.params]
        if on_epoch is not None:
            on_epoch(epoch, {k: v[-1] for k, v in curves.items()})

    report = {
        "epochs": cfg.epochs,
        "steps_per_epoch": n_steps,
        "n_mr": int(len(mr)),
        "n_ct": int(len(ct)),
        "config": {**asdict(cfg), "loss_cfg": asdict(cfg.loss_cfg), "betas": list(cfg.betas)},
        "losses": curves,
    }
    return model, report


def _cycled_permutation(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    reps = math.ceil(length / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def _guard_finite(loss: torch.Tensor, model: TranslationModel, last_good: list[torch.Tensor]) -> None:
    if torch.isfinite(loss):
        return
    with torch.no_grad():
        params = [p for net in model.networks().values() for p in net.params]
        for p, good in zip(params, last_good):
            p.copy_(good)
    raise TrainingDiverged("non-finite loss; parameters restored to the last completed epoch")


def train_cgan(
    mr_dir: str | Path,
    ct_dir: str | Path,
    cfg: CganTrainConfig,
    out_ckpt: str | Path,
) -> dict:
    """Train from preprocessed slice directories; write checkpoint and ``<out>.report.json``."""
    mr_dir, ct_dir, out_ckpt = Path(mr_dir), Path(ct_dir), Path(out_ckpt)
    _, mr = load_training_dir(mr_dir, Modality.MR)
    _, ct = load_training_dir(ct_dir, Modality.CT)
    fingerprint = {"mr": _read_fingerprint(mr_dir), "ct": _read_fingerprint(ct_dir)}
    model, report = train_cgan_arrays(mr, ct, cfg)
    model.meta["preprocess"] = fingerprint
    save_model(model, out_ckpt)
    report_path = out_ckpt.with_name(out_ckpt.name + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
