"""Small differentiable-network fabric on top of torch autograd.

A :class:`Network` is a flat list of :class:`Layer` specs interpreted as a tiny
stack machine: ``push``/``concat`` implement U-Net skip connections and
``res_begin``/``res_add`` residual blocks. Parameters are plain leaf tensors so
losses, optimizer and checkpoints stay under this module's control.
"""

from __future__ import annotations

import json
import math
import os
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from xmodseg.errors import FormatError, ValidationError

CHECKPOINT_MAGIC = b"XMSGCKPT"
FORMAT_VERSION = 1
BCE_EPS = 1e-7
ACTIVATIONS = ("relu", "lrelu", "tanh", "sigmoid")
LAYER_KINDS = ("conv", "convT", "inorm", "act", "maxpool", "upsample", "push", "concat", "res_begin", "res_add")
PAD_MODES = ("", "reflect")


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    k: int = 1
    stride: int = 1
    pad: int = 0
    out_pad: int = 0
    act: str = ""
    pad_mode: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "act" and self.act not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.act!r}")
        if self.pad_mode not in PAD_MODES:
            raise ValidationError(f"unknown pad mode {self.pad_mode!r}")

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv":
            return [(self.out_ch, self.in_ch, self.k, self.k), (self.out_ch,)]
        if self.kind == "convT":
            return [(self.in_ch, self.out_ch, self.k, self.k), (self.out_ch,)]
        if self.kind == "inorm":
            return [(self.in_ch,), (self.in_ch,)]
        return []

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (0, "") or k == "kind"}


def conv(
    in_ch: int, out_ch: int, k: int = 3, stride: int = 1, pad: int | None = None, pad_mode: str = ""
) -> Layer:
    """Convolution; ``pad_mode="reflect"`` mirrors the border instead of zero padding."""
    return Layer("conv", in_ch, out_ch, k, stride, k // 2 if pad is None else pad, pad_mode=pad_mode)


def conv_t(in_ch: int, out_ch: int, k: int = 2, stride: int = 2, pad: int = 0, out_pad: int = 0) -> Layer:
    return Layer("convT", in_ch, out_ch, k, stride, pad, out_pad)


def inorm(ch: int) -> Layer:
    return Layer("inorm", in_ch=ch)


def act(name: str) -> Layer:
    return Layer("act", act=name)


MAXPOOL = Layer("maxpool", k=2, stride=2)
UPSAMPLE = Layer("upsample", k=2, stride=2)
PUSH = Layer("push")
CONCAT = Layer("concat")
RES_BEGIN = Layer("res_begin")
RES_ADD = Layer("res_add")


def count_params(layers: Sequence[Layer]) -> int:
    return sum(math.prod(s) for layer in layers for s in layer.param_shapes())


class Network:
    """Parameterized layer stack. ``params`` is the flat list of leaf tensors."""

    def __init__(self, layers: Sequence[Layer], seed: int | None = 0, dtype: torch.dtype = torch.float32):
        self.layers = tuple(layers)
        self._check_channels()
        self.dtype = dtype
        self.params: list[torch.Tensor] = []
        gen = torch.Generator().manual_seed(int(seed or 0))
        for layer in self.layers:
            for i, shape in enumerate(layer.param_shapes()):
                self.params.append(_init_param(layer, i, shape, gen).to(dtype).requires_grad_(True))

    def _check_channels(self) -> None:
        ch: int | None = None
        stack: list[int | None] = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "convT", "inorm"):
                if ch is not None and layer.in_ch != ch:
                    raise ValidationError(f"layer {i} ({layer.kind}) expects {layer.in_ch} channels, gets {ch}")
                ch = layer.out_ch if layer.kind != "inorm" else layer.in_ch
            elif layer.kind in ("push", "res_begin"):
                stack.append(ch)
            elif layer.kind == "concat":
                if not stack:
                    raise ValidationError(f"layer {i}: concat without matching push")
                skip = stack.pop()
                ch = None if ch is None or skip is None else ch + skip
            elif layer.kind == "res_add":
                if not stack:
                    raise ValidationError(f"layer {i}: res_add without matching res_begin")
                skip = stack.pop()
                if ch is not None and skip is not None and ch != skip:
                    raise ValidationError(f"layer {i}: residual channel mismatch {ch} vs {skip}")
        if stack:
            raise ValidationError("unbalanced skip/residual markers")

    @property
    def in_channels(self) -> int:
        for layer in self.layers:
            if layer.kind in ("conv", "convT", "inorm"):
                return layer.in_ch
        raise ValidationError("network has no parameterized layers")

    def param_count(self) -> int:
        return sum(p.numel() for p in self.params)

    def forward(self, x: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        """Run the stack on ``x`` (N, C, H, W). ``frozen`` detaches parameters from the graph."""
        if x.ndim != 4:
            raise ValidationError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        params = iter([p.detach() for p in self.params] if frozen else self.params)
        stack: list[torch.Tensor] = []
        for layer in self.layers:
            kind = layer.kind
            if kind == "conv":
                w, b = next(params), next(params)
                if layer.pad_mode and layer.pad:
                    x = F.pad(x, (layer.pad,) * 4, mode=layer.pad_mode)
                    x = F.conv2d(x, w, b, stride=layer.stride)
                else:
                    x = F.conv2d(x, w, b, stride=layer.stride, padding=layer.pad)
            elif kind == "convT":
                w, b = next(params), next(params)
                x = F.conv_transpose2d(x, w, b, stride=layer.stride, padding=layer.pad, output_padding=layer.out_pad)
            elif kind == "inorm":
                g, b = next(params), next(params)
                x = F.instance_norm(x, weight=g, bias=b, eps=1e-5)
            elif kind == "act":
                if _KINK_TRACE is not None and layer.act in ("relu", "lrelu"):
                    _KINK_TRACE.append(x.detach() > 0)
                x = _ACT[layer.act](x)
            elif kind == "maxpool":
                if x.shape[-1] % 2 or x.shape[-2] % 2:
                    raise ValidationError(f"maxpool needs even spatial size, got {tuple(x.shape[-2:])}")
                if _KINK_TRACE is not None:
                    x, idx = F.max_pool2d(x, 2, return_indices=True)
                    _KINK_TRACE.append(idx)
                else:
                    x = F.max_pool2d(x, 2)
            elif kind == "upsample":
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            elif kind in ("push", "res_begin"):
                stack.append(x)
            elif kind == "concat":
                skip = stack.pop()
                if skip.shape[-2:] != x.shape[-2:]:
                    raise ValidationError(f"skip shape {tuple(skip.shape)} vs {tuple(x.shape)}")
                x = torch.cat([x, skip], dim=1)
            elif kind == "res_add":
                x = x + stack.pop()
        return x

    __call__ = forward

    def astype(self, dtype: torch.dtype) -> Network:
        """Copy with parameters cast to ``dtype``."""
        net = Network.__new__(Network)
        net.layers = self.layers
        net.dtype = dtype
        net.params = [p.detach().to(dtype).clone().requires_grad_(True) for p in self.params]
        return net

    def flat_params(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.params])

    def load_flat(self, flat: np.ndarray) -> None:
        if len(flat) != self.param_count():
            raise ValidationError(f"flat vector has {len(flat)} values, network needs {self.param_count()}")
        off = 0
        with torch.no_grad():
            for p in self.params:
                n = p.numel()
                p.copy_(torch.from_numpy(np.asarray(flat[off : off + n])).reshape(p.shape).to(p.dtype))
                off += n

    def layer_dicts(self) -> list[dict]:
        return [layer.to_dict() for layer in self.layers]


_ACT: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "lrelu": lambda t: F.leaky_relu(t, 0.2),
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


def _init_param(layer: Layer, index: int, shape: tuple[int, ...], gen: torch.Generator) -> torch.Tensor:
    if layer.kind == "inorm":
        return torch.ones(shape, dtype=torch.float64) if index == 0 else torch.zeros(shape, dtype=torch.float64)
    if index == 1:
        return torch.zeros(shape, dtype=torch.float64)
    fan_in = (layer.in_ch if layer.kind == "conv" else layer.out_ch) * layer.k * layer.k
    std = math.sqrt(2.0 / fan_in)
    return torch.randn(shape, generator=gen, dtype=torch.float64) * std


def identity_network(channels: int = 1, dtype: torch.dtype = torch.float32) -> Network:
    """Single 1x1 conv with identity weights and zero bias."""
    net = Network([conv(channels, channels, k=1)], dtype=dtype)
    with torch.no_grad():
        net.params[0].zero_()
        for c in range(channels):
            net.params[0][c, c, 0, 0] = 1.0
        net.params[1].zero_()
    return net


def constant_network(value: float, in_channels: int = 1, dtype: torch.dtype = torch.float32) -> Network:
    """Network emitting ``sigmoid(logit)`` = ``value`` everywhere (value in (0, 1]); 1.0 uses a saturating logit."""
    net = Network([conv(in_channels, 1, k=1), act("sigmoid")], dtype=dtype)
    logit = 100.0 if value >= 1.0 else math.log(value / (1.0 - value))
    with torch.no_grad():
        net.params[0].zero_()
        net.params[1].fill_(logit)
    return net


# --- losses ---------------------------------------------------------------


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(pred: torch.Tensor, target: torch.Tensor | float) -> torch.Tensor:
    """Mean squared error. A scalar ``target`` is broadcast (the ``MSE(1, D(x))`` form)."""
    if not torch.is_tensor(target):
        target = torch.full_like(pred, float(target))
    _same_shape(pred, target, "mse")
    return torch.mean((pred - target) ** 2)


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target, "bce")
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -torch.mean(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def soft_dice(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-sample smoothed soft Dice, averaged over the batch."""
    _same_shape(pred, target, "soft_dice")
    dims = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(dim=dims)
    denom = pred.sum(dim=dims) + target.sum(dim=dims)
    return torch.mean((2.0 * inter + eps) / (denom + eps))


# --- gradients and optimizer ----------------------------------------------


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Write d(loss)/d(param) into ``param.grad`` for every param (reset-then-write).

    Parameters the loss does not depend on receive an exact zero gradient.
    """
    if not torch.is_tensor(loss) or loss.ndim != 0:
        raise ValidationError("backward expects a scalar loss tensor")
    if not loss.requires_grad:
        raise ValidationError("loss is detached from any parameter graph")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out.append(g)
    return out


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor]) -> AdamState:
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. NaN/Inf gradients abort before any write."""
    for i, g in enumerate(grads):
        if not torch.all(torch.isfinite(g)):
            bad = int((~torch.isfinite(g)).sum())
            raise ValidationError(f"non-finite gradient in parameter {i} (shape {tuple(g.shape)}, {bad} bad values)")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if lr:
                p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


# --- finite-difference check ---------------------------------------------


# branch record of every piecewise-linear op run while a trace is active
_KINK_TRACE: list[torch.Tensor] | None = None


@contextmanager
def kink_trace():
    """Record which side of every ReLU kink and which max-pool winner each forward pass takes."""
    global _KINK_TRACE
    prev, _KINK_TRACE = _KINK_TRACE, []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


# fourth-order central difference: f'(x) ~ sum(w_k f(x + k h)) / h
_STENCIL_OFFSETS = (-2, -1, 1, 2)
_STENCIL_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def _same_branches(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_probes: int,
    h: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-6,
    stats: dict | None = None,
) -> float:
    """Worst relative error between autograd and fourth-order central differences on random scalars.

    ``loss_fn`` re-evaluates the loss from the current values of ``params`` (use
    64-bit tensors). Relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps exactly-zero gradients (e.g. a conv bias feeding an instance
    norm) from turning roundoff into a large relative error.

    A probe whose stencil evaluations take different ReLU or max-pool
    branches straddles a kink, where the loss has no derivative to compare; it is
    skipped and another scalar drawn. ``stats`` (if given) receives the counts.
    """
    if n_probes < 1:
        raise ValidationError("n_probes must be >= 1")
    params = list(params)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if total == 0:
        return 0.0
    analytic = backward(loss_fn(), params)
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    checked = skipped = 0
    for flat_idx in rng.permutation(total):
        if checked == n_probes:
            break
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        ei = int(flat_idx - offsets[pi])
        view = params[pi].data.view(-1)
        orig = view[ei].item()
        values, branches = [], []
        with torch.no_grad():
            for k in _STENCIL_OFFSETS:
                view[ei] = orig + k * h
                with kink_trace() as br:
                    values.append(float(loss_fn()))
                branches.append(br)
            view[ei] = orig
        if not all(_same_branches(branches[0], b) for b in branches[1:]):
            skipped += 1
            continue
        checked += 1
        num = float(np.dot(_STENCIL_WEIGHTS, values)) / h
        ana = float(analytic[pi].reshape(-1)[ei])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, networks: dict[str, Network], meta: dict | None = None) -> None:
    """Write ``networks`` and ``meta`` to a self-describing binary container.

    Layout: magic, uint32 LE header length, UTF-8 JSON header, then every
    parameter as raw little-endian float32 in header order.
    """
    header: dict = {"format_version": FORMAT_VERSION, "meta": meta or {}, "networks": {}}
    blobs = []
    offset = 0
    for name in sorted(networks):
        net = networks[name]
        entries = []
        for p in net.params:
            arr = p.detach().cpu().numpy().astype("<f4", copy=False)
            entries.append({"shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(np.ascontiguousarray(arr).tobytes())
        header["networks"][name] = {"layers": net.layer_dicts(), "params": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw)
    try:
        header = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[dict[str, Network], dict]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        raw = fh.read()
    if len(raw) % 4:
        raise FormatError(f"{path}: truncated parameter data")
    data = np.frombuffer(raw, dtype="<f4")
    nets = {}
    for name, spec in header["networks"].items():
        try:
            net = Network([Layer(**d) for d in spec["layers"]], seed=0, dtype=dtype)
        except (TypeError, ValidationError) as exc:
            raise FormatError(f"{path}: bad layer spec in {name!r}: {exc}") from exc
        if len(spec["params"]) != len(net.params):
            raise FormatError(f"{path}: network {name!r} parameter list does not match its layers")
        with torch.no_grad():
            for p, entry in zip(net.params, spec["params"]):
                if tuple(entry["shape"]) != tuple(p.shape):
                    raise FormatError(f"{path}: shape mismatch in {name!r}")
                n = p.numel()
                chunk = data[entry["offset"] : entry["offset"] + n]
                if chunk.size != n:
                    raise FormatError(f"{path}: truncated parameter data")
                p.copy_(torch.from_numpy(chunk.copy()).reshape(p.shape).to(dtype))
        nets[name] = net
    return nets, header["meta"]


def configure_threads() -> int:
    """Apply ``XMODSEG_THREADS`` (default 1) to torch and return the count in use."""
    n = int(os.environ.get("XMODSEG_THREADS", "1") or 1)
    torch.set_num_threads(max(1, n))
    return torch.get_num_threads()
