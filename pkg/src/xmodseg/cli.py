"""Command-line interface.

Every subcommand accepts ``--config FILE``: a flat ``key = value`` text file
whose keys are the subcommand's long flags (dashes or underscores). Lines
starting with ``#`` are comments; values are strings, numbers or booleans.
Flags given on the command line override file values.

Errors print one line ``xmodseg: error: <Kind>: <message>`` to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from xmodseg import __version__
from xmodseg.errors import ConfigError, XmodsegError

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse the flat ``key = value`` grammar. Values are returned as raw strings."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if value[:1] in ("'", '"'):
            end = value.find(value[0], 1)
            if end < 0:
                raise ConfigError(f"{path}:{lineno}: unterminated quote")
            value = value[1:end]
        elif " #" in value:
            value = value.split(" #", 1)[0].rstrip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}") from None


# --- subcommand implementations ----------------------------------------------------


def _cmd_phantom_gen(a) -> dict:
    from xmodseg import phantom

    params = phantom.PhantomParams(
        size=a.size,
        sat_thickness_frac=a.sat_thickness_frac,
        vat_blob_count=a.vat_blob_count,
        vat_area_frac_target=a.vat_area_frac_target,
        bias_amplitude=a.bias_amplitude,
        noise_sigma=a.noise_sigma,
        geometry_jitter=a.geometry_jitter,
        seed=a.seed,
    )
    manifest = phantom.gen_dataset(params, a.n, a.unpaired, a.out, overwrite=a.overwrite)
    return {"manifest": str(Path(a.out) / "manifest.json"), "splits": {k: len(v) for k, v in manifest["splits"].items()}}


def _cmd_preprocess(a) -> dict:
    from xmodseg.pipeline import preprocess_dataset
    from xmodseg.preprocess import HuWindow

    return preprocess_dataset(a.in_, a.out, HuWindow(a.hu_lo, a.hu_hi))


def _cmd_train_cgan(a) -> dict:
    from xmodseg import translate

    cfg = translate.CganTrainConfig(
        epochs=a.epochs,
        batch_size=a.batch_size,
        lr=a.lr,
        loss_cfg=translate.LossConfig(a.alpha, a.beta),
        base_channels=a.base_channels,
        disc_channels=a.disc_channels,
        seed=a.seed,
        lr_decay_frac=a.lr_decay_frac,
    )
    report = translate.train_cgan(a.mr_dir, a.ct_dir, cfg, a.out)
    return {"checkpoint": str(a.out), "final": {k: v[-1] for k, v in report["losses"].items() if v}}


def _cmd_train_unet(a) -> dict:
    from xmodseg import segment
    from xmodseg.imgio import Tissue

    tissue = Tissue(a.tissue.upper())
    size = _infer_size(a.ct_dir)
    cfg = segment.UNetConfig(
        depth=a.depth or segment.DEFAULT_DEPTH[tissue], base_channels=a.base_channels, input_size=size, tissue=tissue
    )
    train_cfg = segment.SegTrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    report = segment.train_unet(a.ct_dir, a.mask_dir, cfg, segment.AugmentSpec(folds=a.folds), train_cfg, a.out)
    curves = report["curves"]
    return {"checkpoint": str(a.out), "final": {k: v[-1] for k, v in curves.items() if v}}


def _infer_size(directory) -> int:
    from xmodseg import imgio

    ids = imgio.list_ids(directory)
    if not ids:
        raise ConfigError(f"no slices in {directory}")
    shape = imgio.load_slice(Path(directory) / f"{ids[0]}.png").shape
    if shape[0] != shape[1]:
        raise ConfigError(f"square slices required, got {shape}")
    return shape[0]


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise ConfigError(f"no .png slices in {path}")
        return files
    return [path]


def _cmd_translate(a) -> dict:
    from xmodseg import imgio, preprocess, translate

    model = translate.load_model(a.ckpt)
    scale = preprocess.StandardScale.load(a.scale) if a.scale else None
    src = Path(a.in_)
    files = _inputs(src)
    out = Path(a.out)
    many = src.is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        mr = imgio.load_slice(f)
        if scale is not None and mr.intensity_kind.value == "RAW":
            mr = preprocess.preprocess_mr(mr, scale)
        sct = translate.translate_mr_to_sct(model, mr)
        imgio.save_slice(sct, out / f.name if many else out)
    return {"translated": len(files), "out": str(out)}


def _cmd_segment(a) -> dict:
    from xmodseg import imgio, segment

    model = segment.load_model(a.ckpt)
    src = Path(a.in_)
    files = _inputs(src)
    out = Path(a.out_mask)
    many = src.is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        mask = segment.segment_fat(model, imgio.load_slice(f))
        imgio.save_mask(mask, out / f.name if many else out)
    return {"segmented": len(files), "tissue": model.tissue.value, "out": str(out)}


def _pipeline_cfg(a, out_dir):
    from xmodseg.pipeline import PipelineConfig
    from xmodseg.preprocess import HuWindow

    for name in ("cgan_ckpt", "sat_ckpt", "vat_ckpt", "scale"):
        if getattr(a, name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")
    return PipelineConfig(
        cgan_ckpt=a.cgan_ckpt,
        sat_ckpt=a.sat_ckpt,
        vat_ckpt=a.vat_ckpt,
        standard_scale=a.scale,
        output_dir=out_dir,
        hu_window=HuWindow(a.hu_lo, a.hu_hi),
        seed=a.seed,
    )


def _cmd_infer(a) -> dict:
    from xmodseg import pipeline

    cfg = _pipeline_cfg(a, a.out_dir)
    models = pipeline.load_models(cfg)
    files = _inputs(Path(a.in_))
    written = []
    for f in files:
        pipeline.infer_slice(cfg, f, models)
        written.append(f.stem)
    out = Path(a.out_dir)
    produced = [p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    pipeline.write_run_manifest(out, produced)
    return {"inferred": len(written), "out_dir": str(out)}


def _cmd_evaluate(a) -> dict:
    from xmodseg import metrics

    report = metrics.eval_report(a.pred_dir, a.gt_dir, a.out)
    return {"summary": report["summary"], "out": str(a.out)}


def _cmd_run_experiment(a) -> dict:
    from xmodseg import pipeline

    cfg = _pipeline_cfg(a, a.out_dir)
    report = pipeline.run_experiment(a.manifest, cfg)
    return {"summary": report["summary"], "fidelity": report.get("fidelity"), "out_dir": str(a.out_dir)}


# --- parser ---------------------------------------------------------------------------


def _add_pipeline_flags(p) -> None:
    p.add_argument("--cgan-ckpt", type=Path)
    p.add_argument("--sat-ckpt", type=Path)
    p.add_argument("--vat-ckpt", type=Path)
    p.add_argument("--scale", type=Path, help="standard scale JSON written by 'preprocess'")
    p.add_argument("--hu-lo", type=float, default=-700.0)
    p.add_argument("--hu-hi", type=float, default=1300.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmodseg", description="MR fat segmentation via synthetic CT.")
    parser.add_argument("--version", action="version", version=f"xmodseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_, required):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", type=Path, help="key = value file; keys mirror the long flags")
        p.set_defaults(_func=func, _required=required)
        return p

    p = add("phantom-gen", _cmd_phantom_gen, "generate a synthetic phantom dataset", ("out",))
    p.add_argument("--out", type=Path)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unpaired", type=_bool, default=True)
    p.add_argument("--overwrite", type=_bool, default=False)
    p.add_argument("--sat-thickness-frac", type=float, default=0.05)
    p.add_argument("--vat-blob-count", type=int, default=6)
    p.add_argument("--vat-area-frac-target", type=float, default=0.15)
    p.add_argument("--bias-amplitude", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--geometry-jitter", type=float, default=0.08)

    p = add("preprocess", _cmd_preprocess, "bias-correct and standardize MR, window CT", ("in_", "out"))
    p.add_argument("--in", dest="in_", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--hu-lo", type=float, default=-700.0)
    p.add_argument("--hu-hi", type=float, default=1300.0)

    p = add("train-cgan", _cmd_train_cgan, "train the MR<->CT translation model", ("mr_dir", "ct_dir", "out"))
    p.add_argument("--mr-dir", type=Path)
    p.add_argument("--ct-dir", type=Path)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lr-decay-frac", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--disc-channels", type=int, default=None, help="discriminator width, default base-channels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = add("train-unet", _cmd_train_unet, "train a SAT or VAT segmentation U-Net", ("tissue", "ct_dir", "mask_dir", "out"))
    p.add_argument("--tissue", choices=["sat", "vat", "SAT", "VAT"])
    p.add_argument("--depth", type=int, default=None, help="default 3 for sat, 5 for vat")
    p.add_argument("--ct-dir", type=Path)
    p.add_argument("--mask-dir", type=Path)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = add("translate", _cmd_translate, "translate MR slices to synthetic CT", ("ckpt", "in_", "out"))
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--in", dest="in_", type=Path, help="slice file or directory")
    p.add_argument("--out", type=Path)
    p.add_argument("--scale", type=Path, default=None, help="preprocess RAW MR input with this scale")

    p = add("segment", _cmd_segment, "segment fat in CT or s-CT slices", ("ckpt", "in_", "out_mask"))
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--in", dest="in_", type=Path, help="slice file or directory")
    p.add_argument("--out-mask", type=Path)

    p = add("infer", _cmd_infer, "full MR inference: s-CT, SAT/VAT masks, overlays", ("in_", "out_dir"))
    p.add_argument("--in", dest="in_", type=Path, help="MR slice file or directory")
    p.add_argument("--out-dir", type=Path)
    _add_pipeline_flags(p)

    p = add("evaluate", _cmd_evaluate, "score predicted masks against ground truth", ("pred_dir", "gt_dir", "out"))
    p.add_argument("--pred-dir", type=Path)
    p.add_argument("--gt-dir", type=Path)
    p.add_argument("--out", type=Path)

    p = add("run-experiment", _cmd_run_experiment, "infer and evaluate a phantom test split", ("manifest", "out_dir"))
    p.add_argument("--manifest", type=Path)
    p.add_argument("--out-dir", type=Path)
    _add_pipeline_flags(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, sub, args: list[str], values: dict[str, str]) -> argparse.Namespace:
    """Re-parse with config-file values installed as defaults so flags still win."""
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    aliases = {a.option_strings[0].lstrip("-").replace("-", "_"): a.dest for a in sub._actions if a.option_strings}
    defaults = {}
    for key, raw in values.items():
        dest = aliases.get(key, key)
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}")
        action = known[dest]
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if action.choices and defaults[dest] not in action.choices:
            raise ConfigError(f"config key {key!r}: {raw!r} not in {sorted(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(args)


def _error(kind: str, msg: str) -> None:
    line = " ".join(str(msg).split())
    print(f"xmodseg: error: {kind}: {line}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config is not None:
            args = _apply_config(parser, _subparser(parser, args.command), argv, parse_config_file(args.config))
        missing = [r for r in args._required if getattr(args, r) is None]
        if missing:
            flags = ", ".join("--" + m.rstrip("_").replace("_", "-") for m in missing)
            _error("UsageError", f"{args.command}: missing required {flags}")
            return 2
        result = args._func(args)
    except XmodsegError as exc:
        _error(type(exc).__name__, exc)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        _error(type(exc).__name__, exc)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
