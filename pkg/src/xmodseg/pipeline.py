"""End-to-end inference: MR -> bias correction -> standardization -> s-CT -> SAT/VAT masks.

Masks computed on the s-CT are returned as the MR slice's labels unchanged;
nothing on the inference path resamples, so label transfer is the identity on
the pixel grid.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from xmodseg import imgio, metrics, preprocess, segment, translate
from xmodseg.errors import ConfigError, FormatError, StageError, XmodsegError
from xmodseg.imgio import IntensityKind, Mask, Modality, Slice, Tissue
from xmodseg.preprocess import HuWindow, StandardScale

MR_STAGES = ("bias_correct", "standardize")
CT_STAGES = ("hu_window",)
FINGERPRINT_FILE = "preprocess.json"


def sub_seed(seed: int, name: str) -> int:
    """Named, independent 32-bit seed derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class PipelineConfig:
    cgan_ckpt: Path
    sat_ckpt: Path
    vat_ckpt: Path
    standard_scale: Path
    output_dir: Path
    hu_window: HuWindow = field(default_factory=HuWindow)
    seed: int = 0

    def __post_init__(self):
        for name in ("cgan_ckpt", "sat_ckpt", "vat_ckpt", "standard_scale", "output_dir"):
            setattr(self, name, Path(getattr(self, name)))


@dataclass
class Models:
    translation: translate.TranslationModel
    sat: segment.SegmentationModel
    vat: segment.SegmentationModel
    scale: StandardScale


@dataclass
class InferResult:
    sct: Slice
    sat: Mask
    vat: Mask


def mr_fingerprint(scale: StandardScale) -> dict:
    return {"modality": "MR", "stages": list(MR_STAGES), "scale_fingerprint": scale.fingerprint()}


def ct_fingerprint(window: HuWindow) -> dict:
    return {"modality": "CT", "stages": list(CT_STAGES), "hu_window": [window.lo, window.hi]}


def load_models(cfg: PipelineConfig) -> Models:
    """Load and cross-check every artifact the config references (ConfigError on any problem)."""
    missing = [str(p) for p in (cfg.cgan_ckpt, cfg.sat_ckpt, cfg.vat_ckpt, cfg.standard_scale) if not p.is_file()]
    if missing:
        raise ConfigError(f"missing files: {', '.join(missing)}")
    try:
        scale = StandardScale.load(cfg.standard_scale)
        tm = translate.load_model(cfg.cgan_ckpt)
        sat = segment.load_model(cfg.sat_ckpt)
        vat = segment.load_model(cfg.vat_ckpt)
    except (XmodsegError, OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load pipeline artifacts: {exc}") from exc
    if sat.tissue is not Tissue.SAT or vat.tissue is not Tissue.VAT:
        raise ConfigError("sat_ckpt/vat_ckpt hold the wrong tissue models")
    recorded = (tm.meta.get("preprocess") or {}).get("mr")
    if recorded and recorded.get("scale_fingerprint") != scale.fingerprint():
        raise ConfigError("standard scale does not match the one the translation model was trained with")
    expected_ct = ct_fingerprint(cfg.hu_window)
    for name, m in (("translation", tm.meta.get("preprocess", {}) or {}), ("sat", sat.meta), ("vat", vat.meta)):
        ct = m.get("ct") if name == "translation" else m.get("preprocess")
        if ct and ct.get("hu_window") != expected_ct["hu_window"]:
            raise ConfigError(f"{name} model was trained with HU window {ct.get('hu_window')}")
    return Models(tm, sat, vat, scale)


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_inference(models: Models, mr: Slice) -> InferResult:
    if mr.modality is not Modality.MR:
        raise StageError("load", FormatError(f"{mr.id!r} is {mr.modality.value}, expected MR"))
    corrected = _stage("bias_correct", preprocess.bias_correct, mr)
    std = _stage("standardize", preprocess.standardize, corrected, models.scale)
    sct = _stage("translate", translate.translate_mr_to_sct, models.translation, std)
    sat = _stage("segment_sat", segment.segment_fat, models.sat, sct)
    vat = _stage("segment_vat", segment.segment_fat, models.vat, sct)
    return InferResult(sct, sat, vat)


def _output_paths(out: Path, sid: str) -> dict[str, Path]:
    return {
        "sct": out / "sct" / f"{sid}.png",
        "sat": out / "masks" / "sat" / f"{sid}.png",
        "vat": out / "masks" / "vat" / f"{sid}.png",
        "overlay": out / "overlays" / f"{sid}.png",
    }


def write_outputs(out: Path, mr: Slice, res: InferResult) -> list[Path]:
    paths = _output_paths(out, mr.id)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    imgio.save_slice(res.sct, paths["sct"])
    imgio.save_mask(res.sat, paths["sat"])
    imgio.save_mask(res.vat, paths["vat"])
    # label transfer: s-CT masks are drawn directly on the MR grid
    imgio.render_overlay(mr, res.sat, res.vat, paths["overlay"])
    return [paths["sct"], paths["sct"].with_name(paths["sct"].name + ".json"), paths["sat"], paths["vat"], paths["overlay"]]


def infer_slice(cfg: PipelineConfig, mr_path: str | Path, models: Models | None = None) -> InferResult:
    """Infer one MR slice file and write s-CT, masks and overlay under ``cfg.output_dir``."""
    models = models or load_models(cfg)
    mr = _stage("load", imgio.load_slice, Path(mr_path))
    res = run_inference(models, mr)
    write_outputs(cfg.output_dir, mr, res)
    return res


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, files: list[Path], extra: dict | None = None) -> Path:
    entries = {str(p.relative_to(out)): _sha256(p) for p in sorted(set(files))}
    path = out / "run_manifest.json"
    path.write_text(json.dumps({"files": entries, **(extra or {})}, indent=2, sort_keys=True))
    return path


def run_experiment(
    manifest_path: str | Path,
    cfg: PipelineConfig,
    infer: Callable[[Slice], InferResult] | None = None,
) -> dict:
    """Infer every test MR slice of a phantom dataset and evaluate against its masks.

    ``infer`` replaces the trained models (useful for oracle stubs); without it
    the config's checkpoints are loaded and validated before any work starts.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        test_ids = list(manifest["splits"]["test"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"unusable manifest {manifest_path}: {exc}") from exc
    if not test_ids:
        raise ConfigError(f"manifest {manifest_path} has an empty test split")
    if infer is None:
        models = load_models(cfg)

        def infer(mr: Slice) -> InferResult:
            return run_inference(models, mr)

    root = manifest_path.parent
    out = cfg.output_dir
    if out.exists():
        for sub in ("sct", "masks", "overlays"):
            shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)

    files: list[Path] = []
    fidelity = []
    for sid in sorted(test_ids):
        mr = _stage("load", imgio.load_slice, imgio.slice_dir(root, "test", Modality.MR) / f"{sid}.png")
        res = infer(mr)
        files += write_outputs(out, mr, res)
        act_path = imgio.slice_dir(root, "test", Modality.CT) / f"{sid}.png"
        if act_path.is_file():
            act = imgio.load_slice(act_path)
            if act.intensity_kind is IntensityKind.HU:
                act = preprocess.hu_window(act, cfg.hu_window)
            fidelity.append(metrics.sct_fidelity(res.sct, act))

    gt_root = root / "test" / "masks"
    report = metrics.eval_report(out / "masks", gt_root)
    if fidelity:
        report["fidelity"] = {
            "n": len(fidelity),
            "mse": float(np.mean([f["mse"] for f in fidelity])),
            "pearson": float(np.mean([f["pearson"] for f in fidelity])),
        }
    report["config"] = {
        "manifest": manifest_path.name,
        "seed": cfg.seed,
        "hu_window": [cfg.hu_window.lo, cfg.hu_window.hi],
        "n_test": len(test_ids),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    files.append(report_path)
    write_run_manifest(out, files)
    return report


# --- dataset preprocessing -------------------------------------------------------


def preprocess_dataset(root: str | Path, out: str | Path, window: HuWindow = HuWindow()) -> dict:
    """Preprocess a phantom dataset for training.

    Fits the standard scale on bias-corrected training MR, then writes
    standardized MR and HU-windowed CT for every split, copies masks, and
    records ``scale.json`` plus a preprocessing fingerprint in every
    modality directory.
    """
    root, out = Path(root), Path(out)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = list(manifest["splits"])

    train_mr_dir = imgio.slice_dir(root, "train", Modality.MR)
    corrected = {sid: preprocess.bias_correct(imgio.load_slice(train_mr_dir / f"{sid}.png")) for sid in imgio.list_ids(train_mr_dir)}
    if len(corrected) < 2:
        raise ConfigError(f"need at least 2 training MR slices in {train_mr_dir}")
    scale = preprocess.fit_standard_scale(list(corrected.values()))
    out.mkdir(parents=True, exist_ok=True)
    scale.save(out / "scale.json")
    mr_fp, ct_fp = mr_fingerprint(scale), ct_fingerprint(window)

    counts = {}
    for split in splits:
        mr_in, ct_in = imgio.slice_dir(root, split, Modality.MR), imgio.slice_dir(root, split, Modality.CT)
        for modality, src, fp in ((Modality.MR, mr_in, mr_fp), (Modality.CT, ct_in, ct_fp)):
            ids = imgio.list_ids(src)
            if not ids:
                continue
            dst = imgio.slice_dir(out, split, modality)
            dst.mkdir(parents=True, exist_ok=True)
            for sid in ids:
                if modality is Modality.MR:
                    sl = corrected.get(sid) if split == "train" else None
                    sl = sl or preprocess.bias_correct(imgio.load_slice(src / f"{sid}.png"))
                    sl = preprocess.standardize(sl, scale)
                else:
                    sl = preprocess.hu_window(imgio.load_slice(src / f"{sid}.png"), window)
                imgio.save_slice(sl, dst / f"{sid}.png")
            (dst / FINGERPRINT_FILE).write_text(json.dumps(fp, indent=2, sort_keys=True))
            counts[f"{split}/{modality.value.lower()}"] = len(ids)
        for tissue in Tissue:
            src = imgio.mask_dir(root, split, tissue)
            if src.is_dir():
                dst = imgio.mask_dir(out, split, tissue)
                dst.mkdir(parents=True, exist_ok=True)
                for p in sorted(src.glob("*.png")):
                    shutil.copyfile(p, dst / p.name)
    summary = {"source": str(root), "counts": counts, "mr": mr_fp, "ct": ct_fp}
    (out / FINGERPRINT_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
