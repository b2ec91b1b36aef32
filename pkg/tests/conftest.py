"""Shared fixtures for the desk-scale training runs.

Trained artifacts are built once per session and reused by the acceptance
suite and by the slow end-to-end checks. Every run writes into its own
directory so a second, independent build can be compared byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from xmodseg import phantom, pipeline, segment, translate
from xmodseg.imgio import Modality, Tissue
from xmodseg.preprocess import HuWindow

ACCEPT_SIZE = 64
# 236 slices -> 200 translation-train slices per domain, 36 paired test slices,
# 212 / 24 labeled CT slices for the segmenters
ACCEPT_N = 236
SEED = 0
# short SAT training transfers better from CT to s-CT; VAT needs the longer run
SEG_EPOCHS = {Tissue.SAT: 5, Tissue.VAT: 30}
SEG_TRAIN = dict(batch_size=8, lr=1e-3)
CGAN_TRAIN = dict(epochs=30, batch_size=8, lr=3e-3, base_channels=8, disc_channels=32)

_LOG_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LOG_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LOG_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion_log(request):
    """``log(n, passed, detail)`` prints and records one pass/fail line for criterion ``n``."""

    def log(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        request.config.stash[_LOG_KEY].append(line)

    return log


@dataclass
class Run:
    """One complete desk-scale build: data, preprocessing, models and experiment."""

    root: Path
    timings: dict[str, float] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)

    @property
    def raw(self) -> Path:
        return self.root / "raw"

    @property
    def pre(self) -> Path:
        return self.root / "pre"

    def ckpt(self, name: str) -> Path:
        return self.root / "models" / f"{name}.ckpt"

    def timed(self, name: str, fn, *args):
        t = time.process_time()
        out = fn(*args)
        self.timings[name] = time.process_time() - t
        return out

    def prepare(self) -> Run:
        params = phantom.PhantomParams(size=ACCEPT_SIZE, seed=SEED)
        phantom.gen_dataset(params, ACCEPT_N, unpaired=True, root=self.raw)
        pipeline.preprocess_dataset(self.raw, self.pre, HuWindow())
        (self.root / "models").mkdir(parents=True, exist_ok=True)
        return self

    def train_unet(self, tissue: Tissue) -> Path:
        name = tissue.value.lower()
        out = self.ckpt(name)
        if out.is_file():
            return out
        cfg = segment.UNetConfig(segment.DEFAULT_DEPTH[tissue], 8, ACCEPT_SIZE, tissue)
        train_cfg = segment.SegTrainConfig(epochs=SEG_EPOCHS[tissue], seed=SEED, **SEG_TRAIN)
        ct_dir = self.pre / "seg_train" / "ct"
        mask_dir = self.pre / "seg_train" / "masks" / name
        self.reports[name] = self.timed(
            name, segment.train_unet, ct_dir, mask_dir, cfg, segment.AugmentSpec(), train_cfg, out
        )
        return out

    def train_cgan(self, beta: float) -> Path:
        name = f"cgan_beta{beta:g}"
        out = self.ckpt(name)
        if out.is_file():
            return out
        cfg = translate.CganTrainConfig(loss_cfg=translate.LossConfig(10.0, beta), seed=SEED, **CGAN_TRAIN)
        mr_dir = self.pre / "train" / Modality.MR.value.lower()
        ct_dir = self.pre / "train" / Modality.CT.value.lower()
        self.reports[name] = self.timed(name, translate.train_cgan, mr_dir, ct_dir, cfg, out)
        return out

    def pipeline_cfg(self) -> pipeline.PipelineConfig:
        return pipeline.PipelineConfig(
            cgan_ckpt=self.train_cgan(2.0),
            sat_ckpt=self.train_unet(Tissue.SAT),
            vat_ckpt=self.train_unet(Tissue.VAT),
            standard_scale=self.pre / "scale.json",
            output_dir=self.root / "experiment",
            seed=SEED,
        )

    def experiment(self) -> dict:
        if "experiment" not in self.reports:
            cfg = self.pipeline_cfg()
            self.reports["experiment"] = self.timed("experiment", pipeline.run_experiment, self.raw / "manifest.json", cfg)
        return self.reports["experiment"]

    def artifacts(self) -> dict[str, bytes]:
        """Every checkpoint, training report and experiment report, keyed by relative path."""
        files = sorted((self.root / "models").glob("*")) + [
            self.root / "experiment" / "report.json",
            self.root / "experiment" / "run_manifest.json",
        ]
        return {str(p.relative_to(self.root)): p.read_bytes() for p in files}


@pytest.fixture(scope="session")
def accept_run(tmp_path_factory) -> Run:
    return Run(tmp_path_factory.mktemp("accept_a")).prepare()


@pytest.fixture(scope="session")
def accept_rerun(tmp_path_factory) -> Run:
    return Run(tmp_path_factory.mktemp("accept_b")).prepare()


def load_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())
