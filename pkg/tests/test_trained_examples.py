"""Behavioral examples that need trained models; reuse the session training run."""

import numpy as np
import pytest

from conftest import ACCEPT_SIZE
from xmodseg import imgio, metrics, phantom, pipeline
from xmodseg.imgio import Modality, Tissue
from xmodseg.phantom import FAT_HU_BAND
from xmodseg.preprocess import HuWindow

pytestmark = pytest.mark.slow

LEDGER = "see /root/notes/decisions.md (s-CT diagnosis)"


def _test_masks(run, sid):
    root = run.raw / "test" / "masks"
    return imgio.load_mask(root / "sat" / f"{sid}.png", Tissue.SAT), imgio.load_mask(root / "vat" / f"{sid}.png", Tissue.VAT)


@pytest.mark.xfail(strict=False, reason=f"s-CT fat contrast too weak; {LEDGER}")
def test_sct_fat_band_threshold_matches_true_fat(accept_run):
    accept_run.experiment()
    w = HuWindow()
    lo, hi = w.to_unit(FAT_HU_BAND[0]), w.to_unit(FAT_HU_BAND[1])
    sct_dir = accept_run.root / "experiment" / "sct"
    dices = []
    for sid in imgio.list_ids(sct_dir):
        px = imgio.load_slice(sct_dir / f"{sid}.png").pixels
        sat, vat = _test_masks(accept_run, sid)
        dices.append(metrics.dice((px >= lo) & (px <= hi), sat.pixels | vat.pixels))
    assert np.mean(dices) >= 0.75


@pytest.mark.xfail(strict=False, reason="fat-free anatomy is outside the training distribution; see /root/notes/decisions.md")
def test_zero_fat_phantom_gives_empty_masks(accept_run):
    models = pipeline.load_models(accept_run.pipeline_cfg())
    lean = phantom.PhantomParams(size=ACCEPT_SIZE, sat_thickness_frac=0.0, vat_blob_count=0, vat_area_frac_target=0.0, seed=7)
    limit = 0.005 * ACCEPT_SIZE**2
    for i in range(8):
        s = phantom.gen_sample(lean, i)
        assert not s.sat.pixels.any() and not s.vat.pixels.any()
        res = pipeline.run_inference(models, s.mr)
        assert res.sat.pixels.sum() <= limit
        assert res.vat.pixels.sum() <= limit


def test_heldout_mr_sat_dice(accept_run):
    report = accept_run.experiment()
    assert report["summary"]["sat"]["n"] >= 30
    assert report["summary"]["sat"]["dice"] >= 0.85


def test_sct_slices_written_for_every_test_mr(accept_run):
    accept_run.experiment()
    ids = imgio.list_ids(accept_run.raw / "test" / Modality.MR.value.lower())
    assert imgio.list_ids(accept_run.root / "experiment" / "sct") == ids
