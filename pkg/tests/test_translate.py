import numpy as np
import pytest
import torch

from xmodseg import diffnet as dn
from xmodseg import translate as tr
from xmodseg.errors import FormatError, ValidationError
from xmodseg.imgio import IntensityKind, Modality, Slice
from xmodseg.translate import CganTrainConfig, LossConfig, TranslationModel


def _f(t):
    return float(t.detach())


def _images(n=2, size=16, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, size, size, generator=g, dtype=dtype), torch.rand(n, 1, size, size, generator=g, dtype=dtype)


def _identity_model(d_value=1.0, cfg=None):
    f64 = torch.float64
    return TranslationModel(
        dn.identity_network(dtype=f64), dn.identity_network(dtype=f64),
        dn.constant_network(d_value, dtype=f64), dn.constant_network(d_value, dtype=f64), cfg or LossConfig(),
    )


def _micro(seed=0, cfg=None):
    return tr.build_cgan(16, base_channels=1, loss_cfg=cfg, seed=seed).astype(torch.float64)


def _oracle_gen_loss(model, I_A, I_B):
    """Generator objective spelled out term by term, without the library's helpers."""
    a, b = model.loss_cfg.alpha, model.loss_cfg.beta
    I_AB, I_BA = model.G_B(I_A), model.G_A(I_B)
    I_ABA, I_BAB = model.G_A(I_AB), model.G_B(I_BA)
    m = lambda x, y: ((x - y) ** 2).mean()
    return (
        ((1 - model.D_B(I_AB)) ** 2).mean()
        + ((1 - model.D_A(I_BA)) ** 2).mean()
        + a * (m(I_ABA, I_A) + m(I_BAB, I_B))
        + b * (m(I_BA, I_B) + m(I_AB, I_A))
    )


def test_loss_config_validation():
    with pytest.raises(ValidationError):
        LossConfig(alpha=-1)
    assert LossConfig() == LossConfig(10.0, 2.0)


def test_identity_generators_unit_discriminators_exact_zero():
    I_A, I_B = _images()
    m = _identity_model()
    assert _f(tr.gen_loss(tr.cycle_forward(m, I_A, I_B), m)) == 0.0


def test_identity_generators_half_discriminators():
    I_A, I_B = _images()
    m = _identity_model(0.5)
    batch = tr.cycle_forward(m, I_A, I_B)
    assert _f(tr.gen_loss(batch, m)) == pytest.approx(0.5, abs=1e-12)
    # real 0.25 + fake 0.25 per discriminator
    assert _f(tr.disc_loss(m, I_A, I_B, batch.I_AB, batch.I_BA)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("alpha,beta", [(10, 2), (0, 0), (1.5, 0), (0, 3)])
def test_gen_loss_matches_oracle(alpha, beta):
    m = _micro(seed=int(alpha * 10 + beta), cfg=LossConfig(alpha, beta))
    I_A, I_B = _images(seed=1)
    got = _f(tr.gen_loss(tr.cycle_forward(m, I_A, I_B), m))
    assert got == pytest.approx(_f(_oracle_gen_loss(m, I_A, I_B)), abs=1e-6)


def test_gen_loss_swap_symmetry():
    m = _micro(seed=4)
    I_A, I_B = _images(seed=2)
    swapped = TranslationModel(m.G_B, m.G_A, m.D_B, m.D_A, m.loss_cfg)
    a = tr.gen_loss(tr.cycle_forward(m, I_A, I_B), m)
    b = tr.gen_loss(tr.cycle_forward(swapped, I_B, I_A), swapped)
    assert _f(a) == pytest.approx(_f(b), abs=1e-12)


def test_losses_isolate_gradients():
    m = _micro(seed=3)
    I_A, I_B = _images(seed=3)
    batch = tr.cycle_forward(m, I_A, I_B)
    g = dn.backward(tr.gen_loss(batch, m), m.generator_params() + m.discriminator_params())
    assert all(torch.count_nonzero(t) == 0 for t in g[len(m.generator_params()):])
    d = dn.backward(tr.disc_loss(m, I_A, I_B, batch.I_AB, batch.I_BA), m.generator_params() + m.discriminator_params())
    assert all(torch.count_nonzero(t) == 0 for t in d[: len(m.generator_params())])


def test_gradcheck_gen_and_disc_micro():
    m = _micro(seed=5)
    assert sum(n.param_count() for n in m.networks().values()) <= 5000
    I_A, I_B = _images(seed=5)

    def g():
        return tr.gen_loss(tr.cycle_forward(m, I_A, I_B), m)

    def d():
        b = tr.cycle_forward(m, I_A, I_B)
        return tr.disc_loss(m, I_A, I_B, b.I_AB, b.I_BA)

    assert dn.gradcheck(g, m.generator_params(), n_probes=20, h=1e-3) <= 1e-4
    assert dn.gradcheck(d, m.discriminator_params(), n_probes=20, h=1e-3) <= 1e-4


def test_shape_validation():
    m = _micro()
    with pytest.raises(ValidationError):
        tr.cycle_forward(m, *_images(size=18))
    a, _ = _images()
    b, _ = _images(n=3)
    with pytest.raises(ValidationError):
        tr.cycle_forward(m, a, b)
    with pytest.raises(ValidationError):
        tr.build_cgan(63)
    with pytest.raises(ValidationError):
        tr.build_cgan(12)


def test_build_is_seeded_and_sizes_preserved():
    a, b = tr.build_cgan(32, 2, seed=1), tr.build_cgan(32, 2, seed=1)
    for name in a.networks():
        assert np.array_equal(a.networks()[name].flat_params(), b.networks()[name].flat_params())
    assert not np.array_equal(a.G_A.flat_params(), tr.build_cgan(32, 2, seed=2).G_A.flat_params())
    x = torch.rand(1, 1, 32, 32)
    assert a.G_B(x).shape == x.shape
    assert a.D_B(x).shape == (1, 1, 8, 8)
    assert a.G_B.param_count() == dn.count_params(tr.generator_layers(2))


def test_to_network_array():
    px = np.full((16, 16), 500.0)
    assert np.allclose(tr.to_network_array(Slice(px, Modality.MR, IntensityKind.STANDARDIZED)), 0.5)
    with pytest.raises(ValidationError):
        tr.to_network_array(Slice(px, Modality.MR, IntensityKind.RAW))


def test_translate_output_contract():
    m = tr.build_cgan(16, 2)
    mr = Slice(np.linspace(0, 1000, 256).reshape(16, 16), Modality.MR, IntensityKind.STANDARDIZED, (1.5, 1.5), "x")
    out = tr.translate_mr_to_sct(m, mr)
    assert out.modality is Modality.SCT and out.intensity_kind is IntensityKind.NORM01
    assert out.shape == mr.shape and out.id == "x" and out.spacing_mm == (1.5, 1.5)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1
    with pytest.raises(ValidationError):
        tr.translate_mr_to_sct(m, Slice(np.zeros((16, 16)), Modality.CT, IntensityKind.NORM01))
    with pytest.raises(ValidationError):
        tr.translate_mr_to_sct(m, mr.replace(pixels=np.zeros((18, 18))))


def test_save_load_roundtrip(tmp_path):
    m = tr.build_cgan(16, 2, LossConfig(3.0, 0.5), seed=7)
    tr.save_model(m, tmp_path / "m.ckpt")
    back = tr.load_model(tmp_path / "m.ckpt")
    assert back.loss_cfg == m.loss_cfg and back.meta["seed"] == 7
    x = torch.rand(1, 1, 16, 16)
    assert torch.equal(back.G_B(x), m.G_B(x))
    dn.save_checkpoint(tmp_path / "other.ckpt", {"net": m.G_A}, {"kind": "unet"})
    with pytest.raises(FormatError):
        tr.load_model(tmp_path / "other.ckpt")


def test_lr_schedule():
    cfg = CganTrainConfig(epochs=10, lr=1.0, lr_decay_frac=0.5)
    lrs = [cfg.lr_at(e) for e in range(10)]
    assert lrs[:5] == [1.0] * 5
    assert all(a > b for a, b in zip(lrs[4:], lrs[5:])) and lrs[-1] > 0
    assert CganTrainConfig(epochs=10, lr=1.0).lr_at(9) == 1.0


def _arrays(n, seed, size=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, size, size)).astype(np.float32)


def test_zero_epochs_returns_initial_model():
    cfg = CganTrainConfig(epochs=0, base_channels=2, seed=3)
    m, rep = tr.train_cgan_arrays(_arrays(4, 0), _arrays(4, 1), cfg)
    init = tr.build_cgan(16, 2, seed=3)
    assert np.array_equal(m.G_B.flat_params(), init.G_B.flat_params())
    assert rep["losses"]["gen_total"] == []


def test_short_training_is_deterministic_and_reports(tmp_path):
    cfg = CganTrainConfig(epochs=2, batch_size=2, base_channels=2, lr=1e-3)
    mr, ct = _arrays(5, 0), _arrays(3, 1)
    seen = []
    m1, r1 = tr.train_cgan_arrays(mr, ct, cfg, on_epoch=lambda e, v: seen.append(e))
    m2, r2 = tr.train_cgan_arrays(mr, ct, cfg)
    assert seen == [0, 1]
    assert r1 == r2 and r1["steps_per_epoch"] == 3
    assert set(r1["losses"]) == {*tr.LOSS_TERMS, "gen_total", "disc_total"}
    assert all(len(v) == 2 and np.all(np.isfinite(v)) for v in r1["losses"].values())
    tr.save_model(m1, tmp_path / "a.ckpt")
    tr.save_model(m2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not np.array_equal(m1.G_B.flat_params(), tr.build_cgan(16, 2).G_B.flat_params())


def test_training_validates_inputs():
    with pytest.raises(ValidationError):
        tr.train_cgan_arrays(_arrays(0, 0), _arrays(2, 0), CganTrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        tr.train_cgan_arrays(_arrays(2, 0), _arrays(2, 0, size=20), CganTrainConfig(epochs=1))


def test_divergence_restores_parameters():
    m = tr.build_cgan(16, 2)
    good = [p.detach().clone() for n in m.networks().values() for p in n.params]
    with torch.no_grad():
        m.G_A.params[0].fill_(float("nan"))
    with pytest.raises(tr.TrainingDiverged):
        tr._guard_finite(torch.tensor(float("nan")), m, good)
    assert torch.all(torch.isfinite(m.G_A.params[0]))


def test_disc_channels_widens_only_discriminators():
    narrow = tr.build_cgan(16, base_channels=2, seed=1)
    wide = tr.build_cgan(16, base_channels=2, seed=1, disc_channels=6)
    assert wide.G_A.param_count() == narrow.G_A.param_count()
    assert wide.D_A.param_count() > narrow.D_A.param_count()
    assert narrow.meta["disc_channels"] == 2 and wide.meta["disc_channels"] == 6
    with pytest.raises(ValidationError):
        tr.build_cgan(16, base_channels=2, disc_channels=0)
