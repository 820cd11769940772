"""Model construction, loss structure, training, and checkpointing."""

import numpy as np
import pytest

from muse.autodiff import ContractError, ParamStore
from muse.data import make_synthetic_bars
from muse.model import (ModalitySpec, MuseModel, TrainConfig, VARIANTS,
                        build_variant, load_checkpoint, save_checkpoint,
                        _strict_subsets)
from muse.rng import make_rng


def _small_specs():
    return [
        ModalitySpec("image", 64, "bernoulli", latent_dim=6,
                     enc_widths=(16,), dec_widths=(16,)),
        ModalitySpec("angle", 2, "gaussian", latent_dim=3, lam=50.0,
                     enc_widths=(8,), dec_widths=(8,), activation="relu"),
    ]


def _small_model(variant="muse", seed=0, delta=1.0):
    return MuseModel(_small_specs(), top_latent_dim=4, variant=variant,
                     top_widths=(16,), seed=seed, delta=delta)


def _small_batch(n=4, seed=0):
    ds = make_synthetic_bars(n, image_size=8, seed=seed)
    return dict(ds.modalities)


def test_strict_subsets_enumeration():
    assert _strict_subsets(["a"]) == []
    assert _strict_subsets(["a", "b"]) == [("a",), ("b",)]
    got = _strict_subsets(["a", "b", "c"])
    assert len(got) == 6  # 2^3 - full set - empty set
    assert ("a", "c") in got


def test_all_variants_build_and_produce_finite_losses():
    batch = _small_batch()
    for variant in VARIANTS:
        model = build_variant(variant, _small_specs(), top_latent_dim=4,
                              top_widths=(16,), seed=0)
        terms = model.loss_terms(batch, make_rng(0, 1))
        for name, t in terms.items():
            assert np.isfinite(t.value), f"{variant}:{name}"


def test_loss_decomposition_total_is_sum():
    model = _small_model()
    batch = _small_batch()
    terms = model.loss_terms(batch, make_rng(0, 1))
    total = float(terms["bottom"].value) + float(terms["top"].value) \
        + float(terms["alma"].value)
    assert float(terms["total"].value) == pytest.approx(total, rel=1e-12)


def test_muse_a_forces_delta_zero():
    model = _small_model("muse_a", delta=1.0)
    assert model.delta == 0.0
    terms = model.loss_terms(_small_batch(), make_rng(0, 1))
    assert float(terms["alma"].value) == 0.0


def test_alma_positive_for_muse():
    model = _small_model("muse")
    terms = model.loss_terms(_small_batch(), make_rng(0, 1))
    assert float(terms["alma"].value) > 0.0


def test_stop_gradient_isolates_bottom_parameters():
    """Top + ALMA gradients with respect to bottom-level parameters are
    exactly zero: the codes feeding the top level are detached."""
    model = _small_model()
    batch = _small_batch()
    bound = model.params.bind()
    terms = model.loss_terms(batch, make_rng(0, 1), bound=bound)
    (terms["top"] + terms["alma"]).backward()
    for name, t in bound.items():
        if ".enc." in name or ".dec." in name:
            assert t.grad is None or not np.any(t.grad), name
    # and the total loss does reach them (through the bottom term)
    bound = model.params.bind()
    model.loss_terms(batch, make_rng(0, 1), bound=bound)["total"].backward()
    touched = [n for n, t in bound.items()
               if (".enc." in n) and t.grad is not None and np.any(t.grad)]
    assert touched


def test_bernoulli_bottom_loss_hand_computed_one_pixel():
    """Single 1-pixel Bernoulli modality with hand-set affine parameters."""
    spec = ModalitySpec("pix", 1, "bernoulli", latent_dim=1,
                        enc_widths=(), dec_widths=(), lam=1.0, alpha=1.0)
    model = MuseModel([spec], top_latent_dim=1, top_widths=(), seed=0, delta=0.0)
    p = model.params
    # posterior q = N(0.2 x, e^{-0.4}); decoder logit = 0.5 z + 0.1
    p["pix.enc.Wout0"] = np.array([[0.2]])
    p["pix.enc.bout0"] = np.array([[0.0]])
    p["pix.enc.Wout1"] = np.array([[0.0]])
    p["pix.enc.bout1"] = np.array([[-0.4]])
    p["pix.dec.Wout"] = np.array([[0.5]])
    p["pix.dec.bout"] = np.array([[0.1]])

    x = 1.0
    rng = make_rng(0, 2)
    eps = make_rng(0, 2).standard_normal((1, 1))[0, 0]
    mu, logvar = 0.2 * x, -0.4
    z = mu + np.exp(0.5 * logvar) * eps
    logit = 0.5 * z + 0.1
    bce = np.log1p(np.exp(-abs(logit))) + max(logit, 0.0) - logit * x
    kl = 0.5 * (mu ** 2 + np.exp(logvar) - 1.0 - logvar)
    terms = model.loss_terms({"pix": np.array([[x]])}, rng)
    assert float(terms["bottom"].value) == pytest.approx(bce + kl, rel=1e-10)


def test_top_loss_hand_computed_codes():
    """1-D codes, hand-set top parameters: code reconstruction + beta KL."""
    spec = ModalitySpec("pix", 1, "gaussian", latent_dim=1, gamma=10.0,
                        enc_widths=(), dec_widths=(), lam=0.0, alpha=0.0)
    model = MuseModel([spec], top_latent_dim=1, top_widths=(), seed=0,
                      beta=1.0, delta=0.0)
    p = model.params
    for name in ("pix.enc.Wout0", "pix.enc.Wout1", "pix.enc.bout0",
                 "pix.enc.bout1", "pix.dec.Wout"):
        p[name] = np.zeros_like(p[name])
    p["pix.enc.bout1"] = np.array([[-60.0]])  # deterministic code z = mean = 0
    p["pix.top_enc.Wout0"] = np.array([[0.7]])
    p["pix.top_enc.bout0"] = np.array([[0.3]])
    p["pix.top_enc.Wout1"] = np.array([[0.0]])
    p["pix.top_enc.bout1"] = np.array([[0.0]])
    p["pix.top_dec.Wout"] = np.array([[1.0]])
    p["pix.top_dec.bout"] = np.array([[0.2]])

    code = 0.0  # z collapses to the posterior mean 0
    # expert: N(0.3, 1); PoE with prior: precision 2, mean 0.15, var 0.5
    mu, var = 0.15, 0.5
    oracle_rng = make_rng(0, 3)
    oracle_rng.standard_normal((1, 1))  # bottom-level noise is drawn first
    eps = oracle_rng.standard_normal((1, 1))[0, 0]
    z_pi = mu + np.sqrt(var) * eps
    kl = 0.5 * (mu ** 2 + var - 1.0 - np.log(var))
    c_hat = 1.0 * z_pi + 0.2
    want = kl + 10.0 * 0.5 * (c_hat - code) ** 2
    terms = model.loss_terms({"pix": np.array([[0.0]])}, make_rng(0, 3))
    assert float(terms["top"].value) == pytest.approx(want, rel=1e-8)


def test_encode_multimodal_empty_is_prior():
    model = _small_model()
    q = model.encode_multimodal({})
    np.testing.assert_allclose(q.mean.value, 0.0)
    np.testing.assert_allclose(q.logvar.value, 0.0)


def test_subset_posterior_has_lower_precision():
    model = _small_model()
    batch = _small_batch()
    codes = {s.name: model.code_of(s, batch[s.name]).value
             for s in model.modalities}
    q_full = model.encode_multimodal(codes)
    q_one = model.encode_multimodal({"image": codes["image"]})
    # dropping an expert can only remove precision
    assert np.all(np.exp(-q_one.logvar.value) <= np.exp(-q_full.logvar.value) + 1e-12)


def test_fit_reduces_loss_and_is_deterministic():
    ds = make_synthetic_bars(64, image_size=8, seed=0)
    cfg = TrainConfig(epochs=6, batch_size=16, seed=0)
    model_a = _small_model(seed=0)
    log_a = model_a.fit(ds, cfg)
    assert log_a[5]["total"] < log_a[0]["total"]
    model_b = _small_model(seed=0)
    model_b.fit(ds, cfg)
    assert model_a.params.checksum() == model_b.params.checksum()
    model_c = _small_model(seed=1)
    model_c.fit(ds, TrainConfig(epochs=6, batch_size=16, seed=1))
    assert model_a.params.checksum() != model_c.params.checksum()


def test_cross_modal_generate_shapes_and_range():
    model = _small_model()
    batch = _small_batch(6)
    out = model.cross_modal_generate({"angle": batch["angle"]}, "image")
    assert out.shape == (6, 64)
    assert out.min() >= 0.0 and out.max() <= 1.0  # bernoulli probabilities
    back = model.cross_modal_generate({"image": batch["image"]}, "angle")
    assert back.shape == (6, 2)
    with pytest.raises(ContractError):
        model.cross_modal_generate({}, "image")


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    model = _small_model(seed=4)
    model.fit(make_synthetic_bars(32, image_size=8, seed=0),
              TrainConfig(epochs=1, batch_size=16, seed=0))
    prefix = str(tmp_path / "ck")
    save_checkpoint(model, prefix)
    loaded = load_checkpoint(prefix)
    assert loaded.variant == model.variant
    assert loaded.params.checksum() == model.params.checksum()
    save_checkpoint(loaded, str(tmp_path / "ck2"))
    assert (tmp_path / "ck.pst").read_bytes() == (tmp_path / "ck2.pst").read_bytes()
    assert (tmp_path / "ck.meta").read_bytes() == (tmp_path / "ck2.meta").read_bytes()


def test_flat_variants_reject_bottom_apis():
    model = _small_model("fusion_vae")
    with pytest.raises(ContractError):
        model.encode_modality("image", np.zeros((1, 64)))
    model = _small_model("muse_h")
    with pytest.raises(ContractError):
        model.decode_modality("image", np.zeros((1, 6)))


def test_contract_errors():
    with pytest.raises(ContractError):
        build_variant("nope", _small_specs())
    with pytest.raises(ContractError):
        ModalitySpec("x", 3, "poisson")
    model = _small_model()
    with pytest.raises(ContractError):
        model.spec("missing")
    with pytest.raises(ContractError):
        model.encode_modality("image", np.zeros((1, 63)))
    with pytest.raises(ContractError):
        model.code_of("image", np.zeros((1, 64)), mode="sampled")  # no rng
