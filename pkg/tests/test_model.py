"""Model assembly, likelihood oracles, invertibility, sampling, checkpoints."""

import warnings

import numpy as np
import pytest

from ncsr.model import (ConfigError, ModelConfig, NCSRModel, load_checkpoint,
                        save_checkpoint)
from ncsr.rng import Rng
from ncsr.tensor import ShapeError, Tensor, backward, no_grad
from ncsr.verify import randomize_parameters, small_config

LN2 = np.log(2.0)


def tiny_model(seed=1, **overrides):
    kwargs = dict(scale_factor=2, levels=1, flow_steps=1, encoder_blocks=1,
                  encoder_width=8, coupling_hidden=8)
    kwargs.update(overrides)
    return NCSRModel(ModelConfig(**kwargs), Rng(seed))


def data_for(model, rng, hr=8, batch=1):
    s = model.config.scale_factor
    x = Tensor(rng.uniform((batch, 3, hr, hr)))
    y = Tensor(rng.uniform((batch, 3, hr // s, hr // s)))
    v = Tensor(rng.gaussian((batch, 3, hr, hr), 0.05))
    return x, y, v


# ---------------------------------------------------------------------------
# build contracts
# ---------------------------------------------------------------------------

def test_build_and_backward_smoke():
    model = tiny_model()
    x, y, v = data_for(model, Rng(2), hr=16)
    loss, info = model.nll(x, y, v)
    model.zero_grad()
    backward(loss)
    grads = [p.grad for _n, p in model.named_parameters() if p.grad is not None]
    assert grads and all(np.isfinite(g).all() for g in grads)
    assert np.isfinite(info["bits_per_dim"]).all()


def test_noise_free_block_rule_strict_and_permissive():
    with pytest.raises(ConfigError, match="noise-free"):
        ModelConfig(levels=3, ncl_blocks=(1, 2, 3)).validate()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ModelConfig(levels=3, ncl_blocks=(1, 2, 3), strict_noise_free=False).validate()
    assert any("noise-free" in str(w.message) for w in caught)
    # conditioning none is exempt: there is no noise layer to misplace
    ModelConfig(levels=1, ncl_blocks=(), conditioning="none").validate()


def test_default_ncl_blocks_avoid_last_block():
    assert ModelConfig(levels=3).resolved_ncl_blocks() == {1, 2}
    assert ModelConfig(levels=2).resolved_ncl_blocks() == {1}
    assert ModelConfig(levels=1).resolved_ncl_blocks() == set()


def test_ncl_placement_follows_inference_order():
    cfg = ModelConfig(scale_factor=2, levels=3, flow_steps=1, encoder_blocks=1,
                      encoder_width=8, coupling_hidden=8, ncl_blocks=(1, 2))
    model = NCSRModel(cfg, Rng(0))
    # inference block 1 = forward level 3 (deepest); last forward level 1 is noise-free
    has_ncl = [level.steps[0].noise_couple is not None for level in model.levels]
    assert has_ncl == [False, True, True]


def test_parameter_table_is_structure_determined():
    a = tiny_model(seed=1, levels=2)
    b = tiny_model(seed=99, levels=2)
    names_a = [n for n, _ in a.named_parameters()]
    names_b = [n for n, _ in b.named_parameters()]
    assert names_a == names_b
    for (name, pa), (_n, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.shape == pb.shape
        if name.endswith("mix.weight"):
            assert not np.array_equal(pa.data, pb.data)
        else:
            assert np.array_equal(pa.data, pb.data)


def test_invalid_configs_rejected():
    for kwargs in ({"scale_factor": 3}, {"levels": 0}, {"flow_steps": 0},
                   {"conditioning": "bogus"}, {"noise_bound": -1.0},
                   {"ncl_blocks": (5,)}, {"split_prior": "weird"}):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs).validate()
    with pytest.raises(ConfigError):
        ModelConfig().validate_patch(40)  # not divisible by 4 * 2^3


# ---------------------------------------------------------------------------
# likelihood oracles
# ---------------------------------------------------------------------------

def test_nll_matches_hand_assembled_two_mix_oracle():
    """At identity-start the flow is squeeze + two channel mixings; score by hand."""
    model = tiny_model(seed=3)
    rng = Rng(4)
    x, y, v = data_for(model, rng, hr=4)
    loss, info = model.nll(x, y, v)

    # hand assembly with raw numpy
    n, _c, h, w = x.shape
    blocks = x.data.reshape(n, 3, h // 2, 2, w // 2, 2)
    hsq = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, 12, h // 2, w // 2)
    w_t = model.levels[0].transition.mix.weight.data[:, :, 0, 0]
    w_s = model.levels[0].steps[0].mix.weight.data[:, :, 0, 0]
    z = np.einsum("oc,nchw->nohw", w_s, np.einsum("oc,nchw->nohw", w_t, hsq))
    spatial = (h // 2) * (w // 2)
    logdet = spatial * (np.log(abs(np.linalg.det(w_t))) + np.log(abs(np.linalg.det(w_s))))
    logp = -0.5 * (z**2).sum() - 0.5 * z.size * np.log(2 * np.pi)
    dims = 3 * h * w
    expected_bits = -(logp + logdet) / (LN2 * dims)
    assert abs(loss.item() - expected_bits) < 1e-8


def test_nll_batch_permutation_exact():
    model = tiny_model(seed=5, levels=2)
    randomize_parameters(model, Rng(6))
    rng = Rng(7)
    x, y, v = data_for(model, rng, hr=8, batch=3)
    _l, info = model.nll(x, y, v)
    perm = [2, 0, 1]
    xp = Tensor(x.data[perm])
    yp = Tensor(y.data[perm])
    vp = Tensor(v.data[perm])
    _l2, info2 = model.nll(xp, yp, vp)
    assert np.array_equal(info2["bits_per_dim"], info["bits_per_dim"][perm])


def test_extra_mixing_determinant_shifts_bits_exactly():
    """Frozen-latent probe: z stays 0 for x = 0 under linear identity layers,
    so a det-2 mixing changes bits/dim by exactly its log-det share."""
    base = tiny_model(seed=8)
    boosted = tiny_model(seed=8)
    for model in (base, boosted):
        for name, p in model.named_parameters():
            if name.endswith("mix.weight"):
                p.data = np.eye(p.shape[0])[:, :, None, None]
    diag = np.eye(12)
    diag[0, 0] = 2.0
    boosted.levels[0].transition.mix.weight.data = diag[:, :, None, None]

    x = Tensor(np.zeros((1, 3, 4, 4)))
    y = Tensor(np.zeros((1, 3, 2, 2)))
    b0, _ = base.nll(x, y)
    b1, _ = boosted.nll(x, y)
    spatial, dims = 4, 48
    expected_delta = -spatial * np.log(2.0) / (LN2 * dims)  # = -1/12
    assert abs((b1.item() - b0.item()) - expected_delta) < 1e-12
    assert abs(expected_delta + 1.0 / 12.0) < 1e-15


def test_changing_y_changes_nll_but_v_is_inert_when_unconditioned():
    model = NCSRModel(small_config(conditioning="none"), Rng(9))
    randomize_parameters(model, Rng(10))
    rng = Rng(11)
    x, y, v = data_for(model, rng, hr=16, batch=2)
    l1, _ = model.nll(x, y, v)
    y2 = Tensor(Rng(12).uniform(y.shape))
    l2, _ = model.nll(x, y2, v)
    assert l1.item() != l2.item()
    v2 = Tensor(Rng(13).gaussian(v.shape, 0.3))
    l3, _ = model.nll(x, y, v2)
    assert l3.item() == l1.item()  # bitwise inert


def test_changing_v_changes_nll_when_noise_conditioned():
    model = NCSRModel(small_config(conditioning="noise"), Rng(14))
    randomize_parameters(model, Rng(15))
    rng = Rng(16)
    x, y, v = data_for(model, rng, hr=16)
    l1, _ = model.nll(x, y, v)
    l2, _ = model.nll(x, y, Tensor(Rng(17).gaussian(v.shape, 0.3)))
    assert l1.item() != l2.item()


def test_std_conditioning_variant_runs_and_reacts_to_noise_magnitude():
    model = NCSRModel(small_config(conditioning="std"), Rng(18))
    randomize_parameters(model, Rng(19))
    rng = Rng(20)
    x, y, _ = data_for(model, rng, hr=16)
    small = Tensor(Rng(21).gaussian(x.shape, 0.01))
    large = Tensor(Rng(21).gaussian(x.shape, 0.3))
    l1, _ = model.nll(x, y, small)
    l2, _ = model.nll(x, y, large)
    assert l1.item() != l2.item()


# ---------------------------------------------------------------------------
# invertibility and sampling
# ---------------------------------------------------------------------------

def test_model_roundtrip_across_configs():
    combos = [
        dict(scale_factor=2, levels=1, conditioning="noise"),
        dict(scale_factor=2, levels=3, conditioning="std"),
        dict(scale_factor=4, levels=2, conditioning="none"),
    ]
    for i, combo in enumerate(combos):
        cfg = ModelConfig(flow_steps=2, encoder_blocks=1, encoder_width=8,
                          coupling_hidden=8, **combo)
        model = NCSRModel(cfg, Rng(30 + i))
        randomize_parameters(model, Rng(40 + i), amplitude=0.05)
        rng = Rng(50 + i)
        hr = cfg.scale_factor * 2**cfg.levels
        x, y, v = data_for(model, rng, hr=hr * 2)
        with no_grad():
            _l, info = model.nll(x, y, v, collect_latents=True)
        xr = model.inverse_from_latents(info["latents"], y, v)
        assert np.abs(xr.data - x.data).max() < 1e-8


def test_sample_temperature_zero_is_deterministic_mode():
    model = NCSRModel(small_config(), Rng(60))
    randomize_parameters(model, Rng(61))
    y = Tensor(Rng(62).uniform((1, 3, 8, 8)))
    samples = model.sample(y, temperature=0.0, n_samples=3)
    assert np.array_equal(samples[0].data, samples[1].data)
    assert np.array_equal(samples[1].data, samples[2].data)
    assert samples[0].shape == (1, 3, 16, 16)


def test_sample_positive_temperature_varies_with_seed():
    model = NCSRModel(small_config(), Rng(63))
    randomize_parameters(model, Rng(64))
    y = Tensor(Rng(65).uniform((1, 3, 8, 8)))
    s1 = model.sample(y, temperature=0.9, rng=Rng(1), n_samples=1)[0]
    s2 = model.sample(y, temperature=0.9, rng=Rng(2), n_samples=1)[0]
    assert np.abs(s1.data - s2.data).max() > 0
    assert s1.data.min() >= 0.0 and s1.data.max() <= 1.0


def test_sample_then_nll_recovers_drawn_latents():
    model = NCSRModel(small_config(), Rng(66))
    randomize_parameters(model, Rng(67), amplitude=0.05)
    y = Tensor(Rng(68).uniform((1, 3, 8, 8)))
    outs, latents = model.sample(y, temperature=0.9, rng=Rng(69), n_samples=1,
                                 clamp=False, collect_latents=True)
    _l, info = model.nll(outs[0], y, Tensor(np.zeros(outs[0].shape)),
                         collect_latents=True)
    for drawn, recovered in zip(latents[0], info["latents"]):
        assert np.abs(drawn.data - recovered.data).max() < 1e-6


def test_identity_start_decodes_prior_mean_to_zero_image():
    model = tiny_model(seed=70, levels=2)
    for name, p in model.named_parameters():
        if name.endswith("mix.weight"):
            p.data = np.eye(p.shape[0])[:, :, None, None]
    y = Tensor(Rng(71).uniform((1, 3, 8, 8)))
    out = model.sample(y, temperature=0.0, n_samples=1)[0]
    assert np.array_equal(out.data, np.zeros((1, 3, 16, 16)))


def test_sample_requires_rng_for_positive_temperature():
    model = tiny_model(seed=72)
    y = Tensor(Rng(73).uniform((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        model.sample(y, temperature=0.5, rng=None)


# ---------------------------------------------------------------------------
# encoder and shapes
# ---------------------------------------------------------------------------

def test_encoder_pyramid_shapes_and_determinism():
    cfg = ModelConfig(scale_factor=4, levels=3, flow_steps=1, encoder_blocks=1,
                      encoder_width=8, coupling_hidden=8)
    model = NCSRModel(cfg, Rng(74))
    y = Tensor(np.zeros((1, 3, 8, 8)))  # HR would be 32
    e1 = model.encode_lr(y)
    e2 = model.encode_lr(y)
    assert [u.shape for u in e1] == [(1, 8, 16, 16), (1, 8, 8, 8), (1, 8, 4, 4)]
    for a, b in zip(e1, e2):
        assert np.array_equal(a.data, b.data)
        assert np.isfinite(a.data).all()


def test_encoder_rejects_wrong_channel_count():
    model = tiny_model(seed=75)
    with pytest.raises(ShapeError):
        model.encode_lr(Tensor(np.zeros((1, 4, 8, 8))))


def test_nll_shape_contracts():
    model = tiny_model(seed=76)
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError):
        model.nll(x, Tensor(np.zeros((1, 3, 5, 5))))
    with pytest.raises(ShapeError):
        model.nll(Tensor(np.zeros((1, 3, 6, 6))), Tensor(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = NCSRModel(small_config(), Rng(77))
    randomize_parameters(model, Rng(78))
    rng = Rng(79)
    x, y, v = data_for(model, rng, hr=16)
    before, _ = model.nll(x, y, v)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, step=123, rng_state=(5, 9))
    loaded, step, rng_state = load_checkpoint(path)
    assert (step, rng_state) == (123, (5, 9))
    after, _ = loaded.nll(x, y, v)
    assert after.item() == before.item()
    for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"WXYZ" + b"\x00" * 64)
    with pytest.raises(ConfigError, match="magic"):
        load_checkpoint(path)
