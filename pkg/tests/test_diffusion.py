"""Diffusion engine checks.

Statistical contracts (forward-process moments, mask rates) are held to
Monte-Carlo oracles with generous sigma margins; algebraic contracts
(reverse-step formula, reconstruction, guidance identities, replacement
exactness) are recomputed independently in the tests.
"""

import numpy as np
import pytest

from jointdiff.autodiff import Tensor
from jointdiff.diffusion import (GuidanceConfig, GuidedScoreBreakdown, ImageSet,
                                 NoiseSchedule, ReferenceCondition, ddpm_step,
                                 forward_diffuse, guided_epsilon, personalize,
                                 sample_joint, sample_reference_mask, training_loss)
from jointdiff.errors import ConfigError, ShapeError
from jointdiff.text import Vocabulary
from jointdiff.unet import DenoiserConfig, JointDenoiser

VOCAB = Vocabulary(["red", "blue", "circle", "square", "a"])


def tiny_model(seed=0, image_size=8, max_timesteps=1000):
    cfg = DenoiserConfig(vocab_size=VOCAB.size, image_size=image_size, base_channels=8,
                         channel_multipliers=(1, 2), attention_resolutions=(4,),
                         text_embed_dim=8, max_caption_tokens=4, timestep_embed_dim=8,
                         max_timesteps=max_timesteps)
    model = JointDenoiser(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters():
        if p.size and not np.any(p.data):
            p.data = rng.standard_normal(p.shape).astype(np.float32) * 0.05
    return model


def ids_for(captions, tk=4):
    return VOCAB.encode_batch(captions, tk)


# -- schedule ------------------------------------------------------------------


def test_schedule_tables():
    sch = NoiseSchedule()
    assert sch.T == 1000
    assert np.isclose(sch.beta(1), 1e-4) and np.isclose(sch.beta(1000), 0.02)
    assert np.all(sch.betas > 0.0) and np.all(sch.betas < 1.0)
    assert np.all(np.diff(sch.betas) >= 0.0)
    assert np.all(np.diff(sch.alpha_bars) < 0.0)
    assert sch.alpha_bar(1000) < 0.05
    assert np.allclose(sch.alphas, 1.0 - sch.betas)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule(num_steps=0)
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_start=0.5, beta_end=0.1)
    sch = NoiseSchedule(num_steps=10)
    for bad_t in (0, 11):
        with pytest.raises(ValueError):
            sch.beta(bad_t)


def test_strided_schedule_is_a_subsequence():
    sch = NoiseSchedule()
    sub = sch.strided(100)
    assert sub.T == 100
    assert sub.model_t(sub.T) == 1000 and sub.model_t(1) == 1
    # alpha_bar at each strided position equals the parent's at the mapped t
    for i in (1, 37, 100):
        assert np.isclose(sub.alpha_bar(i), sch.alpha_bar(sub.model_t(i)), rtol=1e-6)
    # chain algebra still holds: cumprod of sub alphas reproduces alpha_bars
    assert np.allclose(np.cumprod(sub.alphas, dtype=np.float64), sub.alpha_bars, rtol=1e-5)
    # gaps from rounding the stride vary, so betas need not be monotone,
    # but they must stay valid probabilities
    assert np.all(sub.betas > 0.0) and np.all(sub.betas < 1.0)
    with pytest.raises(ConfigError):
        sch.strided(0)
    with pytest.raises(ConfigError):
        sch.strided(1001)


# -- forward process -----------------------------------------------------------


def test_forward_diffuse_moments_match_closed_form():
    sch = NoiseSchedule()
    rng = np.random.default_rng(0)
    x0 = np.full((50000,), 0.5, dtype=np.float32)
    for t in (1, 500, 1000):
        xt = forward_diffuse(x0, t, sch, rng.standard_normal(x0.shape).astype(np.float32))
        abar = sch.alpha_bar(t)
        want_mean = np.sqrt(abar) * 0.5
        want_var = 1.0 - abar
        n = x0.size
        assert abs(xt.mean() - want_mean) < 5.0 * np.sqrt(want_var / n)
        assert abs(xt.var() - want_var) < 5.0 * want_var * np.sqrt(2.0 / n)


def test_forward_diffuse_is_deterministic_given_noise():
    sch = NoiseSchedule(num_steps=10)
    x0 = np.ones((2, 3, 4, 4), dtype=np.float32)
    z = np.random.default_rng(1).standard_normal(x0.shape).astype(np.float32)
    a = forward_diffuse(x0, 5, sch, z)
    b = forward_diffuse(x0, 5, sch, z)
    assert np.array_equal(a, b)
    want = np.sqrt(sch.alpha_bar(5)) * x0 + np.sqrt(1.0 - sch.alpha_bar(5)) * z
    assert np.allclose(a, want, atol=1e-7)


def test_forward_diffuse_validates_inputs():
    sch = NoiseSchedule(num_steps=10)
    x0 = np.zeros((1, 3, 2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 0, sch, x0)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 11, sch, x0)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 1, sch, np.zeros((1, 3, 2, 3), dtype=np.float32))


# -- reference masks and conditions ---------------------------------------------


def test_reference_mask_rate_is_half():
    rng = np.random.default_rng(2)
    draws = np.stack([sample_reference_mask(4, rng) for _ in range(20000)])
    assert set(np.unique(draws)) <= {0, 1}
    rates = draws.mean(axis=0)
    assert np.all(np.abs(rates - 0.5) < 0.015)  # ~4 sigma at n=20000
    # slots are independent: pairwise correlations are near zero
    c = np.corrcoef(draws.T)
    off_diag = c[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off_diag) < 0.05)


def test_reference_mask_bounds():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        sample_reference_mask(0, rng)
    with pytest.raises(ValueError):
        sample_reference_mask(5, rng)


def test_reference_condition_zeroes_unknown_slots():
    rng = np.random.default_rng(4)
    clean = rng.uniform(-1, 1, size=(3, 3, 4, 4)).astype(np.float32)
    m = np.array([0, 1, 0], dtype=np.uint8)
    cond = ReferenceCondition.build(clean, m)
    assert np.array_equal(cond.mask_maps[:, 0, 0, 0], m.astype(np.float32))
    assert np.array_equal(cond.masked_clean[0], clean[0])
    assert np.all(cond.masked_clean[1] == 0.0)
    assert np.array_equal(cond.masked_clean[2], clean[2])
    with pytest.raises(ValueError):
        ReferenceCondition.build(clean, np.array([0, 1, 2], dtype=np.uint8))


def test_image_set_validation():
    good = np.zeros((2, 3, 4, 4), dtype=np.float32)
    ImageSet(good, ["a", "b"])
    with pytest.raises(ValueError):
        ImageSet(np.zeros((5, 3, 4, 4), dtype=np.float32), list("abcde"))
    with pytest.raises(ValueError):
        ImageSet(good, ["a"])
    with pytest.raises(ValueError):
        ImageSet(good + 2.0, ["a", "b"])


# -- reverse step ---------------------------------------------------------------


def test_ddpm_step_matches_update_formula():
    sch = NoiseSchedule(num_steps=20)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    t = 7
    got = ddpm_step(x, eps, t, sch, noise=np.zeros_like(x))
    beta, abar, alpha = sch.beta(t), sch.alpha_bar(t), sch.alpha(t)
    want = (x - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
    assert np.allclose(got, want, atol=1e-6)


def test_ddpm_step_final_step_adds_no_noise():
    sch = NoiseSchedule(num_steps=20)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    assert np.array_equal(ddpm_step(x, eps, 1, sch), ddpm_step(x, eps, 1, sch, rng=rng))


def test_ddpm_step_noise_scale():
    sch = NoiseSchedule()
    t = 600
    x = np.zeros(200000, dtype=np.float32)
    eps = np.zeros_like(x)
    rng = np.random.default_rng(7)
    out = ddpm_step(x, eps, t, sch, rng=rng)
    beta = sch.beta(t)
    assert abs(out.var() - beta) < 5.0 * beta * np.sqrt(2.0 / x.size)


def test_ddpm_step_requires_rng_for_intermediate_steps():
    sch = NoiseSchedule(num_steps=5)
    x = np.zeros((1, 3, 2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        ddpm_step(x, x, 3, sch)
    with pytest.raises(ShapeError):
        ddpm_step(x, np.zeros((1, 3, 2, 3), dtype=np.float32), 3, sch, rng=np.random.default_rng(0))


def test_reverse_chain_with_true_noise_reconstructs_x0():
    # Feeding the exact noise consistent with the current state into
    # noiseless reverse steps must walk the chain back to x0.
    sch = NoiseSchedule()
    rng = np.random.default_rng(8)
    x0 = rng.uniform(-1, 1, size=(1, 3, 8, 8)).astype(np.float32)
    x = forward_diffuse(x0, sch.T, sch, rng.standard_normal(x0.shape).astype(np.float32))
    for t in range(sch.T, 0, -1):
        abar = sch.alpha_bar(t)
        eps_true = (x - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
        x = ddpm_step(x, eps_true, t, sch, noise=np.zeros_like(x))
    assert np.max(np.abs(x - x0)) < 1e-3


# -- guidance -------------------------------------------------------------------


def test_guidance_config_parsing():
    assert GuidanceConfig.parse("joint").scales == (3.0,)
    assert GuidanceConfig.parse("joint:2.5").scales == (2.5,)
    assert GuidanceConfig.parse("text_first").scales == (1.0, 3.0)
    assert GuidanceConfig.parse("text_first:7").scales == (1.0, 7.0)
    assert GuidanceConfig.parse("image_first:2:5").scales == (2.0, 5.0)
    assert GuidanceConfig.parse("text_only:1").scales == (1.0,)
    for bad in ("bogus", "joint:1:2", "text_first:1:2:3", "joint:abc", "joint:-1"):
        with pytest.raises(ConfigError):
            GuidanceConfig.parse(bad)
    assert GuidanceConfig.parse("image_first:2:5").describe() == "image_first:2:5"


def guidance_inputs(model, rng, b=1, n=2):
    h = model.config.image_size
    x = rng.standard_normal((b, n, 3, h, h)).astype(np.float32)
    clean = rng.uniform(-1, 1, size=(b, n, 3, h, h)).astype(np.float32)
    m = np.zeros((b, n, 1, h, h), dtype=np.float32)
    m[:, -1:] = 1.0
    masked_clean = clean * (1.0 - m)
    ids = np.stack([ids_for(["a red circle", "a blue square"][:n])] * b)
    t = np.full(b, 5, dtype=np.int64)
    return x, m, masked_clean, ids, t


def test_guidance_scale_one_returns_full_conditional_exactly():
    model = tiny_model(10)
    x, m, mc, ids, t = guidance_inputs(model, np.random.default_rng(11))
    out = guided_epsilon(x, m, mc, ids, t, GuidanceConfig("joint", (1.0,)), model)
    assert np.array_equal(out.eps_guided, out.eps_full)
    assert out.eps_partial is None


def test_flexible_guidance_with_equal_scales_matches_joint():
    model = tiny_model(12)
    x, m, mc, ids, t = guidance_inputs(model, np.random.default_rng(13))
    lam = 2.5
    joint = guided_epsilon(x, m, mc, ids, t, GuidanceConfig("joint", (lam,)), model)
    for strategy in ("text_first", "image_first"):
        flex = guided_epsilon(x, m, mc, ids, t, GuidanceConfig(strategy, (lam, lam)), model)
        assert flex.eps_partial is not None
        assert np.max(np.abs(flex.eps_guided - joint.eps_guided)) < 1e-6
        assert np.max(np.abs(flex.eps_full - joint.eps_full)) < 1e-6


def test_guidance_formula_matches_manual_blend():
    model = tiny_model(14)
    x, m, mc, ids, t = guidance_inputs(model, np.random.default_rng(15))
    lam1, lam2 = 1.5, 4.0
    out = guided_epsilon(x, m, mc, ids, t, GuidanceConfig("text_first", (lam1, lam2)), model)
    want = out.eps_uncond + lam1 * (out.eps_partial - out.eps_uncond) \
        + lam2 * (out.eps_full - out.eps_partial)
    assert np.allclose(out.eps_guided, want, atol=1e-6)
    joint = guided_epsilon(x, m, mc, ids, t, GuidanceConfig("joint", (lam2,)), model)
    want_joint = joint.eps_uncond + lam2 * (joint.eps_full - joint.eps_uncond)
    assert np.allclose(joint.eps_guided, want_joint, atol=1e-6)


def test_text_only_guidance_ignores_references():
    model = tiny_model(16)
    rng = np.random.default_rng(17)
    x, m, mc, ids, t = guidance_inputs(model, rng)
    cfg = GuidanceConfig("text_only", (3.0,))
    out_a = guided_epsilon(x, m, mc, ids, t, cfg, model)
    other_clean = rng.uniform(-1, 1, size=mc.shape).astype(np.float32)
    out_b = guided_epsilon(x, np.zeros_like(m), other_clean, ids, t, cfg, model)
    assert np.array_equal(out_a.eps_guided, out_b.eps_guided)


def test_joint_guidance_uses_references():
    model = tiny_model(18)
    rng = np.random.default_rng(19)
    x, m, mc, ids, t = guidance_inputs(model, rng)
    cfg = GuidanceConfig("joint", (3.0,))
    out_a = guided_epsilon(x, m, mc, ids, t, cfg, model)
    other_clean = mc + 0.25
    out_b = guided_epsilon(x, m, other_clean, ids, t, cfg, model)
    assert np.max(np.abs(out_a.eps_guided - out_b.eps_guided)) > 1e-6


def test_breakdown_shapes_match_state():
    model = tiny_model(20)
    x, m, mc, ids, t = guidance_inputs(model, np.random.default_rng(21), b=2)
    out = guided_epsilon(x, m, mc, ids, t, GuidanceConfig("image_first", (1.0, 2.0)), model)
    for part in (out.eps_uncond, out.eps_partial, out.eps_full, out.eps_guided):
        assert part.shape == x.shape


# -- training loss ---------------------------------------------------------------


class ZeroDenoiser:
    """Stand-in whose prediction is identically zero."""

    def __init__(self, config):
        self.config = config
        self.dtype = np.float32

    def predict_epsilon(self, packed, t, ids):
        b, n = packed.shape[:2]
        h = packed.shape[-1]
        return Tensor(np.zeros((b, n, 3, h, h), dtype=np.float32))


class CheatingDenoiser(ZeroDenoiser):
    """Recovers the true noise from the packed channels when every slot is
    known: eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar)."""

    def __init__(self, config, schedule):
        super().__init__(config)
        self.schedule = schedule

    def predict_epsilon(self, packed, t, ids):
        out = []
        for bi in range(packed.shape[0]):
            abar = self.schedule.alpha_bar(int(t[bi]))
            x_t = packed[bi, :, 1:4]
            x0 = packed[bi, :, 4:7]
            out.append((x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar))
        return Tensor(np.stack(out).astype(np.float32))


def make_batch(rng, b=4, n=2, h=16):
    sets = []
    for _ in range(b):
        imgs = rng.uniform(-1, 1, size=(n, 3, h, h)).astype(np.float32)
        sets.append(ImageSet(imgs, ["a red circle"] * n))
    return sets


def test_training_loss_of_zero_denoiser_is_mean_eps_squared():
    sch = NoiseSchedule(num_steps=50)
    cfg = DenoiserConfig(vocab_size=VOCAB.size, image_size=16, base_channels=8,
                         channel_multipliers=(1,), attention_resolutions=(),
                         max_caption_tokens=4, max_timesteps=50)
    rng = np.random.default_rng(22)
    loss = training_loss(make_batch(rng), ZeroDenoiser(cfg), sch, VOCAB, rng)
    # E[eps^2] = 1; over 4*2*3*16*16 = 6144 draws the mean is within ~6 sigma
    assert abs(float(loss.data) - 1.0) < 0.1


def test_training_loss_of_true_noise_denoiser_is_zero(monkeypatch):
    sch = NoiseSchedule(num_steps=50)
    cfg = DenoiserConfig(vocab_size=VOCAB.size, image_size=16, base_channels=8,
                         channel_multipliers=(1,), attention_resolutions=(),
                         max_caption_tokens=4, max_timesteps=50)
    rng = np.random.default_rng(23)
    monkeypatch.setattr("jointdiff.diffusion.sample_reference_mask",
                        lambda n, r: np.zeros(n, dtype=np.uint8))
    loss = training_loss(make_batch(rng), CheatingDenoiser(cfg, sch), sch, VOCAB, rng,
                         text_dropout=0.0)
    assert float(loss.data) < 1e-9


def test_training_loss_rejects_mixed_set_sizes():
    sch = NoiseSchedule(num_steps=10)
    cfg = DenoiserConfig(vocab_size=VOCAB.size, image_size=16, base_channels=8,
                         channel_multipliers=(1,), attention_resolutions=(),
                         max_caption_tokens=4, max_timesteps=10)
    rng = np.random.default_rng(24)
    sets = make_batch(rng, b=2)
    sets[1] = ImageSet(rng.uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32), ["a"] * 3)
    with pytest.raises(ShapeError):
        training_loss(sets, ZeroDenoiser(cfg), sch, VOCAB, rng)
    with pytest.raises(ValueError):
        training_loss([], ZeroDenoiser(cfg), sch, VOCAB, rng)


# -- personalize and sample_joint -------------------------------------------------


def test_personalize_with_all_slots_known_returns_references_exactly():
    model = tiny_model(25, max_timesteps=40)
    sch = NoiseSchedule(num_steps=40)
    rng = np.random.default_rng(26)
    refs = rng.uniform(-1, 1, size=(2, 3, 8, 8)).astype(np.float32)
    ref_ids = ids_for(["a red circle", "a red square"])
    out = personalize(refs, ref_ids, np.zeros((0, 4), dtype=np.int64), model, sch,
                      GuidanceConfig("joint", (2.0,)), rng)
    assert out.shape == (2, 3, 8, 8)
    assert np.array_equal(out, refs)


def test_personalize_replacement_trace():
    # At every reverse step the known slot must hold exactly the
    # forward-diffused reference at the new noise level.
    model = tiny_model(27, max_timesteps=40)
    sch = NoiseSchedule(num_steps=40)
    rng = np.random.default_rng(28)
    refs = rng.uniform(-1, 1, size=(1, 3, 8, 8)).astype(np.float32)
    ref_ids = ids_for(["a red circle"])
    tgt_ids = ids_for(["a blue square"])
    seen = []
    out = personalize(refs, ref_ids, tgt_ids, model, sch,
                      GuidanceConfig("joint", (2.0,)), rng,
                      trace=lambda t_prev, x, z: seen.append((t_prev, x, z)))
    assert len(seen) == 40
    assert [t for t, _, _ in seen] == list(range(39, -1, -1))
    for t_prev, x, z in seen:
        if t_prev >= 1:
            want = forward_diffuse(refs, t_prev, sch, z)
            assert np.array_equal(x[:1], want)
        else:
            assert np.array_equal(x[:1], refs)
    assert np.array_equal(out[0], refs[0])
    assert np.all(np.abs(out[1]) <= 1.0)


def test_personalize_strided_trace_follows_subsequence():
    model = tiny_model(29, max_timesteps=100)
    sch = NoiseSchedule(num_steps=100)
    rng = np.random.default_rng(30)
    refs = rng.uniform(-1, 1, size=(1, 3, 8, 8)).astype(np.float32)
    seen = []
    personalize(refs, ids_for(["a red circle"]), ids_for(["a blue square"]), model, sch,
                GuidanceConfig("joint", (2.0,)), rng, num_steps=10,
                trace=lambda t_prev, x, z: seen.append((t_prev, x, z)))
    taus = sch.strided(10).timesteps
    assert [t for t, _, _ in seen] == list(taus[:-1][::-1]) + [0]
    for t_prev, x, z in seen:
        if t_prev >= 1:
            assert np.array_equal(x[:1], forward_diffuse(refs, int(t_prev), sch, z))


def test_personalize_is_deterministic_given_seed():
    model = tiny_model(31, max_timesteps=30)
    sch = NoiseSchedule(num_steps=30)
    refs = np.random.default_rng(32).uniform(-1, 1, size=(1, 3, 8, 8)).astype(np.float32)
    args = (refs, ids_for(["a red circle"]), ids_for(["a blue square"]), model, sch,
            GuidanceConfig("joint", (2.0,)))
    a = personalize(*args, np.random.default_rng(99))
    b = personalize(*args, np.random.default_rng(99))
    c = personalize(*args, np.random.default_rng(100))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_personalize_validates_set_size():
    model = tiny_model(33, max_timesteps=10)
    sch = NoiseSchedule(num_steps=10)
    rng = np.random.default_rng(34)
    refs = rng.uniform(-1, 1, size=(3, 3, 8, 8)).astype(np.float32)
    with pytest.raises(ValueError):
        personalize(refs, ids_for(["a"] * 3), ids_for(["a red circle", "a blue square"]),
                    model, sch, GuidanceConfig(), rng)
    with pytest.raises(ValueError):
        personalize(refs[:0], np.zeros((0, 4), dtype=np.int64), ids_for(["a red circle"]),
                    model, sch, GuidanceConfig(), rng)


def test_sample_joint_shapes_and_determinism():
    model = tiny_model(35, max_timesteps=20)
    sch = NoiseSchedule(num_steps=20)
    ids = ids_for(["a red circle", "a red circle"])
    a = sample_joint(ids, model, sch, GuidanceConfig("text_only", (2.0,)), np.random.default_rng(1))
    b = sample_joint(ids, model, sch, GuidanceConfig("text_only", (2.0,)), np.random.default_rng(1))
    assert a.shape == (2, 3, 8, 8)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)
    with pytest.raises(ValueError):
        sample_joint(ids_for(["a"] * 5, tk=4), model, sch, GuidanceConfig(), np.random.default_rng(2))
