import numpy as np
import pytest

from relroute import aligner as al
from relroute import nn
from relroute import stage2 as s2m
from relroute import tensor_math as tm
from relroute.relation import masked_trd
from relroute.synth import GeneratorConfig, generate_dataset

SMALL = s2m.DenoiserConfig(d_latent=8, d_cond=8, width=16, blocks=2, heads=2, hookup=1, time_dim=4)
GEN = GeneratorConfig(frames=2, height=4, width=4, d_v=8, d_t=8, caption_len=2, k_min=1, k_max=2,
                      p_fg_mean=0.4)


def samples(n, seed, sal=None):
    scenes = generate_dataset(GEN, n, seed)
    return s2m.make_samples(scenes, sal or (lambda s: s.fg_mask))


def quick(**kw):
    base = dict(steps=4, batch=2, eval_every=2, seed=0,
                optimizer=nn.OptimizerConfig(lr=1e-3, warmup_steps=0, schedule="constant"))
    base.update(kw)
    return s2m.Stage2Config(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        s2m.Stage2Config(lambda_trd=-0.1)
    with pytest.raises(ValueError):
        s2m.Stage2Config(operator="nor")
    with pytest.raises(ValueError):
        s2m.DenoiserConfig(hookup=5)
    with pytest.raises(ValueError):
        s2m.DenoiserConfig(width=10, heads=4)


def test_diffusion_loss_oracles():
    rng = np.random.default_rng(0)
    z0, noise = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    t = np.array([0.3, 0.8])
    assert s2m.diffusion_loss(lambda zt, t_, c: noise, z0, None, t, noise) == 0.0
    assert s2m.diffusion_loss(lambda zt, t_, c: np.zeros_like(zt), z0, None, t, noise) == pytest.approx(
        np.mean(noise ** 2), rel=1e-15)
    pred = rng.normal(size=z0.shape)
    direct = sum((noise.ravel()[i] - pred.ravel()[i]) ** 2 for i in range(pred.size)) / pred.size
    assert s2m.diffusion_loss(lambda *a: pred, z0, None, t, noise) == pytest.approx(direct, abs=1e-12)


def test_noised_latent_endpoints():
    z0, noise = np.ones((2, 3)), np.full((2, 3), 5.0)
    np.testing.assert_array_equal(s2m.noised_latent(z0, noise, [0.0, 1.0]), [[1, 1, 1], [5, 5, 5]])


def _loss_parts(s2, op=None, sal_override=None):
    data = samples(2, 1)
    if sal_override is not None:
        for s in data:
            s.saliency = sal_override(s)
    rng = np.random.default_rng(3)
    t = rng.uniform(size=2)
    noise = rng.normal(size=(2,) + data[0].z0.shape)
    tape = tm.Tape()
    p = nn.lift(tape, s2m.init_denoiser(SMALL, 0))
    total, diff, trd = s2m.stage2_loss(p, data, t, noise, SMALL, s2, op)
    return float(total.value), float(diff.value), float(trd.value)


def test_loss_breakdown():
    total, diff, trd = _loss_parts(s2m.Stage2Config(lambda_trd=0.5))
    assert total == diff + 0.5 * trd
    total0, diff0, _ = _loss_parts(s2m.Stage2Config(lambda_trd=0.0))
    assert total0 == diff0


def test_uniform_equals_or_with_unit_saliency():
    ones = lambda s: np.ones_like(s.saliency)  # noqa: E731
    a = _loss_parts(s2m.Stage2Config(), "uniform")
    b = _loss_parts(s2m.Stage2Config(), "or", sal_override=ones)
    assert abs(a[0] - b[0]) <= 1e-12


def test_trd_term_matches_direct_masked_loss():
    data = samples(2, 2)
    rng = np.random.default_rng(4)
    t, noise = rng.uniform(size=2), rng.normal(size=(2,) + data[0].z0.shape)
    params = s2m.init_denoiser(SMALL, 0)
    tape = tm.Tape()
    p = {k: tape.const(v) for k, v in params.items()}
    _, _, trd = s2m.stage2_loss(p, data, t, noise, SMALL, s2m.Stage2Config(operator="xor"))
    z0 = np.stack([s.z0 for s in data])
    flat = z0.reshape(2, -1, 8)
    _, hook = s2m.denoise(p, s2m.noised_latent(flat, noise.reshape(flat.shape), t), t,
                          np.stack([s.cond for s in data]), SMALL)
    want = masked_trd(hook.value.reshape(z0.shape), z0, np.stack([s.saliency for s in data]), "xor").total
    assert float(trd.value) == pytest.approx(want, rel=1e-13)


def test_hookup_projector_width():
    tape = tm.Tape()
    p = {k: tape.const(v) for k, v in s2m.init_denoiser(SMALL, 0).items()}
    out, hook = s2m.denoise(p, np.zeros((1, 6, 8)), np.array([0.5]), np.zeros((1, 8)), SMALL)
    assert out.shape == hook.shape == (1, 6, 8)


def test_zero_steps_curves_equal_across_operators():
    data, held = samples(4, 5), samples(2, 6)
    curves = s2m.routing_experiment(data, held, ["uniform", "and", "or", "xor"], SMALL, quick(steps=0))
    errs = [{k: c[0][k] for k in ("err_ffg", "err_fbg", "err_bbg")} for c in curves.values()]
    assert all(e == errs[0] for e in errs)
    with pytest.raises(ValueError):
        s2m.routing_experiment(data, held, [], SMALL, quick())


def test_uniform_and_unit_or_trajectories_bitwise_identical():
    ones = lambda s: np.ones_like(s.fg_mask)  # noqa: E731
    data, held = samples(4, 7, sal=ones), samples(2, 8, sal=ones)
    pu, ru = s2m.train_stage2(data, held, SMALL, quick(), "uniform")
    po, ro = s2m.train_stage2(data, held, SMALL, quick(), "or")
    assert nn.fingerprint(pu) == nn.fingerprint(po) and ru == ro


def test_xor_ignores_same_label_pairs_under_binary_saliency():
    data = samples(2, 9)
    # XOR weights on pairs with equal binary labels are zero, so perturbing the
    # student on pairs inside one category cannot change the loss.
    from relroute.relation import pair_weight_matrix
    w = np.stack([s.saliency for s in data])
    wm = pair_weight_matrix(w, "xor", *w.shape[1:])
    fg = np.stack([s.fg for s in data]).reshape(2, -1) > 0.5
    same = fg[:, :, None] == fg[:, None, :]
    assert np.all(wm[same] == 0.0)


def test_frozen_aligner_is_untouched():
    cfg = al.AlignerConfig(d_v=8, d_t=8, heads=2, n_cross=1, n_self=1, sal_hidden=8, text_heads=2)
    params = al.init_params(cfg, 0)
    before = nn.fingerprint(params)
    scenes = generate_dataset(GEN, 3, 11)
    data = s2m.make_samples(scenes, lambda s: al.full_caption_saliency(params, s, cfg))
    s2m.train_stage2(data, data[:1], SMALL, quick())
    assert nn.fingerprint(params) == before


def test_training_is_deterministic_and_logs_columns():
    data, held = samples(4, 12), samples(2, 13)
    _, a = s2m.train_stage2(data, held, SMALL, quick())
    _, b = s2m.train_stage2(data, held, SMALL, quick())
    assert a == b
    assert [r["step"] for r in a] == [0, 2, 4]
    assert set(a[0]) == {"step", "diff_loss", "trd_loss", "err_ffg", "err_fbg", "err_bbg"}


def test_stage2_gradient_matches_finite_differences():
    from relroute.gradcheck import run_gradcheck
    assert run_gradcheck("stage2", seed=3, op="and").passed


def test_batch_larger_than_dataset_rejected():
    with pytest.raises(ValueError):
        s2m.train_stage2(samples(2, 14), samples(1, 15), SMALL, quick(batch=3))
