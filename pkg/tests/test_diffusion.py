import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from compalign.diffusion.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from compalign.diffusion.codec import IdentityCodec
from compalign.diffusion.conditioning import ConditioningEncoder
from compalign.diffusion.core import (
    LatentState,
    denoise_step,
    diffusion_loss,
    forward_sample,
    forward_step,
    predict_x0,
    sample,
    training_loss,
)
from compalign.diffusion.model import Denoiser, DenoiserConfig
from compalign.diffusion.schedule import NoiseSchedule, linear_schedule
from compalign.diffusion.train import PretrainConfig, loss_weights, pretrain, weighted_training_loss
from compalign.errors import DivergenceError, EmptyInputError, MissingArtifactError, RangeError
from compalign.perception import oracle_parse
from compalign.scene import describe, render, sample_scene

SCHED = linear_schedule(50)


def exact_eps_model(z0, schedule):
    """eps_theta that recovers the construction noise of z_t from a known z0."""
    ab = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype)

    def model(z, t, cond):
        a = ab[t].reshape(-1, *([1] * (z.ndim - 1)))
        return (z - a.sqrt() * z0) / (1 - a).sqrt()

    return model


# -- schedule -----------------------------------------------------------------


@given(st.lists(st.floats(1e-6, 0.999), min_size=1, max_size=60))
def test_schedule_alpha_bar_monotone(betas):
    s = NoiseSchedule(np.array(betas))
    ab = s.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert s.is_strict


def test_default_schedule_reaches_noise():
    s = linear_schedule(50)
    assert s.T == 50
    assert s.is_strict
    assert 0 < s.betas.min() and s.betas.max() < 1
    assert s.alpha_bar(50) < 1e-3
    # without rescaling the endpoints keep most of the signal at T = 50
    assert linear_schedule(50, rescale=False).alpha_bar(50) > 0.5
    with pytest.raises(ValueError):
        linear_schedule(10)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([]))


def test_schedule_range_errors():
    with pytest.raises(RangeError):
        SCHED.alpha_bar(51)
    with pytest.raises(RangeError):
        SCHED.beta(0)


# -- codec --------------------------------------------------------------------


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_identity_codec_round_trip(seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(2, 8, 8, 3), dtype=np.uint8)
    c = IdentityCodec()
    z = c.encode(img)
    assert z.shape == (2, 3, 8, 8)
    assert float(z.min()) >= -1 and float(z.max()) <= 1
    assert np.array_equal(c.decode(z), img)


# -- forward process ----------------------------------------------------------


def test_forward_t0_is_identity():
    z0 = torch.randn(2, 3, 4, 4)
    assert torch.equal(forward_sample(z0, 0, torch.randn_like(z0), SCHED), z0)


def test_forward_zero_schedule_is_identity():
    s = NoiseSchedule(np.zeros(10))
    z0 = torch.randn(3, 5)
    for t in range(11):
        assert torch.equal(forward_sample(z0, t, torch.randn_like(z0), s), z0)


def test_forward_rejects_bad_inputs():
    z0 = torch.zeros(2, 3)
    with pytest.raises(RangeError):
        forward_sample(z0, 51, torch.zeros_like(z0), SCHED)
    with pytest.raises(ValueError):
        forward_sample(z0, 1, torch.zeros(2, 4), SCHED)


def test_forward_closed_form_monte_carlo():
    # oracle: analytic moments sqrt(abar) z0 and 1 - abar, checked within 3 sigma
    n = 10_000
    z0 = torch.linspace(-1, 1, 8, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn((n, 8), generator=g, dtype=torch.float64)
    zt = forward_sample(z0.expand(n, 8), SCHED.T, eps, SCHED)
    ab = np.prod(1.0 - SCHED.betas)
    var = 1.0 - ab
    mean_err = (zt.mean(0).numpy() - math.sqrt(ab) * z0.numpy())
    assert np.all(np.abs(mean_err) < 3 * math.sqrt(var / n))
    var_err = zt.var(0).numpy() - var
    assert np.all(np.abs(var_err) < 3 * var * math.sqrt(2.0 / (n - 1)))


@pytest.mark.parametrize("t", [1, 7, 25, 50])
def test_forward_iterative_matches_closed_form(t):
    n = 10_000
    z0 = torch.tensor([-0.8, 0.6], dtype=torch.float64).expand(n, 2)
    g = torch.Generator().manual_seed(t)
    z = z0
    for s in range(1, t + 1):
        z = forward_step(z, s, torch.randn(z.shape, generator=g, dtype=torch.float64), SCHED)
    ab = np.prod(1.0 - SCHED.betas[:t])
    se_mean = math.sqrt((1 - ab) / n)
    assert np.all(np.abs(z.mean(0).numpy() - math.sqrt(ab) * z0[0].numpy()) < 3 * se_mean)
    se_var = (1 - ab) * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(z.var(0).numpy() - (1 - ab)) < 3 * se_var)


# -- reverse process ----------------------------------------------------------


@pytest.mark.parametrize("t", [1, 2, 10, 30, 50])
def test_predict_x0_exact_with_oracle_noise(t):
    g = torch.Generator().manual_seed(t)
    z0 = torch.randn((4, 3, 6, 6), generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    zt = forward_sample(z0, t, eps, SCHED)
    got = predict_x0(LatentState(zt, t), exact_eps_model(z0, SCHED), None, SCHED)
    torch.testing.assert_close(got, z0, rtol=0, atol=1e-9)


def test_predict_x0_t0_identity():
    z = torch.randn(2, 3)
    assert predict_x0(LatentState(z, 0), lambda *a: 1 / 0, None, SCHED) is z


def test_denoise_step_exact_at_t1():
    z0 = torch.randn((3, 3, 4, 4), dtype=torch.float64)
    eps = torch.randn_like(z0)
    z1 = forward_sample(z0, 1, eps, SCHED)
    out = denoise_step(LatentState(z1, 1), exact_eps_model(z0, SCHED), None, SCHED)
    assert out.t == 0
    torch.testing.assert_close(out.z, z0, rtol=0, atol=1e-12)


def test_denoise_step_zero_beta_is_identity():
    s = NoiseSchedule(np.array([0.0, 0.0, 0.1]))
    z = torch.randn(2, 5)
    out = denoise_step(LatentState(z, 2), lambda z, t, c: torch.randn_like(z) * 100, None, s)
    assert torch.equal(out.z, z)
    assert out.t == 1


def test_denoise_step_rejects_t0():
    with pytest.raises(RangeError):
        denoise_step(LatentState(torch.zeros(1, 2), 0), lambda z, t, c: z, None, SCHED)


def analytic_chain(schedule, m, s2):
    """Mean/variance of the ancestral chain driven by the exact Gaussian-data noise predictor."""
    ab = schedule.alpha_bars
    mean, var = 0.0, 1.0
    for t in range(schedule.T, 0, -1):
        b = schedule.betas[t - 1]
        a = 1.0 - b
        # eps*(z) = k z + c with k, c from the Gaussian posterior of x0 given z_t
        denom = ab[t] * s2 + 1 - ab[t]
        k = math.sqrt(1 - ab[t]) / denom
        c = -math.sqrt(1 - ab[t]) * math.sqrt(ab[t]) * m / denom
        coef = b / math.sqrt(1 - ab[t])
        lin = (1 - coef * k) / math.sqrt(a)
        off = -coef * c / math.sqrt(a)
        sig2 = b if t > 1 else 0.0
        mean, var = lin * mean + off, lin * lin * var + sig2
    return mean, var


def test_scalar_gaussian_chain_matches_analytic_distribution():
    m, s2 = 0.4, 0.09
    ab = torch.as_tensor(SCHED.alpha_bars, dtype=torch.float64)

    def eps_star(z, t, cond):
        a = ab[t].reshape(-1, 1)
        return (1 - a).sqrt() * (z - a.sqrt() * m) / (a * s2 + 1 - a)

    g = torch.Generator().manual_seed(3)
    z = torch.randn((20_000, 1), generator=g, dtype=torch.float64)
    state = LatentState(z, SCHED.T)
    while state.t > 0:
        state = denoise_step(state, eps_star, None, SCHED, g)
    mean, var = analytic_chain(SCHED, m, s2)
    res = stats.kstest(state.z[:, 0].numpy(), "norm", args=(mean, math.sqrt(var)))
    assert res.pvalue > 0.01
    # the chain should also land close to the data distribution itself
    assert abs(mean - m) < 0.01 and abs(var - s2) / s2 < 0.2


# -- loss ---------------------------------------------------------------------


def test_training_loss_zero_for_oracle_denoiser():
    z0 = torch.randn((5, 3, 4, 4), dtype=torch.float64)
    loss = training_loss(exact_eps_model(z0, SCHED), z0, None, SCHED, torch.Generator().manual_seed(1))
    assert float(loss) == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("c", [0.5, -1.25, 3.0])
def test_training_loss_constant_offset(c):
    z0 = torch.randn((5, 3, 4, 4), dtype=torch.float64)
    oracle = exact_eps_model(z0, SCHED)
    loss = training_loss(lambda z, t, cond: oracle(z, t, cond) + c, z0, None, SCHED,
                         torch.Generator().manual_seed(2))
    assert float(loss) == pytest.approx(c * c, rel=1e-9)


def test_training_loss_empty_batch():
    with pytest.raises(EmptyInputError):
        training_loss(lambda z, t, c: z, torch.zeros(0, 3), None, SCHED)


class TenParamStub(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.theta = torch.nn.Parameter(torch.linspace(-0.5, 0.7, 10, dtype=torch.float64))

    def forward(self, z, t, cond):
        w = self.theta
        tt = (t.to(z.dtype) / 50).reshape(-1, *([1] * (z.ndim - 1)))
        cs = cond.sum(1).reshape(-1, *([1] * (z.ndim - 1)))
        return (w[0] * z + w[1] * z * z + w[2] * torch.tanh(w[3] * z) + w[4] + w[5] * tt
                + w[6] * z * tt + w[7] * cs + w[8] * torch.sin(z) * w[9])


def test_training_loss_gradient_matches_finite_differences():
    g0 = torch.Generator().manual_seed(5)
    z0 = torch.randn((4, 3, 3, 3), generator=g0, dtype=torch.float64)
    cond = torch.randn((4, 2), generator=g0, dtype=torch.float64)
    net = TenParamStub()

    def loss_at(theta):
        with torch.no_grad():
            net.theta.copy_(theta)
        return training_loss(net, z0, cond, SCHED, torch.Generator().manual_seed(11))

    theta0 = net.theta.detach().clone()
    loss = loss_at(theta0)
    loss.backward()
    analytic = net.theta.grad.detach().clone()
    h = 1e-6
    fd = torch.zeros(10, dtype=torch.float64)
    for i in range(10):
        e = torch.zeros(10, dtype=torch.float64)
        e[i] = h
        fd[i] = (loss_at(theta0 + e).item() - loss_at(theta0 - e).item()) / (2 * h)
    rel = (analytic - fd).abs() / fd.abs().clamp_min(1e-8)
    assert float(rel.max()) < 1e-4, (analytic, fd)


def test_diffusion_loss_per_sample_shape():
    z0 = torch.zeros(3, 2, 4, 4)
    out = diffusion_loss(lambda z, t, c: torch.zeros_like(z), z0, torch.tensor([1, 2, 3]), torch.ones_like(z0), None,
                         SCHED)
    assert out.shape == (3,)
    torch.testing.assert_close(out, torch.ones(3))


# -- conditioning -------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 6))
def test_conditioning_text_and_scene_agree(seed, n):
    s = sample_scene(seed, n)
    enc = ConditioningEncoder()
    v = enc.encode(s)
    assert v.shape == (enc.dim,)
    assert np.array_equal(v, enc.encode(describe(s)))
    assert np.array_equal(v, enc.encode(describe(s).text))
    assert not v[enc.global_dim - 1:].any()


def test_conditioning_distinguishes_prompts_and_layouts():
    enc = ConditioningEncoder()
    scenes = [sample_scene(i, 1 + i % 3) for i in range(300)]
    text = {}
    layout = {}
    for s in scenes:
        text.setdefault(enc.encode(s).tobytes(), set()).add(describe(s).text)
        key = tuple(sorted((o.cell, o.shape, o.color, o.scale) for o in s.objects))
        layout.setdefault(enc.encode(s, layout=True).tobytes(), set()).add(key)
    assert all(len(v) == 1 for v in text.values())
    assert all(len(v) == 1 for v in layout.values())


def test_conditioning_layout_needs_scene():
    with pytest.raises(TypeError):
        ConditioningEncoder().encode("a red circle", layout=True)


# -- model, sampling, checkpoint ----------------------------------------------


def small_model(seed=0):
    torch.manual_seed(seed)
    return Denoiser(DenoiserConfig(channels=8, emb_dim=16))


def test_denoiser_shapes_and_determinism():
    m = small_model()
    cond = m.encoder.encode_batch([sample_scene(1, 2), sample_scene(2, 1)], [True, False])
    z = torch.randn(2, 3, 64, 64)
    out = m(z, torch.tensor([3, 40]), cond)
    assert out.shape == z.shape
    assert torch.equal(out, m(z, torch.tensor([3, 40]), cond))


def test_sample_is_deterministic_and_untrained_is_noise():
    m = small_model()
    cond = m.encoder.encode_batch([sample_scene(4, 1)] * 2)
    s = linear_schedule(25)
    a = sample(m, cond, s, IdentityCodec(), (3, 64, 64), seed=9)
    b = sample(m, cond, s, IdentityCodec(), (3, 64, 64), seed=9)
    assert a.dtype == np.uint8 and a.shape == (2, 64, 64, 3)
    assert np.array_equal(a, b)
    parsed = oracle_parse(a[0])
    assert len(parsed.unknown_regions) > len(parsed.objects)


def test_checkpoint_round_trip(tmp_path):
    m = small_model(3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, SCHED, {"note": "x"})
    m2, s2, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert np.array_equal(s2.betas, SCHED.betas)
    for (k1, v1), (k2, v2) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    raw = path.read_bytes()
    assert raw[:8] == b"CMPACKPT"
    header, tensors = decode_checkpoint(raw)
    assert header["version"] == 1
    assert encode_checkpoint(tensors, SCHED, m.config, {"note": "x"}) == raw


def test_v_head_converts_to_noise():
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(channels=8, emb_dim=16, prediction="v"))
    with pytest.raises(ValueError):
        DenoiserConfig(prediction="x0")
    m = Denoiser(DenoiserConfig(channels=8, emb_dim=16, prediction="v"), SCHED.alpha_bars)
    with torch.no_grad():
        m.out.weight.zero_()
        m.out.bias.zero_()
    # a zero v estimate means eps = sqrt(1 - abar) z
    z = torch.randn(2, 3, 64, 64)
    t = torch.tensor([5, 50])
    cond = m.encoder.encode_batch([sample_scene(1, 1)] * 2)
    ab = torch.as_tensor(SCHED.alpha_bars, dtype=torch.float32)[t].reshape(-1, 1, 1, 1)
    torch.testing.assert_close(m(z, t, cond), (1 - ab).sqrt() * z)


@given(st.integers(1, 50), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_true_velocity_recovers_noise(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0, eps = torch.randn((2, 5), generator=g, dtype=torch.float64)
    a = torch.tensor(SCHED.alpha_bars[t], dtype=torch.float64)
    z = a.sqrt() * x0 + (1 - a).sqrt() * eps
    v = a.sqrt() * eps - (1 - a).sqrt() * x0
    torch.testing.assert_close((1 - a).sqrt() * z + a.sqrt() * v, eps)


def test_checkpoint_round_trip_v_head(tmp_path):
    torch.manual_seed(2)
    m = Denoiser(DenoiserConfig(channels=8, emb_dim=16, prediction="v"), SCHED.alpha_bars)
    save_checkpoint(tmp_path / "v.ckpt", m, SCHED)
    m2, _, _ = load_checkpoint(tmp_path / "v.ckpt")
    assert m2.config.prediction == "v"
    z = torch.randn(1, 3, 64, 64)
    cond = m.encoder.encode_batch([sample_scene(3, 2)])
    assert torch.equal(m(z, torch.tensor([7]), cond), m2(z, torch.tensor([7]), cond))


def test_checkpoint_missing(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        decode_checkpoint(b"NOTACKPT" + b"\0" * 8)


# -- pretraining --------------------------------------------------------------


def tiny_dataset(n=8):
    return [(s, render(s)) for s in (sample_scene(100 + i, 1) for i in range(n))]


def test_pretrain_zero_epochs_keeps_init():
    data = tiny_dataset(2)
    torch.manual_seed(0)
    m = small_model(0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    res = pretrain(data, PretrainConfig(epochs=0, ema_decay=0), model=m)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k])


def test_pretrain_reduces_loss_and_checkpoints(tmp_path):
    data = tiny_dataset(16)
    res = pretrain(data, PretrainConfig(epochs=3, batch_size=8, lr=2e-3, channels=8, ema_decay=0,
                                        checkpoint_every=1, checkpoint_dir=str(tmp_path)))
    assert res.epoch_losses[-1] < res.initial_loss
    assert len(list(tmp_path.glob("pretrain_e*.ckpt"))) == 3


def test_pretrain_accepts_tiny_learning_rate():
    assert PretrainConfig(lr=1e-5).lr == 1e-5


def test_loss_weights():
    assert torch.equal(loss_weights(SCHED, "eps"), torch.ones(51))
    w = loss_weights(SCHED, "v")
    np.testing.assert_allclose(w.numpy(), 1 / SCHED.alpha_bars, rtol=1e-6)
    with pytest.raises(ValueError):
        PretrainConfig(weighting="snr")


def test_unit_weighting_is_plain_loss():
    z0 = torch.randn(4, 3, 64, 64)
    m = small_model(1)
    cond = m.encoder.encode_batch([sample_scene(i, 1) for i in range(4)])
    a = weighted_training_loss(m, z0, cond, SCHED, torch.Generator().manual_seed(5), loss_weights(SCHED, "eps"))
    b = training_loss(m, z0, cond, SCHED, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_ema_warm_up_after_one_step():
    data = tiny_dataset(4)
    base = dict(epochs=1, batch_size=4, channels=8, prediction="eps")
    torch.manual_seed(0)
    init = Denoiser(DenoiserConfig(channels=8, prediction="eps")).state_dict()
    raw = pretrain(data, PretrainConfig(ema_decay=0, **base)).model.state_dict()
    ema = pretrain(data, PretrainConfig(ema_decay=0.999, **base)).model.state_dict()
    d = 2 / 11  # warm-up decay at the first step
    for k in raw:
        if k.endswith("weight") or k.endswith("bias"):
            torch.testing.assert_close(ema[k], d * init[k] + (1 - d) * raw[k])


def test_pretrain_divergence_raises():
    data = tiny_dataset(4)
    m = small_model()
    with torch.no_grad():
        m.out.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as ei:
        pretrain(data, PretrainConfig(epochs=1, batch_size=4, ema_decay=0), model=m)
    assert ei.value.last_good is not None
