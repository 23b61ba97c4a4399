import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safepatch.data import build_base_corpus, parse_prompt
from safepatch.diffusion import (
    BaseTrainConfig,
    DenoiserParams,
    Injections,
    add_noise,
    decode_image,
    encode_image,
    encode_text,
    generate,
    heldout_loss,
    injection_shapes,
    make_schedule,
    predict_noise,
    sample,
    train_base,
)
from safepatch.exceptions import (
    InvalidConfigError,
    InvalidImageError,
    InvalidInjectionError,
    InvalidStepError,
    InvalidTokenError,
)
from safepatch.numeric import Rng, Tensor

from conftest import random_images

PROMPT = parse_prompt("a photo of large bright blob")


# schedule
# -------------------------------------------------------------------------

def test_schedule_two_steps():
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alphas, [0.9, 0.8], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)


def test_schedule_single_step():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bars.tolist() == [0.7]


@pytest.mark.parametrize("args", [(10, 1e-4, 1.0), (10, 0.0, 0.02), (10, 0.03, 0.02), (0, 1e-4, 0.02)])
def test_schedule_rejects_bad_endpoints(args):
    with pytest.raises(InvalidConfigError):
        make_schedule(*args)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 300), b0=st.floats(1e-6, 0.2), span=st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, span):
    s = make_schedule(T, b0, min(b0 + span, 0.99))
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] <= s.alpha_bars[0] < 1
    ref = np.array([math.prod(s.alphas[:i + 1]) for i in range(T)])
    assert np.max(np.abs(ref - s.alpha_bars)) <= 1e-12


def test_default_schedule():
    s = make_schedule()
    assert s.T == 100 and s.betas[0] == 1e-4 and s.betas[-1] == 0.02


# add_noise
# -------------------------------------------------------------------------

def test_add_noise_hand_roots():
    s = make_schedule(2, 0.1, 0.2)
    z0, eps = random_images(1, 1)[0], random_images(1, 2)[0]
    zt = add_noise(z0, 2, eps, s)
    np.testing.assert_allclose(zt, 0.848528137423857 * z0 + 0.5291502622129182 * eps, rtol=0, atol=1e-14)


def test_add_noise_no_noise_limit():
    s = make_schedule(1, 1e-8, 1e-8)
    z0 = random_images(1, 3)[0]
    # sqrt(1 - alpha_bar) is 1e-4, the signal shrink is far smaller
    np.testing.assert_allclose(add_noise(z0, 1, np.ones_like(z0), s) - z0, 1e-4, atol=1e-8)


def test_add_noise_zero_image(schedule):
    eps = random_images(1, 4)[0]
    np.testing.assert_allclose(add_noise(np.zeros_like(eps), 37, eps, schedule),
                               math.sqrt(1 - schedule.alpha_bars[36]) * eps, rtol=1e-15)


def test_add_noise_per_sample_steps(schedule):
    z0, eps = random_images(3, 5), random_images(3, 6)
    batched = add_noise(z0, np.array([1, 50, 100]), eps, schedule)
    for i, t in enumerate([1, 50, 100]):
        assert np.array_equal(batched[i], add_noise(z0[i], t, eps[i], schedule))


@pytest.mark.parametrize("t", [0, 101, -1])
def test_add_noise_step_range(schedule, t):
    z = np.zeros((1, 16, 16))
    with pytest.raises(InvalidStepError):
        add_noise(z, t, z, schedule)


def test_forward_noising_moments(schedule):
    z0 = random_images(1, 7)[0]
    n = 10_000
    for t in (1, 50, 100):
        ab = schedule.alpha_bars[t - 1]
        eps = Rng(t).normal(n * 256).reshape((n,) + z0.shape)
        zt = add_noise(np.broadcast_to(z0, eps.shape), np.full(n, t), eps, schedule)
        # pooled over pixels, each statistic within 3 standard errors
        dev = (zt - math.sqrt(ab) * z0).mean()
        assert abs(dev) < 3 * math.sqrt((1 - ab) / (n * 256))
        var = zt.var(axis=0, ddof=1).mean()
        assert abs(var - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / (n - 1)) / math.sqrt(256)


# encoders
# -------------------------------------------------------------------------

def test_encode_text(base):
    a = encode_text(base, PROMPT).data
    assert a.shape == (len(PROMPT), 32)
    assert np.array_equal(a, encode_text(base, PROMPT).data)
    other = parse_prompt("a photo of large dim blob")
    b = encode_text(base, other).data
    differs = [i for i in range(len(PROMPT)) if not np.array_equal(a[i], b[i])]
    assert differs == [4]


def test_encode_text_out_of_vocab(base):
    with pytest.raises(InvalidTokenError):
        encode_text(base, [1, 32])


def test_encode_image_identity():
    x = random_images(1, 8)[0]
    assert encode_image(x) is x
    assert decode_image(encode_image(x)) is x
    with pytest.raises(InvalidImageError):
        encode_image(np.full((1, 16, 16), 1.5))


# predict_noise
# -------------------------------------------------------------------------

def test_zero_injections_are_exact(base):
    z = random_images(3, 9)
    t = np.array([1, 40, 100])
    plain = predict_noise(base, z, t, [PROMPT] * 3).data
    zero = Injections(*[Tensor(np.zeros(s)) for s in injection_shapes(3)])
    assert np.array_equal(plain, predict_noise(base, z, t, [PROMPT] * 3, zero).data)


def test_predict_noise_shapes_and_determinism(base):
    z = random_images(2, 10)
    out = predict_noise(base, z, 5, [PROMPT] * 2).data
    assert out.shape == z.shape
    assert np.array_equal(out, predict_noise(base, z, 5, [PROMPT] * 2).data)
    single = predict_noise(base, z[0], 5, PROMPT).data
    assert single.shape == (1, 16, 16)


def test_predict_noise_accepts_c_p_tensor(base):
    z = random_images(1, 11)[0]
    a = predict_noise(base, z, 9, encode_text(base, PROMPT)).data
    b = predict_noise(base, z, 9, PROMPT).data
    # padded and unpadded encodings pool in a different order
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_injection_shape_mismatch(base):
    bad = Injections(Tensor(np.zeros((1, 32, 4, 4))), Tensor(np.zeros((1, 32, 4, 4))), Tensor(np.zeros((1, 16, 4, 4))))
    with pytest.raises(InvalidInjectionError):
        predict_noise(base, random_images(1, 12), 3, [PROMPT], bad)


def test_injections_change_output(base):
    z = random_images(1, 13)
    inj = Injections(*[Tensor(np.full(s, 0.1)) for s in injection_shapes(1)])
    assert not np.array_equal(predict_noise(base, z, 3, [PROMPT]).data, predict_noise(base, z, 3, [PROMPT], inj).data)


def test_param_init(base):
    again = DenoiserParams.init(0)
    assert again.digest() == base.digest()
    assert DenoiserParams.init(1).digest() != base.digest()
    assert base.n_params == sum(t.size for t in base)
    assert all(np.isfinite(t.data).all() for t in base)


# sampling
# -------------------------------------------------------------------------

def test_sample_deterministic(base, short_schedule):
    a = sample(base, short_schedule, PROMPT, Rng(4))
    b = sample(base, short_schedule, PROMPT, Rng(4))
    assert a.shape == (1, 16, 16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(base, short_schedule, PROMPT, Rng(5)))


def test_sample_single_step(base):
    img = sample(base, make_schedule(1, 0.02, 0.02), PROMPT, Rng(0))
    assert np.isfinite(img).all() and img.min() >= -1 and img.max() <= 1


def test_sample_matches_manual_loop(base, short_schedule):
    # the ancestral update written out independently
    s = short_schedule
    rng = Rng(21)
    z = rng.normal(256).reshape(1, 1, 16, 16)
    for t in range(s.T, 0, -1):
        eps = predict_noise(base, z, t, [PROMPT]).data
        a, ab = s.alphas[t - 1], s.alpha_bars[t - 1]
        z = (z - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        if t > 1:
            z = z + math.sqrt(s.betas[t - 1]) * rng.normal(256).reshape(1, 1, 16, 16)
    np.testing.assert_allclose(sample(base, s, PROMPT, Rng(21)), np.clip(z[0], -1, 1), rtol=0, atol=1e-12)


def test_generate_batches_are_independent(base, short_schedule):
    prompts = [PROMPT, parse_prompt("frame"), parse_prompt("spikes small")]
    batch = generate(base, short_schedule, prompts, [3, 4, 5])
    chunked = generate(base, short_schedule, prompts, [3, 4, 5], chunk=1)
    np.testing.assert_allclose(batch, chunked, rtol=0, atol=1e-12)
    assert np.allclose(batch[1], sample(base, short_schedule, prompts[1], Rng(4)), atol=1e-12)


# base training
# -------------------------------------------------------------------------

def test_train_base_one_pair_learns(short_schedule):
    corpus = build_base_corpus(1, Rng(0))
    base = DenoiserParams.init(2)
    cfg = BaseTrainConfig(steps=200, batch_size=4, lr=2e-3, heldout_size=1)
    _, log = train_base(base, corpus, short_schedule, cfg, Rng(3))
    assert log.heldout[-1][1] < log.heldout[0][1]


def test_train_base_zero_lr_keeps_params(short_schedule):
    corpus = build_base_corpus(4, Rng(0))
    base = DenoiserParams.init(2)
    before = base.digest()
    train_base(base, corpus, short_schedule, BaseTrainConfig(steps=3, batch_size=2, lr=0.0), Rng(0))
    assert base.digest() == before


def test_train_base_empty_corpus(short_schedule):
    with pytest.raises(InvalidConfigError):
        train_base(DenoiserParams.init(0), [], short_schedule)


def test_heldout_loss_positive(base, short_schedule):
    corpus = build_base_corpus(6, Rng(1))
    assert heldout_loss(base, short_schedule, corpus, Rng(0)) > 0
