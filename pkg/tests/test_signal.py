import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csskit.dsp import (AudioBuffer, ConfigurationError, InvalidAudioError, LOG_EPS, MaskMatrix,
                        Spectrogram, apply_mask, hann_window, istft, log_mag_features, num_frames,
                        read_wav, si_sdr, stft, write_wav)

SR = 16000
EDGE = 512  # one window at each end is tapered by the envelope floor; exactness holds inside


def audio(x):
    return AudioBuffer(np.asarray(x, dtype=float), SR)


def test_hann_is_periodic():
    w = hann_window(512)
    assert w[0] == 0.0
    assert np.isclose(w[256], 1.0)
    assert np.allclose(w[1:], w[1:][::-1])


def test_defaults_match_32ms_10ms():
    spec = stft(audio(np.zeros(SR)))
    assert spec.window_len == 512 and spec.hop == 160 and spec.n_bins == 257


@pytest.mark.parametrize("n, expected", [(100, 1), (512, 1), (513, 2), (672, 2), (673, 3), (16000, 98)])
def test_frame_count(n, expected):
    assert num_frames(n, 512, 160) == expected
    assert stft(audio(np.ones(n))).n_frames == expected


def test_dc_concentrates_in_bin_zero():
    spec = stft(audio(np.ones(512)))
    assert np.isclose(abs(spec.frames[0, 0]), hann_window(512).sum())
    assert np.max(np.abs(spec.frames[0, 2:])) < 1e-9


def test_matches_direct_dft(rng):
    k = 37
    x = np.cos(2 * np.pi * k * np.arange(2000) / 512) + 0.1 * rng.standard_normal(2000)
    spec = stft(audio(x))
    w = hann_window(512)
    padded = np.pad(x, (0, (spec.n_frames - 1) * 160 + 512 - len(x)))
    n = np.arange(512)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(257), n) / 512)
    for t in range(spec.n_frames):
        ref = basis @ (padded[t * 160:t * 160 + 512] * w)
        assert np.max(np.abs(ref - spec.frames[t])) < 1e-9
    assert np.argmax(np.abs(spec.frames[1])) == k


def test_nonfinite_rejected():
    with pytest.raises(InvalidAudioError):
        AudioBuffer(np.array([0.0, np.nan]), SR)
    with pytest.raises(InvalidAudioError):
        AudioBuffer(np.zeros(4), 0)


def test_bad_hop_is_configuration_error():
    with pytest.raises(ConfigurationError):
        stft(audio(np.zeros(1000)), 512, 600)


def test_non_cola_pair_rejected_by_istft():
    spec = stft(audio(np.zeros(2000)), 256, 256)
    with pytest.raises(ConfigurationError):
        istft(spec)


def test_roundtrip_and_zero(rng):
    x = rng.standard_normal(5000)
    y = istft(stft(audio(x))).samples
    assert len(y) == (num_frames(5000, 512, 160) - 1) * 160 + 512
    assert np.max(np.abs(y[EDGE:5000 - EDGE] - x[EDGE:-EDGE])) < 1e-6 * np.max(np.abs(x))
    z = istft(Spectrogram(np.zeros((10, 257), complex), 512, 160, SR))
    assert not np.any(z.samples)


def test_identity_and_zero_masks(rng):
    x = rng.standard_normal(4000)
    spec = stft(audio(x))
    ones = apply_mask(spec, MaskMatrix(np.ones(spec.frames.shape)))
    assert np.array_equal(ones.frames, spec.frames)
    assert np.max(np.abs(istft(ones).samples[EDGE:4000 - EDGE] - x[EDGE:-EDGE])) < 1e-6 * np.abs(x).max()
    assert not np.any(apply_mask(spec, np.zeros(spec.frames.shape)).frames)
    with pytest.raises(ValueError):
        apply_mask(spec, np.ones((3, 257)))
    with pytest.raises(ValueError):
        MaskMatrix(np.full((2, 2), 1.5))


def test_ideal_binary_mask_separates_disjoint_bands():
    t = np.arange(SR) / SR
    a, b = np.sin(2 * np.pi * 440 * t), 0.7 * np.sin(2 * np.pi * 3000 * t)
    spec = stft(audio(a + b))
    freqs = np.arange(257) * SR / 512
    low = np.broadcast_to((freqs < 1500).astype(float), spec.frames.shape)
    ya = istft(apply_mask(spec, low)).samples[:SR]
    yb = istft(apply_mask(spec, 1 - low)).samples[:SR]
    interior = slice(512, SR - 512)
    assert si_sdr(ya[interior], a[interior]) > 20
    assert si_sdr(yb[interior], b[interior]) > 20


def test_log_features():
    zero = stft(audio(np.zeros(1000)))
    assert np.allclose(log_mag_features(zero), np.log(LOG_EPS))
    rng = np.random.default_rng(0)
    x = rng.standard_normal(3000)
    f1, f2 = log_mag_features(stft(audio(x))), log_mag_features(stft(audio(2 * x)))
    big = np.abs(stft(audio(x)).frames) > 1e-3
    assert np.allclose((f2 - f1)[big], np.log(2), atol=1e-4)
    assert np.all(np.isfinite(f1))


def test_si_sdr_examples(rng):
    x = rng.standard_normal(1000)
    assert si_sdr(x, x) == 60.0
    assert si_sdr(-x, x) == 60.0
    with pytest.raises(ValueError):
        si_sdr(x, np.zeros(1000))
    with pytest.raises(ValueError):
        si_sdr(x[:10], x)


def test_si_sdr_equal_power_noise_monte_carlo():
    r = np.random.default_rng(7)
    vals = []
    for _ in range(200):
        ref = r.standard_normal(4000)
        vals.append(si_sdr(ref + r.standard_normal(4000), ref))
    assert abs(np.mean(vals)) < 0.5


def test_wav_roundtrip(tmp_path, rng):
    a = audio(0.5 * rng.uniform(-1, 1, 800))
    write_wav(tmp_path / "f.wav", a)
    assert np.allclose(read_wav(tmp_path / "f.wav").samples, a.samples, atol=1e-7)
    write_wav(tmp_path / "p.wav", a, "pcm16")
    assert np.allclose(read_wav(tmp_path / "p.wav").samples, a.samples, atol=1 / 32768)
    with pytest.raises(InvalidAudioError):
        read_wav(tmp_path / "p.wav", expected_sr=8000)


signals = st.integers(2048, 6000).flatmap(
    lambda n: st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).standard_normal(n)))


@given(signals)
def test_roundtrip_property(x):
    y = istft(stft(audio(x))).samples
    assert np.max(np.abs(y[EDGE:len(x) - EDGE] - x[EDGE:-EDGE])) < 1e-6 * np.max(np.abs(x))


@given(signals, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(x, a, b):
    y = np.roll(x, 17)
    lhs = stft(audio(a * x + b * y)).frames
    rhs = a * stft(audio(x)).frames + b * stft(audio(y)).frames
    assert np.max(np.abs(lhs - rhs)) < 1e-9 * max(1.0, np.abs(lhs).max())


@given(signals, st.integers(0, 2**31 - 1))
def test_mask_monotone(x, seed):
    r = np.random.default_rng(seed)
    spec = stft(audio(x))
    m1 = r.uniform(0, 1, spec.frames.shape)
    m2 = np.minimum(1, m1 + r.uniform(0, 0.5, m1.shape))
    e1 = np.sum(np.abs(apply_mask(spec, m1).frames) ** 2, axis=1)
    e2 = np.sum(np.abs(apply_mask(spec, m2).frames) ** 2, axis=1)
    assert np.all(e2 >= e1)


@given(signals, st.floats(1e-3, 1e3))
def test_si_sdr_scale_invariant(x, scale):
    ref = np.roll(x, 5) + 0.3 * x
    assert abs(si_sdr(scale * x, ref) - si_sdr(x, ref)) < 1e-9
