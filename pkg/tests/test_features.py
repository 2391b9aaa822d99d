import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskscalar.config import build_config
from maskscalar.features import (
    STD_FLOOR,
    ConfigError,
    FeatureConfig,
    NormStats,
    asr_feature_pipeline,
    hann_window,
    magnitude_spectrogram,
    mel_center_frequencies,
    mel_filterbank,
    mel_spectrogram,
    n_output_frames,
    normalization_stats,
    read_matrix_csv,
    read_wav,
    stack_frames,
    write_matrix_csv,
    write_wav,
)

SMALL = FeatureConfig(sample_rate=8000, window=0.008, hop=0.004, n_mels=4, fmax=4000.0)
# Slaney mel breakpoints for 4 bands on [20, 4000] Hz, recomputed by hand
SMALL_CENTERS_HZ = [484.8501375282219, 949.700275056444, 1533.4439682595223, 2476.6460936189674]


def test_small_filterbank_centers():
    assert SMALL.n_fft == 64
    np.testing.assert_allclose(mel_center_frequencies(SMALL), SMALL_CENTERS_HZ, rtol=1e-12)


@pytest.mark.parametrize("cfg", [SMALL, FeatureConfig(), FeatureConfig(n_mels=128)])
def test_filterbank_coverage_and_order(cfg):
    fb = mel_filterbank(cfg)
    assert fb.shape == (cfg.n_bins, cfg.n_mels)
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    inside = (freqs > cfg.fmin) & (freqs < cfg.fmax)
    assert np.all(fb[inside].sum(axis=1) > 0)
    peaks = freqs[np.argmax(fb, axis=0)]
    assert np.all(np.diff(peaks) >= 0)
    assert np.all(np.diff(mel_center_frequencies(cfg)) > 0)


def test_too_many_bands_is_a_config_error():
    with pytest.raises(ConfigError):
        mel_filterbank(FeatureConfig(sample_rate=8000, window=0.008, hop=0.004, n_mels=40, fmax=4000.0))


def test_parseval_per_frame():
    cfg = FeatureConfig()
    x = np.random.default_rng(0).standard_normal(4000)
    mag = magnitude_spectrogram(x, cfg)
    win, hop = cfg.win_samples, cfg.hop_samples
    for t in range(mag.shape[0]):
        frame = x[t * hop : t * hop + win] * hann_window(win)
        power = mag[t] ** 2
        one_sided = power[0] + power[-1] + 2 * power[1:-1].sum()
        assert one_sided / cfg.n_fft == pytest.approx(np.sum(frame**2), rel=1e-9)


def test_bin_centred_sine_leakage():
    cfg = FeatureConfig()
    k = 40
    f = k * cfg.sample_rate / cfg.n_fft
    x = np.sin(2 * np.pi * f * np.arange(8000) / cfg.sample_rate)
    power = magnitude_spectrogram(x, cfg) ** 2
    near = power[:, k - 1 : k + 2].sum()
    assert (power.sum() - near) / near < 10 ** (-30 / 10)
    assert np.all(np.argmax(power, axis=1) == k)


def test_zero_and_scaled_waveforms():
    cfg = FeatureConfig()
    assert not np.any(mel_spectrogram(np.zeros(2000), cfg))
    x = np.random.default_rng(1).standard_normal(2000)
    np.testing.assert_allclose(mel_spectrogram(-2.5 * x, cfg), 2.5 * mel_spectrogram(x, cfg), rtol=1e-12)


def test_white_noise_bands_follow_filter_mass():
    cfg = FeatureConfig()
    n = cfg.win_samples + 99 * cfg.hop_samples
    mel = mel_spectrogram(np.random.default_rng(2).standard_normal(n), cfg)
    assert mel.shape[0] == 100
    ratio = mel.mean(axis=0) / mel_filterbank(cfg).sum(axis=0)
    assert ratio.max() / ratio.min() < 2.0


def test_short_waveform_rejected():
    with pytest.raises(ValueError):
        magnitude_spectrogram(np.zeros(10), FeatureConfig())


def test_pipeline_shape_nine_frames():
    cfg = FeatureConfig(n_mels=6)
    mel = np.random.default_rng(3).uniform(0.1, 2.0, (9, 6))
    out = asr_feature_pipeline(mel, NormStats(np.zeros(6), np.ones(6)), cfg)
    assert out.shape == (3, 24)


def test_pipeline_constant_input_normalises_to_zero():
    cfg = FeatureConfig(n_mels=5)
    mean = np.linspace(-2.0, 1.0, 5)
    mel = np.tile(np.exp(mean), (7, 1))
    out = asr_feature_pipeline(mel, NormStats(mean, np.ones(5)), cfg)
    np.testing.assert_allclose(out, 0.0, atol=1e-15)


def test_paper_geometry_matches_mask_width():
    cfg = build_config(preset_name="paper")
    assert cfg.feature.feature_dim == 512 == cfg.model.mask_dim


def test_identity_mask_is_noop():
    cfg = FeatureConfig(n_mels=6)
    mel = np.random.default_rng(4).uniform(0.01, 3.0, (10, 6))
    stats = NormStats(np.full(6, -0.3), np.full(6, 1.7))
    np.testing.assert_array_equal(asr_feature_pipeline(mel * 1.0, stats, cfg), asr_feature_pipeline(mel, stats, cfg))


def test_stacking_is_causal_and_oldest_first():
    x = np.arange(12.0).reshape(6, 2)
    s = stack_frames(x, 3, 1)
    np.testing.assert_array_equal(s[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(s[4], [4, 5, 6, 7, 8, 9])
    y = x.copy()
    y[4:] = -1.0
    np.testing.assert_array_equal(stack_frames(y, 3, 1)[:4], s[:4])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 5))
def test_output_frame_law(frames, stack, subsample):
    out = stack_frames(np.zeros((frames, 2)), stack, subsample)
    assert out.shape == (n_output_frames(frames, subsample), 2 * stack)
    assert out.shape[0] == -(-frames // subsample)


def test_stats_constant_corpus():
    stats = normalization_stats([np.full((5, 3), 2.0)])
    np.testing.assert_allclose(stats.mean, np.log(2.0), rtol=1e-15)
    np.testing.assert_array_equal(stats.std, STD_FLOOR)


def test_stats_two_values():
    stats = normalization_stats([np.array([[1.0], [np.e**2]])])
    assert stats.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert stats.std[0] == pytest.approx(1.0, abs=1e-15)


def test_stats_two_pass_reference():
    rng = np.random.default_rng(5)
    corpus = [rng.uniform(1e-3, 10.0, (rng.integers(5, 50), 8)) for _ in range(30)]
    stats = normalization_stats(corpus)
    logs = np.concatenate([np.log(m) for m in corpus])
    mean = np.array([sum(logs[:, j]) / logs.shape[0] for j in range(8)])
    var = np.array([sum((logs[:, j] - mean[j]) ** 2) / logs.shape[0] for j in range(8)])
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(stats.std, np.sqrt(var), rtol=1e-12)


def test_stats_need_data():
    with pytest.raises(ValueError):
        normalization_stats([])


def test_norm_stats_reject_zero_std():
    with pytest.raises(ValueError):
        NormStats(np.zeros(2), np.array([1.0, 0.0]))


def test_feature_config_validation():
    with pytest.raises(ConfigError):
        FeatureConfig(hop=0.05, window=0.02)
    with pytest.raises(ConfigError):
        FeatureConfig(fmax=9000.0)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(6).uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000
    assert np.max(np.abs(x - y)) <= 0.5 / 32768 + 1e-15


def test_csv_round_trip_is_exact(tmp_path):
    m = np.random.default_rng(7).standard_normal((4, 3)) * 1e-7
    write_matrix_csv(tmp_path / "m.csv", m)
    assert read_matrix_csv(tmp_path / "m.csv").tobytes() == m.tobytes()
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "d0,d1,d2"
