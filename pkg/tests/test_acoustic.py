import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avalign import acoustic as ac
from avalign.acoustic import AudioDataError, NoiseSpec, Waveform


def tone(freq, seconds=1.0, sr=ac.SAMPLE_RATE, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# -- resampling ---------------------------------------------------------------

def test_resample_identity_at_target_rate(rng):
    w = Waveform(rng.uniform(-1, 1, 1000), 22050)
    assert np.array_equal(ac.resample(w).samples, w.samples)


def test_resample_halves_44k():
    out = ac.resample(Waveform(np.zeros(44100), 44100))
    assert abs(out.samples.size - 22050) <= 1
    assert out.sample_rate == 22050


def test_resample_preserves_tone_frequency():
    out = ac.resample(tone(440.0, sr=16000))
    spec = np.abs(np.fft.rfft(out.samples))
    peak_hz = np.argmax(spec) * out.sample_rate / out.samples.size
    assert abs(peak_hz - 440.0) < 2.0


def test_resample_empty_is_data_error():
    with pytest.raises(AudioDataError):
        ac.resample(Waveform(np.zeros(0), 16000))


# -- mixing -------------------------------------------------------------------

def test_gain_equal_power_zero_db():
    assert ac.noise_gain(1.0, 1.0, 0.0) == 1.0


def test_gain_equal_power_ten_db():
    assert ac.noise_gain(2.0, 2.0, 10.0) == pytest.approx(10 ** -0.5, rel=1e-12)
    assert ac.noise_gain(2.0, 2.0, 10.0) == pytest.approx(0.31622776601683794, rel=1e-12)


def test_kind_none_returns_signal(rng):
    w = Waveform(rng.uniform(-0.5, 0.5, 3000), 22050)
    assert np.array_equal(ac.apply_noise(w, NoiseSpec()).samples, w.samples)
    assert np.array_equal(ac.mix_at_snr(w, Waveform(np.ones(3), 22050), float("inf")).samples, w.samples)


def test_zero_power_noise_is_data_error(rng):
    w = Waveform(rng.normal(size=1000), 22050)
    with pytest.raises(AudioDataError):
        ac.mix_at_snr(w, Waveform(np.zeros(100), 22050), 5.0)


def test_noise_shorter_than_signal_is_looped():
    n = ac.fit_length(np.array([1.0, 2.0, 3.0]), 7)
    assert n.tolist() == [1, 2, 3, 1, 2, 3, 1]


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 30), st.sampled_from(["white_gaussian", "cafeteria", "street"]), st.integers(0, 2**31))
def test_measured_snr_matches_request(snr, kind, seed):
    rng = np.random.default_rng(seed)
    clean = Waveform(rng.uniform(-0.3, 0.3, 4000) * np.hanning(4000), 22050)
    mixed = ac.apply_noise(clean, NoiseSpec(kind, snr, seed))
    assert abs(ac.measured_snr(clean.samples, mixed.samples) - snr) <= 0.1


def test_noise_spec_requires_finite_snr():
    with pytest.raises(ValueError):
        NoiseSpec("white_gaussian", float("inf"))
    with pytest.raises(ValueError):
        NoiseSpec("thunder", 0.0)


def test_noise_generators_are_seeded():
    for kind in ("white_gaussian", "cafeteria", "street"):
        a, b = ac.make_noise(kind, 5000, 3), ac.make_noise(kind, 5000, 3)
        assert np.array_equal(a, b)
        assert ac.power(a) > 0
        assert not np.array_equal(a, ac.make_noise(kind, 5000, 4))


# -- features -----------------------------------------------------------------

def test_one_second_gives_98_frames():
    assert ac.log_mel_spectrogram(tone(1000.0)).shape == (98, 30)
    assert ac.num_frames(22050) == 1 + (22050 - 551) // 220 == 98


@settings(max_examples=40, deadline=None)
@given(st.integers(551, 20000))
def test_frame_count_formula(n):
    w = Waveform(np.random.default_rng(n).normal(size=n) * 0.1, 22050)
    assert ac.log_mel_spectrogram(w).shape[0] == 1 + (n - 551) // 220


def test_shorter_than_window_is_data_error():
    with pytest.raises(AudioDataError):
        ac.log_mel_spectrogram(Waveform(np.zeros(550), 22050))


def test_silence_hits_the_log_floor():
    mel = ac.log_mel_spectrogram(Waveform(np.zeros(4000), 22050))
    expected = np.log(ac.LOG_FLOOR * ac.mel_filterbank().sum(axis=1))
    assert np.all(np.isfinite(mel))
    np.testing.assert_allclose(mel, np.broadcast_to(expected, mel.shape), rtol=1e-12)


def test_filterbank_geometry():
    fb = ac.mel_filterbank()
    assert fb.shape == (30, 513)
    freqs = np.arange(513) * 22050 / 1024
    assert np.all(fb[:, freqs < 80.0] == 0)
    assert np.all(fb >= 0) and np.all(fb <= 1)


@pytest.mark.parametrize("freq", [300.0, 1000.0, 2500.0, 6000.0])
def test_tone_peaks_in_nearest_band(freq):
    mel = ac.log_mel_spectrogram(tone(freq))
    centers = ac.mel_centers()
    band = int(np.argmax(mel.mean(axis=0)))
    assert band == int(np.argmin(np.abs(centers - freq)))


def test_deltas_of_constant_are_zero(rng):
    mel = np.tile(rng.normal(size=30), (12, 1))
    feats = ac.append_deltas(mel)
    assert feats.shape == (12, 90)
    np.testing.assert_array_equal(feats[:, 30:], 0.0)


def test_deltas_of_linear_ramp(rng):
    slope = rng.normal(size=30)
    mel = np.arange(15)[:, None] * slope + rng.normal(size=30)
    feats = ac.append_deltas(mel)
    np.testing.assert_allclose(feats[2:-2, 30:60], np.tile(slope, (11, 1)), atol=1e-12)
    np.testing.assert_allclose(feats[4:-4, 60:], 0.0, atol=1e-12)


def test_deltas_brute_force(rng):
    x = rng.normal(size=(7, 30))

    def clamp(t):
        return x[min(max(t, 0), 6)]

    brute = np.array([sum(n * (clamp(t + n) - clamp(t - n)) for n in (1, 2)) / 10.0 for t in range(7)])
    np.testing.assert_allclose(ac.deltas(x), brute, atol=1e-14)


def test_noise_adds_energy_in_most_frames():
    from avalign.corpus import SyntheticSpec, render_audio

    spec = SyntheticSpec(seed=2, n_utterances=1)
    clean = render_audio("abcdefabcdef", spec, np.random.default_rng(0))
    noisy = ac.apply_noise(clean, NoiseSpec("white_gaussian", 0.0, 9))
    a = ac.log_mel_spectrogram(clean).sum(axis=1)
    b = ac.log_mel_spectrogram(noisy).sum(axis=1)
    assert np.mean(b > a) >= 0.95


@settings(max_examples=20, deadline=None)
@given(st.integers(551, 12000), st.integers(0, 1000))
def test_features_finite(n, seed):
    w = Waveform(np.random.default_rng(seed).uniform(-1, 1, n), 22050)
    f = ac.audio_features(w)
    assert f.shape == (1 + (n - 551) // 220, 90)
    assert np.all(np.isfinite(f))


# -- I/O ----------------------------------------------------------------------

def test_wav_round_trip_pcm16_and_float(tmp_path):
    w = tone(500.0, 0.1)
    ac.write_wav(tmp_path / "a.wav", w)
    back = ac.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 22050
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 16000)
    ac.write_wav(tmp_path / "b.wav", w, pcm16=False)
    np.testing.assert_allclose(ac.read_wav(tmp_path / "b.wav").samples, w.samples, atol=1e-7)


def test_corrupt_wav_is_data_error(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000garbage")
    with pytest.raises(AudioDataError):
        ac.read_wav(tmp_path / "bad.wav")


def test_feature_cache_round_trip(tmp_path, rng):
    f = rng.normal(size=(11, 90))
    ac.write_feature_cache(tmp_path / "f.feat", f)
    raw = (tmp_path / "f.feat").read_bytes()
    assert np.frombuffer(raw[:8], "<i4").tolist() == [11, 90]
    np.testing.assert_allclose(ac.read_feature_cache(tmp_path / "f.feat"), f, rtol=1e-6)


def test_normalizer_standardises(rng):
    seqs = [rng.normal(3.0, 2.0, size=(50, 90)) for _ in range(4)]
    norm = ac.FeatureNormalizer.fit(seqs)
    z = np.concatenate([norm(s) for s in seqs])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)
