import numpy as np
import pytest

from ffsv.audio_io import Waveform
from ffsv.errors import TooShortError
from ffsv.features import (
    FeatureMatrix,
    LOG_FLOOR,
    compute_features,
    dct_matrix,
    frame_signal,
    hz_to_mel,
    logmel,
    mean_normalize,
    mel_to_hz,
    mfcc,
    read_feature_archive,
    write_feature_archive,
)

from oracles import brute_force_dct, brute_force_logmel


def test_frame_count():
    w = Waveform(np.zeros(16000), 16000)
    assert frame_signal(w).shape == (98, 400)


def test_single_frame_boundary():
    assert frame_signal(Waveform(np.ones(400), 16000)).shape == (1, 400)


def test_too_short():
    with pytest.raises(TooShortError):
        frame_signal(Waveform(np.ones(399), 16000))


def test_frames_are_hamming_windowed():
    frames = frame_signal(Waveform(np.ones(800), 16000))
    np.testing.assert_allclose(frames[0], np.hamming(400))


def test_mel_scale_round_trip():
    f = np.array([0.0, 20.0, 700.0, 8000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))


def test_logmel_floor():
    lm = logmel(np.zeros((3, 400)))
    np.testing.assert_array_equal(lm.data, np.log(LOG_FLOOR))


def test_logmel_shape():
    frames = frame_signal(Waveform(np.random.default_rng(0).normal(size=16000), 16000))
    assert logmel(frames).data.shape == (98, 64)


def test_logmel_matches_brute_force():
    rng = np.random.default_rng(7)
    frames = rng.normal(size=(3, 400)) * np.hamming(400)
    lm = logmel(frames).data
    for i in range(3):
        np.testing.assert_allclose(lm[i], brute_force_logmel(frames[i]), rtol=1e-6)


def test_mfcc_shape_and_brute_force():
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(2, 400))
    out = mfcc(frames)
    assert out.data.shape == (2, 30)
    lm = logmel(frames).data
    for i in range(2):
        np.testing.assert_allclose(out.data[i], brute_force_dct(lm[i], 30), rtol=1e-8, atol=1e-12)


def test_dct_of_constant_has_only_c0():
    m = dct_matrix(30, 64)
    out = m @ np.full(64, 3.0)
    assert out[0] == pytest.approx(3.0 * np.sqrt(64))
    np.testing.assert_allclose(out[1:], 0.0, atol=1e-12)


def test_dct_orthonormal():
    full = dct_matrix(64, 64)
    np.testing.assert_allclose(full.T @ full, np.eye(64), atol=1e-10)
    part = dct_matrix(30, 64)
    np.testing.assert_allclose(part @ part.T, np.eye(30), atol=1e-10)


def test_mean_normalize_hand_case():
    out = mean_normalize(FeatureMatrix(np.array([[1.0, 2.0], [3.0, 4.0]])))
    np.testing.assert_array_equal(out.data, [[-1.0, -1.0], [1.0, 1.0]])


def test_mean_normalize_zero_mean_input_unchanged():
    x = np.array([[1.0, -2.0], [-1.0, 2.0]])
    np.testing.assert_array_equal(mean_normalize(FeatureMatrix(x)).data, x)


def test_mean_normalize_column_means():
    x = np.random.default_rng(2).normal(5, 3, size=(57, 30))
    assert np.all(np.abs(mean_normalize(FeatureMatrix(x)).data.mean(axis=0)) < 1e-9)


def test_logmel_shift_covariance():
    x = np.random.default_rng(4).normal(size=8000)
    a = logmel(frame_signal(Waveform(x, 16000))).data
    shifted = np.concatenate([np.random.default_rng(5).normal(size=160), x])
    b = logmel(frame_signal(Waveform(shifted, 16000))).data
    np.testing.assert_allclose(b[1:1 + a.shape[0] - 1], a[:-1], atol=1e-6)


def test_logmel_energy_monotone_in_scale():
    x = np.random.default_rng(6).normal(size=4000) * 0.1
    a = logmel(frame_signal(Waveform(x, 16000))).data
    b = logmel(frame_signal(Waveform(2.0 * x, 16000))).data
    above = a > np.log(LOG_FLOOR)
    assert np.all(b[above] > a[above])


def test_compute_features_pipeline():
    w = Waveform(np.random.default_rng(1).normal(size=16000) * 0.1, 16000)
    lm = compute_features(w, "logmel")
    mf = compute_features(w, "mfcc")
    assert lm.data.shape == (98, 64) and lm.kind == "logmel"
    assert mf.data.shape == (98, 30) and mf.kind == "mfcc"
    assert np.all(np.abs(lm.data.mean(axis=0)) < 1e-9)


def test_compute_features_resamples():
    w = Waveform(np.random.default_rng(1).normal(size=8000) * 0.1, 8000)
    assert compute_features(w).data.shape == (98, 64)


def test_feature_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats = {"b": rng.normal(size=(5, 3)), "a": rng.normal(size=(2, 3)), "ü": rng.normal(size=(1, 4))}
    write_feature_archive(tmp_path / "f.ark", feats)
    back = read_feature_archive(tmp_path / "f.ark")
    assert set(back) == set(feats)
    for k in feats:
        np.testing.assert_allclose(back[k], feats[k].astype(np.float32), rtol=0)
    assert (tmp_path / "f.ark").read_bytes()[:8] == b"FFSVFEAT"
