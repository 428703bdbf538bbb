import numpy as np
import pytest

from ffsv.audio_io import Waveform
from ffsv.errors import DimensionMismatchError
from ffsv.features import frame_log_energy
from ffsv.vad import (
    FrameMask,
    GvadModel,
    Node,
    energy_vad,
    extract_nonspeech,
    gvad_features,
    gvad_predict,
    gvad_train,
    load_gvad,
    logistic_loss,
    save_gvad,
)


def tone(n, amp=0.5, freq=440.0, sr=16000):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)


def separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = x[:, 0] + 0.5 * x[:, 1] > 0
    return x, y


def xor(n=400, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    y = (x[:, 0] > 0) ^ (x[:, 1] > 0)
    return x, y


def accuracy(model, x, y):
    return np.mean(gvad_predict(model, x).mask == y)


def test_energy_vad_silence():
    assert not energy_vad(Waveform(np.zeros(16000), 16000)).mask.any()


def test_energy_vad_loud_tone():
    assert energy_vad(Waveform(tone(16000), 16000)).mask.all()


def test_energy_vad_boundary():
    x = np.concatenate([np.zeros(8000), tone(8000)])
    mask = energy_vad(Waveform(x, 16000)).mask
    # first frame whose 400-sample window reaches the tone starts at sample 7601
    true_boundary = int(np.ceil((8000 - 400 + 1) / 160))
    found = int(np.argmax(mask))
    assert abs(found - true_boundary) <= 2
    assert mask[found:].all()


def test_energy_vad_scale_invariant():
    rng = np.random.default_rng(0)
    x = np.concatenate([0.001 * rng.normal(size=4000), tone(6000), 0.001 * rng.normal(size=4000)])
    a = energy_vad(Waveform(x, 16000)).mask
    b = energy_vad(Waveform(0.2 * x, 16000)).mask
    np.testing.assert_array_equal(a, b)


def test_energy_vad_accepts_log_energy_sequence():
    energy = np.array([-90.0, -10, -12, -11, -10, -60, -70, -65, -80, -10, -10])
    mask = energy_vad(energy, median_window=1).mask
    np.testing.assert_array_equal(mask, energy > -40)


def test_gvad_separable():
    x, y = separable()
    m = gvad_train([x], [y], n_trees=50, max_depth=2)
    assert len(m.trees) == 50
    assert accuracy(m, x, y) >= 0.99


def test_gvad_loss_non_increasing():
    x, y = xor()
    m = gvad_train([x], [y], n_trees=40, max_depth=2, shrinkage=1.0)
    assert len(m.loss_history) == 41
    assert np.all(np.diff(m.loss_history) <= 1e-12)


def test_gvad_xor_needs_depth():
    x, y = xor()
    deep = gvad_train([x], [y], n_trees=100, max_depth=2)
    stumps = gvad_train([x], [y], n_trees=100, max_depth=1)
    assert accuracy(deep, x, y) >= 0.95
    assert accuracy(stumps, x, y) <= 0.75


def test_gvad_single_class():
    x = np.random.default_rng(0).normal(size=(50, 3))
    m = gvad_train([x], [np.ones(50, bool)], n_trees=10)
    assert m.trees == []
    assert gvad_predict(m, x).mask.all()


def test_gvad_empty_training_set():
    with pytest.raises(ValueError):
        gvad_train([], [])


def test_gvad_misaligned_labels():
    with pytest.raises(DimensionMismatchError):
        gvad_train([np.zeros((5, 2))], [np.zeros(4, bool)])


def test_tree_depth_and_feature_bounds():
    x, y = xor()
    m = gvad_train([x], [y], n_trees=20, max_depth=3)
    assert all(t.depth() <= 3 for t in m.trees)
    assert all(t.max_feature() < 2 for t in m.trees)


def test_predict_zero_trees_tie_is_nonspeech():
    m = GvadModel(trees=[], shrinkage=1.0, bias=0.0, n_features=2)
    assert not gvad_predict(m, np.zeros((4, 2))).mask.any()


def test_predict_hand_stump():
    stump = Node(feature=0, threshold=1.0, left=Node(value=-4.0), right=Node(value=4.0))
    m = GvadModel(trees=[stump], shrinkage=1.0, bias=0.0, n_features=2)
    np.testing.assert_array_equal(gvad_predict(m, np.array([[2.0, 0.0], [0.0, 0.0]])).mask, [True, False])


def test_predict_dimension_mismatch():
    m = GvadModel(n_features=3)
    with pytest.raises(DimensionMismatchError):
        gvad_predict(m, np.zeros((2, 2)))


def test_predict_is_deterministic():
    x, y = separable()
    m = gvad_train([x], [y], n_trees=10)
    np.testing.assert_array_equal(gvad_predict(m, x).mask, gvad_predict(m, x).mask)


def test_gvad_model_file_round_trip(tmp_path):
    x, y = xor()
    m = gvad_train([x], [y], n_trees=15, max_depth=3)
    save_gvad(tmp_path / "vad.bin", m)
    back = load_gvad(tmp_path / "vad.bin")
    assert (tmp_path / "vad.bin").read_bytes()[:8] == b"FFSVGVAD"
    assert back.bias == m.bias and back.shrinkage == m.shrinkage and len(back.trees) == 15
    np.testing.assert_array_equal(back.decision_function(x), m.decision_function(x))


def test_logistic_loss_reference():
    y = np.array([True, False])
    logit = np.array([0.0, 2.0])
    assert logistic_loss(y, logit) == pytest.approx(0.5 * (np.log(2) + np.log1p(np.exp(2))))


def test_extract_nonspeech_complements():
    w = Waveform(np.arange(16000, dtype=float) / 16000, 16000)
    n = 98
    assert len(extract_nonspeech(w, FrameMask(np.ones(n, bool)))) == 0
    full = extract_nonspeech(w, FrameMask(np.zeros(n, bool)))
    np.testing.assert_array_equal(full.samples, w.samples[: n * 160])


def test_extract_nonspeech_alternating():
    counting = np.arange(2000, dtype=float) / 2000
    w = Waveform(counting, 16000)
    mask = np.array([i % 2 == 0 for i in range(10)])  # frames 1, 3, 5, 7, 9 are non-speech
    out = extract_nonspeech(w, FrameMask(mask)).samples
    expected = np.concatenate([np.arange(i * 160, (i + 1) * 160) for i in range(1, 10, 2)]) / 2000
    np.testing.assert_array_equal(out, expected)


def test_extract_speech_plus_nonspeech_is_total():
    w = Waveform(np.random.default_rng(0).normal(size=4000), 16000)
    mask = np.random.default_rng(1).random(23) > 0.5
    ns = extract_nonspeech(w, FrameMask(mask))
    sp = extract_nonspeech(w, FrameMask(~mask))
    assert len(ns) + len(sp) == 23 * 160


def test_gvad_features_shape():
    w = Waveform(tone(16000), 16000)
    f = gvad_features(w)
    assert f.data.shape == (98, 65)
    np.testing.assert_allclose(f.data[:, 64], frame_log_energy(w))
