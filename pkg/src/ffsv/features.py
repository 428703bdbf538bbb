"""Framing, log-Mel filterbank energies, MFCCs and per-utterance mean normalization."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _binio
from .audio_io import DEFAULT_PRE_EMPHASIS, PIPELINE_RATE, Waveform, pre_emphasize, resample
from .errors import ArchiveFormatError, TooShortError

FRAME_LEN_S = 0.025
HOP_S = 0.010
N_FFT = 512
N_MELS = 64
N_MFCC = 30
FMIN = 20.0
FMAX = 8000.0
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"FFSVFEAT"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """T frames x D coefficients."""

    data: np.ndarray
    frame_shift: float = HOP_S
    kind: str = "logmel"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("feature data must be 2-D (frames x coefficients)")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix contains non-finite values")
        if self.kind not in ("logmel", "mfcc", "gvad"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def frame_params(sample_rate: int = PIPELINE_RATE) -> tuple[int, int]:
    """(frame length, hop) in samples."""
    return int(round(FRAME_LEN_S * sample_rate)), int(round(HOP_S * sample_rate))


def num_frames(n_samples: int, sample_rate: int = PIPELINE_RATE) -> int:
    frame_len, hop = frame_params(sample_rate)
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def frame_signal(w: Waveform, window: bool = True) -> np.ndarray:
    """Split into 25 ms frames every 10 ms; Hamming-windowed unless ``window=False``."""
    frame_len, hop = frame_params(w.sample_rate)
    t = num_frames(len(w), w.sample_rate)
    if t == 0:
        raise TooShortError(f"signal of {len(w)} samples is shorter than one frame ({frame_len})")
    idx = np.arange(t)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = w.samples[idx]
    if window:
        frames = frames * np.hamming(frame_len)
    return frames


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = PIPELINE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular HTK-Mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    return _mel_filterbank(n_mels, n_fft, sample_rate, float(fmin), float(min(fmax, sample_rate / 2)))


def power_spectrum(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def logmel(
    frames: np.ndarray,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    sample_rate: int = PIPELINE_RATE,
    floor: float = LOG_FLOOR,
) -> FeatureMatrix:
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = power_spectrum(frames, n_fft) @ fb.T
    return FeatureMatrix(np.log(np.maximum(energies, floor)), HOP_S, "logmel")


@lru_cache(maxsize=8)
def _dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows 0..n_out-1 of the orthonormal DCT-II matrix of size n_in."""
    return _dct_matrix(n_out, n_in)


def mfcc(
    frames: np.ndarray,
    n_coef: int = N_MFCC,
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = PIPELINE_RATE,
) -> FeatureMatrix:
    """Orthonormal DCT-II of the log-Mel energies; coefficient 0 is kept."""
    lm = logmel(frames, n_fft=n_fft, n_mels=n_mels, sample_rate=sample_rate)
    return mfcc_from_logmel(lm, n_coef)


def mfcc_from_logmel(lm: FeatureMatrix, n_coef: int = N_MFCC) -> FeatureMatrix:
    if n_coef > lm.dim:
        raise ValueError(f"cannot keep {n_coef} cepstra from {lm.dim} bands")
    return FeatureMatrix(lm.data @ dct_matrix(n_coef, lm.dim).T, lm.frame_shift, "mfcc")


def mean_normalize(f: FeatureMatrix) -> FeatureMatrix:
    if f.n_frames < 1:
        raise TooShortError("cannot mean-normalize an empty feature matrix")
    return FeatureMatrix(f.data - f.data.mean(axis=0, keepdims=True), f.frame_shift, f.kind)


def frame_log_energy(w: Waveform) -> np.ndarray:
    """Per-frame mean-square energy in dB (un-windowed frames)."""
    frames = frame_signal(w, window=False)
    return 10.0 * np.log10(np.mean(frames**2, axis=1) + 1e-20)


def compute_features(
    w: Waveform,
    kind: str = "logmel",
    pre_emphasis: float = DEFAULT_PRE_EMPHASIS,
    normalize: bool = True,
) -> FeatureMatrix:
    """Full front end: resample to 16 kHz, pre-emphasize, frame, then log-Mel or MFCC."""
    w = resample(w, PIPELINE_RATE)
    frames = frame_signal(pre_emphasize(w, pre_emphasis))
    if kind == "logmel":
        f = logmel(frames)
    elif kind == "mfcc":
        f = mfcc(frames)
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    return mean_normalize(f) if normalize else f


def write_feature_archive(path: str | Path, feats: dict[str, np.ndarray | FeatureMatrix]) -> None:
    """Records are written in sorted-id order so archives are byte-reproducible."""
    with open(path, "wb") as fh:
        _binio.write_header(fh, FEATURE_MAGIC)
        for utt_id in sorted(feats):
            f = feats[utt_id]
            data = f.data if isinstance(f, FeatureMatrix) else np.asarray(f)
            if data.ndim != 2:
                raise ValueError(f"{utt_id}: features must be 2-D")
            _binio.write_str(fh, utt_id)
            _binio.write_u32(fh, data.shape[0])
            _binio.write_u32(fh, data.shape[1])
            _binio.write_array(fh, data, "<f4")


def read_feature_archive(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _binio.read_header(fh, FEATURE_MAGIC)
        while True:
            peek = fh.read(4)
            if not peek:
                break
            if len(peek) < 4:
                raise ArchiveFormatError("truncated record header")
            n = int.from_bytes(peek, "little")
            utt_id = _binio.read_exact(fh, n).decode("utf-8")
            t = _binio.read_u32(fh)
            d = _binio.read_u32(fh)
            out[utt_id] = _binio.read_array(fh, (t, d), "<f4").astype(np.float64)
    return out
