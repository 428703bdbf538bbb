"""WAV ingestion, band-limited resampling and pre-emphasis."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AudioFormatError, EmptyAudioError, UnsupportedFormatError

PIPELINE_RATE = 16000
DEFAULT_PRE_EMPHASIS = 0.97

RESAMPLE_TAPS = 64
RESAMPLE_KAISER_BETA = 8.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono sample sequence with its sample rate (Hz)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def read_wav(path: str | Path) -> list[Waveform]:
    """Read a 16-bit PCM WAV file, returning one Waveform per channel."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n_frames = fh.getnframes()
            raw = fh.readframes(n_frames)
    except wave.Error as exc:
        if str(exc).startswith("unknown format"):
            raise UnsupportedFormatError(f"{path}: {exc}") from exc
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if n_frames == 0 or len(raw) == 0:
        raise EmptyAudioError(f"{path}: no audio data")
    pcm = np.frombuffer(raw, dtype="<i2")
    pcm = pcm[: (len(pcm) // n_channels) * n_channels].reshape(-1, n_channels)
    scaled = pcm.astype(np.float64) / 32768.0
    return [Waveform(scaled[:, ch].copy(), rate) for ch in range(n_channels)]


def write_wav(path: str | Path, channels: Waveform | Sequence[Waveform]) -> None:
    """Write one or more equal-rate Waveforms as an interleaved 16-bit PCM WAV.

    Samples are clipped to the representable range [-1, 1 - 2**-15].
    """
    if isinstance(channels, Waveform):
        channels = [channels]
    if not channels:
        raise ValueError("nothing to write")
    rate = channels[0].sample_rate
    if any(c.sample_rate != rate for c in channels):
        raise ValueError("all channels must share a sample rate")
    n = min(len(c) for c in channels)
    data = np.stack([c.samples[:n] for c in channels], axis=1)
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(len(channels))
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def _kaiser(t: np.ndarray, half_width: float, beta: float) -> np.ndarray:
    ratio = np.clip(t / half_width, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - ratio**2)) / np.i0(beta)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc resampling to ``target_rate``.

    Each output sample is a 64-tap Kaiser-windowed (beta=8) sinc interpolation
    of the input, with the cutoff at the lower of the two Nyquist frequencies.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if len(w) == 0:
        raise EmptyAudioError("cannot resample an empty waveform")
    if target_rate == w.sample_rate:
        return w
    src = w.sample_rate
    n_out = int(round(len(w) * target_rate / src))
    cutoff = min(1.0, target_rate / src)  # relative to the input Nyquist
    half = RESAMPLE_TAPS // 2

    x = w.samples
    pos = np.arange(n_out) * (src / target_rate)
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)  # 64 taps around each position
    idx = base[:, None] + offsets[None, :]
    dist = pos[:, None] - idx
    kernel = cutoff * np.sinc(cutoff * dist) * _kaiser(dist, float(half), RESAMPLE_KAISER_BETA)
    valid = (idx >= 0) & (idx < len(x))
    taps = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
    out = np.sum(taps * kernel, axis=1)
    return Waveform(out, target_rate)


def pre_emphasize(w: Waveform, alpha: float = DEFAULT_PRE_EMPHASIS) -> Waveform:
    """y[0] = x[0], y[t] = x[t] - alpha * x[t-1]."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    x = w.samples
    if len(x) == 0:
        return w
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - alpha * x[:-1]
    return Waveform(y, w.sample_rate)
