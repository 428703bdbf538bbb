"""Shoebox room simulation (image-source method), RIR convolution and SNR mixing."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import PIPELINE_RATE, Waveform
from .errors import EmptyAudioError
from .features import frame_params
from .vad import energy_vad

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81
POSITION_MARGIN = 0.1
ARRAY_RADIUS = 0.05


@dataclass
class RoomConfig:
    width_range: tuple[float, float] = (6.0, 8.0)
    depth_range: tuple[float, float] = (6.0, 8.0)
    height_range: tuple[float, float] = (2.7, 3.5)
    absorption_range: tuple[float, float] = (0.2, 0.7)
    max_order: int = 6
    snr_range: tuple[float, float] = (0.0, 20.0)
    n_mics: int = 1
    sample_rate: int = PIPELINE_RATE


@dataclass(frozen=True, eq=False)
class RoomSpec:
    """Shoebox geometry. Absorption order: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.

    ``mic_pos`` holds one row per microphone.
    """

    dimensions: np.ndarray
    absorption: np.ndarray
    source_pos: np.ndarray
    noise_pos: np.ndarray
    mic_pos: np.ndarray
    max_order: int = 6

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=np.float64).reshape(3)
        absorption = np.broadcast_to(np.asarray(self.absorption, dtype=np.float64), (6,)).copy()
        if np.any(dims <= 0):
            raise ValueError("room dimensions must be positive")
        if np.any((absorption <= 0) | (absorption > 1)):
            raise ValueError("absorption coefficients must lie in (0, 1]")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "absorption", absorption)
        object.__setattr__(self, "source_pos", np.asarray(self.source_pos, dtype=np.float64).reshape(3))
        object.__setattr__(self, "noise_pos", np.asarray(self.noise_pos, dtype=np.float64).reshape(3))
        object.__setattr__(self, "mic_pos", np.asarray(self.mic_pos, dtype=np.float64).reshape(-1, 3))

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= margin) and np.all(p <= self.dimensions - margin))

    @property
    def reflection(self) -> np.ndarray:
        return np.sqrt(1.0 - self.absorption)


@dataclass(frozen=True, eq=False)
class Rir:
    taps: np.ndarray
    peak_delay_samples: int
    sample_rate: int = PIPELINE_RATE


@dataclass
class ImageSources:
    """Per-image delay (s), amplitude and reflection order."""

    delays: np.ndarray
    amplitudes: np.ndarray
    orders: np.ndarray
    positions: np.ndarray = field(repr=False)


def _uniform_point(rng, dims, margin):
    return rng.uniform(margin, dims - margin)


def sample_room(config: RoomConfig, rng: np.random.Generator) -> RoomSpec:
    dims = np.array([
        rng.uniform(*config.width_range),
        rng.uniform(*config.depth_range),
        rng.uniform(*config.height_range),
    ])
    absorption = rng.uniform(*config.absorption_range, size=6)
    source = _uniform_point(rng, dims, POSITION_MARGIN)
    noise = _uniform_point(rng, dims, POSITION_MARGIN)
    if config.n_mics == 1:
        mics = _uniform_point(rng, dims, POSITION_MARGIN)[None, :]
    else:
        # circular array in the horizontal plane; keep the whole array inside the margin
        center = _uniform_point(rng, dims, POSITION_MARGIN + ARRAY_RADIUS)
        angles = 2 * np.pi * np.arange(config.n_mics) / config.n_mics
        mics = center + ARRAY_RADIUS * np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    return RoomSpec(dims, absorption, source, noise, mics, config.max_order)


def image_sources(room: RoomSpec, src, mic) -> ImageSources:
    """Enumerate image sources up to ``room.max_order`` reflections.

    An image is indexed per axis by (n, p) with n an integer and p in {0, 1};
    its coordinate is (1 - 2p) * s + 2 n L and it has hit the wall at 0
    |n - p| times and the wall at L |n| times.
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    order_max = room.max_order
    beta = room.reflection
    rng_n = np.arange(-order_max - 1, order_max + 2)
    positions, amps, orders = [], [], []
    for px, py, pz in itertools.product((0, 1), repeat=3):
        p = np.array([px, py, pz])
        nx, ny, nz = np.meshgrid(rng_n, rng_n, rng_n, indexing="ij")
        n = np.stack([nx.ravel(), ny.ravel(), nz.ravel()], axis=1)
        hits_low = np.abs(n - p)
        hits_high = np.abs(n)
        order = (hits_low + hits_high).sum(axis=1)
        keep = order <= order_max
        n, hits_low, hits_high, order = n[keep], hits_low[keep], hits_high[keep], order[keep]
        pos = (1 - 2 * p) * src + 2 * n * room.dimensions
        gain = np.prod(beta[0::2] ** hits_low * beta[1::2] ** hits_high, axis=1)
        positions.append(pos)
        amps.append(gain)
        orders.append(order)
    positions = np.vstack(positions)
    gains = np.concatenate(amps)
    orders = np.concatenate(orders)
    dist = np.linalg.norm(positions - mic, axis=1)
    nonzero = gains > 0
    sort = np.argsort(dist[nonzero], kind="stable")
    dist = dist[nonzero][sort]
    return ImageSources(
        delays=dist / SPEED_OF_SOUND,
        amplitudes=gains[nonzero][sort] / (4 * np.pi * dist),
        orders=orders[nonzero][sort],
        positions=positions[nonzero][sort],
    )


def fractional_delay_kernel(frac_delay: float) -> tuple[int, np.ndarray]:
    """81-tap Hann-windowed sinc centred on ``frac_delay`` samples.

    Returns the first tap index and the kernel.
    """
    half = SINC_TAPS // 2
    start = int(np.round(frac_delay)) - half
    t = np.arange(start, start + SINC_TAPS) - frac_delay
    window = 0.5 * (1.0 + np.cos(2 * np.pi * t / SINC_TAPS))
    return start, np.sinc(t) * window


def simulate_rir(room: RoomSpec, src, mic, sample_rate: int = PIPELINE_RATE) -> Rir:
    """Image-source RIR. Taps falling before t=0 are dropped."""
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if np.linalg.norm(src - mic) < 1e-9:
        raise ValueError("source and microphone coincide")
    if not (room.contains(src) and room.contains(mic)):
        raise ValueError("source and microphone must lie inside the room")
    images = image_sources(room, src, mic)
    delays = images.delays * sample_rate
    length = int(np.ceil(delays.max())) + SINC_TAPS // 2 + 2
    taps = np.zeros(length)
    for delay, amp in zip(delays, images.amplitudes):
        start, kernel = fractional_delay_kernel(delay)
        idx = start + np.arange(SINC_TAPS)
        ok = idx >= 0
        taps[idx[ok]] += amp * kernel[ok]
    return Rir(taps, int(np.argmax(np.abs(taps))), sample_rate)


def apply_rir(w: Waveform, h: Rir) -> Waveform:
    """Full linear convolution, length N + M - 1."""
    if len(w) == 0 or len(h.taps) == 0:
        raise EmptyAudioError("apply_rir needs non-empty signal and RIR")
    if w.sample_rate != h.sample_rate:
        raise ValueError("waveform and RIR sample rates differ")
    return Waveform(fftconvolve(w.samples, h.taps, mode="full"), w.sample_rate)


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Loop or truncate ``x`` to exactly ``n`` samples."""
    if len(x) == 0:
        raise EmptyAudioError("cannot loop an empty signal")
    reps = int(np.ceil(n / len(x)))
    return np.tile(x, reps)[:n]


def active_sample_mask(w: Waveform) -> np.ndarray:
    """Samples covered (hop-wise) by energy-VAD speech frames; all samples if none qualify."""
    _, hop = frame_params(w.sample_rate)
    try:
        frames = energy_vad(w).mask
    except Exception:  # shorter than one frame
        return np.ones(len(w), dtype=bool)
    active = np.zeros(len(w), dtype=bool)
    active[: len(frames) * hop] = np.repeat(frames, hop)
    if not active.any():
        active[:] = True
    return active


def measure_snr(speech: np.ndarray, noise: np.ndarray, active: np.ndarray) -> float:
    p_s = np.mean(speech[active] ** 2)
    p_n = np.mean(noise[active] ** 2)
    return float(10 * np.log10(p_s / p_n))


def scale_noise(speech: Waveform, noise: Waveform, snr_db: float) -> np.ndarray:
    """Noise looped/truncated to the speech length and scaled to hit ``snr_db``."""
    if not np.any(speech.samples):
        raise ValueError("speech is all zeros; SNR undefined")
    if not np.any(noise.samples):
        raise ValueError("noise is all zeros; cannot reach a finite SNR")
    n = fit_length(noise.samples, len(speech))
    active = active_sample_mask(speech)
    p_s = np.mean(speech.samples[active] ** 2)
    p_n = np.mean(n[active] ** 2)
    if p_n == 0:
        # noise is silent exactly where speech is active; fall back to whole-signal power
        p_n = np.mean(n**2)
        p_s = np.mean(speech.samples**2)
    return n * np.sqrt(p_s / (p_n * 10 ** (snr_db / 10)))


def mix_noise(speech: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """speech + noise scaled so the active-speech-frame SNR equals ``snr_db``."""
    return Waveform(speech.samples + scale_noise(speech, noise, snr_db), speech.sample_rate)


@dataclass
class AugmentResult:
    """Simulated far-field copy; ``speech`` and ``noise`` hold per-mic components before summation."""

    channels: list[Waveform]
    speech: np.ndarray
    noise: np.ndarray
    snr_db: float
    room: RoomSpec


def augment_parts(
    utt: Waveform,
    noise_bank: Sequence[Waveform],
    config: RoomConfig | None = None,
    rng: np.random.Generator | None = None,
) -> AugmentResult:
    """Reverberate speech and a noise source in a random room and mix at a random SNR.

    Every component is truncated to the source length.
    """
    config = config or RoomConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if len(noise_bank) == 0:
        raise ValueError("noise bank is empty")
    if utt.sample_rate != config.sample_rate:
        raise ValueError(f"utterance must be at {config.sample_rate} Hz")
    room = sample_room(config, rng)
    noise_src = noise_bank[int(rng.integers(len(noise_bank)))]
    snr_db = float(rng.uniform(*config.snr_range))
    n = len(utt)
    noise_in = Waveform(fit_length(noise_src.samples, n), utt.sample_rate)

    speech_parts, noise_parts, channels = [], [], []
    for mic in room.mic_pos:
        rev = apply_rir(utt, simulate_rir(room, room.source_pos, mic, utt.sample_rate)).samples[:n]
        rev_noise = apply_rir(noise_in, simulate_rir(room, room.noise_pos, mic, utt.sample_rate)).samples[:n]
        speech_w = Waveform(rev, utt.sample_rate)
        scaled = scale_noise(speech_w, Waveform(rev_noise, utt.sample_rate), snr_db)
        speech_parts.append(rev)
        noise_parts.append(scaled)
        channels.append(Waveform(rev + scaled, utt.sample_rate))
    return AugmentResult(channels, np.stack(speech_parts), np.stack(noise_parts), snr_db, room)


def augment(
    utt: Waveform,
    noise_bank: Sequence[Waveform],
    config: RoomConfig | None = None,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """Single far-field copy (first microphone)."""
    return augment_parts(utt, noise_bank, config, rng).channels[0]


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    """Independent per-utterance stream derived from (global seed, utterance id)."""
    key = [int(b) for b in utt_id.encode("utf-8")]
    return np.random.default_rng(np.random.SeedSequence([seed, len(key), *key]))
