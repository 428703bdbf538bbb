"""Deterministic toy corpus: formant-synthesized "speakers" and synthetic noise.

A speaker is a glottal pitch, a vocal-tract length factor that scales every
formant, a private vowel inventory and two vowel-independent high formants
(F4, F5) that act as a stable timbre cue. Utterances are syllable
sequences separated by short pauses so VAD has something to find.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio_io import PIPELINE_RATE, Waveform

# (F1, F2, F3) Hz for a handful of reference vowels
VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [300, 870, 2240],
    [530, 1840, 2480],
    [570, 840, 2410],
    [660, 1720, 2410],
    [440, 1020, 2240],
    [390, 1990, 2550],
], dtype=np.float64)
BANDWIDTHS = np.array([80.0, 100.0, 140.0, 200.0, 250.0])


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0: float
    tract_scale: float
    vowels: np.ndarray
    tilt: float
    breathiness: float
    high_formants: tuple[float, float] = (3500.0, 5000.0)


def make_speakers(n: int, seed: int = 0) -> list[SyntheticSpeaker]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    speakers = []
    for i in range(n):
        n_vowels = 4
        choice = rng.choice(len(VOWELS), size=n_vowels, replace=False)
        jitter = rng.uniform(0.85, 1.15, size=(n_vowels, 3))
        speakers.append(SyntheticSpeaker(
            speaker_id=f"spk{i:03d}",
            f0=float(rng.uniform(90, 260)),
            tract_scale=float(rng.uniform(0.8, 1.25)),
            vowels=VOWELS[choice] * jitter,
            tilt=float(rng.uniform(0.85, 0.98)),
            breathiness=float(rng.uniform(0.0, 0.08)),
            high_formants=(float(rng.uniform(2900, 4200)), float(rng.uniform(4500, 6500))),
        ))
    return speakers


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def synthesize_utterance(
    speaker: SyntheticSpeaker,
    rng: np.random.Generator,
    duration: float = 2.0,
    sr: int = PIPELINE_RATE,
) -> Waveform:
    n_total = int(duration * sr)
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.1, 0.25) * sr)
    while pos < n_total - int(0.1 * sr):
        syl = int(rng.uniform(0.12, 0.3) * sr)
        syl = min(syl, n_total - pos)
        f0 = speaker.f0 * rng.uniform(0.96, 1.04)
        t = np.arange(syl) / sr
        # slightly gliding pitch, pulse train via phase accumulation
        inst = f0 * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
        phase = np.cumsum(inst) / sr
        pulses = np.diff(np.floor(phase), prepend=0.0)
        source = lfilter([1.0], [1.0, -speaker.tilt], pulses)
        source += speaker.breathiness * rng.standard_normal(syl)
        formants = np.concatenate([
            speaker.vowels[int(rng.integers(len(speaker.vowels)))] * speaker.tract_scale,
            speaker.high_formants,
        ])
        voiced = sum(_resonator(source, f, bw, sr) / (k + 1)
                     for k, (f, bw) in enumerate(zip(formants, BANDWIDTHS)) if f < sr / 2 - 200)
        envelope = np.sin(np.pi * np.arange(syl) / syl) ** 0.5
        seg = voiced * envelope
        out[pos:pos + syl] += seg / (np.max(np.abs(seg)) + 1e-9)
        pos += syl + int(rng.uniform(0.04, 0.25) * sr)
    out *= 0.5 / (np.max(np.abs(out)) + 1e-9) * rng.uniform(0.6, 1.0)
    out += 1e-4 * rng.standard_normal(n_total)
    return Waveform(out, sr)


def white_noise(n: int, rng: np.random.Generator, sr: int = PIPELINE_RATE) -> Waveform:
    return Waveform(0.1 * rng.standard_normal(n), sr)


def pink_noise(n: int, rng: np.random.Generator, sr: int = PIPELINE_RATE) -> Waveform:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size)
    spec[1:] /= np.sqrt(f[1:])
    x = np.fft.irfft(spec, n)
    return Waveform(0.1 * x / (np.std(x) + 1e-12), sr)


def babble_noise(n: int, rng: np.random.Generator, sr: int = PIPELINE_RATE, talkers: int = 5) -> Waveform:
    speakers = make_speakers(talkers, seed=int(rng.integers(2**31)))
    dur = n / sr
    mix = sum(synthesize_utterance(s, rng, dur, sr).samples[:n] for s in speakers)
    return Waveform(0.1 * mix / (np.std(mix) + 1e-12), sr)


def noise_bank(seed: int = 0, duration: float = 3.0, sr: int = PIPELINE_RATE) -> list[Waveform]:
    """A small bank of white, pink and babble-like noises."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = int(duration * sr)
    return [white_noise(n, rng, sr), pink_noise(n, rng, sr), babble_noise(n, rng, sr)]
