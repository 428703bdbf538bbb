"""Embedding scoring: cosine similarity, two-covariance PLDA, channel averaging and
enrollment augmentation with test-side background noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _binio
from .audio_io import PIPELINE_RATE, Waveform, resample
from .errors import DimensionMismatchError, PldaError
from .room_sim import fit_length, mix_noise
from .vad import GvadModel, extract_nonspeech, gvad_features, gvad_predict

log = logging.getLogger(__name__)

W_EIG_FLOOR = 1e-6
EMBEDDING_MAGIC = b"FFSVEMBD"
PLDA_MAGIC = b"FFSVPLDA"


@dataclass(frozen=True, eq=False)
class Embedding:
    utt_id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.utt_id}: embedding is not finite")
        object.__setattr__(self, "vector", v)


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64).reshape(-1)


def cosine_score(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def average_embeddings(embs: Sequence) -> np.ndarray:
    """Equal-weight mean of channel embeddings."""
    if len(embs) == 0:
        raise ValueError("cannot average an empty list of embeddings")
    vecs = [_vec(e) for e in embs]
    if len({v.shape for v in vecs}) != 1:
        raise DimensionMismatchError("embeddings to average have different dimensions")
    return np.mean(vecs, axis=0)


# --- PLDA ---------------------------------------------------------------------


@dataclass(eq=False)
class PldaModel:
    """Two-covariance model x' = y + e, y ~ N(0, B), e ~ N(0, W), on preprocessed x'.

    Preprocessing is x' = lennorm(whitener @ (x - mu)); ``length_norm`` scales
    to norm sqrt(D).
    """

    mu: np.ndarray
    B: np.ndarray
    W: np.ndarray
    whitener: np.ndarray
    length_norm: bool = True
    degenerate: bool = field(default=False, compare=False)
    log_likelihoods: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def transform(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatchError(f"PLDA expects {self.dim}-d embeddings, got {x.shape[1]}")
        z = (x - self.mu) @ self.whitener.T
        if self.length_norm:
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            z = z * np.sqrt(self.dim) / np.maximum(norms, 1e-12)
        return z

    @cached_property
    def _scoring_terms(self):
        d = self.dim
        total = self.B + self.W
        joint = np.block([[total, self.B], [self.B, total]])
        joint_prec = np.linalg.inv(joint)
        total_prec = np.linalg.inv(total)
        _, logdet_joint = np.linalg.slogdet(joint)
        _, logdet_total = np.linalg.slogdet(total)
        return joint_prec[:d, :d], joint_prec[:d, d:], total_prec, 0.5 * (2 * logdet_total - logdet_joint)

    def llr(self, e: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Log-likelihood ratio on already-transformed row vectors."""
        a, c, tp, const = self._scoring_terms
        e = np.atleast_2d(e)
        t = np.atleast_2d(t)
        quad_joint = (np.einsum("ij,jk,ik->i", e, a, e) + np.einsum("ij,jk,ik->i", t, a, t)
                      + 2 * np.einsum("ij,jk,ik->i", e, c, t))
        quad_sep = np.einsum("ij,jk,ik->i", e, tp, e) + np.einsum("ij,jk,ik->i", t, tp, t)
        return -0.5 * quad_joint + 0.5 * quad_sep + const


def _two_cov_loglik(groups, B, W) -> float:
    """Exact log-likelihood of centred data grouped by speaker.

    Per speaker with n samples: the scaled mean sqrt(n) * xbar ~ N(0, W + nB)
    and the n - 1 orthogonal deviations each ~ N(0, W).
    """
    d = B.shape[0]
    w_inv = np.linalg.inv(W)
    _, logdet_w = np.linalg.slogdet(W)
    total = 0.0
    for x in groups:
        n = x.shape[0]
        xbar = x.mean(axis=0)
        scatter = (x - xbar).T @ (x - xbar)
        c = W + n * B
        _, logdet_c = np.linalg.slogdet(c)
        z = np.sqrt(n) * xbar
        total += -0.5 * (d * np.log(2 * np.pi) + logdet_c + z @ np.linalg.solve(c, z))
        total += -0.5 * ((n - 1) * (d * np.log(2 * np.pi) + logdet_w) + np.trace(w_inv @ scatter))
    return float(total)


def _floor_eigs(m: np.ndarray, floor: float) -> tuple[np.ndarray, bool]:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    clipped = vals < floor
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, bool(clipped.any())


def plda_em(groups: Sequence[np.ndarray], n_iters: int = 20) -> tuple[np.ndarray, np.ndarray, list[float], bool]:
    """EM for B, W on zero-mean data grouped by speaker.

    Returns (B, W, per-iteration log-likelihoods, degenerate flag). The first
    log-likelihood is that of the moment-based initialization.
    """
    d = groups[0].shape[1]
    n_total = sum(g.shape[0] for g in groups)
    means = np.stack([g.mean(axis=0) for g in groups])
    B = means.T @ means / len(groups)
    within = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups)
    W, degenerate = _floor_eigs(within / n_total, W_EIG_FLOOR)
    B, _ = _floor_eigs(B, 1e-12)
    lls = [_two_cov_loglik(groups, B, W)]
    for _ in range(n_iters):
        b_inv = np.linalg.inv(B)
        w_inv = np.linalg.inv(W)
        b_acc = np.zeros((d, d))
        w_acc = np.zeros((d, d))
        for g in groups:
            n = g.shape[0]
            cov = np.linalg.inv(b_inv + n * w_inv)
            m = cov @ (w_inv @ g.sum(axis=0))
            b_acc += np.outer(m, m) + cov
            r = g - m
            w_acc += r.T @ r + n * cov
        B = 0.5 * (b_acc + b_acc.T) / len(groups)
        W, flagged = _floor_eigs(w_acc / n_total, W_EIG_FLOOR)
        degenerate |= flagged
        lls.append(_two_cov_loglik(groups, B, W))
    return B, W, lls, degenerate


def plda_train(
    embs: np.ndarray,
    speakers: Sequence,
    n_iters: int = 20,
    whiten: bool = True,
    length_norm: bool = True,
) -> PldaModel:
    """Center, whiten and length-normalize, then fit the two-covariance model by EM."""
    x = np.asarray(embs, dtype=np.float64)
    speakers = np.asarray(speakers)
    if x.ndim != 2 or x.shape[0] != speakers.shape[0]:
        raise ValueError("embeddings must be (N, D) with one speaker label per row")
    labels = np.unique(speakers)
    if labels.size < 2:
        raise PldaError("PLDA needs at least two speakers")
    n, d = x.shape
    if d > n - 1:
        raise PldaError(f"dimension {d} needs at least {d + 1} samples, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    total = centered.T @ centered / n
    vals, vecs = np.linalg.eigh(total)
    if vals.min() <= 1e-10 * max(vals.max(), 1e-300):
        rank = int(np.sum(vals > 1e-10 * max(vals.max(), 1e-300)))
        raise PldaError(
            f"total covariance is singular (rank {rank} < dimension {d}); "
            "reduce the embedding dimension or add more varied training data"
        )
    whitener = (vecs / np.sqrt(vals)).T if whiten else np.eye(d)
    model = PldaModel(mu, np.eye(d), np.eye(d), whitener, length_norm)
    z = model.transform(x)
    groups = [z[speakers == s] for s in labels]
    B, W, lls, degenerate = plda_em(groups, n_iters)
    if degenerate:
        log.warning("PLDA within-speaker covariance hit the eigenvalue floor %g", W_EIG_FLOOR)
    model.B, model.W = B, W
    model.degenerate = degenerate
    model.log_likelihoods = lls
    return model


def plda_score(m: PldaModel, enroll, test) -> float:
    """log p(e, t | same speaker) - log p(e, t | different speakers)."""
    e, t = _vec(enroll), _vec(test)
    if e.shape != t.shape:
        raise DimensionMismatchError("enroll and test embeddings differ in dimension")
    return float(m.llr(m.transform(e), m.transform(t))[0])


# --- enrollment augmentation -------------------------------------------------


@dataclass
class EdaResult:
    embedding: np.ndarray
    original: np.ndarray
    simulated: np.ndarray | None
    simulated_wave: Waveform | None
    snr_db: float | None


def eda_components(
    enroll_w: Waveform,
    test_w: Waveform,
    embed: Callable[[Waveform], np.ndarray],
    vad_model: GvadModel,
    rng: np.random.Generator,
    snr_range: tuple[float, float] = (5.0, 15.0),
    min_noise_s: float = 0.2,
) -> EdaResult:
    """Simulate a far-field enrollment copy from the test utterance's non-speech frames.

    ``embed`` maps a waveform to its embedding.
    """
    enroll_w = resample(enroll_w, PIPELINE_RATE)
    test_w = resample(test_w, PIPELINE_RATE)
    e_orig = np.asarray(embed(enroll_w), dtype=np.float64)
    mask = gvad_predict(vad_model, gvad_features(test_w))
    noise = extract_nonspeech(test_w, mask)
    if len(noise) < min_noise_s * noise.sample_rate or not np.any(noise.samples):
        log.info("EDA fallback: %.3f s of non-speech in test, using original enrollment", noise.duration)
        return EdaResult(e_orig, e_orig, None, None, None)
    snr = float(rng.uniform(*snr_range))
    log.info("EDA: %.3f s of test background noise mixed at %.2f dB", noise.duration, snr)
    noise = Waveform(fit_length(noise.samples, len(enroll_w)), PIPELINE_RATE)
    simulated = mix_noise(enroll_w, noise, snr)
    e_sim = np.asarray(embed(simulated), dtype=np.float64)
    return EdaResult(0.5 * (e_orig + e_sim), e_orig, e_sim, simulated, snr)


def enroll_with_eda(
    enroll_w: Waveform,
    test_w: Waveform,
    model,
    vad_model: GvadModel,
    rng: np.random.Generator,
    snr_range: tuple[float, float] = (5.0, 15.0),
    min_noise_s: float = 0.2,
) -> np.ndarray:
    """Final enrollment embedding: 0.5 * (original + simulated), or the original on fallback.

    ``model`` is a speaker network or any callable mapping a waveform to an embedding.
    """
    if callable(model) and not hasattr(model, "config"):
        embed = model
    else:
        from .embed_net import embed_waveform

        def embed(w):
            return embed_waveform(model, w)

    return eda_components(enroll_w, test_w, embed, vad_model, rng, snr_range, min_noise_s).embedding


# --- archives -----------------------------------------------------------------


def write_embedding_archive(path: str | Path, embs: dict[str, np.ndarray]) -> None:
    ids = sorted(embs)
    dims = {np.asarray(embs[i]).reshape(-1).shape[0] for i in ids}
    if len(dims) > 1:
        raise DimensionMismatchError("embedding archive needs a single dimension")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        _binio.write_header(fh, EMBEDDING_MAGIC)
        _binio.write_u32(fh, dim)
        _binio.write_u32(fh, len(ids))
        for utt_id in ids:
            _binio.write_str(fh, utt_id)
            _binio.write_array(fh, np.asarray(embs[utt_id]).reshape(-1), "<f4")


def read_embedding_archive(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        _binio.read_header(fh, EMBEDDING_MAGIC)
        dim = _binio.read_u32(fh)
        count = _binio.read_u32(fh)
        out = {}
        for _ in range(count):
            utt_id = _binio.read_str(fh)
            out[utt_id] = _binio.read_array(fh, (dim,), "<f4").astype(np.float64)
    return out


def save_plda(path: str | Path, m: PldaModel) -> None:
    with open(path, "wb") as fh:
        _binio.write_header(fh, PLDA_MAGIC)
        _binio.write_u32(fh, m.dim)
        _binio.write_u32(fh, int(m.length_norm))
        for arr in (m.mu, m.B, m.W, m.whitener):
            _binio.write_array(fh, arr, "<f8")


def load_plda(path: str | Path) -> PldaModel:
    with open(path, "rb") as fh:
        _binio.read_header(fh, PLDA_MAGIC)
        d = _binio.read_u32(fh)
        length_norm = bool(_binio.read_u32(fh))
        mu = _binio.read_array(fh, (d,), "<f8")
        B = _binio.read_array(fh, (d, d), "<f8")
        W = _binio.read_array(fh, (d, d), "<f8")
        whitener = _binio.read_array(fh, (d, d), "<f8")
    return PldaModel(mu, B, W, whitener, length_norm)
