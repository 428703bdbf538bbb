"""Energy VAD and a gradient-boosted-tree frame classifier (GVAD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter

from . import _binio
from .audio_io import PIPELINE_RATE, Waveform, resample
from .errors import DimensionMismatchError
from .features import HOP_S, FeatureMatrix, frame_log_energy, frame_params, frame_signal, logmel

log = logging.getLogger(__name__)

ENERGY_RANGE_DB = 30.0
ENERGY_FLOOR_DB = -80.0
MEDIAN_WINDOW = 5

GVAD_MAGIC = b"FFSVGVAD"


@dataclass(frozen=True, eq=False)
class FrameMask:
    mask: np.ndarray
    frame_shift: float = HOP_S

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool).reshape(-1))

    def __len__(self) -> int:
        return self.mask.shape[0]


def _log_energy_of(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        if x.kind != "logmel":
            raise ValueError("energy_vad needs un-normalized log-Mel features or a log-energy sequence")
        # total filterbank energy in dB
        return 10.0 * np.log10(np.sum(np.exp(x.data), axis=1))
    if isinstance(x, Waveform):
        return frame_log_energy(x)
    return np.asarray(x, dtype=np.float64).reshape(-1)


def energy_vad(
    x: FeatureMatrix | Waveform | np.ndarray,
    range_db: float = ENERGY_RANGE_DB,
    floor_db: float = ENERGY_FLOOR_DB,
    median_window: int = MEDIAN_WINDOW,
) -> FrameMask:
    """Mark frames within ``range_db`` of the loudest frame (and above ``floor_db``) as speech.

    Accepts a log-energy sequence in dB, un-normalized log-Mel features, or a
    waveform (framed internally). The decision is median-smoothed.
    """
    energy = _log_energy_of(x)
    if energy.size == 0:
        raise ValueError("energy_vad needs at least one frame")
    raw = (energy > energy.max() - range_db) & (energy > floor_db)
    smoothed = median_filter(raw.astype(np.uint8), size=median_window, mode="nearest").astype(bool)
    return FrameMask(smoothed)


def extract_nonspeech(w: Waveform, mask: FrameMask) -> Waveform:
    """Concatenate the hop-sized chunk of every non-speech frame."""
    _, hop = frame_params(w.sample_rate)
    keep = ~mask.mask
    if len(mask) * hop > len(w):
        raise DimensionMismatchError(f"mask of {len(mask)} frames does not fit {len(w)} samples")
    chunks = w.samples[: len(mask) * hop].reshape(len(mask), hop)
    return Waveform(chunks[keep].reshape(-1), w.sample_rate)


def gvad_features(w: Waveform) -> FeatureMatrix:
    """65-d frame features: raw 64-band log-Mel plus frame log-energy (dB)."""
    w = resample(w, PIPELINE_RATE)
    lm = logmel(frame_signal(w)).data
    energy = frame_log_energy(w)[:, None]
    return FeatureMatrix(np.hstack([lm, energy]), HOP_S, "gvad")


# --- trees -------------------------------------------------------------------


@dataclass
class Node:
    """Internal node when ``feature`` is set (x[feature] > threshold goes right), else a leaf."""

    value: float = 0.0
    feature: int | None = None
    threshold: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def max_feature(self) -> int:
        if self.is_leaf:
            return -1
        return max(self.feature, self.left.max_feature(), self.right.max_feature())

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        self._fill(x, np.arange(x.shape[0]), out)
        return out

    def _fill(self, x, idx, out):
        if self.is_leaf:
            out[idx] = self.value
            return
        go_right = x[idx, self.feature] > self.threshold
        self.left._fill(x, idx[~go_right], out)
        self.right._fill(x, idx[go_right], out)

    def scale(self, factor: float) -> None:
        if self.is_leaf:
            self.value *= factor
        else:
            self.left.scale(factor)
            self.right.scale(factor)


@dataclass
class GvadModel:
    trees: list[Node] = field(default_factory=list)
    shrinkage: float = 0.1
    bias: float = 0.0
    n_features: int = 0
    loss_history: list[float] = field(default_factory=list, compare=False)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"GVAD expects {self.n_features}-d frames, got shape {x.shape}"
            )
        logit = np.full(x.shape[0], self.bias)
        for tree in self.trees:
            logit += self.shrinkage * tree.predict(x)
        return logit


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y: np.ndarray, logit: np.ndarray) -> float:
    # log(1 + exp(-s)) with s = +logit for positives, -logit for negatives
    s = np.where(y, logit, -logit)
    return float(np.mean(np.logaddexp(0.0, -s)))


def _best_split(x, g, min_leaf):
    """Least-squares split of the gradient targets; returns (gain, feature, threshold)."""
    n, d = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gs = g[order]
    csum = np.cumsum(gs, axis=0)[:-1]
    total = g.sum()
    n_left = np.arange(1, n)[:, None].astype(np.float64)
    n_right = n - n_left
    gain = csum**2 / n_left + (total - csum) ** 2 / n_right - total**2 / n
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        size_ok = (n_left >= min_leaf) & (n_right >= min_leaf)
        valid &= size_ok
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    row, feat = divmod(flat, d)
    best = gain[row, feat]
    if not np.isfinite(best) or best <= 1e-12:
        return None
    threshold = 0.5 * (xs[row, feat] + xs[row + 1, feat])
    return best, feat, threshold


def _grow(x, g, h, depth, max_depth, min_leaf) -> Node:
    if depth < max_depth and x.shape[0] >= 2 * max(min_leaf, 1):
        split = _best_split(x, g, min_leaf)
        if split is not None:
            _, feat, thr = split
            right = x[:, feat] > thr
            return Node(
                feature=int(feat),
                threshold=float(thr),
                left=_grow(x[~right], g[~right], h[~right], depth + 1, max_depth, min_leaf),
                right=_grow(x[right], g[right], h[right], depth + 1, max_depth, min_leaf),
            )
    # Newton step on the logistic loss
    return Node(value=float(g.sum() / max(h.sum(), 1e-12)))


def gvad_train(
    features: Sequence[FeatureMatrix | np.ndarray],
    labels: Sequence[FrameMask | np.ndarray],
    n_trees: int = 100,
    max_depth: int = 3,
    shrinkage: float = 0.1,
    min_leaf: int = 1,
) -> GvadModel:
    """Gradient boosting with logistic loss.

    Each round fits a depth-limited least-squares tree to the negative
    gradient ``y - p`` and sets leaf values by a Newton step. A round whose
    step would raise the training loss is halved until it does not, so the
    recorded loss is non-increasing.
    """
    if len(features) == 0:
        raise ValueError("empty GVAD training set")
    if len(features) != len(labels):
        raise ValueError("features and labels must pair up per utterance")
    xs, ys = [], []
    for f, m in zip(features, labels):
        data = f.data if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
        mask = m.mask if isinstance(m, FrameMask) else np.asarray(m, dtype=bool)
        if data.shape[0] != mask.shape[0]:
            raise DimensionMismatchError(
                f"{data.shape[0]} feature frames vs {mask.shape[0]} label frames"
            )
        xs.append(data)
        ys.append(mask)
    x = np.vstack(xs)
    y = np.concatenate(ys)
    if x.shape[0] == 0:
        raise ValueError("empty GVAD training set")

    prior = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    model = GvadModel(shrinkage=shrinkage, bias=float(np.log(prior / (1 - prior))), n_features=x.shape[1])
    logit = np.full(x.shape[0], model.bias)
    loss = logistic_loss(y, logit)
    model.loss_history.append(loss)
    if y.all() or not y.any():
        log.warning("GVAD training labels are single-class; returning a bias-only model")
        return model

    yf = y.astype(np.float64)
    for _ in range(n_trees):
        p = _sigmoid(logit)
        g = yf - p
        h = p * (1.0 - p)
        tree = _grow(x, g, h, 0, max_depth, min_leaf)
        step = tree.predict(x)
        for _ in range(30):
            new_logit = logit + shrinkage * step
            new_loss = logistic_loss(y, new_logit)
            if new_loss <= loss:
                break
            tree.scale(0.5)
            step = step * 0.5
        else:
            tree.scale(0.0)
            new_logit, new_loss = logit, loss
        model.trees.append(tree)
        logit, loss = new_logit, new_loss
        model.loss_history.append(loss)
    return model


def gvad_predict(m: GvadModel, f: FeatureMatrix | np.ndarray) -> FrameMask:
    """Speech iff sigmoid(logit) > 0.5; ties go to non-speech."""
    data = f.data if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    return FrameMask(_sigmoid(m.decision_function(data)) > 0.5)


def save_gvad(path: str | Path, m: GvadModel) -> None:
    with open(path, "wb") as fh:
        _binio.write_header(fh, GVAD_MAGIC)
        _binio.write_u32(fh, m.n_features)
        _binio.write_f64(fh, m.shrinkage)
        _binio.write_f64(fh, m.bias)
        _binio.write_u32(fh, len(m.trees))
        for tree in m.trees:
            _write_node(fh, tree)


def _write_node(fh, node: Node) -> None:
    if node.is_leaf:
        fh.write(b"\x00")
        _binio.write_f64(fh, node.value)
    else:
        fh.write(b"\x01")
        _binio.write_u32(fh, node.feature)
        _binio.write_f64(fh, node.threshold)
        _write_node(fh, node.left)
        _write_node(fh, node.right)


def load_gvad(path: str | Path) -> GvadModel:
    with open(path, "rb") as fh:
        _binio.read_header(fh, GVAD_MAGIC)
        n_features = _binio.read_u32(fh)
        shrinkage = _binio.read_f64(fh)
        bias = _binio.read_f64(fh)
        n_trees = _binio.read_u32(fh)
        trees = [_read_node(fh) for _ in range(n_trees)]
    return GvadModel(trees=trees, shrinkage=shrinkage, bias=bias, n_features=n_features)


def _read_node(fh) -> Node:
    flag = _binio.read_exact(fh, 1)
    if flag == b"\x00":
        return Node(value=_binio.read_f64(fh))
    feature = _binio.read_u32(fh)
    threshold = _binio.read_f64(fh)
    left = _read_node(fh)
    right = _read_node(fh)
    return Node(feature=feature, threshold=threshold, left=left, right=right)
