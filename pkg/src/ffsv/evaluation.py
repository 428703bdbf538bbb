"""Trial lists, score files and detection metrics (EER, minDCF, DET points).

Convention: a trial is accepted when score >= threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .backend import average_embeddings, cosine_score, plda_score
from .errors import MissingEmbeddingError, TrialFormatError

LABELS = ("target", "nontarget", "unknown")
MAX_TEST_IDS = 16


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_ids: tuple[str, ...]
    label: str = "unknown"

    def __post_init__(self):
        if not self.enroll_id or not self.test_ids or not all(self.test_ids):
            raise TrialFormatError("trial ids must be non-empty")
        if len(self.test_ids) > MAX_TEST_IDS:
            raise TrialFormatError(f"at most {MAX_TEST_IDS} test channels per trial")
        if self.label not in LABELS:
            raise TrialFormatError(f"unknown label {self.label!r}")

    @property
    def key(self) -> tuple[str, str]:
        return self.enroll_id, ",".join(self.test_ids)


@dataclass
class DetMetrics:
    eer: float
    min_dcf: float
    dcf_threshold: float
    points: list[tuple[float, float, float]]

    def report(self) -> str:
        return f"eer={100 * self.eer:.2f} minDCF={self.min_dcf:.3f} threshold={self.dcf_threshold:.6f}"


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if labels.dtype.kind in "US":
        labels = labels == "target"
    labels = labels.astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    tgt, non = scores[labels], scores[~labels]
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    return tgt, non


def error_rates(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, p_miss, p_fa) at every distinct score plus +inf, thresholds ascending."""
    tgt, non = _split(scores, labels)
    thresholds = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    p_miss = np.searchsorted(np.sort(tgt), thresholds, side="left") / tgt.size
    p_fa = 1.0 - np.searchsorted(np.sort(non), thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def compute_eer(scores, labels) -> float:
    """Equal error rate, linearly interpolated between adjacent ROC vertices."""
    _, p_miss, p_fa = error_rates(scores, labels)
    diff = p_miss - p_fa  # non-decreasing in threshold
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        return float(p_miss[exact[0]])
    i = int(np.searchsorted(diff, 0.0)) - 1
    t = -diff[i] / (diff[i + 1] - diff[i])
    return float(p_miss[i] + t * (p_miss[i + 1] - p_miss[i]))


def compute_min_dcf(scores, labels, p_target: float = 0.01, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> tuple[float, float]:
    """Normalized minimum detection cost and its (lowest) threshold."""
    thresholds, p_miss, p_fa = error_rates(scores, labels)
    dcf = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    dcf /= min(c_miss * p_target, c_fa * (1 - p_target))
    best = int(np.argmin(dcf))
    return float(dcf[best]), float(thresholds[best])


def det_metrics(scores, labels, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> DetMetrics:
    thresholds, p_miss, p_fa = error_rates(scores, labels)
    min_dcf, thr = compute_min_dcf(scores, labels, p_target, c_miss, c_fa)
    points = [(float(a), float(b), float(c)) for a, b, c in zip(thresholds, p_miss, p_fa)]
    return DetMetrics(compute_eer(scores, labels), min_dcf, thr, points)


# --- files ---------------------------------------------------------------------


def parse_trials(lines, source: str = "<trials>") -> list[Trial]:
    trials: list[Trial] = []
    seen: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise TrialFormatError(f"{source}:{lineno}: expected 2 or 3 tab-separated fields, got {len(fields)}")
        label = fields[2].strip() if len(fields) == 3 else "unknown"
        try:
            trial = Trial(fields[0].strip(), tuple(t.strip() for t in fields[1].split(",")), label)
        except TrialFormatError as exc:
            raise TrialFormatError(f"{source}:{lineno}: {exc}") from None
        if trial.key in seen:
            raise TrialFormatError(f"{source}:{lineno}: duplicate trial {trial.key[0]} / {trial.key[1]}")
        seen.add(trial.key)
        trials.append(trial)
    return trials


def load_trials(path: str | Path) -> list[Trial]:
    with open(path, encoding="utf-8") as fh:
        return parse_trials(fh, str(path))


def write_trials(path: str | Path, trials: Sequence[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id}\t{','.join(t.test_ids)}\t{t.label}\n")


@dataclass(frozen=True)
class ScoreRecord:
    enroll_id: str
    test_ids: tuple[str, ...]
    score: float


def write_scores(path: str | Path, scores: Sequence[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(f"{s.enroll_id}\t{','.join(s.test_ids)}\t{s.score:.6f}\n")


def load_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TrialFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            try:
                score = float(fields[2])
            except ValueError:
                raise TrialFormatError(f"{path}:{lineno}: bad score {fields[2]!r}") from None
            out.append(ScoreRecord(fields[0], tuple(fields[1].split(",")), score))
    return out


def labels_for(trials: Sequence[Trial], scores: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Align scores with labelled trials, dropping unknown-label trials."""
    by_key = {(s.enroll_id, ",".join(s.test_ids)): s.score for s in scores}
    values, labels = [], []
    missing = []
    for t in trials:
        if t.label == "unknown":
            continue
        if t.key not in by_key:
            missing.append(f"{t.key[0]}/{t.key[1]}")
            continue
        values.append(by_key[t.key])
        labels.append(t.label == "target")
    if missing:
        raise TrialFormatError("no score for trials: " + ", ".join(missing[:10]))
    return np.array(values), np.array(labels, dtype=bool)


# --- scoring -------------------------------------------------------------------


def parse_fusion(fusion: str | int) -> str | int:
    """'multi' or a channel index (int or 'single=<k>')."""
    if isinstance(fusion, int):
        return fusion
    if fusion == "multi":
        return "multi"
    if fusion.startswith("single="):
        return int(fusion.split("=", 1)[1])
    raise ValueError(f"bad fusion mode {fusion!r}")


def score_trials(
    trials: Sequence[Trial],
    embeddings: Mapping[str, np.ndarray],
    scorer: str = "cosine",
    fusion: str | int = "multi",
    plda=None,
    enroll_embedding: Callable[[Trial], np.ndarray] | None = None,
) -> list[ScoreRecord]:
    """One score per trial.

    ``multi`` averages all test-channel embeddings before scoring; an integer
    selects that channel. ``enroll_embedding`` overrides the stored enrollment
    embedding per trial (used for enrollment augmentation).
    """
    mode = parse_fusion(fusion)
    if scorer == "plda" and plda is None:
        raise ValueError("PLDA scoring needs a trained PLDA model")
    if scorer not in ("cosine", "plda"):
        raise ValueError(f"unknown scorer {scorer!r}")
    needed = set()
    for t in trials:
        if enroll_embedding is None:
            needed.add(t.enroll_id)
        if mode == "multi":
            needed.update(t.test_ids)
        else:
            if mode >= len(t.test_ids):
                raise ValueError(f"trial {t.key} has no channel {mode}")
            needed.add(t.test_ids[mode])
    missing = [i for i in needed if i not in embeddings]
    if missing:
        raise MissingEmbeddingError(missing)

    out = []
    for t in trials:
        enroll = enroll_embedding(t) if enroll_embedding is not None else embeddings[t.enroll_id]
        if mode == "multi":
            test = average_embeddings([embeddings[i] for i in t.test_ids])
        else:
            test = embeddings[t.test_ids[mode]]
        score = cosine_score(enroll, test) if scorer == "cosine" else plda_score(plda, enroll, test)
        out.append(ScoreRecord(t.enroll_id, t.test_ids, score))
    return out
