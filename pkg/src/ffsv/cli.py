"""Command-line pipeline: ``ffsv <subcommand> ...``.

Every pipeline command writes one artifact plus ``<artifact>.log`` holding
the resolved config, input digests, per-epoch lines (training) and wall time.
Exit status: 0 on success, 1 if any manifest row failed, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import backend, embed_net, evaluation, features, room_sim, synth, vad
from .audio_io import PIPELINE_RATE, Waveform, read_wav, resample, write_wav
from .config import RunConfig, load_config
from .errors import ConfigError, FfsvError, TrialFormatError

log = logging.getLogger("ffsv")

MANIFEST_COLUMNS = ("utt_id", "speaker_id", "path", "channel", "visit", "condition")


class UsageError(Exception):
    pass


# --- manifests -------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speaker_id: str
    path: Path
    channel: int = 0
    visit: str = "synthetic"
    condition: str = "clean"


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing manifest {path}")
    rows, seen = [], set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.split("\t")
        if fields[0] == "utt_id":
            continue
        if len(fields) != len(MANIFEST_COLUMNS):
            raise UsageError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} tab-separated fields")
        if fields[0] in seen:
            raise UsageError(f"{path}:{lineno}: duplicate utt_id {fields[0]}")
        seen.add(fields[0])
        try:
            channel = int(fields[3])
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad channel {fields[3]!r}") from None
        rows.append(ManifestRow(fields[0], fields[1], path.parent / fields[2], channel, fields[4], fields[5]))
    return rows


def read_manifests(paths: list[str]) -> list[ManifestRow]:
    rows: dict[str, ManifestRow] = {}
    for p in paths:
        for row in read_manifest(p):
            if row.utt_id in rows:
                raise UsageError(f"utt_id {row.utt_id} appears in more than one manifest")
            rows[row.utt_id] = row
    return [rows[k] for k in sorted(rows)]


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in sorted(rows, key=lambda r: r.utt_id):
            rel = Path(r.path).resolve().relative_to(path.parent.resolve())
            fh.write(f"{r.utt_id}\t{r.speaker_id}\t{rel.as_posix()}\t{r.channel}\t{r.visit}\t{r.condition}\n")


def load_audio(row: ManifestRow) -> Waveform:
    channels = read_wav(row.path)
    if row.channel >= len(channels):
        raise FfsvError(f"{row.path} has {len(channels)} channel(s), row asks for {row.channel}")
    return resample(channels[row.channel], PIPELINE_RATE)


def load_noise_bank(noise_dir: str | Path) -> list[Waveform]:
    noise_dir = Path(noise_dir)
    files = sorted(noise_dir.glob("*.wav")) if noise_dir.is_dir() else []
    if not files:
        raise UsageError(f"no noise WAVs found in {noise_dir}")
    return [resample(read_wav(f)[0], PIPELINE_RATE) for f in files]


# --- run logs -----------------------------------------------------------------------


def sha256_of(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunLog:
    def __init__(self, command: str, cfg: RunConfig):
        self.start = time.perf_counter()
        self.lines = [f"command={command}", f"seed={cfg.seed}"] + [f"config {line}" for line in cfg.lines()]

    def input(self, path: str | Path) -> None:
        self.lines.append(f"input {path} sha256={sha256_of(path)}")

    def add(self, line: str) -> None:
        self.lines.append(line)

    def write(self, artifact: str | Path) -> None:
        self.lines.append(f"wall_time_s={time.perf_counter() - self.start:.3f}")
        Path(f"{artifact}.log").write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {what}: expected {path}")
    return path


def row_failed(row_id: str, exc: Exception) -> None:
    print(f"error: {row_id}: {exc}", file=sys.stderr)


# --- commands -----------------------------------------------------------------------


def sim_ids(utt_id: str, copy: int, n_mics: int) -> list[str]:
    base = f"{utt_id}#r{copy}"
    return [base] if n_mics == 1 else [f"{base}ch{k}" for k in range(n_mics)]


def cmd_simulate(args, cfg: RunConfig) -> int:
    rows = read_manifests(args.manifest)
    bank = load_noise_bank(args.noise_dir)
    out_dir = Path(args.out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    runlog = RunLog("simulate", cfg)
    for p in args.manifest:
        runlog.input(p)
    room_cfg = cfg.room()
    out_rows, failed = [], 0
    for row in rows:
        try:
            w = load_audio(row)
            for c in range(cfg.sim_copies):
                res = room_sim.augment_parts(w, bank, room_cfg, room_sim.utterance_rng(cfg.seed, f"{row.utt_id}#r{c}"))
                for k, utt_id in enumerate(sim_ids(row.utt_id, c, cfg.n_mics)):
                    path = out_dir / "wav" / f"{utt_id}.wav"
                    write_wav(path, res.channels[k])
                    out_rows.append(ManifestRow(utt_id, row.speaker_id, path, 0, row.visit, "far"))
                runlog.add(f"row {row.utt_id}#r{c} snr_db={res.snr_db:.3f}")
        except (OSError, FfsvError, ValueError) as exc:
            row_failed(row.utt_id, exc)
            failed += 1
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, out_rows)
    runlog.write(manifest)
    return 1 if failed else 0


def cmd_extract_features(args, cfg: RunConfig) -> int:
    rows = read_manifests(args.manifest)
    runlog = RunLog("extract-features", cfg)
    for p in args.manifest:
        runlog.input(p)
    feats, failed = {}, 0
    for row in rows:
        try:
            feats[row.utt_id] = features.compute_features(load_audio(row), cfg.feature_kind).data
        except (OSError, FfsvError, ValueError) as exc:
            row_failed(row.utt_id, exc)
            failed += 1
    features.write_feature_archive(args.out, feats)
    runlog.write(args.out)
    return 1 if failed else 0


def cmd_train_vad(args, cfg: RunConfig) -> int:
    rows = read_manifests(args.manifest)
    bank = load_noise_bank(args.noise_dir)
    runlog = RunLog("train-vad", cfg)
    for p in args.manifest:
        runlog.input(p)
    room_cfg = replace(cfg.room(), n_mics=1)
    feats, labels, failed = [], [], 0
    for row in rows:
        try:
            clean = load_audio(row)
            rng = room_sim.utterance_rng(cfg.seed, f"{row.utt_id}#vad")
            far = room_sim.augment_parts(clean, bank, room_cfg, rng).channels[0]
            # far-field features, labels from the clean source
            f = vad.gvad_features(far).data
            mask = vad.energy_vad(clean).mask
            n = min(len(f), len(mask))
            feats.append(f[:n])
            labels.append(mask[:n])
        except (OSError, FfsvError, ValueError) as exc:
            row_failed(row.utt_id, exc)
            failed += 1
    if not feats:
        raise FfsvError("no usable training rows for the VAD")
    model = vad.gvad_train(feats, labels, cfg.vad_trees, cfg.vad_depth, cfg.vad_shrinkage)
    runlog.add(f"frames={sum(len(x) for x in labels)} final_loss={model.loss_history[-1]:.6f}")
    vad.save_gvad(args.out, model)
    runlog.write(args.out)
    return 1 if failed else 0


def _labelled_features(args, runlog: RunLog):
    rows = read_manifests(args.manifest)
    feats = features.read_feature_archive(require(args.features, "feature archive"))
    runlog.input(args.features)
    for p in args.manifest:
        runlog.input(p)
    missing = [r.utt_id for r in rows if r.utt_id not in feats]
    rows = [r for r in rows if r.utt_id in feats]
    speakers = sorted({r.speaker_id for r in rows})
    index = {s: i for i, s in enumerate(speakers)}
    data = [(feats[r.utt_id], index[r.speaker_id]) for r in rows]
    for utt_id in missing:
        row_failed(utt_id, FfsvError("no features in archive"))
    return data, speakers, missing


def _log_epochs(runlog: RunLog, history) -> None:
    for h in history:
        runlog.add(h.line())


def cmd_train(args, cfg: RunConfig) -> int:
    runlog = RunLog("train", cfg)
    data, speakers, missing = _labelled_features(args, runlog)
    if len(speakers) < 2:
        raise FfsvError("training needs at least two speakers")
    model = embed_net.build_model(cfg.network_config(len(speakers)), cfg.seed)
    trained, history = embed_net.train(model, data, cfg.schedule(), np.random.default_rng(cfg.seed))
    _log_epochs(runlog, history)
    embed_net.save_model(args.out, trained)
    runlog.write(args.out)
    return 1 if missing else 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    runlog = RunLog("finetune", cfg)
    model = embed_net.load_model(require(args.model, "model checkpoint"))
    runlog.input(args.model)
    data, speakers, missing = _labelled_features(args, runlog)
    tuned, history = embed_net.fine_tune(
        model, data, cfg.finetune_epochs, cfg.finetune_lr, np.random.default_rng(cfg.seed), len(speakers),
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        crop_frames=cfg.crop_frames)
    _log_epochs(runlog, history)
    embed_net.save_model(args.out, tuned)
    runlog.write(args.out)
    return 1 if missing else 0


def cmd_extract_embeddings(args, cfg: RunConfig) -> int:
    runlog = RunLog("extract-embeddings", cfg)
    model = embed_net.load_model(require(args.model, "model checkpoint"))
    feats = features.read_feature_archive(require(args.features, "feature archive"))
    runlog.input(args.model)
    runlog.input(args.features)
    out, failed = {}, 0
    for utt_id in sorted(feats):
        try:
            out[utt_id] = embed_net.extract_embedding(model, feats[utt_id])
        except FfsvError as exc:
            row_failed(utt_id, exc)
            failed += 1
    backend.write_embedding_archive(args.out, out)
    runlog.write(args.out)
    return 1 if failed else 0


def cmd_train_plda(args, cfg: RunConfig) -> int:
    runlog = RunLog("train-plda", cfg)
    embs = backend.read_embedding_archive(require(args.embeddings, "embedding archive"))
    rows = read_manifests(args.manifest)
    runlog.input(args.embeddings)
    for p in args.manifest:
        runlog.input(p)
    rows = [r for r in rows if r.utt_id in embs]
    if not rows:
        raise FfsvError("no manifest rows have embeddings")
    x = np.stack([embs[r.utt_id] for r in rows])
    model = backend.plda_train(x, [r.speaker_id for r in rows], cfg.plda_iters)
    runlog.add(f"log_likelihoods={' '.join(f'{v:.6f}' for v in model.log_likelihoods)}")
    if model.degenerate:
        runlog.add("warning=within-speaker covariance hit the eigenvalue floor")
    backend.save_plda(args.out, model)
    runlog.write(args.out)
    return 0


def cmd_score(args, cfg: RunConfig) -> int:
    runlog = RunLog("score", cfg)
    trials = evaluation.load_trials(require(args.trials, "trial list"))
    embs = backend.read_embedding_archive(require(args.embeddings, "embedding archive"))
    runlog.input(args.trials)
    runlog.input(args.embeddings)
    plda = None
    if cfg.backend == "plda":
        if not args.plda:
            raise UsageError("backend=plda needs --plda")
        plda = backend.load_plda(require(args.plda, "PLDA model"))
        runlog.input(args.plda)
    enroll_fn = None
    if cfg.eda:
        if not (args.model and args.vad and args.manifest):
            raise UsageError("eda needs --model, --vad and --manifest")
        model = embed_net.load_model(require(args.model, "model checkpoint"))
        vad_model = vad.load_gvad(require(args.vad, "VAD model"))
        rows = {r.utt_id: r for r in read_manifests(args.manifest)}
        for p in (args.model, args.vad, *args.manifest):
            runlog.input(p)
        mode = evaluation.parse_fusion(cfg.fusion)
        channel = 0 if mode == "multi" else mode

        def enroll_fn(t: evaluation.Trial) -> np.ndarray:
            for needed in (t.enroll_id, t.test_ids[channel]):
                if needed not in rows:
                    raise FfsvError(f"eda: no waveform for {needed} in the manifest")
            rng = room_sim.utterance_rng(cfg.seed, f"{t.key[0]}|{t.key[1]}")
            res = backend.eda_components(
                load_audio(rows[t.enroll_id]), load_audio(rows[t.test_ids[channel]]),
                lambda w: embed_net.embed_waveform(model, w, cfg.feature_kind), vad_model, rng,
                cfg.range("eda_snr"))
            snr = "fallback" if res.snr_db is None else f"{res.snr_db:.3f}"
            runlog.add(f"eda {t.key[0]} {t.key[1]} snr_db={snr}")
            return res.embedding

    scores = evaluation.score_trials(trials, embs, cfg.backend, cfg.fusion, plda, enroll_fn)
    evaluation.write_scores(args.out, scores)
    runlog.write(args.out)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    trials = evaluation.load_trials(require(args.trials, "trial list"))
    scores = evaluation.load_scores(require(args.scores, "score file"))
    values, labels = evaluation.labels_for(trials, scores)
    if labels.all() or not labels.any():
        raise TrialFormatError(f"{args.trials}: need both target and nontarget trials with scores")
    metrics = evaluation.det_metrics(values, labels, cfg.p_target, cfg.c_miss, cfg.c_fa)
    report = metrics.report()
    print(report)
    if args.out:
        runlog = RunLog("evaluate", cfg)
        runlog.input(args.trials)
        runlog.input(args.scores)
        Path(args.out).write_text(report + "\n", encoding="utf-8")
        runlog.write(args.out)
    return 0


def cmd_synth_dataset(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "noise").mkdir(exist_ok=True)
    runlog = RunLog("synth-dataset", cfg)
    speakers = synth.make_speakers(args.speakers, cfg.seed)
    train_rows, eval_rows = [], []
    for spk in speakers:
        for j in range(args.utts):
            utt_id = f"{spk.speaker_id}-u{j:02d}"
            w = synth.synthesize_utterance(spk, room_sim.utterance_rng(cfg.seed, utt_id), args.duration)
            path = out_dir / "wav" / f"{utt_id}.wav"
            write_wav(path, w)
            held_out = j >= args.train_utts
            row = ManifestRow(utt_id, spk.speaker_id, path, 0, "eval" if held_out else "train", "clean")
            (eval_rows if held_out else train_rows).append(row)
    for name, noise in zip(("white", "pink", "babble"), synth.noise_bank(cfg.seed)):
        write_wav(out_dir / "noise" / f"{name}.wav", noise)
    write_manifest(out_dir / "train.tsv", train_rows)
    write_manifest(out_dir / "eval.tsv", eval_rows)

    def test_ids(utt_id):
        if args.test_channels == 0:
            return (utt_id,)
        return tuple(sim_ids(utt_id, 0, args.test_channels))

    trials = []
    for e in eval_rows:
        for t in eval_rows:
            if e.utt_id[-2:] != t.utt_id[-2:]:
                label = "target" if e.speaker_id == t.speaker_id else "nontarget"
                trials.append(evaluation.Trial(e.utt_id, test_ids(t.utt_id), label))
    evaluation.write_trials(out_dir / "trials.txt", trials)
    runlog.add(f"speakers={args.speakers} utts={args.utts} train_utts={args.train_utts} trials={len(trials)}")
    runlog.write(out_dir / "trials.txt")
    return 0


# --- argument parsing -------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    group = p.add_argument_group("config keys")
    for key in RunConfig.keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffsv", description="Far-field speaker verification pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        _add_config_flags(p)
        return p

    p = command("simulate", cmd_simulate, "far-field copies of every manifest row")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = command("extract-features", cmd_extract_features, "log-Mel or MFCC feature archive")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True)

    p = command("train-vad", cmd_train_vad, "train the gradient-boosted VAD")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--out", required=True)

    for name, func, text in (("train", cmd_train, "train the embedding network"),
                             ("finetune", cmd_finetune, "fine-tune at a constant learning rate")):
        p = command(name, func, text)
        if name == "finetune":
            p.add_argument("--model", required=True)
        p.add_argument("--manifest", action="append", required=True)
        p.add_argument("--features", required=True)
        p.add_argument("--out", required=True)

    p = command("extract-embeddings", cmd_extract_embeddings, "embeddings for every archive entry")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)

    p = command("train-plda", cmd_train_plda, "fit the PLDA backend")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True)

    p = command("score", cmd_score, "score a trial list")
    p.add_argument("--trials", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plda")
    p.add_argument("--model", help="network for enrollment augmentation")
    p.add_argument("--vad", help="GVAD model for enrollment augmentation")
    p.add_argument("--manifest", action="append", default=[], help="waveforms for enrollment augmentation")

    p = command("evaluate", cmd_evaluate, "EER / minDCF of a score file")
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out")

    p = command("synth-dataset", cmd_synth_dataset, "generate a synthetic toy corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utts", type=int, default=12)
    p.add_argument("--train-utts", type=int, default=8)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--test-channels", type=int, default=0,
                   help="trials reference simulated test ids with this many channels (0: clean ids)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for key in RunConfig.keys():
        value = getattr(args, f"cfg_{key}")
        if value is not None:
            overrides[key] = value
    if args.config:
        require(args.config, "config file")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"ffsv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FfsvError as exc:
        print(f"ffsv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
