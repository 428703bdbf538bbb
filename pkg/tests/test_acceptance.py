"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criterion 8 runs the full toolkit through the command line at desk scale and
takes several minutes on one core.
"""

import re
import time

import numpy as np
import torch
from scipy.stats import spearmanr

from ffsv import backend, embed_net, evaluation, features, room_sim, synth, vad
from ffsv.audio_io import Waveform
from ffsv.cli import main as cli_main

from oracles import (
    brute_force_dct,
    brute_force_logmel,
    direct_convolution,
    first_order_taps,
    oracle_eer,
    oracle_min_dcf,
    quadrature_llr,
)

FS = 16000


def labelled(tgt, non):
    return np.array(list(tgt) + list(non)), np.array([True] * len(tgt) + [False] * len(non))


def test_1_metric_oracle_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 51))
        n_tgt = int(rng.integers(1, n))
        raw = rng.normal(size=n)
        # every other set is coarsely rounded so ties are common
        scores = np.round(raw, 1) if i % 2 else raw
        tgt, non = list(scores[:n_tgt] + 0.8), list(scores[n_tgt:])
        s, lbl = labelled(tgt, non)
        worst = max(worst, abs(evaluation.compute_eer(s, lbl) - oracle_eer(tgt, non)),
                    abs(evaluation.compute_min_dcf(s, lbl)[0] - oracle_min_dcf(tgt, non)))
    elapsed = time.perf_counter() - start
    acceptance(1, "metric oracle equivalence", worst <= 1e-12 and elapsed < 10,
               f"max |diff|={worst:.1e}, {elapsed:.1f}s")


def test_2_hand_case(acceptance):
    s, lbl = labelled([0.9, 0.8, 0.4], [0.5, 0.2, 0.1])
    eer = evaluation.compute_eer(s, lbl)
    dcf, _ = evaluation.compute_min_dcf(s, lbl, p_target=0.01)
    want_dcf = oracle_min_dcf([0.9, 0.8, 0.4], [0.5, 0.2, 0.1])
    ps, plbl = labelled([0.9, 0.8, 0.7], [0.3, 0.2, 0.1])
    perfect = (evaluation.compute_eer(ps, plbl), evaluation.compute_min_dcf(ps, plbl)[0])
    ok = abs(eer - 1 / 3) < 1e-12 and abs(dcf - want_dcf) < 1e-12 and perfect == (0.0, 0.0)
    acceptance(2, "hand-case EER / minDCF", ok, f"eer={eer:.6f} minDCF={dcf:.6f} oracle={want_dcf:.6f}")


def test_3_gradient_check(acceptance):
    rng = np.random.default_rng(0)
    samples = [(rng.normal(size=(16, 64)), 1), (rng.normal(size=(16, 64)), 3)]
    start = time.perf_counter()
    errors = {}
    for blocks in ((1, 1, 1, 1), (2, 2, 2, 2)):
        cfg = embed_net.NetworkConfig.resnet34(width_multiplier=1 / 8, block_counts=blocks, embedding_dim=16,
                                               n_classes=4)
        errors[blocks[0]] = embed_net.grad_check(embed_net.build_model(cfg, seed=1), samples, n_params=200)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and elapsed < 60
    acceptance(3, "gradient check", ok,
               " ".join(f"{k}-block={v:.1e}" for k, v in errors.items()) + f", {elapsed:.1f}s")


def test_4_shape_contract(acceptance):
    m34 = embed_net.build_model(embed_net.NetworkConfig.resnet34())
    ok = True
    for length in (64, 128):
        s = m34.trace_shapes(torch.zeros(1, length, 64))
        ok &= s == {"conv1": (32, 64, length), "layer1": (32, 64, length), "layer2": (64, 32, length // 2),
                    "layer3": (128, 16, length // 4), "layer4": (256, 8, length // 8), "encoding": (512,),
                    "embedding": (128,), "classifier": (10544,)}
    s50 = embed_net.build_model(embed_net.NetworkConfig.resnet50(input_dim=256)).trace_shapes(torch.zeros(1, 64, 256))
    ok &= s50["encoding"] == (2048,) and s50["embedding"] == (1024,)
    ok &= s50["layer4"] == (2048, 8, 4)
    acceptance(4, "shape contract", ok, f"resnet50 encoding={s50['encoding']} embedding={s50['embedding']}")


def test_5_plda(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    A, C = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    B0 = A @ A.T / 8 + 0.1 * np.eye(8)
    W0 = 0.5 * (C @ C.T / 8 + 0.1 * np.eye(8))
    y = rng.multivariate_normal(np.zeros(8), B0, size=200)
    x = (y[:, None, :] + rng.multivariate_normal(np.zeros(8), W0, size=(200, 10))).reshape(-1, 8)
    spk = np.repeat(np.arange(200), 10)
    m = backend.plda_train(x, spk, n_iters=20, whiten=False, length_norm=False)
    err_b = np.linalg.norm(m.B - B0) / np.linalg.norm(B0)
    err_w = np.linalg.norm(m.W - W0) / np.linalg.norm(W0)
    piped = backend.plda_train(x, spk, n_iters=20)
    monotone = bool(np.all(np.diff(piped.log_likelihoods) >= -1e-8) and np.all(np.diff(m.log_likelihoods) >= -1e-8))

    B = np.array([[1.2, 0.3], [0.3, 0.7]])
    W = np.array([[0.6, -0.1], [-0.1, 0.4]])
    toy = backend.PldaModel(np.zeros(2), B, W, np.eye(2), length_norm=False)
    pairs = np.random.default_rng(3).normal(size=(120, 2, 2)) * 1.2
    got = [backend.plda_score(toy, e, t) for e, t in pairs]
    want = [quadrature_llr(e, t, B, W) for e, t in pairs]
    rho = spearmanr(got, want)[0]
    elapsed = time.perf_counter() - start
    ok = err_b < 0.10 and err_w < 0.10 and monotone and rho == 1.0 and elapsed < 30
    acceptance(5, "PLDA EM recovery / monotone log-likelihood / oracle rank", ok,
               f"B err={err_b:.3f} W err={err_w:.3f} monotone={monotone} spearman={rho:.3f}, {elapsed:.1f}s")


def test_6_room_simulator(acceptance):
    checks = {}
    anechoic = room_sim.RoomSpec((7, 6, 3), np.ones(6), (1, 1, 1), (2, 2, 2), [(3, 3, 1.5)], 3)
    d = room_sim.SPEED_OF_SOUND * 100 / FS
    rir = room_sim.simulate_rir(anechoic, (1, 1, 1), (1 + d, 1, 1))
    rest = np.delete(rir.taps, 100)
    checks["anechoic"] = (rir.peak_delay_samples == 100 and abs(rir.taps[100] - 1 / (4 * np.pi * d)) < 1e-12
                          and np.max(np.abs(rest)) < 1e-12)

    dims, absorption = np.array([7.0, 6.0, 3.0]), np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    s, mic = np.array([2.0, 1.5, 1.2]), np.array([4.0, 3.5, 1.6])
    imgs = room_sim.image_sources(room_sim.RoomSpec(dims, absorption, s, s, [mic], 1), s, mic)
    got = sorted(zip(imgs.delays, imgs.amplitudes))
    want = first_order_taps(dims, absorption, s, mic)
    checks["order-1"] = len(got) == 7 and all(abs(a[0] - b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6
                                              for a, b in zip(got, want))

    rng = np.random.default_rng(5)
    sig, h = rng.normal(size=300), rng.normal(size=60)
    out = room_sim.apply_rir(Waveform(sig, FS), room_sim.Rir(h, 0)).samples
    checks["convolution"] = np.max(np.abs(out - direct_convolution(sig, h))) < 1e-9

    speech = synth.synthesize_utterance(synth.make_speakers(1, seed=3)[0], np.random.default_rng(0), 1.5)
    noise = synth.noise_bank(0, duration=1.0)[1]
    snr_err = 0.0
    for target in (0.0, 10.0, 20.0):
        added = room_sim.mix_noise(speech, noise, target).samples - speech.samples
        measured = room_sim.measure_snr(speech.samples, added, room_sim.active_sample_mask(speech))
        snr_err = max(snr_err, abs(measured - target))
    checks["snr"] = snr_err < 0.01
    acceptance(6, "room simulator", all(checks.values()),
               " ".join(f"{k}={'ok' if v else 'bad'}" for k, v in checks.items()) + f" max snr err={snr_err:.1e} dB")


def test_7_feature_oracle(acceptance):
    frames = np.random.default_rng(7).normal(size=(100, 400)) * np.hamming(400)
    lm = features.logmel(frames).data
    mf = features.mfcc(frames).data
    worst_lm = worst_mf = 0.0
    for i in range(100):
        ref = brute_force_logmel(frames[i])
        worst_lm = max(worst_lm, np.max(np.abs(lm[i] - ref) / np.abs(ref)))
        ref_mf = brute_force_dct(ref, 30)
        worst_mf = max(worst_mf, np.max(np.abs(mf[i] - ref_mf) / np.maximum(np.abs(ref_mf), 1e-12)))
    n_frames = features.frame_signal(Waveform(np.zeros(16000), FS)).shape[0]
    ok = worst_lm < 1e-6 and worst_mf < 1e-6 and n_frames == 98
    acceptance(7, "feature oracle", ok, f"logmel rel={worst_lm:.1e} mfcc rel={worst_mf:.1e} frames={n_frames}")


DESK_CONFIG = """\
seed = 0
feature_kind = logmel
network = resnet34
width_multiplier = 0.125
block_counts = 1,1,1,1
embedding_dim = 128
epochs = 30
initial_lr = 0.1
decay_every = 12
decay_factor = 0.1
crop_frames = 150
batch_size = 32
"""


def _eer_of(trials, scores):
    values, labels = evaluation.labels_for(evaluation.load_trials(trials), evaluation.load_scores(scores))
    return evaluation.compute_eer(values, labels)


def test_8_end_to_end_desk_scale(acceptance, tmp_path):
    cfg = tmp_path / "desk.cfg"
    cfg.write_text(DESK_CONFIG)
    d = tmp_path / "data"

    def run(*argv):
        code = cli_main([str(a) for a in argv])
        assert code == 0, argv
        return code

    run("synth-dataset", "--config", cfg, "--out-dir", d, "--speakers", 20, "--utts", 12, "--train-utts", 8,
        "--duration", 2.0, "--test-channels", 4)
    run("simulate", "--config", cfg, "--sim-copies", 2, "--manifest", d / "train.tsv", "--noise-dir", d / "noise",
        "--out-dir", tmp_path / "train_sim")
    run("simulate", "--config", cfg, "--n-mics", 4, "--manifest", d / "eval.tsv", "--noise-dir", d / "noise",
        "--out-dir", tmp_path / "test_sim")
    run("extract-features", "--config", cfg, "--manifest", d / "train.tsv",
        "--manifest", tmp_path / "train_sim" / "manifest.tsv", "--out", tmp_path / "train.ark")
    run("extract-features", "--config", cfg, "--manifest", d / "eval.tsv",
        "--manifest", tmp_path / "test_sim" / "manifest.tsv", "--out", tmp_path / "eval.ark")
    run("train", "--config", cfg, "--manifest", d / "train.tsv", "--manifest", tmp_path / "train_sim" / "manifest.tsv",
        "--features", tmp_path / "train.ark", "--out", tmp_path / "model.ckpt")
    run("extract-embeddings", "--config", cfg, "--model", tmp_path / "model.ckpt", "--features", tmp_path / "eval.ark",
        "--out", tmp_path / "eval.emb")
    trials = d / "trials.txt"
    for fusion in ("multi", "single=0", "single=1", "single=2", "single=3"):
        run("score", "--config", cfg, "--fusion", fusion, "--trials", trials, "--embeddings", tmp_path / "eval.emb",
            "--out", tmp_path / f"scores_{fusion}.txt")

    train_log = (tmp_path / "model.ckpt.log").read_text()
    train_s = float(re.search(r"wall_time_s=([0-9.]+)", train_log).group(1))
    multi = _eer_of(trials, tmp_path / "scores_multi.txt")
    singles = [_eer_of(trials, tmp_path / f"scores_single={k}.txt") for k in range(4)]
    ok = multi < 0.15 and multi <= np.mean(singles) and train_s <= 300
    acceptance(8, "end-to-end desk-scale far-field EER", ok,
               f"multi EER={100 * multi:.2f}% mean single={100 * np.mean(singles):.2f}% "
               f"singles={'/'.join(f'{100 * s:.2f}' for s in singles)} train={train_s:.0f}s")


def test_9_lr_schedule(acceptance):
    sched = embed_net.TrainSchedule.resnet34_pretrain()
    lrs = [sched.lr(e) for e in (0, 20, 40)]
    ft = embed_net.TrainSchedule.constant(0.001, 5)
    ok = lrs == [0.1, 0.01, 0.001] and all(ft.lr(e) == 0.001 for e in range(5))
    # the fine-tune path itself must log the constant rate
    data = [(np.random.default_rng(i).normal(size=(40, 64)), i % 2) for i in range(4)]
    toy = embed_net.build_model(embed_net.NetworkConfig.resnet34(width_multiplier=1 / 8, block_counts=(1, 1, 1, 1),
                                                                 embedding_dim=16, n_classes=2))
    _, hist = embed_net.fine_tune(toy, data, epochs=2, crop_frames=32, batch_size=4)
    ok &= [h.lr for h in hist] == [0.001, 0.001]
    acceptance(9, "learning-rate schedule", ok, f"lr(0,20,40)={lrs} fine-tune={[h.lr for h in hist]}")


def test_10_eda_contract(acceptance):
    speakers = synth.make_speakers(2, seed=4)
    rng = np.random.default_rng(1)
    enroll = synth.synthesize_utterance(speakers[0], rng, 2.0)
    clean_test = synth.synthesize_utterance(speakers[1], rng, 2.0)
    bank = synth.noise_bank(0, duration=2.0)
    test = room_sim.augment(clean_test, bank, room_sim.RoomConfig(snr_range=(10.0, 10.0)), np.random.default_rng(2))

    # a small GVAD trained the intended way: far-field features, clean-source energy labels
    feats, labels = [], []
    for i in range(4):
        clean = synth.synthesize_utterance(speakers[i % 2], np.random.default_rng(10 + i), 2.0)
        far = room_sim.augment(clean, bank, room_sim.RoomConfig(max_order=2), np.random.default_rng(20 + i))
        f, lab = vad.gvad_features(far).data, vad.energy_vad(clean).mask
        n = min(len(f), len(lab))
        feats.append(f[:n])
        labels.append(lab[:n])
    gvad = vad.gvad_train(feats, labels, n_trees=20, max_depth=3)
    net = embed_net.build_model(embed_net.NetworkConfig.resnet34(width_multiplier=1 / 8, block_counts=(1, 1, 1, 1),
                                                                 n_classes=2))

    def embed(w):
        return embed_net.embed_waveform(net, w)

    res = backend.eda_components(enroll, test, embed, gvad, np.random.default_rng(3))
    component = (res.simulated is not None
                 and np.array_equal(res.embedding, 0.5 * (res.original + res.simulated))
                 and np.array_equal(res.original, embed(enroll))
                 and np.array_equal(res.simulated, embed(res.simulated_wave)))
    via_api = backend.enroll_with_eda(enroll, test, net, gvad, np.random.default_rng(3))
    component &= np.array_equal(via_api, res.embedding)

    all_speech = vad.GvadModel(trees=[], shrinkage=1.0, bias=10.0, n_features=65)
    fallback = np.array_equal(backend.enroll_with_eda(enroll, test, net, all_speech, np.random.default_rng(3)),
                              embed(enroll))
    again = backend.enroll_with_eda(enroll, test, net, gvad, np.random.default_rng(3))
    deterministic = np.array_equal(again, via_api)
    acceptance(10, "EDA contract", component and fallback and deterministic,
               f"component={component} fallback={fallback} deterministic={deterministic} "
               f"noise snr={res.snr_db:.2f} dB")


def test_11_gvad(acceptance):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    y = x[:, 0] + 0.5 * x[:, 1] > 0
    sep = vad.gvad_train([x], [y], n_trees=50, max_depth=2)
    acc_sep = np.mean(vad.gvad_predict(sep, x).mask == y)
    monotone = bool(np.all(np.diff(sep.loss_history) <= 1e-12))

    xr = np.random.default_rng(1).uniform(-1, 1, size=(400, 2))
    yr = (xr[:, 0] > 0) ^ (xr[:, 1] > 0)
    deep = vad.gvad_train([xr], [yr], n_trees=100, max_depth=2)
    stumps = vad.gvad_train([xr], [yr], n_trees=100, max_depth=1)
    acc_deep = np.mean(vad.gvad_predict(deep, xr).mask == yr)
    acc_stump = np.mean(vad.gvad_predict(stumps, xr).mask == yr)
    monotone &= bool(np.all(np.diff(deep.loss_history) <= 1e-12) and np.all(np.diff(stumps.loss_history) <= 1e-12))
    ok = monotone and acc_sep >= 0.99 and acc_deep >= 0.95 and acc_stump <= 0.75
    acceptance(11, "GVAD", ok, f"separable={acc_sep:.3f} xor depth2={acc_deep:.3f} stumps={acc_stump:.3f} "
                               f"loss non-increasing={monotone}")
