"""Whole-system acceptance checks, one test per release gate.

Every oracle here is re-derived from scratch rather than imported from
the unit suites, so a defect in shared helper code cannot vouch for
itself. Each test finishes by printing a single summary line with the
measured numbers (visible under ``pytest -s``); the pytest verdict per
test is the authoritative pass/fail record.
"""

import copy
import time
from pathlib import Path

import numpy as np
import yaml
from click.testing import CliRunner

from voqa.audio import Waveform, load_wav, save_wav
from voqa.cli import main as cli_main
from voqa.experiment import (
    Dataset,
    ExperimentConfig,
    assemble_dataset,
    impute_missing_llds,
)
from voqa.lld import (
    PitchConfig,
    PitchTrack,
    cpp_frames,
    hnr_db,
    jitter_local,
    shimmer_local,
    track_pitch,
)
from voqa.manifest import score_columns, write_manifest
from voqa.network import (
    ModelConfig,
    QualityRegressionNet,
    attention_pool,
    init_params,
)
from voqa.noise import (
    NoiseSpec,
    build_augmented_set,
    default_noise_protocol,
    generate_noise,
    mix_at_snr,
    noise_for_utterance,
)
from voqa.stacks import EmbeddingStack, LayerWeights, aggregate
from voqa.synthetic import CorpusSpec, synth_corpus, synth_vowel
from voqa.training import (
    TrainConfig,
    TrainSample,
    batch_loss_and_grads,
    lld_stats,
    make_splits,
    patient_aggregate,
    pcc,
    predict_samples,
    rmse,
    target_scale,
    train,
    wmse,
)

RATE = 16000


def _report(name, detail):
    print(f"\n{name}: PASS ({detail})")


# ---- 1. signal-measure oracle suite ----

def oracle_jitter(periods):
    """Local jitter straight from a period list."""
    periods = np.asarray(periods, dtype=float)
    return float(np.mean(np.abs(np.diff(periods))) / np.mean(periods))


def oracle_shimmer(amps):
    """Local shimmer straight from a cycle-amplitude list."""
    amps = np.asarray(amps, dtype=float)
    return float(np.mean(np.abs(np.diff(amps))) / np.mean(amps))


def _pulse_train(positions, n, amps):
    x = np.zeros(n)
    x[np.asarray(positions, dtype=int)] = amps
    return x


def _hand_track(mark_runs):
    """A pitch track carrying only explicit glottal marks."""
    return PitchTrack(
        frame_times=np.zeros(0),
        f0=np.zeros(0),
        voiced=np.zeros(0, dtype=bool),
        mark_runs=[np.asarray(m, dtype=float) for m in mark_runs],
        sample_rate=RATE,
        config=PitchConfig(),
    )


def test_dsp_oracle_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(41)

    period_lists = [
        [80, 82] * 20,                                   # alternating
        [107] * 30,                                      # perfectly periodic
        list(rng.integers(70, 91, size=50)),             # irregular
        list(100 + np.round(8 * np.sin(0.3 * np.arange(40)))),  # slow drift
    ]
    worst_j = 0.0
    for periods in period_lists:
        marks = np.concatenate([[0.0], np.cumsum(periods)])
        got = jitter_local(_hand_track([marks]))
        worst_j = max(worst_j, abs(got - oracle_jitter(np.diff(marks))))
    assert worst_j < 1e-6

    amp_lists = [
        np.array([1.0, 0.9] * 20 + [1.0]),
        np.linspace(1.0, 0.6, 33),
        0.5 + 0.4 * rng.random(41),
    ]
    worst_s = 0.0
    for amps in amp_lists:
        positions = np.arange(0, 100 * len(amps), 100)
        x = _pulse_train(positions, int(positions[-1]) + 120, amps)
        got = shimmer_local(Waveform(x, RATE), _hand_track([positions]))
        # n marks bound n-1 cycles; each cycle's peak is the pulse at its start
        worst_s = max(worst_s, abs(got - oracle_shimmer(amps[:-1])))
    assert worst_s < 1e-6

    t = np.arange(2 * RATE) / RATE
    worst_rel = 0.0
    for f0 in (100.0, 150.0, 200.0, 300.0):
        w = Waveform(0.5 * np.sin(2 * np.pi * f0 * t), RATE)
        track = track_pitch(w)
        got = float(track.f0[track.voiced].mean())
        worst_rel = max(worst_rel, abs(got - f0) / f0)
    assert worst_rel < 0.01

    w = Waveform(0.6 * np.sin(2 * np.pi * 200.0 * t), RATE)
    _, peak_q = cpp_frames(w)
    cpp_dev = abs(float(np.median(peak_q)) - 0.005)
    assert cpp_dev <= 1.0 / RATE + 1e-12

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(
        "DSP ORACLE SUITE",
        f"jitter dev {worst_j:.1e}, shimmer dev {worst_s:.1e}, "
        f"pitch dev {100 * worst_rel:.3f}%, cpp peak dev {cpp_dev * 1e3:.3f} ms, "
        f"{elapsed:.1f}s",
    )


# ---- 2. gradient integrity ----

def _net_loss(params, cfg, feats, C):
    net = QualityRegressionNet(params, cfg)
    return float(np.sum(C * net.forward(feats, mode="train")))


def _grad_batch(seed, layers=3, dim=6):
    """Six small utterances whose targets track jitter and stack mean."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(3):
        trait = rng.normal()
        for u in range(2):
            t_frames = int(rng.integers(8, 17))
            vals = rng.normal(size=(layers, t_frames, dim)) * 0.3 + 0.4 * trait
            lld = np.array([0.02 + 0.001 * rng.normal(), 0.05, 15.0, 12.0])
            y = np.array([10.0 + 4.0 * vals.mean(), 14.0 - 3.0 * vals.mean()])
            out.append(TrainSample(EmbeddingStack(values=vals), lld, y,
                                   f"s{s}", f"s{s}_u{u}"))
    return out


def test_gradient_integrity_every_parameter_group():
    step = 1e-4
    tol = 1e-5
    t0 = time.monotonic()
    worst = 0.0
    n_checked = 0

    # FC, BN affine, attention, and head through the network loss
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        cfg = ModelConfig(in_dim=5, hidden=(6, 5, 4), attn_dim=3,
                          num_targets=2, num_layers=3)
        params = init_params(rng, cfg)
        feats = [rng.standard_normal((3 + (i % 2), cfg.in_dim))
                 for i in range(3)]
        C = rng.standard_normal((3, cfg.num_targets))
        net = QualityRegressionNet(params, cfg)
        net.forward(feats, mode="train")
        grads, _ = net.backward(C)
        for name, arr in params.trainable_items():
            g = grads[name].reshape(-1)
            flat = arr.reshape(-1)
            for j in range(flat.size):
                p2 = copy.deepcopy(params)
                dict(p2.trainable_items())[name].reshape(-1)[j] = flat[j] + step
                up = _net_loss(p2, cfg, feats, C)
                p2 = copy.deepcopy(params)
                dict(p2.trainable_items())[name].reshape(-1)[j] = flat[j] - step
                down = _net_loss(p2, cfg, feats, C)
                fd = (up - down) / (2 * step)
                worst = max(worst, abs(g[j] - fd) / max(1e-6, abs(fd), abs(g[j])))
                n_checked += 1
        assert worst < tol, (seed, worst)

    # the layer logits receive gradient only through stack aggregation,
    # so they are checked through the full batch loss
    worst_logit = 0.0
    for seed in range(5):
        data = _grad_batch(100 + seed)
        mean, std = lld_stats(data, 3)
        mcfg = ModelConfig(in_dim=data[0].stack.dim + 3, num_targets=2,
                           hidden=(16, 12, 8), attn_dim=4,
                           num_layers=data[0].stack.num_layers, dropout=0.0)
        params = init_params(np.random.default_rng(200 + seed), mcfg)
        y_max = target_scale(np.array([s.target for s in data]))

        def loss_of(p):
            val, _ = batch_loss_and_grads(data, p, mcfg, "sfm_ws", "jsh",
                                          mean, std, y_max, beta=1.0)
            return val

        _, grads = batch_loss_and_grads(data, params, mcfg, "sfm_ws", "jsh",
                                        mean, std, y_max, beta=1.0)
        for j in range(mcfg.num_layers):
            p2 = copy.deepcopy(params)
            p2.layer_logits[j] += step
            up = loss_of(p2)
            p2.layer_logits[j] -= 2 * step
            down = loss_of(p2)
            fd = (up - down) / (2 * step)
            g = grads["layer_logits"][j]
            worst_logit = max(worst_logit,
                              abs(g - fd) / max(1e-6, abs(fd), abs(g)))
            n_checked += 1
    assert worst_logit < tol

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _report(
        "GRADIENT INTEGRITY",
        f"{n_checked} coordinates over 5 seeds, worst rel err "
        f"{max(worst, worst_logit):.1e}, {elapsed:.1f}s",
    )


# ---- 3. loss and metric identities ----

def test_loss_and_metric_identities():
    rng = np.random.default_rng(7)

    worst_eq = 0.0
    n_violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, 4))
        pred = rng.normal(size=(n, k)) * 10.0
        target = np.abs(rng.normal(size=(n, k))) * 50.0
        y_max = target.max(axis=0) + 1.0
        mse = float(np.mean((pred - target) ** 2))
        worst_eq = max(worst_eq, abs(wmse(pred, target, y_max, 0.0) - mse))
        beta = float(0.1 + 3.0 * rng.random())
        if wmse(pred, target, y_max, beta) < mse - 1e-12:
            n_violations += 1
    assert worst_eq < 1e-12
    assert n_violations == 0

    worst_aff = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 40))
        x = rng.normal(size=n)
        y = rng.normal(size=n)
        base = pcc(x, y)
        a = float(0.5 + 9.0 * rng.random())
        b = float(10.0 * rng.normal())
        worst_aff = max(worst_aff,
                        abs(pcc(a * x + b, y) - base),
                        abs(pcc(x, a * y + b) - base))
    assert worst_aff < 1e-9

    assert abs(rmse(np.zeros(2), np.array([3.0, 4.0])) - np.sqrt(12.5)) < 1e-6
    x = rng.normal(size=12)
    assert rmse(x, x.copy()) < 1e-6
    assert abs(pcc(x, x.copy()) - 1.0) < 1e-6
    centered = x - x.mean()
    assert abs(pcc(-centered, centered) + 1.0) < 1e-6

    _report(
        "LOSS/METRIC IDENTITIES",
        f"beta=0 dev {worst_eq:.1e}, 0 weighting violations in 1000, "
        f"affine dev {worst_aff:.1e}, hand cases exact",
    )


# ---- 4. aggregation invariants ----

def test_aggregation_invariants():
    rng = np.random.default_rng(9)

    worst_sum = 0.0
    worst_agg = 0.0
    for _ in range(50):
        L = int(rng.integers(1, 7))
        T = int(rng.integers(1, 9))
        D = int(rng.integers(1, 7))
        lw = LayerWeights(logits=3.0 * rng.normal(size=L))
        worst_sum = max(worst_sum, abs(float(lw.weights.sum()) - 1.0))
        stack = EmbeddingStack(values=rng.normal(size=(L, T, D)))
        got = aggregate(stack, lw)
        want = np.zeros((T, D))
        for ti in range(T):          # naive double loop, no broadcasting
            for li in range(L):
                want[ti] += lw.weights[li] * stack.values[li, ti]
        worst_agg = max(worst_agg, float(np.max(np.abs(got - want))))
    assert worst_sum < 1e-12
    assert worst_agg < 1e-6

    cfg = ModelConfig(in_dim=5, hidden=(6, 5, 4), attn_dim=3,
                      num_targets=2, num_layers=3)
    worst_alpha = 0.0
    for s in range(20):
        p = init_params(np.random.default_rng(300 + s), cfg)
        T = int(rng.integers(2, 9))
        H = np.random.default_rng(400 + s).standard_normal((T, cfg.hidden[-1]))
        alpha, _ = attention_pool(H, p)
        worst_alpha = max(worst_alpha, abs(float(alpha.sum()) - 1.0))
        # a single frame must pass through untouched
        one, pooled = attention_pool(H[:1], p)
        np.testing.assert_array_equal(one, np.ones(1))
        np.testing.assert_array_equal(pooled, H[0])
    assert worst_alpha < 1e-12

    _report(
        "AGGREGATION INVARIANTS",
        f"layer weight sum dev {worst_sum:.1e}, oracle dev {worst_agg:.1e}, "
        f"alpha sum dev {worst_alpha:.1e}, T=1 identity exact",
    )


# ---- 5. SNR exactness and HNR ordering ----

def _measured_snr_db(signal, noise):
    return float(10.0 * np.log10(np.sum(signal ** 2) / np.sum(noise ** 2)))


def test_snr_exactness_and_hnr_monotonicity(tmp_path):
    (tmp_path / "audio").mkdir()
    recipes = [
        dict(f0=120.0, jitter=0.004, shimmer=0.03, hnr_target_db=22.0, seed=1),
        dict(f0=150.0, jitter=0.010, shimmer=0.06, hnr_target_db=18.0, seed=2),
        dict(f0=180.0, jitter=0.020, shimmer=0.02, hnr_target_db=25.0, seed=3),
        dict(f0=210.0, jitter=0.002, shimmer=0.10, hnr_target_db=15.0, seed=4),
        dict(f0=140.0, jitter=0.015, shimmer=0.08, hnr_target_db=20.0, seed=5),
    ]
    rows = []
    for i, kw in enumerate(recipes):
        w, _ = synth_vowel(duration=0.7, **kw)
        wav = f"audio/u{i}.wav"
        save_wav(tmp_path / wav, w)
        row = {"utterance_id": f"u{i}", "speaker_id": f"spk{i}",
               "wav_path": wav, "subset": "A", "role": "clean",
               "noise_kind": None, "snr_db": None}
        for c in score_columns("capev"):
            row[c] = 40.0
        rows.append(row)

    protocol = default_noise_protocol()
    out = build_augmented_set(rows, protocol, out_dir=tmp_path / "noisy",
                              base_dir=tmp_path, seed=13)
    aug = [r for r in out if r["role"] != "clean"]
    assert len(aug) == 5 * 22          # 4 seen x 4 SNRs + 3 unseen x 2 SNRs

    by_key = {(e.spec.label, e.plan.snr_db): e for e in protocol}
    clean_by_uid = {r["utterance_id"]: r for r in rows}
    worst = 0.0
    for r in aug:
        uid = r["utterance_id"].split("__")[0]
        clean = load_wav(tmp_path / clean_by_uid[uid]["wav_path"])
        noisy = load_wav(tmp_path / r["wav_path"])
        entry = by_key[(r["noise_kind"], r["snr_db"])]
        n = noise_for_utterance(entry.spec, uid, r["snr_db"],
                                clean.samples.size, clean.sample_rate, 13)
        res = mix_at_snr(clean, n, r["snr_db"])
        # split the written file into its signal and noise parts and
        # measure the ratio the file actually carries
        signal_part = res.peak_scale * clean.samples
        noise_part = noisy.samples - signal_part
        got = _measured_snr_db(signal_part, noise_part)
        worst = max(worst, abs(got - r["snr_db"]))
    assert worst < 0.01

    w, _ = synth_vowel(duration=1.2, f0=150.0, seed=3)
    noise = generate_noise(NoiseSpec(kind="white"), w.samples.size,
                           w.sample_rate)
    # one noise-tolerant analyzer setting, applied identically at every SNR
    pcfg = PitchConfig(voicing_threshold=0.15)
    hnrs = []
    for snr in (10.0, 5.0, 0.0, -5.0):
        mixed = mix_at_snr(w, noise, snr).waveform
        hnrs.append(hnr_db(mixed, track_pitch(mixed, pcfg)))
    assert all(a >= b for a, b in zip(hnrs, hnrs[1:])), hnrs

    _report(
        "SNR EXACTNESS",
        f"{len(aug)} files, worst dev {1e3 * worst:.3f} mdB; "
        f"hnr at 10/5/0/-5 dB = "
        f"{'/'.join(f'{h:.2f}' for h in hnrs)} non-increasing",
    )


# ---- 6. synthetic end-to-end run ----

def _fresh_dataset(ds):
    """Copy with private descriptor arrays so imputation cannot leak
    between repeated splits of the same corpus."""
    samples = [TrainSample(s.stack,
                           None if s.lld is None else s.lld.copy(),
                           s.target, s.speaker_id, s.utterance_id)
               for s in ds.samples]
    return Dataset(rows=ds.rows, samples=samples,
                   lld_missing=ds.lld_missing.copy())


def test_synthetic_end_to_end_regression(tmp_path):
    t0 = time.monotonic()
    spec = CorpusSpec(n_speakers=240, stack_layers=4, stack_dim=32,
                      frames_lo=20, frames_hi=60,
                      vowel_duration=0.6, sentence_piece=0.45, seed=606)
    rows = synth_corpus(spec, tmp_path)
    write_manifest(tmp_path / "manifest.csv", rows)
    cfg = ExperimentConfig(manifest=tmp_path / "manifest.csv",
                           out_dir=tmp_path / "bundle",
                           scale="capev", feature_mode="sfm_ws+jsh")
    ds = assemble_dataset(rows, cfg)
    assert len(ds.samples) == 480

    per_seed = []
    for seed in range(5):
        plan = make_splits([r["speaker_id"] for r in ds.rows],
                           [s.target[0] for s in ds.samples], seed=seed)
        tr_idx = [i for i, r in enumerate(ds.rows)
                  if plan.assignment[r["speaker_id"]] == "train"]
        te_idx = [i for i, r in enumerate(ds.rows)
                  if plan.assignment[r["speaker_id"]] == "test"]
        assert len(plan.train_speakers) == 192   # 80/20 over 240 speakers
        assert len(plan.test_speakers) == 48

        record = {}
        for mode in ("sfm_ws+jsh", "sfm_ws"):
            fresh = _fresh_dataset(ds)
            impute_missing_llds(fresh, tr_idx)
            tr = [fresh.samples[i] for i in tr_idx]
            te = [fresh.samples[i] for i in te_idx]
            res = train(tr, [], TrainConfig(seed=seed), feature_mode=mode,
                        out_dir=tmp_path / f"run_s{seed}_{mode.replace('+', '_')}")
            preds = predict_samples(te, res.params, res.model_config, mode,
                                    res.lld_mean, res.lld_std)
            targets = np.array([s.target for s in te])
            _, agg_p, agg_t = patient_aggregate(
                preds, [s.speaker_id for s in te], targets)
            record[mode] = (pcc(preds, targets), pcc(agg_p, agg_t),
                            rmse(preds, targets))
        per_seed.append(record)
        full = record["sfm_ws+jsh"]
        bare = record["sfm_ws"]
        print(f"seed {seed}: utt pcc {full[0]:.4f}, patient pcc {full[1]:.4f}, "
              f"rmse {full[2]:.3f} (+jsh) vs {bare[2]:.3f} (stacks only)")

    utt = [r["sfm_ws+jsh"][0] for r in per_seed]
    pat = [r["sfm_ws+jsh"][1] for r in per_seed]
    pat_wins = sum(1 for u, p in zip(utt, pat) if p >= u)
    jsh_wins = sum(1 for r in per_seed
                   if r["sfm_ws+jsh"][2] < r["sfm_ws"][2])
    elapsed = time.monotonic() - t0

    assert min(utt) >= 0.90, utt
    assert pat_wins >= 4, (utt, pat)
    assert jsh_wins >= 4, per_seed
    assert elapsed < 600.0

    _report(
        "SYNTHETIC END TO END",
        f"utt pcc min {min(utt):.4f}, patient beats utterance {pat_wins}/5, "
        f"descriptors beat stacks-only {jsh_wins}/5, {elapsed:.0f}s",
    )


# ---- 7. repeat-run determinism ----

def test_repeat_runs_byte_identical(tmp_path):
    spec = CorpusSpec(n_speakers=12, stack_layers=3, stack_dim=8,
                      frames_lo=5, frames_hi=10,
                      vowel_duration=0.4, sentence_piece=0.3, seed=77)
    corp = tmp_path / "corpus"
    corp.mkdir()
    rows = synth_corpus(spec, corp)
    write_manifest(corp / "manifest.csv", rows)

    out = tmp_path / "bundle"
    cfg = {
        "manifest": str(corp / "manifest.csv"),
        "out_dir": str(out),
        "scale": "capev",
        "feature_mode": "sfm_ws+jsh",
        "split": "holdout",
        "subsets": ["A", "S"],
        "seed": 3,
        "train": {"epochs": 3, "hidden": [16, 12, 8], "attn_dim": 4,
                  "batch_size": 4, "dropout": 0.2},
    }
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))

    runner = CliRunner()
    tables = []
    names = ("metrics.csv", "metrics.txt", "fits.csv", "split.csv")
    for _ in range(2):
        res = runner.invoke(cli_main, ["run", str(cfg_path)])
        assert res.exit_code == 0, res.output
        tables.append({name: (out / name).read_bytes() for name in names})
    assert tables[0] == tables[1]

    _report("RUN DETERMINISM",
            "metrics.csv, metrics.txt, fits.csv, split.csv byte-identical "
            "across two identical runs")


# ---- 8. split safety ----

def test_split_safety():
    rng = np.random.default_rng(88)
    t0 = time.monotonic()
    n_holdout = 0
    n_cv = 0
    for _ in range(10000):
        n_spk = int(rng.integers(10, 61))
        speakers = [f"p{j:03d}" for j in range(n_spk)]
        utt_speakers = []
        scores = []
        tied = rng.random() < 0.05
        for sp in speakers:
            for _u in range(int(rng.integers(1, 4))):
                utt_speakers.append(sp)
                scores.append(50.0 if tied else float(100.0 * rng.random()))
        mode = "cv5" if rng.random() < 0.5 else "holdout"
        plan = make_splits(utt_speakers, scores, mode=mode,
                           seed=int(rng.integers(0, 10000)))
        if mode == "holdout":
            tr = set(plan.train_speakers)
            te = set(plan.test_speakers)
            assert not tr & te
            assert tr | te == set(speakers)
            n_holdout += 1
        else:
            folds = [set(plan.fold_speakers(k)) for k in range(5)]
            for a in range(5):
                for b in range(a + 1, 5):
                    assert not folds[a] & folds[b]
            assert set().union(*folds) == set(speakers)
            n_cv += 1

    speakers = [f"s{j:03d}" for j in range(283)]
    scores = list(100.0 * np.random.default_rng(5).random(283))
    plan = make_splits(speakers, scores, seed=0)
    assert len(plan.train_speakers) == 226
    assert len(plan.test_speakers) == 57

    elapsed = time.monotonic() - t0
    _report(
        "SPLIT SAFETY",
        f"zero overlap in {n_holdout} holdout and {n_cv} five-fold "
        f"manifests; 283 speakers partition as 226/57; {elapsed:.0f}s",
    )
