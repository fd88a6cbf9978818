"""Acceptance criteria, one reported line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end.  Set ``NMFTRANS_MAPS_DIR`` to a folder of ``.wav``/``.txt``
pairs (e.g. one MAPS piano) to also run the corpus table.
"""

import os
import time
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

from nmftrans import cli
from nmftrans.evalx import Metrics, read_ground_truth, score
from nmftrans.multichannel import flexible_parafac2, ntf
from nmftrans.nnfac import NmfConfig, Sparsity, hals_nmf, nnls_fixed_dictionary
from nmftrans.notes import DetectorConfig, NoteEvent, detect_notes, midi_bytes, write_midi
from nmftrans.pipeline import (RunConfig, SynthParams, best_row, factorize, sweep,
                               synthetic_codebook)
from nmftrans.pitch import estimate_f0, freq_to_midi
from nmftrans.signal import StftConfig, load_wav, stft_magnitude, synth_note
from nmftrans.tensor_ops import CpFactors, cp_compose, khatri_rao, kronecker, unfold, vec

from oracles import smf_single_note_golden

ONE_TICK = 1 / 960


# ------------------------------------------------------------------ tensors

def test_tensor_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {"unfold0": 0.0, "unfold1": 0.0, "unfold2": 0.0, "vec_kron": 0.0, "vec_diag": 0.0}
    for _ in range(100):
        I, J, K, R = rng.integers(2, 7, size=4)
        A, B, C = rng.random((I, R)) * 10, rng.random((J, R)), rng.random((K, R))
        t = cp_compose(CpFactors(A, B, C))
        worst["unfold0"] = max(worst["unfold0"], np.abs(unfold(t, 0) - A @ khatri_rao(B, C).T).max())
        worst["unfold1"] = max(worst["unfold1"], np.abs(unfold(t, 1) - B @ khatri_rao(A, C).T).max())
        worst["unfold2"] = max(worst["unfold2"], np.abs(unfold(t, 2) - C @ khatri_rao(A, B).T).max())
    for _ in range(100):
        m, n, p, q = rng.integers(1, 6, size=4)
        A, X, B = rng.normal(size=(m, n)), rng.normal(size=(n, p)), rng.normal(size=(p, q))
        worst["vec_kron"] = max(worst["vec_kron"], np.abs(vec(A @ X @ B) - kronecker(A, B.T) @ vec(X)).max())
    for _ in range(100):
        m, r, q = rng.integers(1, 6, size=3)
        A, d, B = rng.normal(size=(m, r)), rng.normal(size=r), rng.normal(size=(r, q))
        lhs = vec(A @ np.diag(d) @ B).ravel()
        worst["vec_diag"] = max(worst["vec_diag"], np.abs(lhs - khatri_rao(A, B.T) @ d).max())

    T1 = [[0, 2, 4, 6], [8, 10, 12, 14], [16, 18, 20, 22]]
    T2 = [[1, 3, 5, 7], [9, 11, 13, 15], [17, 19, 21, 23]]
    X = np.stack([np.array(T1), np.array(T2)], axis=2)
    example = unfold(X, 0)
    example_ok = example.dtype.kind == "i" and example.tolist() == [list(range(8)), list(range(8, 16)),
                                                                    list(range(16, 24))]
    elapsed = time.perf_counter() - t0
    err = max(worst.values())
    ok = err < 1e-10 and example_ok and elapsed < 5
    report("tensor identities", ok,
           f"max err {err:.1e} (<1e-10) over 3x100 instances, worked unfolding exact={example_ok}, "
           f"{elapsed:.2f}s (<5s)")
    assert ok


# --------------------------------------------------------------------- HALS

def test_hals_monotone(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    runs = violations = 0
    for i in range(50):
        X = rng.random((60, 40))
        for sp in (Sparsity(), Sparsity("l1", 1e-5), Sparsity("l1", 0.5)):
            cfg = NmfConfig(rank=5, max_outer_iters=100, sparsity=sp, sparsity_target="both",
                            deterministic=True)
            tr = hals_nmf(X, cfg).objective_trace
            runs += 1
            violations += sum(b ** 2 > a ** 2 * (1 + 1e-10) for a, b in zip(tr, tr[1:]))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 30
    report("HALS monotonicity", ok, f"{violations} increases in {runs} runs (50 matrices 60x40, rank 5, "
           f"plain and l1), {elapsed:.1f}s (<30s)")
    assert ok


def test_exact_recovery(report):
    t0 = time.perf_counter()
    blind_ok = nnls_ok = 0
    worst_nnls = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        W, H = rng.random((20, 4)), rng.random((4, 30))
        X = W @ H
        res = hals_nmf(X, NmfConfig(rank=4, max_outer_iters=500, outer_tol=1e-12, deterministic=True))
        blind_ok += np.linalg.norm(X - res.W @ res.H) / np.linalg.norm(X) < 1e-3
        Hr = nnls_fixed_dictionary(X, W, NmfConfig(rank=4, max_outer_iters=500, outer_tol=0,
                                                   deterministic=True))
        e = np.linalg.norm(Hr - H) / np.linalg.norm(H)
        worst_nnls = max(worst_nnls, e)
        nnls_ok += e < 1e-6
    elapsed = time.perf_counter() - t0
    ok = blind_ok >= 45 and nnls_ok == 50 and elapsed < 60
    report("exact recovery", ok, f"blind HALS {blind_ok}/50 (>=45) under 1e-3; fixed-W NNLS {nnls_ok}/50 "
           f"within 1e-6 (worst {worst_nnls:.1e}); {elapsed:.1f}s (<60s)")
    assert ok


# --------------------------------------------------------------- multichannel

def test_ntf_recovery(report):
    good = 0
    gap = 0.0
    consistent = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        A, B, C = rng.random((30, 3)), rng.random((40, 3)), rng.random((2, 3))
        X = cp_compose(CpFactors(A, B, C))
        res = ntf(X, NmfConfig(rank=3, max_outer_iters=500, outer_tol=1e-12, deterministic=True),
                  track_unfoldings=True)
        good += res.objective_trace[-1] / np.linalg.norm(X) < 1e-3
        # same residual computed three ways; rounding scales with the data norm
        slack = 1e-12 * np.linalg.norm(X)
        worst_gap = max(max(abs(r0 - r1), abs(r1 - r2)) for r0, r1, r2 in res.unfolding_residuals)
        gap = max(gap, worst_gap / np.linalg.norm(X))
        consistent &= worst_gap <= slack
    ok = good >= 45 and consistent
    report("NTF recovery", ok, f"{good}/50 (>=45) under 1e-3 relative; three unfoldings agree every "
           f"iteration={consistent} (max gap {gap:.1e} of ||X||, <1e-12)")
    assert ok


def parafac2_instance(seed, F=30, T=40, C=2, R=3):
    """X_k = P_k W* D_k H; P_k has nonnegative orthonormal columns on disjoint bins."""
    rng = np.random.default_rng(seed)
    Ws, H = rng.random((R, R)) + 0.1, rng.random((R, T))
    X = np.zeros((F, T, C))
    for k in range(C):
        groups = rng.permutation(F) % R
        P = np.zeros((F, R))
        for r in range(R):
            v = rng.random((groups == r).sum()) + 0.1
            P[groups == r, r] = v / np.linalg.norm(v)
        X[:, :, k] = P @ Ws @ np.diag(rng.random(R) + 0.5) @ H
    return X


def test_parafac2_model_matched(report):
    t0 = time.perf_counter()
    X = parafac2_instance(0)
    res = flexible_parafac2(X, NmfConfig(rank=3, max_outer_iters=1000, outer_tol=1e-9, deterministic=True))
    elapsed = time.perf_counter() - t0
    fit = max(res.fit_residuals(X))
    coup = max(res.coupling_residuals())
    ortho = max(res.orthonormality_errors)
    ok = fit < 1e-2 and coup < 0.05 and ortho < 1e-8 and elapsed < 60
    report("PARAFAC2 model-matched", ok, f"fit {fit:.2e} (<1e-2), coupling {coup:.2e} (<0.05), "
           f"max |P'P-I| {ortho:.1e} (<1e-8) over {len(res.orthonormality_errors)} iterations, "
           f"{elapsed:.1f}s (<60s)")
    assert ok


# -------------------------------------------------------------------- pitch

def test_pitch(report):
    keys = all(freq_to_midi(440.0 * 2 ** ((m - 69) / 12)) == m for m in range(21, 109))
    anchors = freq_to_midi(27.5) == 21 and freq_to_midi(440.0) == 69
    sr = 44100
    stft = StftConfig()
    misses = {}
    for partials in (4, 6, 8):
        for m in range(36, 97):
            spec = stft_magnitude(synth_note(m, 0.5, sr, partials), sr, stft)
            est = estimate_f0(spec.data.mean(axis=1), sr, stft.frame_len(sr))
            if est.midi != m:
                misses.setdefault(partials, []).append((m, est.midi))
    ok = keys and anchors and not misses
    report("pitch", ok, f"88 keys exact={keys}, 27.5->21 and 440->69={anchors}, "
           f"MIDI 36-96 with 4/6/8 partials: {61 * 3 - sum(map(len, misses.values()))}/183 "
           f"{'misses ' + str(misses) if misses else ''}")
    assert ok


# ---------------------------------------------------------------- detection

def test_detection_traces(report):
    cfg = DetectorConfig(mode="fixed", delta_db=10)
    pulse = np.zeros((1, 40))
    pulse[0, 10:21] = 1.0
    ramp = np.zeros((1, 40))
    ramp[0, :10] = np.linspace(0, 1, 10)
    ramp[0, 10:31] = 1.0
    hop = 0.032
    got = [detect_notes(H, [60], cfg, hop) for H in (pulse, np.zeros((1, 40)), ramp)]
    expected = [[NoteEvent(5 * hop, 21 * hop, 60)], [], [NoteEvent(0.0, 31 * hop, 60)]]
    traces = got == expected
    scaled = all(detect_notes(H * 1e3, [60], cfg, hop) == g for H, g in zip((pulse, np.zeros((1, 40)), ramp), got))
    rng = np.random.default_rng(5)
    H = rng.random((6, 200)) ** 6
    scaled = scaled and detect_notes(H, list(range(60, 66)), cfg, hop) == \
        detect_notes(H * 1e3, list(range(60, 66)), cfg, hop)
    ok = traces and scaled
    report("detection hand traces", ok, f"pulse/zero/ramp exact={traces}, invariant to x1e3={scaled}")
    assert ok


# ------------------------------------------------------------------ metrics

def optimal_tp(pred, truth, tol):
    best = 0
    if len(pred) < len(truth):
        for perm in permutations(range(len(truth)), len(pred)):
            best = max(best, sum(pred[i].midi == truth[j].midi and abs(pred[i].onset_s - truth[j].onset_s)
                                 <= tol + 1e-12 for i, j in enumerate(perm)))
    else:
        for perm in permutations(range(len(pred)), len(truth)):
            best = max(best, sum(truth[i].midi == pred[j].midi and abs(truth[i].onset_s - pred[j].onset_s)
                                 <= tol + 1e-12 for i, j in enumerate(perm)))
    return best


def test_metrics_oracle(report):
    rng = np.random.default_rng(11)
    tol = 0.15
    checked = agree = 0
    formulas = True
    while checked < 200:
        n_t, n_p = rng.integers(0, 7, size=2)
        onsets = np.sort(rng.uniform(0, 5, n_t))
        if n_t > 1 and np.min(np.diff(onsets)) <= 2 * tol:
            continue
        truth = [NoteEvent(float(o), float(o) + 0.3, int(rng.integers(60, 63))) for o in onsets]
        pred = [NoteEvent(float(o), float(o) + 0.3, int(rng.integers(60, 63)))
                for o in rng.uniform(0, 5, n_p)]
        # some predictions near true onsets so matches actually happen
        pred += [NoteEvent(e.onset_s + float(rng.uniform(-0.2, 0.2)) + 0.2, e.offset_s + 0.5, e.midi)
                 for e in truth if rng.random() < 0.6]
        pred = pred[:8]
        m = score(pred, truth, tol)
        checked += 1
        agree += m.tp == optimal_tp(pred, truth, tol)
        p = m.tp / len(pred) if pred else 0.0
        r = m.tp / len(truth) if truth else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        formulas &= (m.precision, m.recall, m.f_measure) == (p, r, f)
        formulas &= m.fp == len(pred) - m.tp and m.fn == len(truth) - m.tp
    ok = agree == checked and formulas
    report("metrics oracle", ok, f"greedy tp == optimal tp on {agree}/{checked} separated instances, "
           f"P/R/F formulas exact={formulas}")
    assert ok


# -------------------------------------------------------------- end to end

SCORE = [(0.3, 1.6, 60), (0.8, 2.0, 64), (1.2, 2.2, 67), (2.6, 3.6, 62), (3.0, 4.4, 69),
         (3.3, 4.0, 65), (4.8, 6.0, 72), (5.3, 6.5, 57), (6.6, 7.6, 74), (7.0, 8.4, 59),
         (7.9, 9.0, 70), (8.5, 9.6, 55)]


def max_polyphony(events):
    return max(sum(e.onset_s <= t < e.offset_s for e in events) for t in np.arange(0, 10, 0.01))


@pytest.fixture(scope="module")
def e2e_audio(tmp_path_factory):
    d = tmp_path_factory.mktemp("e2e")
    (d / "score.tsv").write_text("".join(f"{a}\t{b}\t{m}\n" for a, b, m in SCORE))
    assert cli.main(["synth", str(d / "score.tsv"), "-o", str(d / "mono.wav"), "--duration", "10"]) == 0
    assert cli.main(["synth", str(d / "score.tsv"), "-o", str(d / "stereo.wav"), "--duration", "10",
                     "--stereo", "gains", "--gains", "1.0,0.6"]) == 0
    return d


def best_f(clip, truth, cfg, codebook=None):
    rows = sweep(factorize(clip, cfg, codebook), truth, cfg.deltas())
    return best_row(rows)


def test_end_to_end_synthetic(report, e2e_audio):
    t0 = time.perf_counter()
    d = e2e_audio
    mono, stereo = load_wav(d / "mono.wav"), load_wav(d / "stereo.wav")
    truth = read_ground_truth(d / "mono.tsv").events
    shape_ok = mono.duration == 10.0 and len(truth) == 12 and max_polyphony(truth) == 3
    stft = StftConfig(hop_fraction=0.25)
    book = synthetic_codebook(range(21, 109), SynthParams(), stft)
    common = dict(stft=stft, test_mode=True, seed=0)
    semi = best_f(mono, truth, RunConfig(method="semi_nmf", codebook="synthetic", **common), book)
    blind = best_f(mono, truth, RunConfig(method="blind_nmf", rank=12, **common))
    ntf_row = best_f(stereo, truth, RunConfig(method="ntf", codebook="synthetic", **common), book)
    simul = best_f(stereo, truth, RunConfig(method="simul_nmf", codebook="synthetic", **common), book)
    elapsed = time.perf_counter() - t0
    f = {k: r.metrics.f_measure for k, r in
         (("semi", semi), ("blind", blind), ("ntf", ntf_row), ("simul", simul))}
    ok = (shape_ok and f["semi"] == 1.0 and f["blind"] >= 0.8 and f["ntf"] >= 0.9 and f["simul"] >= 0.9
          and elapsed < 300)
    report("end-to-end synthetic", ok,
           f"10 s, 12 notes, polyphony 3={shape_ok}; semi F={f['semi']:.3f} (=1) at {semi.delta_db} dB, "
           f"blind-12 F={f['blind']:.3f} (>=0.8), ntf F={f['ntf']:.3f} (>=0.9), simul F={f['simul']:.3f} "
           f"(>=0.9); quarter-frame hop; {elapsed:.0f}s (<300s)")
    assert ok


def test_end_to_end_default_hop_info(report, e2e_audio):
    """Informational: the same semi-supervised run at the default half-frame hop."""
    d = e2e_audio
    mono = load_wav(d / "mono.wav")
    truth = read_ground_truth(d / "mono.tsv").events
    book = synthetic_codebook(range(21, 109))
    row = best_f(mono, truth, RunConfig(method="semi_nmf", codebook="synthetic", test_mode=True), book)
    report("info: end-to-end at default hop", True,
           f"semi F={row.metrics.f_measure:.3f} at {row.delta_db} dB (32 ms hop; the 5-frame onset "
           f"fallback spans 160 ms, beyond the 150 ms tolerance)")


# --------------------------------------------------------------------- MIDI

def test_midi_round_trip(report, tmp_path):
    rng = np.random.default_rng(2)
    worst = 0.0
    count_ok = True
    for i in range(100):
        n = int(rng.integers(0, 12))
        events = []
        for _ in range(n):
            on = float(rng.uniform(0, 20))
            events.append(NoteEvent(on, on + float(rng.uniform(0.01, 3)), int(rng.integers(21, 109))))
        # same-pitch notes may not overlap in a single MIDI channel
        events.sort()
        kept, last_off = [], {}
        for e in events:
            if e.onset_s >= last_off.get(e.midi, -1.0) + ONE_TICK:
                kept.append(e)
                last_off[e.midi] = e.offset_s
        path = tmp_path / f"r{i}.mid"
        write_midi(kept, path)
        back = read_ground_truth(path).events
        count_ok &= len(back) == len(kept)
        for a, b in zip(sorted(kept, key=lambda e: (e.onset_s, e.midi)), back):
            worst = max(worst, abs(a.onset_s - b.onset_s), abs(a.offset_s - b.offset_s))
            count_ok &= a.midi == b.midi
    golden = midi_bytes([NoteEvent(0.5, 1.0, 69)]) == smf_single_note_golden(69, 480, 960)
    ok = count_ok and worst <= ONE_TICK and golden
    report("MIDI round trip", ok, f"100 random lists, events preserved={count_ok}, worst time error "
           f"{worst * 1000:.3f} ms (<= 1 tick = {ONE_TICK * 1000:.3f} ms), golden bytes match={golden}")
    assert ok


# --------------------------------------------------------------------- MAPS

@pytest.mark.skipif(not os.environ.get("NMFTRANS_MAPS_DIR"), reason="set NMFTRANS_MAPS_DIR to run")
def test_maps_table(report, tmp_path):
    folder = Path(os.environ["NMFTRANS_MAPS_DIR"])
    codebook = os.environ.get("NMFTRANS_CODEBOOK")
    out = tmp_path / "table.csv"
    args = ["table", str(folder), "-o", str(out), "--truncate-seconds", "30",
            "--methods", "semi_nmf" if codebook else "blind_nmf", "--rank", "88",
            "--sparsities", "none,l0:20,l1:1e-5,l2:0.95"]
    if codebook:
        args += ["--codebook", codebook]
    rc = cli.main(args)
    ok = rc == 0 and out.exists()
    report("MAPS table (optional)", ok, (out.read_text() if ok else f"exit {rc}").replace("\n", " | "))
    assert ok
