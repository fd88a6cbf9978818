import numpy as np
import pytest

from nmftrans.dictionary import (Codebook, build_codebook, codebook_from_templates,
                                 learn_note_template, normalize_columns)
from nmftrans.signal import AudioClip, StftConfig, stft_magnitude, synth_note, write_wav


def test_template_peaks_on_partials():
    sr = 44100
    spec = stft_magnitude(synth_note(69, 1.0, sr, n_partials=6), sr)
    w = learn_note_template(spec)
    assert np.linalg.norm(w) == pytest.approx(1.0)
    bins = np.arange(len(w))
    centres = [440 * p / spec.freq_resolution_hz for p in range(1, 7)]
    near = [np.abs(bins - c) <= 2 for c in centres]  # Hann main lobe
    for c, m in zip(centres, near):
        assert abs(bins[m][np.argmax(w[m])] - c) <= 1
    # and every partial's peak beats everything off the comb
    off_comb = ~np.any(near, axis=0)
    assert min(w[m].max() for m in near) > w[off_comb].max()


def test_rank_one_input_exact(rng):
    w, h = rng.random(30), rng.random(12)
    template = learn_note_template(np.outer(w, h))
    np.testing.assert_allclose(template, w / np.linalg.norm(w), atol=1e-8)


def test_zero_spectrogram_rejected():
    with pytest.raises(ValueError):
        learn_note_template(np.zeros((10, 4)))


def test_codebook_sorted_and_round_trip(tmp_path, rng):
    books = {m: rng.random(7) for m in (64, 21, 108, 60)}
    cb = codebook_from_templates(books)
    assert cb.labels == [21, 60, 64, 108]
    np.testing.assert_array_equal(cb.W[:, 1], books[60])
    cb.save(tmp_path / "cb.csv")
    assert (tmp_path / "cb.csv").read_text().startswith("midi_labels: 21,60,64,108\n")
    back = Codebook.load(tmp_path / "cb.csv")
    assert back.labels == cb.labels
    assert np.array_equal(back.W, cb.W)


def test_codebook_validation(rng, tmp_path):
    with pytest.raises(ValueError):
        Codebook(rng.random((4, 2)), [60])
    with pytest.raises(ValueError):
        Codebook(rng.random((4, 1)), [12])
    with pytest.raises(ValueError):
        codebook_from_templates({60: np.ones(3), 61: np.ones(4)})
    (tmp_path / "bad.csv").write_text("1,2\n3,4\n")
    with pytest.raises(ValueError):
        Codebook.load(tmp_path / "bad.csv")


def test_stacked_and_zero_columns():
    W = np.array([[3.0, 0.0], [4.0, 0.0]])
    cb = Codebook(W, [60, 61])
    assert cb.zero_columns == [1]
    S = cb.stacked(2)
    assert S.shape == (4, 2)
    assert np.linalg.norm(S[:, 0]) == pytest.approx(1.0)
    assert not S[:, 1].any()
    np.testing.assert_allclose(normalize_columns(W)[:, 0], [0.6, 0.8])


def test_build_from_files(tmp_path):
    sr = 8000
    pairs = []
    for m in (72, 60, 67):
        p = tmp_path / f"n{m}.wav"
        write_wav(p, AudioClip([synth_note(m, 0.3, sr, 4)], sr))
        pairs.append((p, m))
    cb = build_codebook(pairs, StftConfig())
    assert cb.labels == [60, 67, 72]
    assert cb.W.shape == (StftConfig().frame_len(sr) // 2 + 1, 3)
    with pytest.raises(ValueError, match="duplicate"):
        build_codebook(pairs + [(pairs[0][0], 72)])
