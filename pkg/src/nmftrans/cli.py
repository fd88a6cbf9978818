"""Command-line front end.

Subcommands: ``learn-dict``, ``transcribe``, ``evaluate``, ``analyze-stereo``,
``synth`` and ``table`` (batch sweep over a folder, best reduction level per method).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .dictionary import Codebook, build_codebook
from .evalx import DEFAULT_TOL, GroundTruthError, Metrics, interchannel_ratio, read_ground_truth, score
from .multichannel import SpectroTensor
from .nnfac import Sparsity
from .notes import write_events_tsv, write_midi
from .pipeline import (METHODS, RunConfig, SynthParams, best_row, events_at, factorize,
                       render_score, sweep)
from .signal import AudioClip, StftConfig, load_wav, synth_note, write_wav

log = logging.getLogger("nmftrans")


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def read_config_file(path) -> dict:
    """Plain ``key=value`` lines; ``#`` starts a comment; dashes become underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_range(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(":")]
    if len(parts) == 2:
        parts.append(0.5)
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"expected LO:HI[:STEP], got {text!r}")
    return tuple(parts)


def parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _stft(args) -> StftConfig:
    return StftConfig(frame_len_ms=float(args.frame_ms), hop_fraction=float(args.hop))


def _run_config(args) -> RunConfig:
    sweep_range = args.delta_sweep if isinstance(args.delta_sweep, tuple) else parse_range(args.delta_sweep)
    return RunConfig(
        method=args.method,
        rank=int(args.rank) if args.rank else None,
        sparsity=Sparsity.parse(str(args.sparsity)),
        sparsity_target=_target(args.sparsity_target),
        delta_db=float(args.delta_db) if args.delta_db is not None else None,
        delta_sweep=sweep_range,
        detector_mode=args.detector,
        stft=_stft(args),
        codebook=args.codebook,
        seed=int(args.seed),
        max_iters=int(args.max_iters),
        truncate_seconds=float(args.truncate_seconds) if args.truncate_seconds else None,
        test_mode=_truthy(args.test_mode),
    )


def _target(v: str) -> str:
    v = str(v).strip()
    return "both" if v.lower() == "both" else v.upper()


def _truthy(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


def _sweep_csv(rows, path, method: str, sparsity: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "sparsity", "delta_db", "precision", "recall", "f_measure", "tp", "fp", "fn"])
        for r in rows:
            m = r.metrics
            w.writerow([method, sparsity, r.delta_db, f"{m.precision:.4f}", f"{m.recall:.4f}",
                        f"{m.f_measure:.4f}", m.tp, m.fp, m.fn])


# ---------------------------------------------------------------- commands

def _annotation_map(note_dir: Path, annotations) -> list[tuple[Path, int]]:
    wavs = sorted(note_dir.glob("*.wav"))
    if not wavs:
        raise CliError(f"no .wav files in {note_dir}")
    if annotations:
        mapping = {}
        with open(annotations) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                fields = line.split()
                if len(fields) != 2:
                    raise CliError(f"{annotations}:{lineno}: expected 'filename midi'")
                mapping[Path(fields[0]).name] = int(fields[1])
        pairs = [(w, mapping[w.name]) for w in wavs if w.name in mapping]
        missing = [w.name for w in wavs if w.name not in mapping]
        if missing:
            log.warning("%d wav files without annotation skipped (e.g. %s)", len(missing), missing[0])
    else:
        pairs = []
        for w in wavs:
            side = w.with_suffix(".txt")
            if not side.exists():
                raise CliError(f"missing annotations for {w.name} (no --annotations and no {side.name})")
            events = read_ground_truth(side, "maps_txt").events
            if not events:
                raise CliError(f"{side}: no note in sidecar annotation")
            pairs.append((w, events[0].midi))
    if not pairs:
        raise CliError("no annotated note files")
    return pairs


def cmd_learn_dict(args) -> int:
    pairs = _annotation_map(Path(args.note_dir), args.annotations)
    cb = build_codebook(pairs, _stft(args), channel=args.channel, source=str(args.note_dir))
    cb.save(args.out)
    print(f"codebook: {cb.rank} columns, MIDI {cb.labels[0]}..{cb.labels[-1]}, "
          f"{cb.W.shape[0]} bins -> {args.out}")
    missing = sorted(set(range(21, 109)) - set(cb.labels))
    if missing:
        print(f"  {len(missing)} piano keys without template")
    if args.report_dir:
        clip = load_wav(pairs[0][0])
        fig = plotting.plot_codebook(cb.W, cb.labels, Path(args.report_dir) / "codebook.png",
                                     clip.sample_rate / _stft(args).frame_len(clip.sample_rate))
        print(f"  figure: {fig}")
    return 0


def cmd_transcribe(args) -> int:
    cfg = _run_config(args)
    codebook = Codebook.load(cfg.codebook) if cfg.codebook else None
    clip = load_wav(args.audio)
    fact = factorize(clip, cfg, codebook)
    if not np.all(np.isfinite(fact.activations)):
        raise CliError("factorization diverged (non-finite activations)")
    out_midi = Path(args.out)
    stem = out_midi.with_suffix("")
    truth = read_ground_truth(args.truth).events if args.truth else None
    if truth is not None and cfg.truncate_seconds:
        truth = [e for e in truth if e.onset_s < cfg.truncate_seconds]
    rows = None
    if cfg.delta_db is not None:
        delta = cfg.delta_db
    elif truth is not None:
        rows = sweep(fact, truth, cfg.deltas(), float(args.tol), cfg.detector_mode)
        delta = best_row(rows).delta_db
        _sweep_csv(rows, stem.with_name(stem.name + "_sweep.csv"), cfg.method, str(cfg.sparsity))
    else:
        delta = 17.5
        log.info("no --delta-db and no --truth: using %.1f dB", delta)
    events = events_at(fact, delta, cfg.detector_mode)
    write_midi(events, out_midi)
    write_events_tsv(events, stem.with_suffix(".tsv"))
    peak = float(fact.activations.max()) if fact.activations.size else 0.0
    run_log = {
        "method": cfg.method,
        "sparsity": str(cfg.sparsity),
        "delta_db": delta,
        "threshold": peak * 10 ** (-delta / 10) if peak > 0 else None,
        "n_events": len(events),
        "objective_trace": fact.objective_trace,
    }
    if truth is not None:
        m = score(events, truth, float(args.tol))
        run_log["metrics"] = m.to_dict()
    stem.with_name(stem.name + "_log.json").write_text(json.dumps(run_log, indent=2))
    print(f"{len(events)} notes at {delta:g} dB -> {out_midi}")
    if truth is not None:
        print(f"  P={m.precision:.3f} R={m.recall:.3f} F={m.f_measure:.3f}")
    if args.report_dir:
        rep = Path(args.report_dir)
        thr = run_log["threshold"]
        plotting.plot_activations(fact.activations, fact.labels, fact.hop_seconds,
                                  rep / f"{stem.name}_activations.png", events, truth or (), thr)
        if len(fact.objective_trace) > 1:
            plotting.plot_trace(fact.objective_trace, rep / f"{stem.name}_objective.png")
        if rows:
            plotting.plot_sweep(rows, rep / f"{stem.name}_sweep.png", cfg.method)
    return 0


def _pair_files(pred: Path, truth: Path) -> list[tuple[Path, Path]]:
    if pred.is_file() and truth.is_file():
        return [(pred, truth)]
    if not (pred.is_dir() and truth.is_dir()):
        raise CliError("prediction and truth must both be files or both be directories")
    exts = (".mid", ".midi", ".tsv", ".txt")
    preds = {p.stem: p for p in sorted(pred.iterdir()) if p.suffix.lower() in exts}
    truths = {p.stem: p for p in sorted(truth.iterdir()) if p.suffix.lower() in exts}
    unmatched = sorted(set(preds) ^ set(truths))
    if unmatched:
        raise CliError(f"unmatched files: {', '.join(unmatched[:5])}")
    return [(preds[k], truths[k]) for k in sorted(preds)]


def cmd_evaluate(args) -> int:
    pairs = _pair_files(Path(args.pred), Path(args.truth))
    tol = float(args.tol)
    per_file = {}
    for p, t in pairs:
        m = score(read_ground_truth(p).events, read_ground_truth(t).events, tol)
        per_file[p.stem] = m.to_dict()
    keys = ("precision", "recall", "f_measure")
    mean = {k: float(np.mean([d[k] for d in per_file.values()])) for k in keys}
    for k in ("tp", "fp", "fn"):
        mean[k] = int(sum(d[k] for d in per_file.values()))
    mean["delta_db"] = float(args.delta_db) if args.delta_db is not None else None
    report = {"tolerance_s": tol, "mean": mean, "files": per_file}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text if not args.out else f"F={mean['f_measure']:.3f} over {len(pairs)} file(s) -> {args.out}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "precision", "recall", "f_measure", "tp", "fp", "fn"])
            for name, d in per_file.items():
                w.writerow([name] + [f"{d[k]:.4f}" for k in keys] + [d["tp"], d["fp"], d["fn"]])
    return 0


def cmd_analyze_stereo(args) -> int:
    clip = load_wav(args.audio)
    if clip.n_channels != 2:
        raise CliError(f"analyze-stereo needs a 2-channel file, got {clip.n_channels}")
    tensor = SpectroTensor.from_clip(clip, _stft(args))
    frames = parse_int_list(args.frames) if args.frames else []
    if args.onset_frame is not None:
        frames += [args.onset_frame + d for d in parse_int_list(args.delays or "0")]
    if not frames:
        frames = [tensor.data.shape[1] // 2]
    T = tensor.data.shape[1]
    bad = [f for f in frames if not 0 <= f < T]
    if bad:
        raise CliError(f"frame(s) {bad} outside 0..{T - 1}")
    freqs = np.arange(tensor.data.shape[0]) * tensor.freq_resolution_hz
    curves = {f"frame_{f}": interchannel_ratio(tensor, f, float(args.floor)) for f in frames}
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz"] + list(curves))
        for i, f in enumerate(freqs):
            w.writerow([f"{f:.3f}"] + [f"{c[i]:.6g}" for c in curves.values()])
    energy = tensor.data[:, frames, 0].mean(axis=1)
    live = energy > 1e-3 * energy.max() if energy.max() > 0 else np.zeros_like(energy, bool)
    print(f"{len(frames)} frame(s) -> {out}")
    for name, c in curves.items():
        vals = c[live]
        if len(vals):
            slope = np.polyfit(freqs[live], np.log(vals), 1)[0] if len(vals) > 1 else 0.0
            print(f"  {name}: median ratio {np.median(vals):.4g}, spread {np.std(np.log(vals)):.3g} "
                  f"(log), log-slope {slope * 1000:.3g} per kHz")
    if args.report_dir:
        plotting.plot_ratios(freqs, curves, Path(args.report_dir) / f"{out.stem}.png")
    return 0


def cmd_synth(args) -> int:
    params = SynthParams(int(args.sample_rate), int(args.partials), float(args.decay))
    if args.note_set:
        lo, hi = (int(x) for x in args.note_set.split(":"))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for m in range(lo, hi + 1):
            name = f"note_{m:03d}.wav"
            x = synth_note(m, float(args.note_seconds), params.sample_rate, params.n_partials, params.decay_rate)
            write_wav(out_dir / name, AudioClip([x], params.sample_rate))
            lines.append(f"{name}\t{m}\n")
        (out_dir / "annotations.tsv").write_text("".join(lines))
        print(f"{hi - lo + 1} isolated notes -> {out_dir}")
        return 0
    if not args.score:
        raise CliError("synth needs a score TSV (or --note-set)")
    try:
        events = read_ground_truth(args.score, "tsv").events
    except GroundTruthError as exc:
        raise CliError(f"malformed score: {exc}") from None
    gains = tuple(float(g) for g in args.gains.split(","))
    clip = render_score(events, params, args.stereo, gains,
                        float(args.duration) if args.duration else None)
    out = Path(args.out)
    write_wav(out, clip)
    write_events_tsv(events, out.with_suffix(".tsv"))
    print(f"{len(events)} notes, {clip.duration:.2f} s, {clip.n_channels} channel(s) -> {out}")
    return 0


def _table_one(job):
    wav, cfg, codebook, tol = job
    truth = read_ground_truth(wav.with_suffix(".txt"), "maps_txt").events
    if cfg.truncate_seconds:
        truth = [e for e in truth if e.onset_s < cfg.truncate_seconds]
    fact = factorize(load_wav(wav), cfg, codebook if cfg.codebook else None)
    return sweep(fact, truth, cfg.deltas(), tol, cfg.detector_mode)


def cmd_table(args) -> int:
    """Average sweeps over a folder of ``name.wav`` + ``name.txt`` pairs."""
    folder = Path(args.folder)
    wavs = sorted(p for p in folder.glob("*.wav") if p.with_suffix(".txt").exists())
    if args.limit:
        wavs = wavs[: int(args.limit)]
    if not wavs:
        raise CliError(f"no wav/txt pairs in {folder}")
    codebook = Codebook.load(args.codebook) if args.codebook else None
    methods = args.methods.split(",")
    sparsities = args.sparsities.split(",")
    results = []
    for method in methods:
        for sp in sparsities:
            args.method, args.sparsity = method, sp
            cfg = _run_config(args)
            per_delta: dict[float, list[Metrics]] = {}
            jobs = [(wav, cfg, codebook, float(args.tol)) for wav in wavs]
            if int(args.jobs) > 1:
                with ProcessPoolExecutor(int(args.jobs)) as pool:
                    outcomes = list(pool.map(_table_one, jobs))
            else:
                outcomes = [_table_one(j) for j in jobs]
            for wav, rows in zip(wavs, outcomes):
                for row in rows:
                    per_delta.setdefault(row.delta_db, []).append(row.metrics)
                log.info("%s/%s: %s done", method, sp, wav.name)
            avg = {d: tuple(float(np.mean([getattr(m, k) for m in ms])) for k in ("precision", "recall", "f_measure"))
                   for d, ms in per_delta.items()}
            best = max(avg, key=lambda d: (avg[d][2], -d))
            results.append((method, sp, best, *avg[best]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["technique", "sparsity", "delta_db", "precision", "recall", "f_measure"])
        for method, sp, d, p, r, f in results:
            w.writerow([method, sp, d, f"{p:.3f}", f"{r:.3f}", f"{f:.3f}"])
    for row in results:
        print("{:10s} {:8s} {:5.1f}  P={:.3f} R={:.3f} F={:.3f}".format(*row))
    return 0


# ------------------------------------------------------------------ parser

def _add_stft(p):
    p.add_argument("--frame-ms", default=64.0, type=float, help="frame length in ms (default 64)")
    p.add_argument("--hop", default=0.5, type=float, help="hop as a fraction of the frame (default 0.5)")


def _add_run(p):
    p.add_argument("--method", choices=METHODS, default="semi_nmf")
    p.add_argument("--rank", type=int)
    p.add_argument("--codebook", help="codebook CSV from learn-dict")
    p.add_argument("--sparsity", default="none", help="none, l0:N, l1:ALPHA or l2:BETA")
    p.add_argument("--sparsity-target", default="H", type=_target, choices=["W", "H", "both"])
    p.add_argument("--delta-db", type=float)
    p.add_argument("--delta-sweep", default="10:25:0.5", type=parse_range, help="LO:HI[:STEP] in dB")
    p.add_argument("--detector", default="fixed", choices=["fixed", "adaptive"])
    p.add_argument("--tol", default=DEFAULT_TOL, type=float, help="onset tolerance in seconds")
    p.add_argument("--seed", default=0, type=int)
    p.add_argument("--max-iters", default=200, type=int)
    p.add_argument("--truncate-seconds", type=float)
    p.add_argument("--test-mode", action="store_true", help="deterministic inner loops")
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    _add_stft(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmftrans", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-dict", help="learn a codebook from isolated notes")
    p.add_argument("note_dir")
    p.add_argument("--annotations", help="TSV 'filename midi'; default: MAPS sidecar .txt files")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--channel", type=int, help="learn from one channel instead of the mean")
    p.add_argument("--report-dir")
    _add_stft(p)
    p.set_defaults(func=cmd_learn_dict)

    p = sub.add_parser("transcribe", help="transcribe a WAV file to MIDI")
    p.add_argument("audio")
    p.add_argument("-o", "--out", required=True, help="output .mid (a .tsv and _log.json go alongside)")
    p.add_argument("--truth", help="reference annotations; enables the reduction-level sweep")
    p.add_argument("--report-dir")
    _add_run(p)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--tol", default=DEFAULT_TOL, type=float)
    p.add_argument("--delta-db", type=float, help="recorded in the JSON output")
    p.add_argument("-o", "--out", help="JSON output (stdout if omitted)")
    p.add_argument("--csv", help="per-file CSV output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-stereo", help="inter-channel magnitude ratios")
    p.add_argument("audio")
    p.add_argument("-o", "--out", required=True, help="ratio CSV")
    p.add_argument("--frames", help="comma-separated frame indices")
    p.add_argument("--onset-frame", type=int)
    p.add_argument("--delays", help="comma-separated frame offsets from --onset-frame")
    p.add_argument("--floor", default=1e-8, type=float)
    p.add_argument("--report-dir")
    _add_stft(p)
    p.set_defaults(func=cmd_analyze_stereo)

    p = sub.add_parser("synth", help="render a score TSV to WAV with exact ground truth")
    p.add_argument("score", nargs="?")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--stereo", default="mono", choices=["mono", "gains", "filters"])
    p.add_argument("--gains", default="1.0,0.6")
    p.add_argument("--sample-rate", default=44100, type=int)
    p.add_argument("--partials", default=8, type=int)
    p.add_argument("--decay", default=1.0, type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--note-set", help="LO:HI renders isolated notes into the --out directory")
    p.add_argument("--note-seconds", default=1.0, type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("table", help="sweep methods over a folder of wav/txt pairs")
    p.add_argument("folder")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--methods", default="semi_nmf")
    p.add_argument("--sparsities", default="none")
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", default=1, type=int, help="worker processes (one file each)")
    _add_run(p)
    p.set_defaults(func=cmd_table, truncate_seconds=30.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # re-parse with file values as defaults so explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**read_config_file(args.config))
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, GroundTruthError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
