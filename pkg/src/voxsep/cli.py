"""Command-line entry point: train / separate / evaluate / significance / export-kde.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
Flag values win over config-file values; every run directory receives the
fully expanded configuration for reproducibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import metrics, trainer
from .audio_io import (ChunkPlan, DatasetError, WavFormatError, chunk,
                       index_dataset, load_wav, overlap_add, resample_half,
                       to_mono, write_wav)
from .diffcore import NumericFault, Tensor
from .trainer import (CheckpointError, DiskDataset, LossSpec, TrainConfig,
                      build_model, load_checkpoint, loss_preset,
                      model_config_dict, save_checkpoint, write_history_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MODEL_RATE = 22050

SEGMENT_COLUMNS = ["song_id", "segment_index", "sdr", "sir", "sar",
                   "pes", "vad_correct", "is_silent", "ref_active_fraction"]
VAD_FRAME_COLUMNS = ["song_id", "frame_index", "ref_active", "est_active"]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path: str, columns: list[str], rows) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _parse_float(s: str):
    return None if s == "" else float(s)


# ---------------------------------------------------------------------------
# train

def _add_train_args(p: _Parser):
    p.add_argument("--data", required=True, help="dataset root with train/ and test/")
    p.add_argument("--preset", choices=trainer.MODEL_PRESETS, default=None)
    p.add_argument("--loss", default=None,
                   help="loss preset (%s) or explicit via --l1/--l2/--alpha/--beta"
                        % "/".join(sorted(trainer.LOSS_PRESETS)))
    p.add_argument("--l1", choices=["mse", "mae"], default=None)
    p.add_argument("--l2", choices=["mse", "mae", "none"], default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--chunk-len", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--valid-songs", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file; flags override it")
    p.add_argument("--out", required=True, help="run directory")


def _expand_train_config(args) -> dict:
    cfg = {
        "preset": "htmd", "loss": "mse-mse",
        "l1": None, "l2": None, "alpha": None, "beta": None,
        "lr": 1e-4, "batch": None, "chunk_len": 16384, "patience": 20,
        "max_epochs": 100, "steps_per_epoch": 1000, "seed": 0,
        "valid_songs": None,
        "model_overrides": {},  # per-part architecture fields, e.g. {"masker": {...}}
    }
    if args.config:
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    for key, flag in (("lr", args.lr), ("batch", args.batch),
                      ("chunk_len", args.chunk_len), ("patience", args.patience),
                      ("max_epochs", args.max_epochs),
                      ("steps_per_epoch", args.steps_per_epoch),
                      ("seed", args.seed), ("valid_songs", args.valid_songs),
                      ("preset", args.preset), ("loss", args.loss),
                      ("l1", args.l1), ("l2", args.l2),
                      ("alpha", args.alpha), ("beta", args.beta)):
        if flag is not None:
            cfg[key] = flag
    if cfg["batch"] is None:
        # the purely masking-based baseline needs the smaller batch
        cfg["batch"] = 8 if cfg["preset"] == "convtasnet" else 16
    return cfg


def _loss_spec_from(cfg: dict) -> LossSpec:
    if cfg.get("l1"):
        l2 = cfg.get("l2")
        l2 = None if l2 in (None, "none") else l2
        beta = cfg.get("beta") or 0.0
        alpha = cfg.get("alpha") if cfg.get("alpha") is not None else 1.0
        return LossSpec(l1_kind=cfg["l1"], l2_kind=l2, alpha=alpha, beta=beta)
    return loss_preset(cfg["loss"])


def cmd_train(args) -> int:
    cfg = _expand_train_config(args)
    try:
        spec = _loss_spec_from(cfg)
        tc = TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch"],
                         chunk_len=cfg["chunk_len"], patience=cfg["patience"],
                         max_epochs=cfg["max_epochs"],
                         steps_per_epoch=cfg["steps_per_epoch"], seed=cfg["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from e
    os.makedirs(args.out, exist_ok=True)
    train_idx, valid_idx, _test_idx = index_dataset(args.data, cfg["valid_songs"])
    base = trainer.default_config(cfg["preset"])
    for part, fields in (cfg["model_overrides"] or {}).items():
        if part not in base:
            raise UsageError(f"model part {part!r} not present in preset "
                             f"{cfg['preset']!r}")
        base[part].update(fields)
    model = build_model(cfg["preset"], base, seed=cfg["seed"])
    expanded = dict(cfg)
    expanded["loss_spec"] = asdict(spec)
    expanded["model_config"] = model_config_dict(model)
    expanded["train_config"] = asdict(tc)
    _atomic_write_text(os.path.join(args.out, "config.json"),
                       json.dumps(expanded, indent=2, sort_keys=True))
    data = DiskDataset(train_idx, valid_idx, tc)
    result = trainer.train(model, data, tc, spec,
                           save_final_to=os.path.join(args.out, "last.ckpt"))
    save_checkpoint(model, None, os.path.join(args.out, "best.ckpt"),
                    history=result.history)
    write_history_csv(result.history, os.path.join(args.out, "history.csv"))
    print(f"trained {cfg['preset']}: best epoch {result.best_epoch} "
          f"valid {result.best_valid:.6g} "
          f"({'early stop' if result.stopped_early else 'max epochs'})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# separate

def _add_separate_args(p: _Parser):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="mixture wav")
    p.add_argument("--output", required=True, help="vocal estimate wav")
    p.add_argument("--emit-intermediate", default=None,
                   help="also write the pre-denoiser estimate here")
    p.add_argument("--resample", action="store_true",
                   help="permit halving a double-rate input")
    p.add_argument("--overlap", type=float, default=0.5,
                   help="chunk overlap fraction (0 = abutting)")


def cmd_separate(args) -> int:
    model, _, header = load_checkpoint(args.checkpoint)
    buf = to_mono(load_wav(args.input))
    if buf.sample_rate != MODEL_RATE:
        if args.resample and buf.sample_rate == 2 * MODEL_RATE:
            buf = resample_half(buf)
        else:
            hint = "; pass --resample to halve a 2x-rate input" \
                if buf.sample_rate == 2 * MODEL_RATE else ""
            raise DatasetError(
                f"input rate {buf.sample_rate} != model rate {MODEL_RATE}{hint}")
    chunk_len = 16384
    if not (0 <= args.overlap < 1):
        raise UsageError("--overlap must be in [0, 1)")
    hop = max(1, int(round(chunk_len * (1 - args.overlap))))
    plan = ChunkPlan(chunk_len, hop)
    frames = chunk(buf, plan)
    outs, mids = [], []
    for i in range(frames.shape[0]):
        final, mid = model.forward(Tensor(frames[i][None, None, :]), training=False)
        final.check_finite("separated chunk")
        outs.append(final.data[0, 0])
        mids.append(mid.data[0, 0] if mid is not None else None)
    est = overlap_add(np.stack(outs), plan, buf.frame_count, buf.sample_rate)
    write_wav(est, args.output, "float32")
    if args.emit_intermediate:
        if mids[0] is None:
            raise UsageError(f"model kind {model.kind!r} has no intermediate estimate")
        mid_buf = overlap_add(np.stack(mids), plan, buf.frame_count, buf.sample_rate)
        write_wav(mid_buf, args.emit_intermediate, "float32")
    print(f"wrote {args.output} ({est.frame_count} samples at {est.sample_rate} Hz)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _add_evaluate_args(p: _Parser):
    p.add_argument("--estimates", required=True,
                   help="directory of <song>.wav vocal estimates")
    p.add_argument("--references", required=True,
                   help="dataset-style directory of <song>/{mixture,vocals}.wav")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--filter-len", type=int, default=512)
    p.add_argument("--seg-len", type=float, default=1.0)
    p.add_argument("--pes-floor", type=float, default=-100.0)
    p.add_argument("--vad-threshold", type=float, default=-60.0)


def _pair_songs(estimates_dir: str, references_dir: str):
    if not os.path.isdir(estimates_dir):
        raise DatasetError(f"missing estimates directory {estimates_dir}")
    if not os.path.isdir(references_dir):
        raise DatasetError(f"missing references directory {references_dir}")
    est_files = {os.path.splitext(f)[0]: os.path.join(estimates_dir, f)
                 for f in sorted(os.listdir(estimates_dir)) if f.endswith(".wav")}
    ref_songs = {d: os.path.join(references_dir, d)
                 for d in sorted(os.listdir(references_dir))
                 if os.path.isdir(os.path.join(references_dir, d))}
    if not est_files:
        raise DatasetError(f"no .wav estimates under {estimates_dir}")
    if not ref_songs:
        raise DatasetError(f"no song directories under {references_dir}")
    paired = sorted(set(est_files) & set(ref_songs))
    skipped = sorted(set(est_files) ^ set(ref_songs))
    return [(s, est_files[s], ref_songs[s]) for s in paired], skipped


def cmd_evaluate(args) -> int:
    pairs, skipped = _pair_songs(args.estimates, args.references)
    if not pairs:
        raise DatasetError("no paired songs between estimates and references")
    os.makedirs(args.out, exist_ok=True)
    all_segments = []
    vad_rows = []
    for song, est_path, ref_dir in pairs:
        est = to_mono(load_wav(est_path))
        mix = to_mono(load_wav(os.path.join(ref_dir, "mixture.wav")))
        voc = to_mono(load_wav(os.path.join(ref_dir, "vocals.wav")))
        if not (est.frame_count == mix.frame_count == voc.frame_count):
            raise DatasetError(f"song {song!r}: length mismatch between estimate "
                               f"and references")
        if est.sample_rate != voc.sample_rate:
            raise DatasetError(f"song {song!r}: sample-rate mismatch")
        accomp = mix.mono().astype(np.float64) - voc.mono().astype(np.float64)
        segs = metrics.segment_metrics(
            voc.mono(), accomp, est.mono(), est.sample_rate,
            seg_len=args.seg_len, filter_len=args.filter_len, song_id=song,
            silent_floor_db=args.pes_floor, vad_threshold_db=args.vad_threshold)
        all_segments.extend(segs)
        ref_act = metrics.vad_labels(voc.mono(), voc.sample_rate,
                                     threshold_db=args.vad_threshold)
        est_act = metrics.vad_labels(est.mono(), est.sample_rate,
                                     threshold_db=args.vad_threshold)
        vad_rows.extend((song, i, _fmt(bool(r)), _fmt(bool(e)))
                        for i, (r, e) in enumerate(zip(ref_act, est_act)))

    report = metrics.aggregate(all_segments)
    seg_rows = []
    for s in all_segments:
        seg_pes = float(np.mean(s.pes_frames)) if s.pes_frames else None
        seg_rows.append([s.song_id, s.segment_index, _fmt(s.sdr), _fmt(s.sir),
                         _fmt(s.sar), _fmt(seg_pes), _fmt(s.vad_correct),
                         _fmt(s.is_silent), _fmt(s.ref_active_fraction)])
    _write_csv(os.path.join(args.out, "segments.csv"), SEGMENT_COLUMNS, seg_rows)
    _write_csv(os.path.join(args.out, "vad_frames.csv"), VAD_FRAME_COLUMNS, vad_rows)

    summary = {
        "song_wise_median": report.song_wise,
        "segment_median": report.segment_median,
        "segment_mean": report.segment_mean,
        "pes_mean": report.pes_mean,
        "vad_percent": report.vad_percent,
        "n_segments": report.n_segments,
        "n_silent": report.n_silent,
        "n_inf": report.n_inf,
        "skipped_songs": skipped,
        "config": {"filter_len": args.filter_len, "seg_len": args.seg_len,
                   "pes_floor": args.pes_floor, "vad_threshold": args.vad_threshold},
    }
    _atomic_write_text(os.path.join(args.out, "summary.json"),
                       json.dumps(summary, indent=2, sort_keys=True))

    sdr_vals, labels = [], []
    for s in all_segments:
        if s.sdr is not None and math.isfinite(s.sdr):
            sdr_vals.append(s.sdr)
            labels.append((s.ref_active_fraction or 0.0) < 0.5)
    if len(sdr_vals) >= 2:
        table, _meta = metrics.kde_export(sdr_vals, labels)
        _write_kde_csv(os.path.join(args.out, "kde_sdr.csv"), table)
    if skipped:
        print(f"skipped {len(skipped)} unpaired songs: {', '.join(skipped)}")
    print(f"evaluated {len(pairs)} songs, {report.n_segments} segments "
          f"-> {args.out}/summary.json")
    return EXIT_OK


def _write_kde_csv(path: str, table: dict) -> None:
    rows = []
    n = table["x"].size
    for i in range(n):
        rows.append([
            repr(float(table["x"][i])),
            repr(float(table["overall"][i])),
            repr(float(table["silent"][i])) if table["silent"] is not None else "",
            repr(float(table["nonsilent"][i])) if table["nonsilent"] is not None else "",
        ])
    _write_csv(path, ["x", "density_all", "density_silent", "density_nonsilent"], rows)


# ---------------------------------------------------------------------------
# significance

def _add_significance_args(p: _Parser):
    p.add_argument("--a", required=True, help="segments.csv of run A")
    p.add_argument("--b", required=True, help="segments.csv of run B")
    p.add_argument("--p-threshold", type=float, default=0.01)
    p.add_argument("--out", default=None, help="write the JSON report here")


def _read_segments_csv(path: str) -> dict[tuple[str, int], dict]:
    if not os.path.isfile(path):
        raise DatasetError(f"missing per-segment table {path}")
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["song_id"], int(row["segment_index"]))
            out[key] = {
                "sdr": _parse_float(row["sdr"]),
                "sir": _parse_float(row["sir"]),
                "sar": _parse_float(row["sar"]),
                "pes": _parse_float(row["pes"]),
                "vad_correct": _parse_float(row["vad_correct"]),
            }
    return out


def _read_vad_frames_csv(path: str) -> dict[tuple[str, int], bool]:
    out = {}
    if not os.path.isfile(path):
        return out
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["song_id"], int(row["frame_index"]))
            out[key] = row["ref_active"] == row["est_active"]
    return out


def cmd_significance(args) -> int:
    seg_a = _read_segments_csv(args.a)
    seg_b = _read_segments_csv(args.b)
    if set(seg_a) != set(seg_b):
        raise DatasetError("per-segment tables cover different (song, segment) sets")
    keys = sorted(seg_a)
    results = {}
    for metric in ("sdr", "sir", "sar", "pes", "vad_correct"):
        xs, ys = [], []
        for k in keys:
            va, vb = seg_a[k][metric], seg_b[k][metric]
            if va is None or vb is None:
                continue
            if not (math.isfinite(va) and math.isfinite(vb)):
                continue
            xs.append(va)
            ys.append(vb)
        if not xs:
            continue
        r = metrics.wilcoxon_signed_rank(np.array(xs), np.array(ys))
        results[metric] = {"test": r.test, "statistic": r.statistic,
                           "p_value": r.p_value, "n_effective": r.n_effective,
                           "method": r.method,
                           "significant": bool(r.p_value < args.p_threshold)}

    vad_a = _read_vad_frames_csv(os.path.join(os.path.dirname(args.a), "vad_frames.csv"))
    vad_b = _read_vad_frames_csv(os.path.join(os.path.dirname(args.b), "vad_frames.csv"))
    common = sorted(set(vad_a) & set(vad_b))
    if common:
        r = metrics.mcnemar([(vad_a[k], vad_b[k]) for k in common])
        results["vad_frames"] = {"test": r.test, "statistic": r.statistic,
                                 "p_value": r.p_value, "n_effective": r.n_effective,
                                 "method": r.method,
                                 "significant": bool(r.p_value < args.p_threshold)}
    payload = {"p_threshold": args.p_threshold, "results": results}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        _atomic_write_text(args.out, text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-kde

def _add_kde_args(p: _Parser):
    p.add_argument("--segments", required=True, help="segments.csv from evaluate")
    p.add_argument("--metric", choices=["sdr", "sir", "sar"], default="sdr")
    p.add_argument("--out", required=True)
    p.add_argument("--bandwidth", default="auto")
    p.add_argument("--grid", type=int, default=256)
    p.add_argument("--silent-activity", type=float, default=0.5,
                   help="reference VAD activity below this marks a segment near-silent")


def cmd_export_kde(args) -> int:
    if not os.path.isfile(args.segments):
        raise DatasetError(f"missing per-segment table {args.segments}")
    values, labels = [], []
    with open(args.segments, newline="") as fh:
        for row in csv.DictReader(fh):
            v = _parse_float(row[args.metric])
            if v is None or not math.isfinite(v):
                continue
            values.append(v)
            act = _parse_float(row.get("ref_active_fraction", "") or "")
            labels.append((act or 0.0) < args.silent_activity)
    if len(values) < 2:
        raise DatasetError(f"need at least two finite {args.metric} values")
    bw = args.bandwidth if args.bandwidth == "auto" else float(args.bandwidth)
    table, meta = metrics.kde_export(values, labels, bandwidth=bw, grid=args.grid)
    _write_kde_csv(args.out, table)
    print(f"wrote {args.out} (bandwidth {meta['bandwidth']:.4g}"
          f"{', degenerate' if meta['degenerate'] else ''})")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="voxsep", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    _add_train_args(sub.add_parser("train", help="train a model"))
    _add_separate_args(sub.add_parser("separate", help="run separation on a wav"))
    _add_evaluate_args(sub.add_parser("evaluate", help="score estimates against references"))
    _add_significance_args(sub.add_parser("significance",
                                          help="paired tests between two runs"))
    _add_kde_args(sub.add_parser("export-kde", help="density table for plotting"))
    return p


_COMMANDS = {
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "significance": cmd_significance,
    "export-kde": cmd_export_kde,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, WavFormatError, DatasetError, CheckpointError,
            ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFault, FloatingPointError) as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
