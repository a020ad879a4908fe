import csv
import json
import os

import numpy as np
import pytest

from voxsep.audio_io import AudioBuffer, load_wav, write_wav
from voxsep.cli import main

RATE = 22050
SONG_LEN = 49152  # three 16384 chunks, two whole 1-s segments

TINY_OVERRIDES = {
    "masker": {"n_filters": 16, "bottleneck": 8, "conv_channels": 16,
               "skip_channels": 8, "blocks_per_repeat": 3, "repeats": 1},
    "denoiser": {"depth": 4, "growth": 4, "hidden": 8},
}


def _song_signals(seed):
    rng = np.random.default_rng(seed)
    t = np.arange(SONG_LEN)
    vocals = np.zeros(SONG_LEN, np.float32)
    burst = 0.4 * np.sin(2 * np.pi * 220 * t / RATE)
    vocals[:18000] = burst[:18000]          # active opening
    vocals[30000:] = burst[30000:] * 0.7    # active tail
    # 18000..30000 stays silent: full 4096-frames with silent reference
    accomp = (0.25 * np.sin(2 * np.pi * 90 * t / RATE)
              + 0.05 * rng.standard_normal(SONG_LEN)).astype(np.float32)
    return vocals, accomp


def _write_dataset(root):
    for split, seeds in (("train", (0, 1, 2)), ("test", (3, 4))):
        for k, seed in enumerate(seeds):
            d = root / split / f"song{k}"
            d.mkdir(parents=True)
            vocals, accomp = _song_signals(seed)
            write_wav(AudioBuffer(vocals + accomp, RATE), str(d / "mixture.wav"),
                      "float32")
            write_wav(AudioBuffer(vocals, RATE), str(d / "vocals.wav"), "float32")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    _write_dataset(data)
    cfg = {"model_overrides": TINY_OVERRIDES, "steps_per_epoch": 2,
           "max_epochs": 2, "batch": 2, "chunk_len": 2048, "patience": 5,
           "lr": 1e-3, "seed": 3, "valid_songs": 1}
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(cfg))
    run = root / "run"
    code = main(["train", "--data", str(data), "--config", str(cfg_path),
                 "--out", str(run)])
    assert code == 0
    return {"root": root, "data": data, "run": run, "cfg_path": cfg_path}


# ---------------------------------------------------------------------------
# train

def test_train_outputs(workspace):
    run = workspace["run"]
    for name in ("best.ckpt", "last.ckpt", "config.json", "history.csv"):
        assert (run / name).exists(), name
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["preset"] == "htmd"
    assert cfg["loss_spec"]["beta"] == 0.5  # expanded mse-mse preset
    assert cfg["model_config"]["masker"]["n_filters"] == 16
    with open(run / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "valid_loss"]
    assert len(rows) == 3


def test_train_convtasnet_auto_batch(workspace, tmp_path):
    cfg = {"model_overrides": {"masker": TINY_OVERRIDES["masker"]},
           "steps_per_epoch": 1, "max_epochs": 1, "chunk_len": 2048,
           "valid_songs": 1}
    cfg_path = tmp_path / "ct.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "ct_run"
    code = main(["train", "--data", str(workspace["data"]), "--preset", "convtasnet",
                 "--loss", "mse", "--config", str(cfg_path), "--out", str(out)])
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["batch"] == 8
    assert cfg["loss_spec"]["beta"] == 0.0


def test_train_missing_dataset_exits_nonzero(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "o")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_train_usage_error_on_missing_flags():
    assert main(["train"]) == 1


def test_train_bad_loss_preset_is_usage_error(workspace, tmp_path):
    code = main(["train", "--data", str(workspace["data"]), "--loss", "huber",
                 "--out", str(tmp_path / "x")])
    assert code == 1


def test_train_reruns_reproduce_history(workspace, tmp_path):
    out2 = tmp_path / "rerun"
    code = main(["train", "--data", str(workspace["data"]),
                 "--config", str(workspace["cfg_path"]), "--out", str(out2)])
    assert code == 0
    a = (workspace["run"] / "history.csv").read_text()
    b = (out2 / "history.csv").read_text()
    assert a == b


# ---------------------------------------------------------------------------
# separate

def test_separate_round_trip(workspace, tmp_path):
    mix_path = workspace["data"] / "test" / "song0" / "mixture.wav"
    out = tmp_path / "est.wav"
    mid = tmp_path / "mid.wav"
    code = main(["separate", "--checkpoint", str(workspace["run"] / "best.ckpt"),
                 "--input", str(mix_path), "--output", str(out),
                 "--emit-intermediate", str(mid)])
    assert code == 0
    est = load_wav(str(out))
    assert est.frame_count == SONG_LEN
    assert est.sample_rate == RATE
    assert np.all(np.isfinite(est.samples))
    inter = load_wav(str(mid))
    assert inter.frame_count == SONG_LEN


def test_separate_zero_input_finite(workspace, tmp_path):
    zero = tmp_path / "zero.wav"
    write_wav(AudioBuffer(np.zeros(20000, np.float32), RATE), str(zero), "float32")
    out = tmp_path / "zout.wav"
    code = main(["separate", "--checkpoint", str(workspace["run"] / "best.ckpt"),
                 "--input", str(zero), "--output", str(out)])
    assert code == 0
    est = load_wav(str(out))
    assert est.frame_count == 20000
    assert np.all(np.isfinite(est.samples))


def test_separate_rate_mismatch_requires_flag(workspace, tmp_path, capsys):
    hi = tmp_path / "hi.wav"
    write_wav(AudioBuffer(np.zeros(70000, np.float32), 44100), str(hi), "float32")
    out = tmp_path / "hout.wav"
    args = ["separate", "--checkpoint", str(workspace["run"] / "best.ckpt"),
            "--input", str(hi), "--output", str(out)]
    assert main(args) == 2
    assert "resample" in capsys.readouterr().err
    assert main(args + ["--resample"]) == 0
    assert load_wav(str(out)).frame_count == 35000


def test_separate_corrupt_checkpoint(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code = main(["separate", "--checkpoint", str(bad),
                 "--input", str(workspace["data"] / "test" / "song0" / "mixture.wav"),
                 "--output", str(tmp_path / "o.wav")])
    assert code == 2


# ---------------------------------------------------------------------------
# evaluate

@pytest.fixture(scope="module")
def perfect_eval(workspace, tmp_path_factory):
    est_dir = tmp_path_factory.mktemp("est_perfect")
    refs = workspace["data"] / "test"
    for song in os.listdir(refs):
        voc = load_wav(str(refs / song / "vocals.wav"))
        write_wav(voc, str(est_dir / f"{song}.wav"), "float32")
    out = tmp_path_factory.mktemp("eval_perfect")
    code = main(["evaluate", "--estimates", str(est_dir), "--references", str(refs),
                 "--out", str(out), "--filter-len", "4"])
    assert code == 0
    return out


def test_evaluate_perfect_estimates(perfect_eval):
    summary = json.loads((perfect_eval / "summary.json").read_text())
    defined = summary["n_segments"] - summary["n_silent"]
    assert summary["n_inf"]["sdr"] == defined
    assert summary["pes_mean"] == -100.0
    assert summary["vad_percent"] == 100.0
    assert (perfect_eval / "segments.csv").exists()
    assert (perfect_eval / "vad_frames.csv").exists()
    assert (perfect_eval / "kde_sdr.csv").exists() or summary["n_inf"]["sdr"] == defined


def test_evaluate_accompaniment_estimate_negative_sir(workspace, tmp_path):
    refs = workspace["data"] / "test"
    est_dir = tmp_path / "est_accomp"
    est_dir.mkdir()
    for song in os.listdir(refs):
        mix = load_wav(str(refs / song / "mixture.wav"))
        voc = load_wav(str(refs / song / "vocals.wav"))
        accomp = mix.samples - voc.samples
        write_wav(AudioBuffer(accomp, RATE), str(est_dir / f"{song}.wav"), "float32")
    out = tmp_path / "eval_accomp"
    code = main(["evaluate", "--estimates", str(est_dir), "--references", str(refs),
                 "--out", str(out), "--filter-len", "4"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["segment_median"]["sir"] < -10.0


def test_evaluate_unpaired_songs_reported(workspace, tmp_path, capsys):
    refs = workspace["data"] / "test"
    est_dir = tmp_path / "est_partial"
    est_dir.mkdir()
    voc = load_wav(str(refs / "song0" / "vocals.wav"))
    write_wav(voc, str(est_dir / "song0.wav"), "float32")
    out = tmp_path / "eval_partial"
    code = main(["evaluate", "--estimates", str(est_dir), "--references", str(refs),
                 "--out", str(out), "--filter-len", "4"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["skipped_songs"] == ["song1"]


def test_evaluate_empty_estimates_dir(workspace, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["evaluate", "--estimates", str(empty),
                 "--references", str(workspace["data"] / "test"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


# ---------------------------------------------------------------------------
# significance

def test_significance_identical_runs(perfect_eval, tmp_path):
    out = tmp_path / "sig.json"
    code = main(["significance", "--a", str(perfect_eval / "segments.csv"),
                 "--b", str(perfect_eval / "segments.csv"), "--out", str(out)])
    assert code == 0
    payload = json.loads(out.read_text())
    for name, res in payload["results"].items():
        assert res["p_value"] == 1.0, name
        assert not res["significant"]
    assert payload["p_threshold"] == 0.01
    assert "vad_frames" in payload["results"]


def _write_segments_csv(path, sdr_values):
    cols = "song_id,segment_index,sdr,sir,sar,pes,vad_correct,is_silent,ref_active_fraction"
    rows = [cols]
    for i, v in enumerate(sdr_values):
        rows.append(f"s,{i},{float(v)!r},1.0,1.0,-80.0,90.0,0,1.0")
    path.write_text("\n".join(rows) + "\n")


def test_significance_matches_enumeration_oracle(tmp_path):
    a_vals = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    b_vals = [v - 1.0 for v in a_vals]  # all differences positive
    a_csv, b_csv = tmp_path / "a.csv", tmp_path / "b.csv"
    _write_segments_csv(a_csv, a_vals)
    _write_segments_csv(b_csv, b_vals)
    out = tmp_path / "sig.json"
    assert main(["significance", "--a", str(a_csv), "--b", str(b_csv),
                 "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["results"]["sdr"]["p_value"] == pytest.approx(2 / 64)
    assert payload["results"]["sdr"]["method"] == "exact"


def test_significance_misaligned_tables(tmp_path):
    a_csv, b_csv = tmp_path / "a.csv", tmp_path / "b.csv"
    _write_segments_csv(a_csv, [1.0, 2.0])
    _write_segments_csv(b_csv, [1.0, 2.0, 3.0])
    assert main(["significance", "--a", str(a_csv), "--b", str(b_csv)]) == 2


# ---------------------------------------------------------------------------
# export-kde

def test_export_kde_from_segments(perfect_eval, tmp_path):
    # inf SDRs from the perfect run are excluded; craft a finite table instead
    seg = tmp_path / "segs.csv"
    rng = np.random.default_rng(0)
    _write_segments_csv(seg, list(5 + rng.standard_normal(30)))
    out = tmp_path / "kde.csv"
    assert main(["export-kde", "--segments", str(seg), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "density_all", "density_silent", "density_nonsilent"]
    assert len(rows) == 257
    xs = [float(r[0]) for r in rows[1:]]
    dens = [float(r[1]) for r in rows[1:]]
    area = np.trapezoid(dens, xs)
    assert area == pytest.approx(1.0, abs=1e-3)


def test_export_kde_needs_values(tmp_path):
    seg = tmp_path / "segs.csv"
    _write_segments_csv(seg, [1.0])
    assert main(["export-kde", "--segments", str(seg),
                 "--out", str(tmp_path / "k.csv")]) == 2
