import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from sepadv import audio_io, cli, models
from sepadv.audio_io import AudioClip

RECIPE = dict(cli.DEFAULT_RECIPE, duration_s=0.25)


@pytest.fixture
def weights(tmp_path, small_model):
    path = tmp_path / "model.bin"
    models.save_weights(small_model, path)
    return path


def _config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(capsys, *argv):
    code = cli.main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def _craft_cfg(weights, **attack):
    attack = {"method": "gd", "lambda": 1e-3, "lr": 0.05, "iterations": 5, **attack}
    return {"model": {"weights": str(weights)}, "input": {"synth": RECIPE}, "attack": attack}


def test_craft_writes_outputs(tmp_path, weights, capsys):
    out = tmp_path / "out"
    code, stdout, _ = _run(capsys, "craft", "--config", _config(tmp_path, _craft_cfg(weights)),
                           "--output-dir", out)
    assert code == 0
    assert len(stdout.strip().splitlines()) == 1 and stdout.startswith("craft ok")
    for name in ("adversarial.wav", "eta.wav", "loss_trace.csv", "metrics.json", "run.json"):
        assert (out / name).is_file()
    report = json.loads((out / "metrics.json").read_text())
    assert {"DI", "DS", "DSA"} <= set(report)
    assert set(report["DS"]) == {"sdr"}
    x = audio_io.synth_source_set(audio_io.SynthRecipe.from_dict(RECIPE), 0).mixture
    adv = audio_io.read_wav(out / "adversarial.wav")
    eta = audio_io.read_wav(out / "eta.wav")
    np.testing.assert_allclose(adv.samples, x.samples + eta.samples, atol=1e-6)
    rows = list(csv.reader(open(out / "loss_trace.csv")))
    assert rows[0] == ["iteration", "loss", "objective", "constraint"] and len(rows) == 6


def test_craft_from_wav_with_target_di(tmp_path, weights, capsys):
    src = audio_io.synth_source_set(audio_io.SynthRecipe.from_dict(RECIPE), 3)
    audio_io.write_wav(src.mixture, tmp_path / "mix.wav", "float32")
    cfg = _craft_cfg(weights)
    cfg["input"] = {"wav": str(tmp_path / "mix.wav")}
    cfg["target_di"] = 30.0
    code, _, _ = _run(capsys, "craft", "--config", _config(tmp_path, cfg), "--output-dir", tmp_path / "o")
    assert code == 0
    report = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert report["DS"] is None and report["di_matched"]
    assert abs(report["DI"] - 30.0) <= 1.0


def test_missing_weights_is_io_error(tmp_path, capsys):
    cfg = _craft_cfg(tmp_path / "nope.bin")
    code, stdout, stderr = _run(capsys, "craft", "--config", _config(tmp_path, cfg),
                                "--output-dir", tmp_path / "o")
    assert code == 4 and stdout == ""
    assert "nope.bin" in stderr


def test_overrides_are_echoed(tmp_path, weights, capsys):
    out = tmp_path / "o"
    code, _, _ = _run(capsys, "craft", "--config", _config(tmp_path, _craft_cfg(weights)),
                      "--output-dir", out, "--overrides", "attack.epsilon=0.2", "attack.iterations=2")
    assert code == 0
    echoed = json.loads((out / "run.json").read_text())
    assert echoed["attack"]["epsilon"] == 0.2 and echoed["attack"]["iterations"] == 2


@pytest.mark.parametrize("override", ["attack.colour=1", "attack.method=cw", "nonsense"])
def test_bad_overrides_are_config_errors(tmp_path, weights, capsys, override):
    code, _, stderr = _run(capsys, "craft", "--config", _config(tmp_path, _craft_cfg(weights)),
                           "--output-dir", tmp_path / "o", "--overrides", override)
    assert code == 2 and "config error" in stderr


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    code, _, _ = _run(capsys, "synth", "--config", _config(tmp_path, {"bogus": 1}),
                      "--output-dir", tmp_path / "o")
    assert code == 2


def _write(path, samples, rate=8000):
    audio_io.write_wav(AudioClip(samples, rate), path, "float32")
    return str(path)


def test_evaluate_identity_gives_zero_ds(tmp_path, rng, capsys):
    tracks = []
    for i in range(2):
        ref = rng.standard_normal((1, 16000)).astype(np.float32)
        est = ref + 0.1 * rng.standard_normal((1, 16000)).astype(np.float32)
        tracks.append({"id": f"t{i}", "reference": _write(tmp_path / f"r{i}.wav", ref),
                       "estimate": _write(tmp_path / f"e{i}.wav", est),
                       "adversarial": str(tmp_path / f"e{i}.wav")})
    out = tmp_path / "o"
    code, stdout, _ = _run(capsys, "evaluate", "--config", _config(tmp_path, {"tracks": tracks}),
                           "--output-dir", out)
    assert code == 0 and "DS_sdr=0.000" in stdout
    rows = list(csv.DictReader(open(out / "report_sdr.csv")))
    assert rows and all(float(r["value_db"]) == 0.0 for r in rows)


def test_evaluate_single_track_global_is_track_median(tmp_path, rng, capsys):
    ref = rng.standard_normal((1, 24000)).astype(np.float32)
    est = ref + rng.uniform(0.05, 0.5, 24000).astype(np.float32) * rng.standard_normal((1, 24000)).astype(np.float32)
    cfg = {"tracks": [{"reference": _write(tmp_path / "r.wav", ref),
                       "estimate": _write(tmp_path / "e.wav", est)}]}
    out = tmp_path / "o"
    assert _run(capsys, "evaluate", "--config", _config(tmp_path, cfg), "--output-dir", out)[0] == 0
    summary = json.loads((out / "report_sdr.json").read_text())
    assert summary["global_median"] == summary["tracks"][0]["track_median"]
    r64, e64 = ref.astype(float), est.astype(float)
    frames = sorted(10 * np.log10(np.sum(r64[:, s:s + 8000] ** 2) / np.sum((r64 - e64)[:, s:s + 8000] ** 2))
                    for s in (0, 8000, 16000))
    assert summary["global_median"] == pytest.approx(frames[1], rel=1e-10)


def test_evaluate_missing_reference_and_shape_mismatch(tmp_path, rng, capsys):
    est = _write(tmp_path / "e.wav", rng.standard_normal((1, 800)))
    cfg = {"tracks": [{"reference": str(tmp_path / "missing.wav"), "estimate": est}]}
    code, _, stderr = _run(capsys, "evaluate", "--config", _config(tmp_path, cfg), "--output-dir", tmp_path / "o")
    assert code == 2 and "missing.wav" in stderr
    ref = _write(tmp_path / "r.wav", rng.standard_normal((1, 900)))
    cfg = {"tracks": [{"reference": ref, "estimate": est}]}
    code, _, stderr = _run(capsys, "evaluate", "--config", _config(tmp_path, cfg), "--output-dir", tmp_path / "o")
    assert code == 2 and "does not match" in stderr


def test_transfer_rows_cover_all_conditions(tmp_path, capsys):
    train = {"recipe": RECIPE, "count": 1, "epochs": 2}
    cfg = {
        "clips": {"recipe": RECIPE, "count": 2},
        "models": {
            "src": {"architecture": "mask_freq", "seed": 1, "train": train},
            "twin": {"architecture": "mask_freq", "seed": 2, "train": train},
            "conv": {"architecture": "conv_time", "seed": 3, "train": train},
        },
        "source": "src",
        "targets": [{"label": "src", "condition": "white"}, {"label": "twin", "condition": "gray"},
                    {"label": "conv", "condition": "black"}],
        "attack_grid": [{"method": "gd", "lambda": 1e-3, "lr": 0.05, "iterations": 3}],
    }
    out = tmp_path / "o"
    code, stdout, _ = _run(capsys, "transfer", "--config", _config(tmp_path, cfg), "--output-dir", out)
    assert code == 0 and "white=" in stdout and "black=" in stdout
    rows = list(csv.DictReader(open(out / "transfer_report.csv")))
    assert sorted({r["condition"] for r in rows}) == ["black", "gray", "white"]
    assert len(rows) == 6
    assert json.loads((out / "summary.json").read_text())["groups"]


def test_transfer_rejects_bad_taxonomy(tmp_path, capsys):
    cfg = {
        "clips": {"recipe": RECIPE, "count": 1},
        "models": {"src": {"architecture": "mask_freq", "seed": 1},
                   "other": {"architecture": "mask_freq", "seed": 2}},
        "source": "src",
        "targets": [{"label": "other", "condition": "black"}],
        "attack_grid": [{"method": "gd", "iterations": 1}],
    }
    code, _, _ = _run(capsys, "transfer", "--config", _config(tmp_path, cfg), "--output-dir", tmp_path / "o")
    assert code == 2


def test_train_toy_zero_epochs_matches_init(tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = _run(capsys, "train-toy", "--output-dir", out, "--seed", 5,
                      "--overrides", "epochs=0", "architecture=conv_time", "recipe.duration_s=0.25")
    assert code == 0
    trained = models.load_weights(out / "weights.bin")
    init = models.init_model("conv_time", 2, 5, source_names=trained.source_names, sample_rate=8000)
    assert all(trained.weights[k].tobytes() == init.weights[k].tobytes() for k in init.weights)
    assert (out / "loss_trace.csv").read_text().strip() == "epoch,mse"


def test_train_toy_reports_divergence(tmp_path, capsys):
    code, _, stderr = _run(capsys, "train-toy", "--output-dir", tmp_path / "o",
                           "--overrides", "epochs=20", "lr=1e9", "architecture=conv_time",
                           "recipe.duration_s=0.25", "clips=1")
    assert code == 3 and "numeric" in stderr


def test_synth_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert _run(capsys, "synth", "--seed", 11, "--output-dir", tmp_path / d,
                    "--overrides", "recipe.duration_s=0.25")[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["mixture.wav", "other.wav", "run.json", "vocals.wav"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    _run(capsys, "synth", "--seed", 12, "--output-dir", tmp_path / "c", "--overrides", "recipe.duration_s=0.25")
    assert (tmp_path / "c" / "mixture.wav").read_bytes() != (tmp_path / "a" / "mixture.wav").read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "sepadv.cli", "synth", "--output-dir", str(tmp_path),
         "--overrides", "recipe.duration_s=0.1"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert proc.stdout.count("\n") == 1 and proc.stdout.startswith("synth ok")
    proc = subprocess.run([sys.executable, "-m", "sepadv.cli", "craft", "--output-dir", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 2 and proc.stdout == ""
