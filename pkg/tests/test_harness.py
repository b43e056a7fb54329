import csv
import json
import math

import numpy as np
import pytest

from conftest import SOURCE_NAMES, clip_sets
from sepadv import attacks, harness, models
from sepadv.attacks import AttackConfig
from sepadv.audio_io import AudioClip
from sepadv.errors import PlanValidationError

GD = AttackConfig(method="gd", lam=1e-3, lr=0.05, iterations=5)


@pytest.fixture(scope="module")
def clips():
    return [harness.Clip(f"c{i}", s) for i, s in enumerate(clip_sets([310, 311], duration_s=0.25))]


@pytest.fixture(scope="module")
def others():
    gray = models.init_model("mask_freq", 2, 11, source_names=SOURCE_NAMES, sample_rate=8000)
    black = models.init_model("conv_time", 2, 12, source_names=SOURCE_NAMES, sample_rate=8000)
    return gray, black


def _plan(small_model, clips, targets, grid=(GD,), **kw):
    return harness.ExperimentPlan(clips=list(clips), source_label="src", source_model=small_model,
                                  targets=targets, attack_grid=list(grid), **kw)


def test_validate_plan_taxonomy(small_model, clips, others):
    gray, black = others
    ok = [harness.Target("src", small_model, "white"), harness.Target("g", gray, "gray"),
          harness.Target("b", black, "black")]
    harness.validate_plan(_plan(small_model, clips, ok), require_transfer=True)
    bad = [
        [harness.Target("w", gray, "white")],
        [harness.Target("g", small_model, "gray")],
        [harness.Target("g", black, "gray")],
        [harness.Target("b", gray, "black")],
        [harness.Target("x", gray, "grey")],
        [],
    ]
    for targets in bad:
        with pytest.raises(PlanValidationError):
            harness.validate_plan(_plan(small_model, clips, targets))
    with pytest.raises(PlanValidationError):
        harness.validate_plan(_plan(small_model, clips, ok[:1]), require_transfer=True)


def test_empty_grid_warns(small_model, clips):
    report = harness.run_whitebox(_plan(small_model, clips, [], grid=()))
    assert report.rows == [] and report.warnings


def test_bisect_knob_on_monotone_function():
    calls = []

    def measure(s):
        calls.append(s)
        return s, -20 * math.log10(s)

    payload, knob, value, matched = harness.bisect_knob(measure, 1.0, 30.0, 0.01, increasing=False)
    assert matched and abs(value - 30.0) <= 0.01
    assert knob == pytest.approx(10 ** -1.5, rel=2e-3) and payload == knob
    _, _, value, matched = harness.bisect_knob(
        lambda s: (None, 5.0), 1.0, 30.0, 0.1, increasing=True)
    assert not matched and value == 5.0
    # the increasing direction is handled too
    _, knob, _, matched = harness.bisect_knob(
        lambda s: (None, math.log2(s)), 1.0, 7.0, 0.05, increasing=True)
    assert matched and knob == pytest.approx(128, rel=0.05)


def test_match_di_hits_target(small_model, clips):
    x = clips[0].sources.mixture
    res, lr, di, matched = harness.match_di(small_model, x, GD, 30.0, tolerance=1.0)
    assert matched and abs(di - 30.0) <= 1.0
    assert res.config.lr == lr
    assert di == pytest.approx(harness.clip_di(x, res.eta))
    res, eps, di, matched = harness.match_di(
        small_model, x, AttackConfig(method="pgd", epsilon=0.01, iterations=3), 30.0)
    assert matched and res.config.epsilon == eps


def test_transfer_white_row_equals_whitebox(small_model, clips, others):
    gray, black = others
    targets = [harness.Target("src", small_model, "white"), harness.Target("g", gray, "gray"),
               harness.Target("b", black, "black")]
    plan = _plan(small_model, clips, targets)
    transfer = harness.run_transfer(plan)
    white = harness.run_whitebox(plan)
    assert len(transfer.rows) == 2 * 3
    for w in white.rows:
        (t,) = transfer.select(condition="white", clip_id=w.clip_id, config_id=w.config_id)
        assert t.as_dict() == w.as_dict()
    # the same eta is evaluated on every target
    for clip in clips:
        sums = {r.eta_checksum for r in transfer.select(clip_id=clip.clip_id)}
        assert len(sums) == 1


def test_zero_perturbation_gives_zero_degradation(small_model, clips, others):
    _, black = others
    cfg = AttackConfig(method="fgsm", epsilon=1e-12, init_scale=0.0)
    targets = [harness.Target("src", small_model, "white"), harness.Target("b", black, "black")]
    sources = clips[0].sources
    ds, di, dsa, flags = harness.evaluate(small_model, sources, AudioClip(np.zeros((1, 2000)), 8000), 0, 0)
    assert ds["sdr"] == 0.0 and dsa == 0.0 and di == math.inf
    report = harness.run_transfer(_plan(small_model, clips, targets, grid=(cfg,)))
    assert all(abs(r.ds["sdr"]) < 1e-6 for r in report.rows)


def test_lambda_sweep_is_monotone(small_model, clips):
    x = clips[0].sources.mixture
    dis = []
    for lam in (1e-4, 1e-2, 1.0, 100.0):
        res = attacks.craft(small_model, x, AttackConfig(method="gd", lam=lam, lr=0.05, iterations=10))
        dis.append(harness.clip_di(x, res.eta))
    inversions = sum(b < a for a, b in zip(dis, dis[1:]))
    assert inversions <= 1


def test_untargeted_effects_needs_two_sources(clips):
    mono = models.init_model("conv_time", 1, 0, source_names=("vocals",), sample_rate=8000)
    with pytest.raises(PlanValidationError):
        harness.untargeted_effects(mono, [c.sources for c in clips], GD)


def test_untargeted_effects_reports_every_source(small_model, clips):
    out = harness.untargeted_effects(small_model, [c.sources for c in clips], GD)
    assert set(out) == set(SOURCE_NAMES)
    assert all(np.isfinite(v) for v in out.values())


def test_parallel_jobs_match_serial(small_model, clips):
    grid = (GD, AttackConfig(method="pgd", epsilon=0.003, iterations=3))
    serial = harness.run_whitebox(_plan(small_model, clips, [], grid=grid))
    parallel = harness.run_whitebox(_plan(small_model, clips, [], grid=grid, jobs=3))
    assert [r.as_dict() for r in serial.rows] == [r.as_dict() for r in parallel.rows]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_attack_becomes_flagged_row(small_model, clips):
    boom = AttackConfig(method="gd", lam=0.0, lr=1e300, iterations=3)
    report = harness.run_whitebox(_plan(small_model, clips[:1], [], grid=(boom,)))
    assert report.failed == 1 and "failed" in report.rows[0].flags
    assert math.isnan(report.median_ds())


def test_write_transfer_report(small_model, clips, tmp_path):
    report = harness.run_whitebox(_plan(small_model, clips, [], metrics=("sdr", "sir")))
    csv_path, json_path = harness.write_transfer_report(report, tmp_path, ("sdr", "sir"))
    rows = list(csv.DictReader(open(csv_path)))
    assert len(rows) == 2 and rows[0]["condition"] == "white"
    assert {"ds_sdr", "ds_sir", "di", "dsa", "eta_checksum"} <= set(rows[0])
    summary = json.load(open(json_path))
    (group,) = summary["groups"]
    assert group["num_clips"] == 2 and "median_ds_sir" in group


def test_panels_are_exported(small_model, clips, tmp_path):
    harness.run_whitebox(_plan(small_model, clips[:1], [], output_dir=str(tmp_path)))
    names = sorted(p.name for p in (tmp_path / "spectrograms").iterdir())
    assert names == sorted(f"c0_cfg0_{p}_ch0.csv" for p in
                           ("input", "clean_separation", "eta", "adversarial_separation"))


def test_build_toy_trio_validates(clips):
    with pytest.raises(PlanValidationError):
        harness.build_toy_trio({"source": [c.sources for c in clips]}, epochs=0)
    trio = harness.build_toy_trio([c.sources for c in clips], epochs=0)
    assert [trio[k].architecture for k in ("source", "gray", "black")] == \
        ["mask_freq", "mask_freq", "conv_time"]
