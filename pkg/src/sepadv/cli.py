"""Command-line front end: ``sepadv <subcommand> --config run.json ...``.

Every subcommand reads a JSON config, merges it over the subcommand's
defaults, applies ``--seed``/``--jobs`` and dotted ``--overrides``, validates
the result, then writes its artifacts plus ``run.json`` (the resolved config)
into the output directory. Feeding ``run.json`` back through ``--config``
reproduces the run bit for bit.

Exit codes
----------
0 success, 1 unexpected internal error, 2 configuration error,
3 numeric failure, 4 I/O error.

Stdout carries a single summary line; logs go to stderr.
"""

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import attacks, audio_io, harness, metrics, models
from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    ParameterError,
    SepAdvError,
    UndefinedMetricError,
)

log = logging.getLogger("sepadv")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

REFERENCE_ENV = "SEPADV_REFERENCE_MODE"

DEFAULT_RECIPE = {
    "sources": [
        {"name": "vocals", "kind": "vocals", "params": {}},
        {"name": "other", "kind": "other", "params": {}},
    ],
    "duration_s": 1.0,
    "sample_rate": 8000,
    "leading_silence_s": 0.0,
    "channels": 1,
}

DEFAULTS = {
    "craft": {
        "seed": 0,
        "model": {"weights": None},
        "input": {"wav": None, "synth": None, "synth_seed": None, "references": None},
        "attack": {**attacks.AttackConfig().to_dict(), "seed": None},
        "target_di": None,
        "di_tolerance": 1.0,
        "metrics": ["sdr"],
        "frame_length_s": 1.0,
        "hop_s": 1.0,
        "encoding": "float32",
    },
    "evaluate": {
        "seed": 0,
        "tracks": [],
        "metrics": ["sdr"],
        "frame_length_s": 1.0,
        "hop_s": 1.0,
        "order": "aggregate_then_difference",
    },
    "transfer": {
        "seed": 0,
        "jobs": 1,
        "clips": {"recipe": DEFAULT_RECIPE, "count": 4, "seed": None, "manifest": None},
        "models": {},
        "source": None,
        "targets": [],
        "attack_grid": [],
        "metrics": ["sdr"],
        "target_di": None,
        "di_tolerance": 1.0,
        "frame_length_s": 1.0,
        "hop_s": 1.0,
        "order": "aggregate_then_difference",
        "export_panels": False,
    },
    "train-toy": {
        "seed": 0,
        "architecture": "mask_freq",
        "recipe": DEFAULT_RECIPE,
        "clips": 4,
        "epochs": 100,
        "lr": None,
        "init_seed": None,
    },
    "synth": {
        "seed": 0,
        "recipe": DEFAULT_RECIPE,
        "encoding": "float32",
    },
}

# keys whose values are free-form dicts (not validated against defaults)
_OPEN_KEYS = {"models", "synth", "references", "params", "constraint", "stft"}


def reference_mode():
    return os.environ.get(REFERENCE_ENV, "") not in ("", "0")


# --------------------------------------------------------------------------
# Config resolution
# --------------------------------------------------------------------------


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in _OPEN_KEYS:
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config, item):
    """Set ``a.b.c=value`` in ``config``; list elements use integer segments.

    New keys may only be created inside free-form sections (such as
    ``models``); elsewhere the key must already exist.
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node, open_ctx = config, False
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                part = int(part)
                node[part]
            except (ValueError, IndexError):
                raise ConfigError(f"override {key!r}: bad list index {part!r}") from None
            open_ctx = True
        elif isinstance(node, dict):
            if part not in node and not open_ctx:
                raise ConfigError(f"override {key!r}: unknown key {part!r}")
            open_ctx = open_ctx or part in _OPEN_KEYS
            if not last and node.get(part) is None:
                node[part] = {}
        else:
            raise ConfigError(f"override {key!r}: {parts[i - 1]!r} is not a container")
        if last:
            node[part] = _parse_value(raw)
        else:
            node = node[part]
    return config


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def resolve_config(subcommand, raw, overrides=(), seed=None, jobs=None):
    """Defaults <- config file <- --seed/--jobs <- --overrides."""
    raw = dict(raw or {})
    declared = raw.pop("subcommand", subcommand)
    if declared != subcommand:
        raise ConfigError(f"config is for {declared!r}, not {subcommand!r}")
    cfg = _merge(DEFAULTS[subcommand], raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if jobs is not None:
        if "jobs" not in cfg:
            log.warning("--jobs has no effect on %s", subcommand)
        else:
            cfg["jobs"] = int(jobs)
    for item in overrides or ():
        apply_override(cfg, item)
    cfg = {"subcommand": subcommand, **cfg}
    VALIDATORS[subcommand](cfg)
    return cfg


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _check_frames(cfg):
    _require(cfg["frame_length_s"] > 0 and cfg["hop_s"] > 0, "frame_length_s and hop_s must be positive")
    bad = [m for m in cfg["metrics"] if m not in metrics.GROUND_METRICS]
    _require(not bad, f"unknown metrics {bad}; expected a subset of {metrics.GROUND_METRICS}")


def _check_attack(d, where="attack"):
    try:
        return attacks.AttackConfig.from_dict(d)
    except (ParameterError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_recipe(d, where="recipe"):
    try:
        return audio_io.SynthRecipe.from_dict(d)
    except (ParameterError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _validate_craft(cfg):
    _require(cfg["model"].get("weights"), "model.weights is required")
    inp = cfg["input"]
    _require(bool(inp.get("wav")) != bool(inp.get("synth")), "give exactly one of input.wav or input.synth")
    if inp.get("synth"):
        _check_recipe(inp["synth"], "input.synth")
    _check_attack(cfg["attack"])
    _require(cfg["encoding"] in ("float32", "pcm16"), "encoding must be float32 or pcm16")
    _require(cfg["di_tolerance"] > 0, "di_tolerance must be positive")
    _check_frames(cfg)


def _validate_evaluate(cfg):
    _require(isinstance(cfg["tracks"], list) and cfg["tracks"], "tracks must be a non-empty list")
    for i, t in enumerate(cfg["tracks"]):
        _require(isinstance(t, dict), f"tracks.{i} must be an object")
        for key in ("reference", "estimate"):
            _require(t.get(key), f"tracks.{i}.{key} is required")
            _require(os.path.isfile(t[key]), f"tracks.{i}.{key}: file not found: {t[key]}")
        if t.get("adversarial"):
            _require(os.path.isfile(t["adversarial"]), f"tracks.{i}.adversarial: file not found: {t['adversarial']}")
        if "sir" in cfg["metrics"]:
            _require(t.get("sources") and t.get("target_index") is not None,
                     f"tracks.{i}: sir needs sources and target_index")
    with_adv = {bool(t.get("adversarial")) for t in cfg["tracks"]}
    _require(len(with_adv) == 1, "either every track or no track has an adversarial estimate")
    _require(cfg["order"] in ("aggregate_then_difference", "difference_then_aggregate"),
             f"unknown order {cfg['order']!r}")
    _check_frames(cfg)


def _validate_transfer(cfg):
    clips = cfg["clips"]
    _require(bool(clips.get("manifest")) != bool(clips.get("recipe")),
             "give exactly one of clips.recipe or clips.manifest")
    if clips.get("recipe"):
        _check_recipe(clips["recipe"], "clips.recipe")
        _require(int(clips["count"]) >= 1, "clips.count must be >= 1")
    _require(cfg["models"], "models must name at least one model")
    for label, spec in cfg["models"].items():
        _require(isinstance(spec, dict), f"models.{label} must be an object")
        if spec.get("weights"):
            continue
        _require(spec.get("architecture") in models.ARCHITECTURES,
                 f"models.{label}: need weights or a known architecture")
    _require(cfg["source"] in cfg["models"], f"source {cfg['source']!r} is not in models")
    _require(cfg["targets"], "targets must not be empty")
    for i, t in enumerate(cfg["targets"]):
        _require(t.get("label") in cfg["models"], f"targets.{i}.label is not in models")
        _require(t.get("condition") in harness.CONDITIONS, f"targets.{i}.condition must be one of {harness.CONDITIONS}")
    for i, a in enumerate(cfg["attack_grid"]):
        _check_attack(a, f"attack_grid.{i}")
    _require(int(cfg["jobs"]) >= 1, "jobs must be >= 1")
    _check_frames(cfg)


def _validate_train(cfg):
    _require(cfg["architecture"] in models.ARCHITECTURES,
             f"architecture must be one of {models.ARCHITECTURES}")
    _check_recipe(cfg["recipe"])
    _require(int(cfg["clips"]) >= 1, "clips must be >= 1")
    _require(int(cfg["epochs"]) >= 0, "epochs must be >= 0")
    _require(cfg["lr"] is None or cfg["lr"] > 0, "lr must be positive")


def _validate_synth(cfg):
    _check_recipe(cfg["recipe"])
    _require(cfg["encoding"] in ("float32", "pcm16"), "encoding must be float32 or pcm16")


VALIDATORS = {
    "craft": _validate_craft,
    "evaluate": _validate_evaluate,
    "transfer": _validate_transfer,
    "train-toy": _validate_train,
    "synth": _validate_synth,
}


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _json_bytes(obj):
    def fix(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        if isinstance(v, np.generic):
            return fix(v.item())
        return v

    return (json.dumps(fix(obj), indent=2, sort_keys=True) + "\n").encode("utf-8")


def _write_json(path, obj):
    audio_io.atomic_write_bytes(path, _json_bytes(obj))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    audio_io.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _frames(cfg, rate):
    fl = max(1, int(round(cfg["frame_length_s"] * rate)))
    return fl, max(1, int(round(cfg["hop_s"] * rate)))


def _synth(recipe_dict, seed):
    return audio_io.synth_source_set(audio_io.SynthRecipe.from_dict(recipe_dict), seed)


def _training_set(recipe_dict, count, seed, tag):
    # every model gets its own named clip stream so training sets never overlap
    return [_synth(recipe_dict, _sub_seed(seed, f"train:{tag}:{i}")) for i in range(count)]


def _sub_seed(seed, name):
    from . import rng

    return rng.derive_seed(seed, name) % (2 ** 63)


def _build_model(label, spec, seed):
    if spec.get("weights"):
        return models.load_weights(spec["weights"])
    recipe = spec.get("train", {}).get("recipe", DEFAULT_RECIPE)
    rec = audio_io.SynthRecipe.from_dict(recipe)
    names = tuple(s.name for s in rec.sources)
    arch = spec["architecture"]
    init_seed = spec.get("seed", _sub_seed(seed, f"init:{label}"))
    model = models.init_model(arch, len(names), init_seed, source_names=names,
                              sample_rate=rec.sample_rate)
    train = spec.get("train")
    if not train:
        return model
    data = _training_set(recipe, int(train.get("count", 4)), seed, label)
    lr = train.get("lr") or models.DEFAULT_LR[arch]
    model, _ = models.fit_toy(model, data, int(train.get("epochs", 100)), lr,
                              _sub_seed(seed, f"fit:{label}"))
    return model


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_craft(cfg, out_dir):
    model = models.load_weights(cfg["model"]["weights"])
    inp = cfg["input"]
    sources = None
    if inp.get("synth"):
        synth_seed = inp["synth_seed"] if inp.get("synth_seed") is not None else cfg["seed"]
        sources = _synth(inp["synth"], synth_seed)
        x = sources.mixture
    else:
        x = audio_io.read_wav(inp["wav"])
        refs = inp.get("references")
        if refs:
            names = list(refs)
            clips = [audio_io.read_wav(refs[n]) for n in names]
            try:
                sources = audio_io.SourceSet(names, clips, x)
            except ParameterError as exc:
                raise ConfigError(f"input.references: {exc}") from exc
    attack_dict = dict(cfg["attack"])
    if attack_dict.get("seed") is None:
        attack_dict["seed"] = cfg["seed"]
    acfg = attacks.AttackConfig.from_dict(attack_dict)
    fl, hop = _frames(cfg, x.sample_rate)
    matched = None
    if cfg["target_di"] is not None:
        res, strength, _, matched = harness.match_di(
            model, x, acfg, cfg["target_di"], cfg["di_tolerance"], fl, hop
        )
    else:
        res = attacks.craft(model, x, acfg)
        strength = attacks.strength(acfg)

    report = {"DI": harness.clip_di(x, res.eta, fl, hop), "DS": None, "DSA": None,
              "strength": strength, "di_matched": matched,
              "final_objective": res.final_objective, "final_constraint": res.final_constraint,
              "within_delta": res.within_delta, "note": metrics.REPORT_NOTE}
    if sources is not None:
        src_index = model.source_index(acfg.target_source if acfg.target_source != "all" else 0)
        m_idx, c_idx = harness.target_index_for(model, model, src_index, sources)
        ds, _, dsa, flags = harness.evaluate(model, sources, res.eta, m_idx, c_idx,
                                             tuple(cfg["metrics"]), fl, hop)
        report.update({"DS": ds, "DSA": dsa, "flags": flags})

    adv_meta = audio_io.write_wav(res.adversarial, os.path.join(out_dir, "adversarial.wav"), cfg["encoding"])
    audio_io.write_wav(res.eta, os.path.join(out_dir, "eta.wav"), "float32")
    report["adversarial_clipped"] = adv_meta["clipped"]
    _write_csv(os.path.join(out_dir, "loss_trace.csv"),
               ("iteration", "loss", "objective", "constraint"), res.trace_rows())
    _write_json(os.path.join(out_dir, "metrics.json"), report)
    ds_txt = "n/a" if report["DS"] is None else " ".join(
        f"DS_{k}={v:.3f}" for k, v in report["DS"].items())
    return f"craft ok: DI={report['DI']:.2f} dB {ds_txt} -> {out_dir}"


def cmd_evaluate(cfg, out_dir):
    tracks = []
    for i, t in enumerate(cfg["tracks"]):
        tid = str(t.get("id", f"track{i}"))
        ref = audio_io.read_wav(t["reference"])
        est = audio_io.read_wav(t["estimate"])
        adv = audio_io.read_wav(t["adversarial"]) if t.get("adversarial") else None
        for other, key in ((est, "estimate"), (adv, "adversarial")):
            if other is not None and (other.shape != ref.shape or other.sample_rate != ref.sample_rate):
                raise ConfigError(f"track {tid}: {key} {other.shape}@{other.sample_rate} does not "
                                  f"match reference {ref.shape}@{ref.sample_rate}")
        srcs = None
        if t.get("sources"):
            srcs = [audio_io.read_wav(p) for p in t["sources"]]
            if any(s.shape != ref.shape for s in srcs):
                raise ConfigError(f"track {tid}: source shapes do not match the reference")
        tracks.append((tid, ref, est, adv, srcs, t.get("target_index")))

    rate = tracks[0][1].sample_rate
    fl, hop = _frames(cfg, rate)
    has_adv = tracks[0][3] is not None
    summary = {}
    for m in cfg["metrics"]:
        clean = [metrics.TrackSignals(tid, ref, est, srcs, ti) for tid, ref, est, _, srcs, ti in tracks]
        if has_adv:
            adv = [metrics.TrackSignals(tid, ref, a, srcs, ti) for tid, ref, _, a, srcs, ti in tracks]
            value, rep, other = metrics.degradation_report(m, clean, adv, fl, hop, "DS", cfg["order"])
            if other is not None:
                # aggregate-then-difference: report per-track differences of medians
                a, b = rep.track_medians(), other.track_medians()
                per_track = {k: [metrics.difference(a[k], b[k])[0]] for k in a if k in b}
                rep = metrics.aggregate_values(per_track, m, "DS")
                rep.global_median = value
        else:
            rep = metrics.aggregate(fl, hop, clean, m, m.upper())
            value = rep.global_median
        metrics.write_report(rep, os.path.join(out_dir, f"report_{m}.csv"),
                             os.path.join(out_dir, f"report_{m}.json"))
        summary[m] = value
    quantity = "DS" if has_adv else "M"
    vals = " ".join(f"{quantity}_{k}={v:.3f}" for k, v in summary.items())
    return f"evaluate ok: {len(tracks)} tracks {vals} -> {out_dir}"


def _transfer_clips(cfg):
    spec = cfg["clips"]
    if spec.get("manifest"):
        out = []
        for i, entry in enumerate(spec["manifest"]):
            names = list(entry["sources"])
            clips = [audio_io.read_wav(entry["sources"][n]) for n in names]
            try:
                sources = audio_io.SourceSet.from_sources(names, clips)
            except ParameterError as exc:
                raise ConfigError(f"clips.manifest.{i}: {exc}") from exc
            out.append(harness.Clip(str(entry.get("id", f"clip{i}")), sources))
        return out
    base = spec["seed"] if spec.get("seed") is not None else cfg["seed"]
    return [
        harness.Clip(f"clip{i:03d}", _synth(spec["recipe"], _sub_seed(base, f"clip:{i}")))
        for i in range(int(spec["count"]))
    ]


def cmd_transfer(cfg, out_dir):
    built = {label: _build_model(label, spec, cfg["seed"]) for label, spec in sorted(cfg["models"].items())}
    targets = [harness.Target(t["label"], built[t["label"]], t["condition"]) for t in cfg["targets"]]
    grid = []
    for i, a in enumerate(cfg["attack_grid"]):
        a = dict(a)
        if a.get("seed") is None:
            a["seed"] = _sub_seed(cfg["seed"], f"attack:{i}")
        grid.append(attacks.AttackConfig.from_dict(a))
    plan = harness.ExperimentPlan(
        clips=_transfer_clips(cfg), source_label=cfg["source"], source_model=built[cfg["source"]],
        targets=targets, attack_grid=grid, metrics=tuple(cfg["metrics"]),
        output_dir=os.path.join(out_dir, "panels") if cfg["export_panels"] else None,
        target_di=cfg["target_di"], di_tolerance=cfg["di_tolerance"],
        frame_length_s=cfg["frame_length_s"], hop_s=cfg["hop_s"], order=cfg["order"],
        jobs=int(cfg["jobs"]),
    )
    if all(t.condition == "white" for t in targets):
        harness.validate_plan(plan)
        report = harness._run(plan, targets)
    else:
        report = harness.run_transfer(plan)
    for w in report.warnings:
        log.warning(w)
    harness.write_transfer_report(report, out_dir, plan.metrics)
    parts = []
    for cond in harness.CONDITIONS:
        if report.select(condition=cond):
            parts.append(f"{cond}={report.median_ds(plan.metrics[0], condition=cond):.3f}")
    return (f"transfer ok: {len(report.rows)} rows, {report.failed} failed, median DS_{plan.metrics[0]} "
            + (" ".join(parts) or "n/a") + f" -> {out_dir}")


def cmd_train_toy(cfg, out_dir):
    rec = audio_io.SynthRecipe.from_dict(cfg["recipe"])
    names = tuple(s.name for s in rec.sources)
    arch = cfg["architecture"]
    init_seed = cfg["init_seed"] if cfg["init_seed"] is not None else cfg["seed"]
    model = models.init_model(arch, len(names), init_seed, source_names=names,
                              sample_rate=rec.sample_rate)
    data = _training_set(cfg["recipe"], int(cfg["clips"]), cfg["seed"], "toy")
    lr = cfg["lr"] or models.DEFAULT_LR[arch]
    model, trace = models.fit_toy(model, data, int(cfg["epochs"]), lr, _sub_seed(cfg["seed"], "fit:toy"))
    models.save_weights(model, os.path.join(out_dir, "weights.bin"))
    _write_csv(os.path.join(out_dir, "loss_trace.csv"), ("epoch", "mse"), list(enumerate(trace)))
    final = f"{trace[-1]:.6f}" if trace else "n/a"
    return f"train-toy ok: {arch} epochs={cfg['epochs']} final_mse={final} -> {out_dir}"


def cmd_synth(cfg, out_dir):
    sources = _synth(cfg["recipe"], cfg["seed"])
    clipped = 0
    for name, clip in zip(sources.names, sources.clips):
        meta = audio_io.write_wav(clip, os.path.join(out_dir, f"{name}.wav"), cfg["encoding"])
        clipped += meta["num_clipped"]
    meta = audio_io.write_wav(sources.mixture, os.path.join(out_dir, "mixture.wav"), cfg["encoding"])
    clipped += meta["num_clipped"]
    return (f"synth ok: {len(sources)} stems + mixture, {sources.mixture.duration:.2f} s"
            f"{', ' + str(clipped) + ' samples clipped' if clipped else ''} -> {out_dir}")


COMMANDS = {
    "craft": cmd_craft,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "train-toy": cmd_train_toy,
    "synth": cmd_synth,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--output-dir", metavar="PATH", default="sepadv-out")
    common.add_argument("--jobs", type=int, metavar="N", help="parallel jobs (transfer)")
    common.add_argument("--seed", type=int, metavar="N", help="top-level seed")
    common.add_argument("--overrides", nargs="*", default=[], metavar="K=V",
                        help="dotted-path overrides, values parsed as JSON when possible")
    common.add_argument("--verbose", "-v", action="count", default=0)
    parser = argparse.ArgumentParser(
        prog="sepadv",
        description="Adversarial attacks on toy audio source separation models.",
        epilog="exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _setup_logging(verbosity):
    level = logging.WARNING - 10 * min(verbosity, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("sepadv")
    root.handlers[:] = [handler]
    root.setLevel(level)


def run(argv=None):
    """Parse ``argv``, run the subcommand and return ``(exit_code, message)``."""
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        raw = load_config(args.config) if args.config else {}
        cfg = resolve_config(args.subcommand, raw, args.overrides, args.seed, args.jobs)
        out_dir = args.output_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            return EXIT_IO, f"error: cannot create output dir {out_dir}: {exc}"
        if reference_mode():
            log.info("reference mode: float64 deterministic math")
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        _write_json(os.path.join(out_dir, "run.json"), cfg)
        return EXIT_OK, COMMANDS[args.subcommand](cfg, out_dir)
    except NumericError as exc:
        return EXIT_NUMERIC, f"numeric error: {exc}"
    except UndefinedMetricError as exc:
        return EXIT_NUMERIC, f"numeric error: {exc}"
    except (FormatError, OSError) as exc:
        return EXIT_IO, f"I/O error: {exc}"
    except (ConfigError, ParameterError) as exc:
        return EXIT_CONFIG, f"config error: {exc}"
    except SepAdvError as exc:
        return EXIT_INTERNAL, f"error: {exc}"


def main(argv=None):
    code, message = run(argv)
    stream = sys.stdout if code == EXIT_OK else sys.stderr
    print(message, file=stream)
    return code


if __name__ == "__main__":
    sys.exit(main())
