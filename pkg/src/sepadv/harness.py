"""Experiment orchestration: white-box sweeps, transfer studies, untargeted effects.

A plan names the clips, the model adversarial examples are crafted on, the
models they are evaluated on (each tagged white / gray / black), the attack
grid, and optionally a target DI to which every attack is matched by
bisection over its strength knob (the step size for gd, epsilon for
fgsm/pgd).
"""

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, audio_io, dsp, metrics, models
from .audio_io import AudioClip
from .errors import NumericError, PlanValidationError, SepAdvError

log = logging.getLogger(__name__)

CONDITIONS = ("white", "gray", "black")
MAX_BISECTION_STEPS = 12
MAX_BRACKET_STEPS = 10


@dataclass
class Clip:
    clip_id: str
    sources: audio_io.SourceSet


@dataclass
class Target:
    label: str
    model: models.SeparationModel
    condition: str


@dataclass
class ExperimentPlan:
    clips: list
    source_label: str
    source_model: models.SeparationModel
    targets: list
    attack_grid: list
    metrics: tuple = ("sdr",)
    output_dir: str = None
    target_di: float = None
    di_tolerance: float = 1.0
    frame_length_s: float = 1.0
    hop_s: float = 1.0
    order: str = "aggregate_then_difference"
    jobs: int = 1


@dataclass
class Row:
    condition: str
    source: str
    target: str
    clip_id: str
    config_id: int
    method: str
    strength: float
    ds: dict
    di: float
    dsa: float
    eta_checksum: str
    flags: list = field(default_factory=list)

    def as_dict(self):
        d = {
            "condition": self.condition, "source": self.source, "target": self.target,
            "clip_id": self.clip_id, "config_id": self.config_id, "method": self.method,
            "strength": self.strength, "di": self.di, "dsa": self.dsa,
            "eta_checksum": self.eta_checksum, "flags": ";".join(self.flags),
        }
        for m, v in self.ds.items():
            d[f"ds_{m}"] = v
        return d


@dataclass
class TransferReport:
    rows: list
    warnings: list = field(default_factory=list)
    failed: int = 0

    def select(self, **criteria):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def median_ds(self, metric="sdr", **criteria):
        vals = [r.ds[metric] for r in self.select(**criteria) if "failed" not in r.flags]
        return metrics.median(vals) if vals else math.nan

    def curves(self, metric="sdr"):
        """``{(method, clip_id): [(di, ds), ...]}`` ordered by config id."""
        out = {}
        for r in sorted(self.rows, key=lambda r: r.config_id):
            if "failed" in r.flags:
                continue
            out.setdefault((r.method, r.clip_id), []).append((r.di, r.ds[metric]))
        return out

    def summary(self, metric_names=("sdr",)):
        groups = {}
        for r in self.rows:
            key = (r.condition, r.source, r.target, r.config_id)
            groups.setdefault(key, []).append(r)
        out = []
        for (cond, src, tgt, cid), rows in sorted(groups.items()):
            ok = [r for r in rows if "failed" not in r.flags]
            entry = {
                "condition": cond, "source": src, "target": tgt, "config_id": cid,
                "num_clips": len(rows), "failed": len(rows) - len(ok),
            }
            if ok:
                entry["median_di"] = metrics.median([r.di for r in ok])
                entry["median_dsa"] = metrics.median([r.dsa for r in ok])
                for m in metric_names:
                    entry[f"median_ds_{m}"] = metrics.median([r.ds[m] for r in ok])
            out.append(entry)
        return {"note": metrics.REPORT_NOTE, "groups": out, "warnings": list(self.warnings)}


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def weights_digest(model):
    return hashlib.sha256(models.dump_weights(model)).hexdigest()


def validate_plan(plan, require_transfer=False):
    """Check the white/gray/black taxonomy before any computation."""
    if not plan.targets:
        raise PlanValidationError("plan has no target models")
    src_digest = weights_digest(plan.source_model)
    for t in plan.targets:
        if t.condition not in CONDITIONS:
            raise PlanValidationError(f"target {t.label!r}: unknown condition {t.condition!r}")
        same_arch = t.model.architecture == plan.source_model.architecture
        same_weights = weights_digest(t.model) == src_digest
        if t.condition == "white" and not (same_arch and same_weights):
            raise PlanValidationError(f"white-box target {t.label!r} must be the source model")
        if t.condition == "gray" and not (same_arch and not same_weights):
            raise PlanValidationError(
                f"gray-box target {t.label!r} needs the source architecture with different weights"
            )
        if t.condition == "black" and same_arch:
            raise PlanValidationError(
                f"black-box target {t.label!r} must use a different architecture"
            )
    if require_transfer and all(t.condition == "white" for t in plan.targets):
        raise PlanValidationError("transfer plan needs at least one gray or black target")


# --------------------------------------------------------------------------
# Evaluation helpers
# --------------------------------------------------------------------------


def eta_checksum(eta):
    return hashlib.sha256(np.ascontiguousarray(eta.samples).tobytes()).hexdigest()[:16]


def _frames(plan_or_none, rate):
    if plan_or_none is None:
        return rate, rate
    return (
        max(1, int(round(plan_or_none.frame_length_s * rate))),
        max(1, int(round(plan_or_none.hop_s * rate))),
    )


def _track_median(metric, y, est, clip_sources, target_index, frame_length, hop):
    track = metrics.TrackSignals("t", y, est, clip_sources, target_index)
    return metrics.aggregate(frame_length, hop, [track], metric).global_median


def target_index_for(model, source_model, source_index, sources):
    """Index of the attacked source in ``model`` and in the clip's source set."""
    name = source_model.source_names[source_index]
    model_idx = model.source_names.index(name) if name in model.source_names else source_index
    clip_idx = sources.names.index(name) if name in sources.names else source_index
    return model_idx, clip_idx


def evaluate(model, sources, eta, model_index, clip_index, metric_names=("sdr",),
             frame_length=None, hop=None):
    """DS per metric, DI and DSA for one clip, one model and one perturbation.

    Returns ``(ds_dict, di, dsa, flags)``. Each quantity is the difference of
    frame-median ground metrics over the clip.
    """
    x = sources.mixture
    rate = x.sample_rate
    frame_length = frame_length or rate
    hop = hop or frame_length
    y = sources.clips[clip_index]
    clean = models.forward_array(model, x.samples)[model_index]
    adv = models.forward_array(model, x.samples + eta.samples)[model_index]
    flags = []
    ds = {}
    for m in metric_names:
        a = _track_median(m, y.samples, clean, sources, clip_index, frame_length, hop)
        b = _track_median(m, y.samples, adv, sources, clip_index, frame_length, hop)
        ds[m], flag = metrics.difference(a, b)
        if flag:
            flags.append(f"ds_{m}:{flag}")
    di = _track_median("sdr", x.samples, x.samples + eta.samples, None, None, frame_length, hop)
    a = _track_median("sdr", y.samples, clean, None, None, frame_length, hop)
    b = _track_median("sdr", y.samples, clean + eta.samples, None, None, frame_length, hop)
    dsa, flag = metrics.difference(a, b)
    if flag:
        flags.append(f"dsa:{flag}")
    return ds, di, dsa, flags


def clip_di(x, eta, frame_length=None, hop=None):
    frame_length = frame_length or x.sample_rate
    return _track_median("sdr", x.samples, x.samples + eta.samples, None, None,
                         frame_length, hop or frame_length)


# --------------------------------------------------------------------------
# DI matching
# --------------------------------------------------------------------------


def default_strength(cfg, knob=None):
    return attacks.strength(cfg, knob)


def bisect_knob(measure, start, target, tolerance, increasing, max_steps=MAX_BISECTION_STEPS):
    """Search a positive knob in log space until ``measure(knob)`` is near ``target``.

    ``measure`` returns ``(payload, value)``; ``increasing`` says whether the
    value grows with the knob. A bracket is grown by factors of 4, then
    bisected geometrically. Returns ``(payload, knob, value, matched)`` for
    the closest attempt.
    """
    best = None

    def consider(s):
        nonlocal best
        payload, value = measure(s)
        if best is None or abs(value - target) < abs(best[2] - target):
            best = (payload, s, value)
        return value

    def below(v):
        return v < target

    start = start if start > 0 else 1.0
    v = consider(start)
    if abs(v - target) <= tolerance:
        return best + (True,)
    lo = hi = start
    # below target with an increasing knob means the knob must grow
    if below(v) == increasing:
        for _ in range(MAX_BRACKET_STEPS):
            lo, hi = hi, hi * 4.0
            v = consider(hi)
            if abs(v - target) <= tolerance:
                return best + (True,)
            if below(v) != increasing:
                break
        else:
            return best + (False,)
    else:
        for _ in range(MAX_BRACKET_STEPS):
            hi, lo = lo, lo / 4.0
            v = consider(lo)
            if abs(v - target) <= tolerance:
                return best + (True,)
            if below(v) == increasing:
                break
        else:
            return best + (False,)
    for _ in range(max_steps):
        mid = math.sqrt(lo * hi)
        v = consider(mid)
        if abs(v - target) <= tolerance:
            return best + (True,)
        if below(v) == increasing:
            lo = mid
        else:
            hi = mid
    return best + (False,)


def match_di(model, x, cfg, target_di, tolerance=1.0, frame_length=None, hop=None,
             max_steps=MAX_BISECTION_STEPS, knob=None):
    """Craft with a strength knob bisected (in log space) to hit ``target_di``.

    The knob defaults to the step size ``lr`` for gd and ``epsilon`` for
    fgsm/pgd; ``knob="lambda"`` bisects the penalty weight instead. DI falls
    as ``lr`` or ``epsilon`` grow and rises with lambda. Returns
    ``(result, strength, di, matched)``; when no attempt within the budget
    lands inside the tolerance, the closest one is returned with
    ``matched = False``.
    """
    knob = knob or attacks.default_knob(cfg)

    def measure(s):
        res = attacks.craft(model, x, attacks.with_strength(cfg, s, knob))
        return res, clip_di(x, res.eta, frame_length, hop)

    return bisect_knob(measure, attacks.strength(cfg, knob), target_di, tolerance,
                       increasing=(knob == "lambda"), max_steps=max_steps)


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


def _craft_job(plan, clip, cfg):
    x = clip.sources.mixture
    fl, hop = _frames(plan, x.sample_rate)
    if plan.target_di is not None:
        res, strength, di, matched = match_di(
            plan.source_model, x, cfg, plan.target_di, plan.di_tolerance, fl, hop
        )
        flags = [] if matched else ["di_unmatched"]
    else:
        res = attacks.craft(plan.source_model, x, cfg)
        strength, flags = default_strength(cfg), []
    return res, strength, flags


def _run(plan, targets):
    report = TransferReport(rows=[])
    if not plan.attack_grid:
        msg = "empty attack grid; nothing to run"
        log.warning(msg)
        report.warnings.append(msg)
        return report
    jobs = [(ci, clip, k, cfg) for ci, clip in enumerate(plan.clips)
            for k, cfg in enumerate(plan.attack_grid)]

    def work(job):
        _, clip, _, cfg = job
        try:
            return _craft_job(plan, clip, cfg), None
        except (NumericError, SepAdvError, FloatingPointError) as exc:
            return None, exc

    if plan.jobs > 1:
        with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]

    for (ci, clip, k, cfg), (crafted, exc) in zip(jobs, outcomes):
        src_index = plan.source_model.source_index(cfg.target_source)
        for t in targets:
            if crafted is None:
                report.failed += 1
                report.rows.append(Row(
                    t.condition, plan.source_label, t.label, clip.clip_id, k, cfg.method,
                    math.nan, {m: math.nan for m in plan.metrics}, math.nan, math.nan, "",
                    ["failed", f"error:{exc}"],
                ))
                continue
            res, strength, flags = crafted
            m_idx, c_idx = target_index_for(t.model, plan.source_model, src_index, clip.sources)
            fl, hop = _frames(plan, clip.sources.mixture.sample_rate)
            ds, di, dsa, eval_flags = evaluate(
                t.model, clip.sources, res.eta, m_idx, c_idx, plan.metrics, fl, hop
            )
            report.rows.append(Row(
                t.condition, plan.source_label, t.label, clip.clip_id, k, cfg.method,
                strength, ds, di, dsa, eta_checksum(res.eta), flags + eval_flags,
            ))
        if plan.output_dir and crafted is not None:
            _export_panels(plan, clip, k, crafted[0])
    report.rows.sort(key=lambda r: (r.clip_id, r.config_id, r.target))
    return report


def run_whitebox(plan):
    """Craft and evaluate on the source model for every clip and config."""
    white = Target(plan.source_label, plan.source_model, "white")
    return _run(plan, [white])


def run_transfer(plan):
    """Craft once per (clip, config) on the source model; evaluate on every target."""
    validate_plan(plan, require_transfer=True)
    return _run(plan, plan.targets)


def untargeted_effects(model, clips, cfg, metric="sdr", frame_length=None, hop=None):
    """Median DS of every source output when only ``cfg.target_source`` is attacked.

    ``clips`` are :class:`audio_io.SourceSet` objects whose source names match
    the model's. Returns ``{source_name: median DS}``.
    """
    if model.num_sources < 2:
        raise PlanValidationError("untargeted effects need a model with at least two sources")
    per_source = {name: [] for name in model.source_names}
    for sources in clips:
        res = attacks.craft(model, sources.mixture, cfg)
        for i, name in enumerate(model.source_names):
            c_idx = sources.names.index(name) if name in sources.names else i
            ds, _, _, _ = evaluate(model, sources, res.eta, i, c_idx, (metric,), frame_length, hop)
            per_source[name].append(ds[metric])
    return {name: metrics.median(v) for name, v in per_source.items()}


def random_baseline(model, sources, eta_norm, count, seed, model_index=0, clip_index=0,
                    metric="sdr", frame_length=None, hop=None):
    """DS of ``count`` seed-varied white-noise perturbations of a given l2 norm."""
    from . import rng

    x = sources.mixture
    out = []
    for i in range(count):
        noise = rng.stream(seed, f"baseline:{i}").standard_normal(x.shape)
        noise *= eta_norm / np.linalg.norm(noise)
        ds, _, _, _ = evaluate(model, sources, AudioClip(noise, x.sample_rate),
                               model_index, clip_index, (metric,), frame_length, hop)
        out.append(ds[metric])
    return out


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _export_panels(plan, clip, config_id, res):
    """Four spectrogram grids: input, clean separation, eta, adversarial separation."""
    model = plan.source_model
    cfg = model.stft_cfg or dsp.StftConfig()
    idx = model.source_index(res.config.target_source) if res.config.target_source != "all" else 0
    x = clip.sources.mixture
    panels = {
        "input": x.samples,
        "clean_separation": models.forward_array(model, x.samples)[idx],
        "eta": res.eta.samples,
        "adversarial_separation": models.forward_array(model, res.adversarial.samples)[idx],
    }
    folder = os.path.join(plan.output_dir, "spectrograms")
    os.makedirs(folder, exist_ok=True)
    for name, samples in panels.items():
        spec = dsp.stft(AudioClip(samples, x.sample_rate), cfg)
        dsp.export_spectrogram_csv(spec, os.path.join(folder, f"{clip.clip_id}_cfg{config_id}_{name}"))


def write_transfer_report(report, directory, metric_names=("sdr",)):
    import csv
    import io

    os.makedirs(directory, exist_ok=True)
    cols = ["condition", "source", "target", "clip_id", "config_id", "method", "strength"]
    cols += [f"ds_{m}" for m in metric_names] + ["di", "dsa", "eta_checksum", "flags"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in report.rows:
        d = r.as_dict()
        writer.writerow({c: (repr(float(d[c])) if isinstance(d.get(c), float) else d.get(c, ""))
                         for c in cols})
    csv_path = os.path.join(directory, "transfer_report.csv")
    json_path = os.path.join(directory, "summary.json")
    audio_io.atomic_write_bytes(csv_path, buf.getvalue().encode("utf-8"))
    audio_io.atomic_write_bytes(
        json_path,
        (json.dumps(report.summary(metric_names), indent=2, sort_keys=True) + "\n").encode(),
    )
    return csv_path, json_path


def build_toy_trio(clips, seeds=(1, 2, 3), epochs=400, fit_seed=0, names=None):
    """Source model, gray-box twin (same arch, new seed) and black-box model.

    ``clips`` is either one list of :class:`audio_io.SourceSet` shared by all
    three models or a dict with keys ``source``, ``gray`` and ``black`` giving
    each model its own training set (independently trained models). Returns
    ``{"source": ..., "gray": ..., "black": ...}``, each trained with the
    default learning rate of its architecture.
    """
    keys = ("source", "gray", "black")
    sets = clips if isinstance(clips, dict) else {k: clips for k in keys}
    missing = [k for k in keys if not sets.get(k)]
    if missing:
        raise PlanValidationError(f"no training clips for {missing}")
    names = names or sets["source"][0].names
    n = len(names)
    out = {}
    for key, arch, seed in zip(keys, ("mask_freq", "mask_freq", "conv_time"), seeds):
        data = sets[key]
        m0 = models.init_model(arch, n, seed, source_names=names,
                               sample_rate=data[0].mixture.sample_rate)
        out[key], _ = models.fit_toy(m0, data, epochs, models.DEFAULT_LR[arch], fit_seed + seed)
    return out


def with_configs(plan, grid):
    return replace(plan, attack_grid=list(grid))
