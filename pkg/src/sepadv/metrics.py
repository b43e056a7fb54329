"""Ground metrics (SDR, SIR) and the degradation measures DS, DI and DSA.

SIR uses a scalar-projection (filter length 1) decomposition instead of the
512-tap distortion filters of BSSEval v4; values are therefore comparable in
spirit but not numerically to museval output.

Infinite values are sentinels: ``+inf`` for a zero residual, ``-inf`` for a
vanishing target component. Degradations built from them saturate and carry
a flag (see :func:`difference`).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, SourceSet, atomic_write_bytes
from .errors import ParameterError, UndefinedMetricError

GROUND_METRICS = ("sdr", "sir")
QUANTITIES = ("DS", "DI", "DSA")

REPORT_NOTE = (
    "SIR uses a scalar-projection decomposition (filter length 1), "
    "not the BSSEval v4 512-tap distortion filters."
)


def _arr(a):
    return a.samples if isinstance(a, AudioClip) else np.asarray(a, dtype=np.float64)


def _same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ParameterError(f"shape mismatch: {sorted(shapes)}")


def _ratio_db(num, den):
    if den == 0 and num == 0:
        raise UndefinedMetricError("0/0 energy ratio")
    if den == 0:
        return math.inf
    if num == 0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def sdr(reference, estimate):
    """``10 log10(||ref||^2 / ||ref - est||^2)`` in dB."""
    ref, est = _arr(reference), _arr(estimate)
    _same_shape(ref, est)
    ref_energy = float(np.sum(ref ** 2))
    resid_energy = float(np.sum((ref - est) ** 2))
    if ref_energy == 0 and resid_energy == 0:
        raise UndefinedMetricError("SDR undefined: reference and estimate are both silent")
    return _ratio_db(ref_energy, resid_energy)


def sir(sources, target_index, estimate):
    """Signal-to-interference ratio of ``estimate`` for one source of ``sources``.

    The target component is the projection of the estimate onto the target
    source; the interference is the projection of the remainder onto the span
    of the other sources.
    """
    if isinstance(sources, SourceSet):
        stack = sources.stacked()
    else:
        stack = np.stack([_arr(s) for s in sources])
    if stack.shape[0] < 2:
        raise ParameterError("SIR needs at least two sources")
    est = _arr(estimate)
    _same_shape(stack[0], est)
    flat = stack.reshape(stack.shape[0], -1)
    if np.linalg.matrix_rank(flat) < flat.shape[0]:
        raise UndefinedMetricError("sources are linearly dependent or silent")
    e = est.ravel()
    y = flat[target_index]
    s_target = (np.dot(e, y) / np.dot(y, y)) * y
    others = np.delete(flat, target_index, axis=0)
    coef, *_ = np.linalg.lstsq(others.T, e - s_target, rcond=None)
    e_interf = others.T @ coef
    return _ratio_db(float(np.sum(s_target ** 2)), float(np.sum(e_interf ** 2)))


def ground_metric(metric, reference, estimate, sources=None, target_index=None):
    if metric == "sdr":
        return sdr(reference, estimate)
    if metric == "sir":
        if sources is None or target_index is None:
            raise ParameterError("SIR needs the source set and target index")
        return sir(sources, target_index, estimate)
    raise ParameterError(f"unknown ground metric {metric!r}")


def difference(a, b):
    """``a - b`` with sentinel handling; returns ``(value, flag)``.

    ``flag`` is ``None`` for ordinary finite values, ``"saturated"`` when one
    side is infinite, and ``"both_inf"`` when both are the same infinity (the
    value is then 0).
    """
    if math.isinf(a) and math.isinf(b):
        if a == b:
            return 0.0, "both_inf"
        return (math.inf if a > b else -math.inf), "saturated"
    if math.isinf(a) or math.isinf(b):
        return a - b, "saturated"
    return a - b, None


def ds(metric, y, sep_clean, sep_adv, sources=None, target_index=None):
    """Degradation of separation: ``M(y, f(x)) - M(y, f(x + eta))``."""
    clean = ground_metric(metric, y, sep_clean, sources, target_index)
    adv = ground_metric(metric, y, sep_adv, sources, target_index)
    return difference(clean, adv)[0]


def di(x, eta):
    """Degradation of input: ``SDR(x, x + eta)``, i.e. ``10 log10(||x||^2/||eta||^2)``."""
    xs, e = _arr(x), _arr(eta)
    _same_shape(xs, e)
    return sdr(xs, xs + e)


def dsa(y, sep_clean, eta, metric="sdr", sources=None, target_index=None):
    """Degradation of separation by additive noise: ``M(y, f(x)) - M(y, f(x) + eta)``."""
    clean = _arr(sep_clean)
    noisy = clean + _arr(eta)
    a = ground_metric(metric, y, clean, sources, target_index)
    b = ground_metric(metric, y, noisy, sources, target_index)
    return difference(a, b)[0]


# --------------------------------------------------------------------------
# Frame-wise evaluation and median-of-medians aggregation
# --------------------------------------------------------------------------


def median(values):
    """Exact median; the mean of the central pair for even counts."""
    vals = sorted(values)
    if not vals:
        raise UndefinedMetricError("median of an empty list")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    lo, hi = vals[mid - 1], vals[mid]
    if math.isinf(lo) and math.isinf(hi) and lo != hi:
        return math.nan
    return 0.5 * (lo + hi)


def frame_slices(num_samples, frame_length, hop):
    if frame_length < 1 or hop < 1:
        raise ParameterError("frame length and hop must be positive")
    if num_samples <= frame_length:
        return [slice(0, num_samples)]
    starts = range(0, num_samples - frame_length + 1, hop)
    return [slice(s, s + frame_length) for s in starts]


@dataclass
class TrackSignals:
    """Everything needed to evaluate one track frame by frame.

    ``reference`` and ``estimate`` are clips; ``sources``/``target_index``
    are only used for SIR. For DI the reference is the mixture and the
    estimate the adversarial mixture.
    """

    track_id: str
    reference: AudioClip
    estimate: AudioClip
    sources: object = None
    target_index: int = None


@dataclass
class TrackResult:
    track_id: str
    frame_values: list
    track_median: float
    skipped_frames: int = 0
    excluded: bool = False


@dataclass
class MetricsReport:
    metric: str
    quantity: str
    per_track: list
    global_median: float
    excluded_tracks: int = 0
    flags: list = field(default_factory=list)

    def track_medians(self):
        return {t.track_id: t.track_median for t in self.per_track if not t.excluded}

    def rows(self):
        """CSV rows ``(quantity, metric, track_id, frame_index, value_db, flags)``."""
        out = []
        for t in self.per_track:
            for i, v in enumerate(t.frame_values):
                flag = "inf" if math.isinf(v) else ""
                out.append((self.quantity, self.metric, t.track_id, i, v, flag))
            if t.excluded:
                out.append((self.quantity, self.metric, t.track_id, -1, math.nan, "excluded"))
        return out

    def summary(self):
        return {
            "note": REPORT_NOTE,
            "quantity": self.quantity,
            "metric": self.metric,
            "global_median": self.global_median,
            "excluded_tracks": self.excluded_tracks,
            "flags": list(self.flags),
            "tracks": [
                {
                    "track_id": t.track_id,
                    "track_median": t.track_median,
                    "num_frames": len(t.frame_values),
                    "skipped_frames": t.skipped_frames,
                    "excluded": t.excluded,
                }
                for t in self.per_track
            ],
        }


def aggregate_values(per_track_values, metric="sdr", quantity="DS"):
    """Median over tracks of per-track medians of already-computed frame values.

    ``per_track_values`` maps track id to a list of frame values; ``None``
    entries mark undefined frames and are skipped. A track with no defined
    frame is excluded and flagged.
    """
    if not per_track_values:
        raise ParameterError("need at least one track")
    tracks = []
    for track_id, values in per_track_values.items():
        defined = [v for v in values if v is not None and not math.isnan(v)]
        skipped = len(values) - len(defined)
        if defined:
            tracks.append(TrackResult(track_id, defined, median(defined), skipped))
        else:
            tracks.append(TrackResult(track_id, [], math.nan, skipped, excluded=True))
    kept = [t.track_median for t in tracks if not t.excluded]
    excluded = len(tracks) - len(kept)
    if not kept:
        raise UndefinedMetricError("every track was excluded")
    flags = [f"excluded_tracks={excluded}"] if excluded else []
    return MetricsReport(metric, quantity, tracks, median(kept), excluded, flags)


def framewise(metric, track, frame_length, hop):
    """Ground metric per frame; undefined frames become ``None``."""
    ref, est = _arr(track.reference), _arr(track.estimate)
    _same_shape(ref, est)
    values = []
    for sl in frame_slices(ref.shape[-1], frame_length, hop):
        try:
            if metric == "sdr":
                values.append(sdr(ref[..., sl], est[..., sl]))
            else:
                stack = track.sources.stacked() if isinstance(track.sources, SourceSet) \
                    else np.stack([_arr(s) for s in track.sources])
                values.append(sir(stack[..., sl], track.target_index, est[..., sl]))
        except UndefinedMetricError:
            values.append(None)
    return values


def aggregate(frame_length, hop, per_track_signals, metric="sdr", quantity="M"):
    """Frame-wise ground metric -> per-track median -> median over tracks."""
    if not per_track_signals:
        raise ParameterError("need at least one track")
    values = {
        t.track_id: framewise(metric, t, frame_length, hop) for t in per_track_signals
    }
    return aggregate_values(values, metric, quantity)


def degradation_report(metric, clean_tracks, adv_tracks, frame_length, hop,
                       quantity="DS", order="aggregate_then_difference"):
    """DS (or DSA) over many tracks.

    ``order="aggregate_then_difference"`` medians each side separately and
    subtracts the global medians; ``"difference_then_aggregate"`` subtracts
    per frame first. Returns ``(value, clean_report, adv_report)``; the
    reports are ``None`` for the per-frame order, which instead returns the
    aggregated difference report as ``clean_report``.
    """
    if order == "aggregate_then_difference":
        a = aggregate(frame_length, hop, clean_tracks, metric, quantity)
        b = aggregate(frame_length, hop, adv_tracks, metric, quantity)
        return difference(a.global_median, b.global_median)[0], a, b
    if order == "difference_then_aggregate":
        diffs = {}
        for c, d in zip(clean_tracks, adv_tracks):
            fc = framewise(metric, c, frame_length, hop)
            fa = framewise(metric, d, frame_length, hop)
            diffs[c.track_id] = [
                None if (p is None or q is None) else difference(p, q)[0]
                for p, q in zip(fc, fa)
            ]
        report = aggregate_values(diffs, metric, quantity)
        return report.global_median, report, None
    raise ParameterError(f"unknown aggregation order {order!r}")


def write_report(report, csv_path, json_path):
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("quantity", "metric", "track_id", "frame_index", "value_db", "flags"))
    for row in report.rows():
        writer.writerow(row[:4] + (repr(float(row[4])),) + row[5:])
    atomic_write_bytes(csv_path, buf.getvalue().encode("utf-8"))
    atomic_write_bytes(
        json_path, (json.dumps(report.summary(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    )
