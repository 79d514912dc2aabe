"""Collar-free frame-based DER with miss / false alarm / confusion
components, overlap / single region decomposition and macro averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .audio_io import ActivityTrack

DEFAULT_FRAME = 0.01  # 10 ms scoring grid, zero collar

REGIONS = ("silence", "single", "overlap")


@dataclass
class DerBreakdown:
    miss: float = 0.0
    false_alarm: float = 0.0
    confusion: float = 0.0
    total_ref_speech: float = 0.0
    der_overall: float = 0.0
    der_overlap: float = 0.0
    der_single: float = 0.0
    region_durations: dict[str, float] = field(default_factory=dict)
    region_components: dict[str, dict[str, float]] = field(default_factory=dict)

    def row(self) -> str:
        """Table row in 'overall (OV / Single)' percent layout."""
        return (f"{100 * self.der_overall:.1f} "
                f"({100 * self.der_overlap:.1f} / {100 * self.der_single:.1f})")


def _ratio(errors: float, reference: float) -> float:
    return errors / reference if reference > 0 else 0.0


def region_split(ref: ActivityTrack, frame: float = DEFAULT_FRAME,
                 n_frames: int | None = None) -> dict[str, np.ndarray]:
    """Frame masks by reference speaker count: 0 / 1 / >= 2. The masks
    partition the timeline."""
    frames = ref.to_frames(frame, n_frames=n_frames)
    counts = frames.sum(axis=1)
    return {
        "silence": counts == 0,
        "single": counts == 1,
        "overlap": counts >= 2,
    }


def speaker_mapping(ref: ActivityTrack, hyp: ActivityTrack,
                    frame: float = DEFAULT_FRAME) -> dict[str, str]:
    """Optimal one-to-one hypothesis-to-reference label map maximizing
    matched speaker time; ties prefer identity on shared labels."""
    n = int(round(max(ref.duration, hyp.duration) / frame))
    rf = ref.to_frames(frame, n_frames=n)
    hf = hyp.to_frames(frame, n_frames=n)
    matched = np.einsum("tr,th->rh", rf.astype(np.float64), hf.astype(np.float64))
    for r, rname in enumerate(ref.speakers):
        for h, hname in enumerate(hyp.speakers):
            if rname == hname:
                matched[r, h] += 1e-6  # frame counts are integers; epsilon only breaks ties
    rows, cols = linear_sum_assignment(-matched)
    out = {}
    for r, h in zip(rows, cols):
        if matched[r, h] > 0:
            out[hyp.speakers[h]] = ref.speakers[r]
    return out


def der(ref: ActivityTrack, hyp: ActivityTrack, frame: float = DEFAULT_FRAME) -> DerBreakdown:
    """Frame-discretised DER with zero collar.

    The label mapping is computed once over the whole recording and reused
    for the region decomposition. False alarms in reference-silence frames
    count toward the overall DER only.
    """
    if abs(ref.duration - hyp.duration) > frame + 1e-9:
        raise ValueError(
            f"duration mismatch: ref {ref.duration:.3f}s vs hyp {hyp.duration:.3f}s"
        )
    n = int(round(max(ref.duration, hyp.duration) / frame))
    rf = ref.to_frames(frame, n_frames=n)
    hf = hyp.to_frames(frame, n_frames=n)
    mapping = speaker_mapping(ref, hyp, frame)
    ref_idx = {s: j for j, s in enumerate(ref.speakers)}
    n_ref = rf.sum(axis=1)
    n_hyp = hf.sum(axis=1)
    correct = np.zeros(n, dtype=np.int64)
    for h, hname in enumerate(hyp.speakers):
        rname = mapping.get(hname)
        if rname is not None:
            correct += rf[:, ref_idx[rname]] & hf[:, h]
    miss_f = np.maximum(n_ref - n_hyp, 0)
    fa_f = np.maximum(n_hyp - n_ref, 0)
    conf_f = np.minimum(n_ref, n_hyp) - correct
    masks = {
        "silence": n_ref == 0,
        "single": n_ref == 1,
        "overlap": n_ref >= 2,
    }
    breakdown = DerBreakdown(
        miss=float(miss_f.sum()) * frame,
        false_alarm=float(fa_f.sum()) * frame,
        confusion=float(conf_f.sum()) * frame,
        total_ref_speech=float(n_ref.sum()) * frame,
    )
    breakdown.der_overall = _ratio(
        breakdown.miss + breakdown.false_alarm + breakdown.confusion,
        breakdown.total_ref_speech,
    )
    for name in REGIONS:
        m = masks[name]
        comp = {
            "miss": float(miss_f[m].sum()) * frame,
            "false_alarm": float(fa_f[m].sum()) * frame,
            "confusion": float(conf_f[m].sum()) * frame,
            "ref_speech": float(n_ref[m].sum()) * frame,
        }
        breakdown.region_components[name] = comp
        breakdown.region_durations[name] = float(m.sum()) * frame
    ov = breakdown.region_components["overlap"]
    sg = breakdown.region_components["single"]
    breakdown.der_overlap = _ratio(ov["miss"] + ov["false_alarm"] + ov["confusion"],
                                   ov["ref_speech"])
    breakdown.der_single = _ratio(sg["miss"] + sg["false_alarm"] + sg["confusion"],
                                  sg["ref_speech"])
    return breakdown


def der_by_region(ref: ActivityTrack, hyp: ActivityTrack,
                  frame: float = DEFAULT_FRAME) -> DerBreakdown:
    """DER with the overlap / single decomposition (same global mapping)."""
    return der(ref, hyp, frame)


def pool(breakdowns: list[DerBreakdown]) -> DerBreakdown:
    """Within-dataset aggregation: component seconds summed, ratios
    recomputed (micro average)."""
    if not breakdowns:
        raise ValueError("nothing to pool")
    out = DerBreakdown()
    for b in breakdowns:
        out.miss += b.miss
        out.false_alarm += b.false_alarm
        out.confusion += b.confusion
        out.total_ref_speech += b.total_ref_speech
        for name in REGIONS:
            comp = b.region_components.get(name, {})
            acc = out.region_components.setdefault(
                name, {"miss": 0.0, "false_alarm": 0.0, "confusion": 0.0, "ref_speech": 0.0})
            for key in acc:
                acc[key] += comp.get(key, 0.0)
            out.region_durations[name] = out.region_durations.get(name, 0.0) + \
                b.region_durations.get(name, 0.0)
    out.der_overall = _ratio(out.miss + out.false_alarm + out.confusion, out.total_ref_speech)
    ov = out.region_components["overlap"]
    sg = out.region_components["single"]
    out.der_overlap = _ratio(ov["miss"] + ov["false_alarm"] + ov["confusion"], ov["ref_speech"])
    out.der_single = _ratio(sg["miss"] + sg["false_alarm"] + sg["confusion"], sg["ref_speech"])
    return out


def macro_average(per_dataset: list[DerBreakdown]) -> DerBreakdown:
    """Unweighted mean of the three DER ratios across datasets; component
    seconds are summed for reference (the macro ratios are means, not the
    ratio of the sums)."""
    if not per_dataset:
        raise ValueError("macro average of an empty list")
    out = pool(per_dataset)
    out.der_overall = float(np.mean([b.der_overall for b in per_dataset]))
    out.der_overlap = float(np.mean([b.der_overlap for b in per_dataset]))
    out.der_single = float(np.mean([b.der_single for b in per_dataset]))
    return out


def render_table(rows: list[tuple[str, DerBreakdown]], macro: DerBreakdown | None = None) -> str:
    """Aligned text table in the 'overall (OV / Single)' layout."""
    entries = [(name, b.row()) for name, b in rows]
    if macro is not None:
        entries.append(("Macro", macro.row()))
    width = max((len(name) for name, _ in entries), default=4)
    lines = [f"{'Name'.ljust(width)}  DER (OV / Single)"]
    for name, cell in entries:
        lines.append(f"{name.ljust(width)}  {cell}")
    return "\n".join(lines) + "\n"


def render_csv(rows: list[tuple[str, DerBreakdown]], macro: DerBreakdown | None = None) -> str:
    header = ("name,der_overall,der_overlap,der_single,"
              "miss_s,false_alarm_s,confusion_s,ref_speech_s")
    lines = [header]
    items = list(rows) + ([("Macro", macro)] if macro is not None else [])
    for name, b in items:
        lines.append(
            f"{name},{b.der_overall:.6f},{b.der_overlap:.6f},{b.der_single:.6f},"
            f"{b.miss:.3f},{b.false_alarm:.3f},{b.confusion:.3f},{b.total_ref_speech:.3f}"
        )
    return "\n".join(lines) + "\n"
