"""Per-segment inference and oracle stitching of local hypotheses into a
recording-level speaker activity track."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import ActivityTrack, MultiChannelAudio, frames_to_track
from .models import ConditionedEend, ModelConfig
from .nn import tensor as T
from .powerset import PowersetPosteriors
from .training import SegmentExample, TrainConfig, build_segments, example_logits, \
    make_training_examples


@dataclass
class LocalHypothesis:
    """Binary local-speaker activity for one segment at model frame rate."""

    span: tuple[float, float]
    activity: np.ndarray  # (n_local, n_frames) bool over valid frames
    frame_rate: float
    posteriors: np.ndarray | None = None

    @property
    def num_locals(self) -> int:
        return self.activity.shape[0]

    @property
    def num_frames(self) -> int:
        return self.activity.shape[1]


def infer_segments(model, audio: MultiChannelAudio, cfg: TrainConfig,
                   model_cfg: ModelConfig, ref: ActivityTrack | None = None) -> list[LocalHypothesis]:
    """One local hypothesis per segment, decoded by per-frame argmax.

    Oracle-count conditioning needs the reference track to supply counts;
    every other mode ignores `ref`.
    """
    needs_ref = isinstance(model, ConditionedEend) and model.config.conditioning == "oracle_count"
    if needs_ref:
        if ref is None:
            raise ValueError("oracle_count conditioning requires the reference track")
        segments = make_training_examples(audio, ref, cfg, model_cfg)
    else:
        segments = build_segments(audio, model_cfg, cfg.segment_len, cfg.segment_hop)
    out = []
    for ex in segments:
        logits = example_logits(model, ex)
        post = PowersetPosteriors(T.softmax(logits, axis=-1).data, _space_of(model))
        active = post.to_activity_matrix()[:ex.valid]  # (valid, S)
        keep = [s for s in range(active.shape[1]) if active[:, s].any()]
        fr = model_cfg.frame_rate
        out.append(LocalHypothesis(
            span=(ex.span[0], ex.span[0] + ex.valid / fr),
            activity=active[:, keep].T.copy(),
            frame_rate=fr,
            posteriors=post.values[:ex.valid],
        ))
    return out


def _space_of(model):
    return model.config.space()


def _best_assignment(overlap: np.ndarray) -> dict[int, int]:
    """Injective local->reference map maximizing total matched frames.

    Brute force over partial injective assignments; pairs with zero
    overlap stay unmatched so silent-in-reference locals keep synthetic
    labels. Ties prefer lower reference indices (first found wins).
    """
    n_local, n_ref = overlap.shape
    best = {"total": -1, "map": {}}

    def recurse(i: int, used: set[int], current: dict[int, int], total: int):
        if i == n_local:
            if total > best["total"]:
                best["total"] = total
                best["map"] = dict(current)
            return
        for j in range(n_ref):
            if j in used or overlap[i, j] <= 0:
                continue
            current[i] = j
            recurse(i + 1, used | {j}, current, total + int(overlap[i, j]))
            del current[i]
        recurse(i + 1, used, current, total)  # leave local i unmatched

    recurse(0, set(), {}, 0)
    return best["map"]


def oracle_stitch(local_hyps: list[LocalHypothesis], ref: ActivityTrack) -> ActivityTrack:
    """Assign each local speaker the reference label with maximal in-segment
    frame overlap (optimal one-to-one per segment); locals overlapping no
    reference speech keep a fresh synthetic label. Frames covered by
    several segments average the binary votes, with >= 0.5 meaning active.
    """
    if ref is None:
        raise ValueError("oracle stitching requires a reference track")
    if not local_hyps:
        return ActivityTrack([], {}, ref.duration)
    fr = local_hyps[0].frame_rate
    n = int(np.ceil(ref.duration * fr - 1e-9))
    ref_frames = ref.to_frames(1.0 / fr, n_frames=n)
    sums: dict[str, np.ndarray] = {}
    coverage = np.zeros(n, dtype=np.int64)
    for k, hyp in enumerate(local_hyps):
        start = int(round(hyp.span[0] * fr))
        length = min(hyp.num_frames, max(0, n - start))
        if length <= 0:
            continue
        coverage[start:start + length] += 1
        seg_ref = ref_frames[start:start + length]  # (length, n_ref)
        act = hyp.activity[:, :length]
        overlap = np.einsum("lt,tr->lr", act.astype(np.int64), seg_ref.astype(np.int64))
        mapping = _best_assignment(overlap) if act.size else {}
        for i in range(hyp.num_locals):
            label = ref.speakers[mapping[i]] if i in mapping else f"unmatched_{k}_{i}"
            if label not in sums:
                sums[label] = np.zeros(n, dtype=np.float64)
            sums[label][start:start + length] += act[i, :length]
    active_labels = [s for s in ref.speakers if s in sums]
    active_labels += sorted(lbl for lbl in sums if lbl not in ref.speakers)
    if not active_labels:
        return ActivityTrack([], {}, ref.duration)
    matrix = np.zeros((n, len(active_labels)), dtype=bool)
    safe_cov = np.maximum(coverage, 1)
    for j, label in enumerate(active_labels):
        matrix[:, j] = (sums[label] / safe_cov >= 0.5) & (coverage > 0)
    return frames_to_track(matrix, active_labels, 1.0 / fr, duration=ref.duration)
