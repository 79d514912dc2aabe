"""Segment-level training: example construction with local speaker
re-indexing, powerset targets, and the staged optimization loop."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio_io import ActivityTrack, MultiChannelAudio
from .frontend import FeatureStreams, extract_features
from .models import ConditionedEend, ModelConfig, StandaloneSpatialDiarization, build_standalone
from .nn.checkpoint import save_checkpoint
from .nn.modules import cross_entropy
from .nn.optim import make_optimizer
from .nn.tensor import NumericError
from .powerset import MAX_CONCURRENT, enumerate_classes, encode_frame

STAGES = ("scratch", "frozen_aux", "joint_finetune")


@dataclass
class TrainConfig:
    segment_len: float = 8.0
    segment_hop: float = 4.0
    batch_size: int = 4
    learning_rate: float = 1e-3
    steps: int = 500
    seed: int = 0
    stage: str = "scratch"
    optimizer: str = "adam"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    finetune_lr_scale: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.segment_hop > self.segment_len:
            raise ValueError("segment_hop must not exceed segment_len")
        for name in ("segment_len", "segment_hop", "batch_size", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:  # zero is allowed (no-op smoke runs)
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SegmentExample:
    """One training/inference segment with recording-level feature slices."""

    span: tuple[float, float]
    features: FeatureStreams
    stub_input: np.ndarray
    valid: int
    targets: np.ndarray | None = None
    counts: np.ndarray | None = None
    speaker_map: list[str] = field(default_factory=list)
    cond_cache: np.ndarray | None = None  # frozen-aux condition, precomputed


def segment_starts(total_frames: int, seg_frames: int, hop_frames: int) -> list[int]:
    """Start frames at multiples of the hop; one padded tail segment is
    appended when the regular grid leaves the recording uncovered."""
    starts = []
    s = 0
    while s + seg_frames <= total_frames:
        starts.append(s)
        s += hop_frames
    covered = starts[-1] + seg_frames if starts else 0
    if covered < total_frames:
        starts.append(s)
    return starts


def build_segments(audio: MultiChannelAudio, model_cfg: ModelConfig,
                   segment_len: float, segment_hop: float) -> list[SegmentExample]:
    """Recording-level features sliced into overlapping segments.

    Frames come from one transform of the whole recording, so segment
    boundaries introduce no edge effects; short tails are zero padded and
    carry a reduced valid-frame count.
    """
    feats = extract_features(audio, model_cfg.frame_len, model_cfg.hop)
    fr = model_cfg.frame_rate
    total = feats.num_frames
    seg_frames = int(round(segment_len * fr))
    hop_frames = int(round(segment_hop * fr))
    out = []
    for start in segment_starts(total, seg_frames, hop_frames):
        stop = min(start + seg_frames, total)
        valid = stop - start
        sliced = feats.slice_frames(start, stop)
        if valid < seg_frames:
            pad = seg_frames - valid
            sliced = FeatureStreams(
                [np.pad(s, ((0, pad), (0, 0))) for s in sliced.streams],
                sliced.stream_kinds, sliced.pair_index, sliced.frame_rate,
            )
        out.append(SegmentExample(
            span=(start / fr, (start + seg_frames) / fr),
            features=sliced,
            stub_input=sliced.streams[0],
            valid=valid,
        ))
    return out


def make_training_examples(audio: MultiChannelAudio, ref: ActivityTrack,
                           cfg: TrainConfig, model_cfg: ModelConfig) -> list[SegmentExample]:
    """Segments with powerset targets under local speaker re-indexing.

    Speakers present in a segment are re-indexed 0..k-1 by first activity;
    segments with more than S speakers keep the S most active ones. Frames
    with more than two kept speakers collapse to the two with the greatest
    segment activity. Oracle counts are the true concurrency capped at 2.
    """
    segments = build_segments(audio, model_cfg, cfg.segment_len, cfg.segment_hop)
    fr = model_cfg.frame_rate
    space = enumerate_classes(model_cfg.max_speakers)
    total = max((int(round(seg.span[1] * fr)) for seg in segments), default=0)
    ref_frames = ref.to_frames(1.0 / fr, n_frames=total)
    for seg in segments:
        start = int(round(seg.span[0] * fr))
        seg_frames = seg.stub_input.shape[0]
        act = np.zeros((seg_frames, len(ref.speakers)), dtype=bool)
        act[:seg.valid] = ref_frames[start:start + seg.valid]
        counts = act.sum(axis=1)
        totals = act.sum(axis=0)
        present = [j for j in range(len(ref.speakers)) if totals[j] > 0]
        if len(present) > model_cfg.max_speakers:
            present = sorted(present, key=lambda j: (-int(totals[j]), j))[:model_cfg.max_speakers]
        first_active = {j: int(np.argmax(act[:, j])) for j in present}
        present = sorted(present, key=lambda j: (first_active[j], j))
        local_totals = np.array([totals[j] for j in present], dtype=np.float64)
        targets = np.zeros(seg_frames, dtype=np.int64)
        for t in range(seg.valid):
            active = {i for i, j in enumerate(present) if act[t, j]}
            targets[t] = encode_frame(active, space, segment_totals=local_totals)
        seg.targets = targets
        seg.counts = np.minimum(counts, MAX_CONCURRENT).astype(np.int64)
        seg.speaker_map = [ref.speakers[j] for j in present]
    return segments


def example_logits(model, ex: SegmentExample, use_cond_cache: bool = False):
    """Forward dispatch shared by training and inference."""
    if isinstance(model, StandaloneSpatialDiarization):
        return model.logits(ex.features)
    if isinstance(model, ConditionedEend):
        mode = model.config.conditioning
        if mode == "oracle_count":
            return model.logits(ex.stub_input, counts=ex.counts)
        if mode == "none":
            return model.logits(ex.stub_input)
        if use_cond_cache and ex.cond_cache is not None:
            from .nn.tensor import Tensor
            return model.logits(ex.stub_input, cond_override=Tensor(ex.cond_cache))
        return model.logits(ex.stub_input, feats=ex.features)
    raise TypeError(f"cannot train model of type {type(model).__name__}")


@dataclass
class TrainReport:
    records: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.records[0][1]

    @property
    def final_loss(self) -> float:
        return self.records[-1][1]

    def write_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for step, loss, lr in self.records:
                fh.write(json.dumps({"step": step, "loss": loss, "lr": lr}) + "\n")


def train(model, examples: list[SegmentExample], cfg: TrainConfig,
          checkpoint_dir=None, stop_loss: float | None = None) -> TrainReport:
    """Optimize powerset cross-entropy over sampled segment batches.

    frozen_aux freezes the spatial sub-network before stepping;
    joint_finetune unfreezes it and scales the learning rate down.
    Non-finite losses abort with a diagnostic.
    """
    if not examples:
        raise ValueError("no training examples")
    lr = cfg.learning_rate
    frozen_cond = False
    if cfg.stage == "frozen_aux":
        if not isinstance(model, ConditionedEend) or model.spatial is None:
            raise ValueError("frozen_aux stage needs a conditioned model with an auxiliary network")
        model.freeze_aux(True)
        # the condition is constant per segment while the auxiliary is
        # frozen: precompute it once instead of re-running the aux per step
        for ex in examples:
            ex.cond_cache = model.spatial.condition(ex.features).values.data
        frozen_cond = True
    elif cfg.stage == "joint_finetune":
        if isinstance(model, ConditionedEend):
            model.freeze_aux(False)
        lr = cfg.learning_rate * cfg.finetune_lr_scale
    opt = make_optimizer(cfg.optimizer, model.parameters(), lr)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, zlib.crc32(b"batches"))))
    report = TrainReport()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(examples), size=cfg.batch_size)
        opt.zero_grad()
        loss = None
        for i in idx:
            ex = examples[int(i)]
            logits = example_logits(model, ex, use_cond_cache=frozen_cond)
            ce = cross_entropy(logits[:ex.valid], ex.targets[:ex.valid])
            loss = ce if loss is None else loss + ce
        loss = loss * (1.0 / cfg.batch_size)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        loss.backward()
        opt.step()
        report.records.append((step, value, lr))
        if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, ckpt_dir / f"step_{step:06d}.ckpt")
        if stop_loss is not None and value < stop_loss:
            break
    if ckpt_dir:
        save_checkpoint(model, ckpt_dir / "final.ckpt")
    return report


def pretrain_spatial_diarization(examples: list[SegmentExample], cfg: TrainConfig,
                                 model_cfg: ModelConfig, input_kinds: str = "all",
                                 checkpoint_dir=None):
    """Train the standalone spatial diarization network; its checkpoint
    loads directly as the auxiliary of a conditioned model."""
    model = build_standalone(model_cfg, input_kinds=input_kinds)
    sub_cfg = TrainConfig(**{**cfg.to_dict(), "stage": "scratch"})
    report = train(model, examples, sub_cfg, checkpoint_dir=checkpoint_dir)
    return model, report
