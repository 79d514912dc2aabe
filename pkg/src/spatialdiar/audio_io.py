"""Multi-channel WAV reading/writing, RTTM parsing/emission and
max-spacing microphone subset selection."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile


class FormatError(ValueError):
    """Malformed or unsupported audio file."""


class RttmParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class MultiChannelAudio:
    """Synchronised sample matrix (channels x time) with optional geometry."""

    samples: np.ndarray
    sample_rate: int
    mic_positions: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.mic_positions is not None:
            self.mic_positions = np.asarray(self.mic_positions, dtype=np.float64)
            if self.mic_positions.shape != (self.samples.shape[0], 3):
                raise ValueError("mic_positions must be one 3-D point per channel")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def select(self, channels: list[int]) -> "MultiChannelAudio":
        pos = self.mic_positions[list(channels)] if self.mic_positions is not None else None
        return MultiChannelAudio(self.samples[list(channels)], self.sample_rate, pos)


@dataclass
class ActivityTrack:
    """Per-speaker activity intervals over a recording of known duration."""

    speakers: list[str] = field(default_factory=list)
    intervals: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    duration: float = 0.0

    def validate(self) -> None:
        for spk in self.speakers:
            prev_end = -np.inf
            for onset, offset in self.intervals.get(spk, []):
                if not (0.0 <= onset < offset <= self.duration + 1e-9):
                    raise ValueError(f"bad interval ({onset}, {offset}) for {spk}")
                if onset < prev_end:
                    raise ValueError(f"unsorted or overlapping intervals for {spk}")
                prev_end = offset

    def with_duration(self, duration: float) -> "ActivityTrack":
        return ActivityTrack(list(self.speakers), {s: list(v) for s, v in self.intervals.items()},
                             duration)

    def speech_union(self) -> list[tuple[float, float]]:
        all_iv = sorted(iv for ivs in self.intervals.values() for iv in ivs)
        return merge_intervals(all_iv)

    def to_frames(self, frame: float, n_frames: int | None = None) -> np.ndarray:
        """Frame-discretised activity (n_frames x speakers) by midpoint sampling."""
        if n_frames is None:
            n_frames = int(round(self.duration / frame))
        out = np.zeros((n_frames, len(self.speakers)), dtype=bool)
        mids = (np.arange(n_frames) + 0.5) * frame
        for j, spk in enumerate(self.speakers):
            for onset, offset in self.intervals.get(spk, []):
                out[:, j] |= (mids > onset) & (mids < offset)
        return out


def merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of possibly overlapping (onset, offset) pairs."""
    merged: list[list[float]] = []
    for onset, offset in sorted(intervals):
        if merged and onset <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], offset)
        else:
            merged.append([onset, offset])
    return [(a, b) for a, b in merged]


def frames_to_track(active: np.ndarray, speakers: list[str], frame: float,
                    duration: float | None = None) -> ActivityTrack:
    """Inverse of to_frames: runs of active frames become intervals."""
    n_frames = active.shape[0]
    if duration is None:
        duration = n_frames * frame
    intervals: dict[str, list[tuple[float, float]]] = {}
    kept: list[str] = []
    for j, spk in enumerate(speakers):
        col = active[:, j]
        ivs = []
        start = None
        for t in range(n_frames):
            if col[t] and start is None:
                start = t
            elif not col[t] and start is not None:
                ivs.append((start * frame, t * frame))
                start = None
        if start is not None:
            ivs.append((start * frame, min(n_frames * frame, duration)))
        if ivs:
            intervals[spk] = ivs
            kept.append(spk)
    return ActivityTrack(kept, intervals, duration)


# ----------------------------------------------------------------------
# WAV

def read_wav(path) -> MultiChannelAudio:
    """Read a PCM16 or float32 WAV as channels x time in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises bare ValueError on bad headers
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] == 0:
        raise FormatError(f"{path} has no channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported sample format {data.dtype} in {path}")
    return MultiChannelAudio(samples.T, int(rate))


def write_wav(path, audio: MultiChannelAudio, dtype: str = "float32") -> None:
    """Companion writer; float32 round-trips bit exactly through read_wav."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = audio.samples.T
    if dtype == "float32":
        wavfile.write(str(path), audio.sample_rate, data.astype(np.float32))
    elif dtype == "int16":
        clipped = np.clip(data, -1.0, 1.0)
        wavfile.write(str(path), audio.sample_rate, (clipped * 32767.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported dtype {dtype}")


# ----------------------------------------------------------------------
# RTTM

def parse_rttm(text) -> ActivityTrack:
    """Parse SPEAKER records; same-speaker overlaps are merged.

    Accepts a string, an open text stream, or an iterable of lines.
    """
    if isinstance(text, str):
        lines = text.splitlines()
    elif isinstance(text, io.TextIOBase):
        lines = text.read().splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in text]
    raw: dict[str, list[tuple[float, float]]] = {}
    order: list[str] = []
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(";;") or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmParseError(f"expected 10 RTTM fields, got {len(fields)}", i)
        try:
            onset = float(fields[3])
            dur = float(fields[4])
        except ValueError:
            raise RttmParseError(f"non-numeric onset/duration: {fields[3]!r} {fields[4]!r}", i)
        name = fields[7]
        if dur <= 0:
            continue
        if name not in raw:
            raw[name] = []
            order.append(name)
        raw[name].append((onset, onset + dur))
    intervals = {spk: merge_intervals(ivs) for spk, ivs in raw.items()}
    duration = max((iv[1] for ivs in intervals.values() for iv in ivs), default=0.0)
    return ActivityTrack(order, intervals, duration)


def parse_rttm_file(path) -> ActivityTrack:
    return parse_rttm(Path(path).read_text())


def emit_rttm(track: ActivityTrack, file_id: str) -> str:
    """RTTM lines with millisecond rounding; empty speakers emit nothing."""
    lines = []
    for spk in track.speakers:
        for onset, offset in track.intervals.get(spk, []):
            lines.append(
                f"SPEAKER {file_id} 1 {onset:.3f} {offset - onset:.3f} <NA> <NA> {spk} <NA> <NA>"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def write_rttm(path, track: ActivityTrack, file_id: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_rttm(track, file_id))


# ----------------------------------------------------------------------
# microphone subset selection

def select_channels(mic_positions, k: int) -> list[int]:
    """Greedy max-min-spacing subset of k microphones, returned sorted.

    Seeds with the farthest pair, then repeatedly adds the microphone whose
    minimum distance to the already selected set is largest. Ties break
    toward the lowest index.
    """
    pos = np.asarray(mic_positions, dtype=np.float64)
    n = pos.shape[0]
    if not np.all(np.isfinite(pos)):
        raise ValueError("microphone positions must be finite")
    if k > n:
        raise ValueError(f"requested {k} channels but only {n} available")
    if k <= 0:
        raise ValueError("k must be positive")
    if k == n:
        return list(range(n))
    if k == 1:
        return [0]
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    best = (-1.0, 0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] > best[0]:
                best = (dist[i, j], i, j)
    selected = [best[1], best[2]]
    while len(selected) < k:
        remaining = [i for i in range(n) if i not in selected]
        scores = [min(dist[i, j] for j in selected) for i in remaining]
        # argmax keeps the first maximum, i.e. the lowest remaining index
        selected.append(remaining[int(np.argmax(scores))])
    return sorted(selected)
