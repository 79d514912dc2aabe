"""Spatial input features: reference-channel magnitude plus sin/cos
inter-channel phase differences for every non-redundant microphone pair."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import MultiChannelAudio

FEATURE_MAGIC = b"SDFT0001"


@dataclass
class SpectrogramSet:
    """Complex STFT per channel: (channels, frames, bins)."""

    frames: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int

    @property
    def num_channels(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[2]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class FeatureStreams:
    """Ordered (time x frequency) feature matrices with kind labels.

    Stream 0 is the reference-channel magnitude; for each pair (i, j) one
    cos and one sin IPD stream follow, in pair order.
    """

    streams: list[np.ndarray]
    stream_kinds: list[str]
    pair_index: dict[int, tuple[int, int] | None]
    frame_rate: float

    @property
    def num_streams(self) -> int:
        return len(self.streams)

    @property
    def num_frames(self) -> int:
        return self.streams[0].shape[0]

    def stacked(self) -> np.ndarray:
        return np.stack(self.streams, axis=0)

    def subset(self, kinds_prefix: str) -> "FeatureStreams":
        """Streams whose kind starts with the given prefix (e.g. 'magnitude')."""
        idx = [i for i, k in enumerate(self.stream_kinds) if k.startswith(kinds_prefix)]
        return FeatureStreams(
            [self.streams[i] for i in idx],
            [self.stream_kinds[i] for i in idx],
            {j: self.pair_index[i] for j, i in enumerate(idx)},
            self.frame_rate,
        )

    def slice_frames(self, start: int, stop: int) -> "FeatureStreams":
        return FeatureStreams(
            [s[start:stop] for s in self.streams],
            list(self.stream_kinds),
            dict(self.pair_index),
            self.frame_rate,
        )


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann; a bin-centred tone leaks into adjacent bins only."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft(audio: MultiChannelAudio, frame_len: int = 512, hop: int = 320) -> SpectrogramSet:
    """Hann STFT; frame t covers samples [t*hop, t*hop + frame_len) with
    zero padding at the tail. Input shorter than one frame yields an empty
    frame axis."""
    if frame_len & (frame_len - 1) != 0:
        raise ValueError("frame_len must be a power of two")
    if hop > frame_len:
        raise ValueError("hop must not exceed frame_len")
    x = audio.samples
    n = x.shape[1]
    if n < frame_len:
        empty = np.zeros((x.shape[0], 0, frame_len // 2 + 1), dtype=np.complex128)
        return SpectrogramSet(empty, frame_len, hop, audio.sample_rate)
    n_frames = int(np.ceil(n / hop))
    pad = (n_frames - 1) * hop + frame_len - n
    padded = np.pad(x, ((0, 0), (0, pad)))
    window = hann_window(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    framed = padded[:, idx] * window  # (channels, frames, frame_len)
    return SpectrogramSet(np.fft.rfft(framed, axis=-1), frame_len, hop, audio.sample_rate)


def nonredundant_pairs(channels: int) -> list[tuple[int, int]]:
    """Lexicographically ordered (i, j) with i < j."""
    if channels < 1:
        raise ValueError("need at least one channel")
    return [(i, j) for i in range(channels) for j in range(i + 1, channels)]


def ipd_features(spec: SpectrogramSet, pairs: list[tuple[int, int]] | None = None,
                 ref: int = 0) -> FeatureStreams:
    """Magnitude of the reference channel plus cos/sin IPD per pair.

    IPD for pair (i, j) is angle(spec_i) - angle(spec_j); bins where both
    channels are zero get a phase difference of 0 (cos 1, sin 0).
    """
    if ref >= spec.num_channels:
        raise ValueError(f"reference channel {ref} out of range")
    if pairs is None:
        pairs = nonredundant_pairs(spec.num_channels)
    for i, j in pairs:
        if not (0 <= i < spec.num_channels and 0 <= j < spec.num_channels):
            raise ValueError(f"invalid pair ({i}, {j})")
    phases = np.angle(spec.frames)  # angle(0) == 0, so zero bins give IPD 0
    streams = [np.abs(spec.frames[ref])]
    kinds = ["magnitude"]
    pair_index: dict[int, tuple[int, int] | None] = {0: None}
    for m, (i, j) in enumerate(pairs):
        ipd = phases[i] - phases[j]
        streams.append(np.cos(ipd))
        kinds.append(f"cos_ipd({i},{j})")
        pair_index[len(streams) - 1] = (i, j)
        streams.append(np.sin(ipd))
        kinds.append(f"sin_ipd({i},{j})")
        pair_index[len(streams) - 1] = (i, j)
    return FeatureStreams(streams, kinds, pair_index, spec.frame_rate)


def extract_features(audio: MultiChannelAudio, frame_len: int = 512, hop: int = 320,
                     ref: int = 0) -> FeatureStreams:
    return ipd_features(stft(audio, frame_len, hop), ref=ref)


# ----------------------------------------------------------------------
# debug dump

def save_features(path, feats: FeatureStreams) -> None:
    """Flat binary dump: magic, dims, labels, float32 payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stacked = feats.stacked().astype("<f4")
    blob = bytearray()
    blob += FEATURE_MAGIC
    blob += struct.pack("<3I", *stacked.shape)
    blob += struct.pack("<d", feats.frame_rate)
    for kind in feats.stream_kinds:
        raw = kind.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
    blob += stacked.tobytes()
    path.write_bytes(bytes(blob))


def load_features(path) -> FeatureStreams:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"bad feature file magic in {path}")
    off = 8
    n_streams, n_frames, n_bins = struct.unpack_from("<3I", data, off)
    off += 12
    (frame_rate,) = struct.unpack_from("<d", data, off)
    off += 8
    kinds = []
    for _ in range(n_streams):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        kinds.append(data[off:off + ln].decode("utf-8"))
        off += ln
    payload = np.frombuffer(data, dtype="<f4", count=n_streams * n_frames * n_bins, offset=off)
    stacked = payload.reshape(n_streams, n_frames, n_bins).astype(np.float64)
    pair_index: dict[int, tuple[int, int] | None] = {}
    for i, kind in enumerate(kinds):
        if "(" in kind:
            a, b = kind[kind.index("(") + 1:-1].split(",")
            pair_index[i] = (int(a), int(b))
        else:
            pair_index[i] = None
    return FeatureStreams(list(stacked), kinds, pair_index, frame_rate)
