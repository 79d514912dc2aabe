"""Synthetic multi-channel meeting generator.

Far-field plane-wave rendering only: each source reaches each microphone
with the fractional delay implied by the array geometry (applied as a
frequency-domain phase shift) plus independent sensor noise. Sources are
synthetic (tone banks or band-passed noise) with strong random amplitude
modulation, so per-frame energy is a weak cue for the number of active
speakers while phase differences remain clean.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import butter, lfilter

from .audio_io import ActivityTrack, MultiChannelAudio, merge_intervals

SPEED_OF_SOUND = 343.0
SOURCE_KINDS = ("tone_bank", "filtered_noise", "mixed")

SQUARE_ARRAY_10CM = (
    (-0.05, -0.05, 0.0),
    (-0.05, 0.05, 0.0),
    (0.05, 0.05, 0.0),
    (0.05, -0.05, 0.0),
)


@dataclass
class SimConfig:
    num_speakers: int = 2
    mic_positions: tuple = SQUARE_ARRAY_10CM
    speaker_azimuths_deg: tuple = (60.0, -60.0)
    utterance_min: float = 1.5
    utterance_max: float = 4.0
    overlap_target: float = 0.5  # overlapped speech / union speech
    source: str = "filtered_noise"
    noise_db: float = -30.0
    duration: float = 60.0
    seed: int = 0
    sample_rate: int = 16000
    source_gain: float = 0.08
    band_hz: tuple[float, float] = (300.0, 3800.0)
    tone_freqs: tuple = (375.0, 625.0, 875.0, 1375.0, 1875.0, 2375.0, 2875.0, 3375.0)
    env_sigma: float = 1.0
    env_rate_hz: float = 6.0
    utterance_gain_db: tuple[float, float] = (0.0, 0.0)  # per-utterance level spread
    interject_gain_db: float = 0.0  # extra level offset for interjections
    gap_min: float = 0.25
    gap_max: float = 0.9
    p_interject: float = 0.85  # overlap events that are interjections (holder keeps floor)
    p_switch_after_interject: float = 0.15
    p_turn_gap: float = 0.25  # speaker changes across a silence gap
    three_plus_target: float = 0.0  # fraction of total duration with >= 3 active
    echo_tail: bool = False  # optional single reflection
    echo_delay_ms: float = 12.0
    echo_gain: float = 0.3

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("need at least one speaker")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.overlap_target <= 1.0:
            raise ValueError("overlap_target must lie in [0, 1]")
        if self.overlap_target > 0 and self.num_speakers < 2:
            raise ValueError("overlap needs at least two speakers")
        if self.source not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.source!r}")
        if len(self.speaker_azimuths_deg) != self.num_speakers:
            raise ValueError("one azimuth per speaker required")
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("mic_positions must be a list of 3-D points")
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if np.min(d) < 1e-6:
            raise ValueError("coincident microphone positions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mic_positions"] = [list(p) for p in self.mic_positions]
        d["speaker_azimuths_deg"] = list(self.speaker_azimuths_deg)
        d["band_hz"] = list(self.band_hz)
        d["tone_freqs"] = list(self.tone_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for key in ("mic_positions", "speaker_azimuths_deg", "band_hz", "tone_freqs"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in d[key]) \
                    if key == "mic_positions" else tuple(d[key])
        return cls(**d)


@dataclass
class SimStats:
    duration: float
    speech_time: float
    time_by_count: dict[int, float]
    overlap_time: float
    overlap_ratio: float
    three_plus_fraction: float


def _rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(tag.encode()), *extra)))


def _count_frames(utts: list[tuple], duration: float,
                  frame: float = 0.01) -> np.ndarray:
    n = int(round(duration / frame))
    counts = np.zeros(n, dtype=np.int64)
    speakers = {u[0] for u in utts}
    for spk in speakers:
        merged = merge_intervals([(u[1], u[2]) for u in utts if u[0] == spk])
        mids = (np.arange(n) + 0.5) * frame
        active = np.zeros(n, dtype=bool)
        for a, b in merged:
            active |= (mids > a) & (mids < b)
        counts += active
    return counts


def _overlap_ratio(utts, duration) -> float:
    counts = _count_frames(utts, duration)
    speech = np.count_nonzero(counts >= 1)
    return np.count_nonzero(counts >= 2) / speech if speech else 0.0


def _schedule(cfg: SimConfig) -> list[tuple[int, float, float]]:
    """Floor-holder chain with interjections, crossfade turn switches and
    silence gaps, feedback-steered toward the overlap target."""
    rng = _rng(cfg.seed, "schedule")
    utts: list[tuple] = []
    holder = int(rng.integers(cfg.num_speakers))
    t = 0.0
    while t < cfg.duration - 0.4:
        u_len = float(rng.uniform(cfg.utterance_min, cfg.utterance_max))
        end = min(t + u_len, cfg.duration)
        if end - t < 0.3:
            break
        utts.append((holder, t, end, "floor"))
        ratio = _overlap_ratio(utts, cfg.duration)
        # slight positive bias compensates the single-speaker edges every
        # interjection leaves behind
        deficit = cfg.overlap_target + 0.04 - ratio
        want_overlap = cfg.num_speakers >= 2 and ratio < cfg.overlap_target + 0.01
        if want_overlap and (end - t) > 1.0 and rng.random() < cfg.p_interject:
            other = _pick_other(rng, cfg.num_speakers, holder)
            room = end - t
            # cover a larger share of the utterance the further we lag
            cover = float(np.clip(0.6 + 3.0 * deficit, 0.35, 0.96))
            ilen = room * float(rng.uniform(0.92 * cover, min(0.97, 1.06 * cover)))
            start = t + float(rng.uniform(0.02 * room, room - ilen))
            utts.append((other, start, min(start + ilen, cfg.duration), "interject"))
            if rng.random() < cfg.p_switch_after_interject:
                holder = other
            t = end + float(rng.uniform(0.05, 0.35))
        elif want_overlap:
            other = _pick_other(rng, cfg.num_speakers, holder)
            hi = min(1.5, 0.6 * (end - t))
            crossfade = float(rng.uniform(min(0.4, 0.5 * hi), hi))
            t = end - crossfade
            holder = other
        else:
            t = end + float(rng.uniform(cfg.gap_min, cfg.gap_max))
            if rng.random() < cfg.p_turn_gap:
                holder = _pick_other(rng, cfg.num_speakers, holder)
    if cfg.three_plus_target > 0 and cfg.num_speakers >= 3:
        utts = _inject_third_speakers(cfg, rng, utts)
    return utts


def _pick_other(rng, n: int, holder: int) -> int:
    choices = [s for s in range(n) if s != holder]
    if not choices:
        return holder
    return choices[int(rng.integers(len(choices)))]


def _inject_third_speakers(cfg, rng, utts):
    """Short extra utterances inside two-speaker regions until the 3+
    fraction of total duration meets the target."""
    frame = 0.01
    target = cfg.three_plus_target * cfg.duration
    for _ in range(400):
        counts = _count_frames(utts, cfg.duration, frame)
        if np.count_nonzero(counts >= 3) * frame >= target:
            break
        two = counts == 2
        runs = _bool_runs(two)
        runs = [(a, b) for a, b in runs if (b - a) * frame >= 0.3]
        if not runs:
            break
        a, b = runs[int(rng.integers(len(runs)))]
        mid = (a + b) / 2.0 * frame
        room = (b - a) * frame
        length = float(rng.uniform(0.2, min(1.0, room)))
        start = max(0.0, mid - length / 2.0)
        active_there = {u[0] for u in utts if u[1] < mid < u[2]}
        idle = [s for s in range(cfg.num_speakers) if s not in active_there]
        if not idle:
            continue
        spk = idle[int(rng.integers(len(idle)))]
        utts.append((spk, start, min(start + length, cfg.duration), "interject"))
    return utts


def _bool_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _source_signal(cfg: SimConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit-RMS synthetic source with random amplitude modulation."""
    fs = cfg.sample_rate
    kind = cfg.source
    if kind == "mixed":
        kind = "tone_bank" if rng.random() < 0.5 else "filtered_noise"
    if kind == "tone_bank":
        t = np.arange(n) / fs
        base = np.zeros(n)
        for f in cfg.tone_freqs:
            base += np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
        base /= np.sqrt(len(cfg.tone_freqs) / 2.0)
    else:
        white = rng.standard_normal(n)
        b, a = butter(2, cfg.band_hz, btype="band", fs=fs)
        base = lfilter(b, a, white)
        rms = np.sqrt(np.mean(base ** 2))
        base = base / max(rms, 1e-12)
    if cfg.env_sigma > 0:
        knots = max(3, int(np.ceil(n / fs * cfg.env_rate_hz)) + 2)
        g = rng.standard_normal(knots)
        grid = np.linspace(0.0, n - 1, knots)
        smooth = np.interp(np.arange(n), grid, g)
        # exp(sigma*g - sigma^2) has unit mean square for standard normal g
        base = base * np.exp(cfg.env_sigma * smooth - cfg.env_sigma ** 2)
    ramp = min(int(0.01 * fs), n // 4)
    if ramp > 0:
        win = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        base[:ramp] *= win
        base[-ramp:] *= win[::-1]
    return base


def _mic_delays(cfg: SimConfig) -> np.ndarray:
    """Per-speaker per-mic arrival delays in seconds, shifted non-negative.

    A common shift per speaker preserves all inter-channel differences.
    """
    mics = np.asarray(cfg.mic_positions, dtype=np.float64)
    out = np.zeros((cfg.num_speakers, mics.shape[0]))
    for s, az in enumerate(cfg.speaker_azimuths_deg):
        rad = np.deg2rad(az)
        direction = np.array([np.cos(rad), np.sin(rad), 0.0])
        tau = -(mics @ direction) / SPEED_OF_SOUND
        out[s] = tau - tau.min()
    return out


def simulate(cfg: SimConfig) -> tuple[MultiChannelAudio, ActivityTrack]:
    """Render a meeting; the returned activity track is generator truth."""
    fs = cfg.sample_rate
    utts = _schedule(cfg)
    n = int(round(cfg.duration * fs))
    mics = np.asarray(cfg.mic_positions, dtype=np.float64)
    n_mics = mics.shape[0]
    margin = 64
    channels = np.zeros((n_mics, n + 2 * margin))
    delays = _mic_delays(cfg)
    for k, (spk, a, b, role) in enumerate(utts):
        length = int(round((b - a) * fs))
        if length < 8:
            continue
        rng_u = _rng(cfg.seed, "utt", k)
        gain_db = float(rng_u.uniform(*cfg.utterance_gain_db))
        if role == "interject":
            gain_db += cfg.interject_gain_db
        src = _source_signal(cfg, rng_u, length) * cfg.source_gain * 10.0 ** (gain_db / 20.0)
        if cfg.echo_tail:
            d = int(cfg.echo_delay_ms * fs / 1000.0)
            echoed = src.copy()
            if d < length:
                echoed[d:] += cfg.echo_gain * src[:-d]
            src = echoed
        spec = np.fft.rfft(src, length + margin)
        freqs = np.fft.rfftfreq(length + margin, 1.0 / fs)
        start = int(round(a * fs))
        for m in range(n_mics):
            shifted = np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * delays[spk, m]),
                                   length + margin)
            stop = min(start + length + margin, channels.shape[1])
            channels[m, start:stop] += shifted[:stop - start]
    channels = channels[:, :n]
    rng_noise = _rng(cfg.seed, "noise")
    sigma = cfg.source_gain * 10.0 ** (cfg.noise_db / 20.0)
    channels = channels + rng_noise.normal(0.0, sigma, size=channels.shape)
    peak = np.max(np.abs(channels))
    if peak > 0.99:
        channels *= 0.99 / peak  # common rescale leaves phase differences intact
    audio = MultiChannelAudio(channels, fs, mic_positions=mics)
    speakers = sorted({u[0] for u in utts})
    names = [f"spk{s}" for s in speakers]
    intervals = {
        f"spk{s}": merge_intervals([(u[1], u[2]) for u in utts if u[0] == s])
        for s in speakers
    }
    track = ActivityTrack(names, intervals, cfg.duration)
    track.validate()
    return audio, track


def spectrally_identical_pair(cfg: SimConfig) -> tuple[MultiChannelAudio, ActivityTrack]:
    """Two spatially separated but spectrally identical sources with high
    overlap: only spatial cues distinguish the speakers."""
    if cfg.num_speakers != 2:
        raise ValueError("spectrally identical pair needs exactly two speakers")
    az = cfg.speaker_azimuths_deg
    if abs(az[0] - az[1]) < 1e-9:
        raise ValueError("speaker azimuths must differ")
    if cfg.overlap_target < 0.7:
        cfg = SimConfig(**{**cfg.to_dict(), "overlap_target": 0.7})
    return simulate(cfg)


def dataset_stats(ref: ActivityTrack, frame: float = 0.01) -> SimStats:
    """Exact frame counting of speech, per-count overlap and 3+ fraction."""
    n = int(round(ref.duration / frame))
    frames = ref.to_frames(frame, n_frames=n)
    counts = frames.sum(axis=1)
    by_count: dict[int, float] = {}
    for c in range(1, int(counts.max()) + 1 if n else 1):
        t = float(np.count_nonzero(counts == c)) * frame
        if t > 0:
            by_count[c] = t
    speech = float(np.count_nonzero(counts >= 1)) * frame
    overlap = float(np.count_nonzero(counts >= 2)) * frame
    three_plus = float(np.count_nonzero(counts >= 3)) * frame
    return SimStats(
        duration=ref.duration,
        speech_time=speech,
        time_by_count=by_count,
        overlap_time=overlap,
        overlap_ratio=overlap / speech if speech else 0.0,
        three_plus_fraction=three_plus / ref.duration if ref.duration else 0.0,
    )
