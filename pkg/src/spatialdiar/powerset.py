"""Powerset class space: silence, single speakers and speaker pairs,
with a cap of two concurrent speakers per frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio_io import ActivityTrack, frames_to_track

MAX_CONCURRENT = 2


@dataclass(frozen=True)
class PowersetSpace:
    """Ordered class list: [set()] + singles + lexicographic pairs."""

    max_speakers: int
    classes: tuple[frozenset, ...] = field(default=())

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def enumerate_classes(max_speakers: int) -> PowersetSpace:
    if max_speakers < 1:
        raise ValueError("speaker capacity must be at least 1")
    classes: list[frozenset] = [frozenset()]
    classes += [frozenset({s}) for s in range(max_speakers)]
    classes += [
        frozenset({s, t})
        for s in range(max_speakers)
        for t in range(s + 1, max_speakers)
    ]
    return PowersetSpace(max_speakers, tuple(classes))


def encode_frame(active: set[int], space: PowersetSpace,
                 segment_totals: np.ndarray | None = None) -> int:
    """Class index of an active-speaker set.

    Sets larger than two collapse to the pair with the greatest summed
    segment activity (ties toward lower speaker indices); segment_totals
    must be provided in that case.
    """
    active = set(active)
    for s in active:
        if not 0 <= s < space.max_speakers:
            raise ValueError(f"speaker id {s} out of range for S={space.max_speakers}")
    if len(active) > MAX_CONCURRENT:
        if segment_totals is None:
            raise ValueError("segment_totals required to reduce >2 concurrent speakers")
        # sort by (-activity, index): two largest totals, ties to lower index
        ranked = sorted(active, key=lambda s: (-float(segment_totals[s]), s))
        active = set(ranked[:MAX_CONCURRENT])
    return space.classes.index(frozenset(active))


def decode_frame(index: int, space: PowersetSpace) -> set[int]:
    if not 0 <= index < space.num_classes:
        raise ValueError(f"class index {index} out of range")
    return set(space.classes[index])


@dataclass
class PowersetPosteriors:
    """Row-stochastic (frames x classes) matrix over a powerset space."""

    values: np.ndarray
    space: PowersetSpace

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.space.num_classes:
            raise ValueError("posterior shape does not match class space")

    def validate(self, tol: float = 1e-5) -> None:
        if np.any(self.values < -tol):
            raise ValueError("negative posterior mass")
        if np.max(np.abs(self.values.sum(axis=1) - 1.0)) > tol:
            raise ValueError("posterior rows must sum to 1")

    def argmax_sets(self) -> list[set[int]]:
        # np.argmax takes the first maximum: ties resolve to the lower class
        return [decode_frame(int(i), self.space) for i in np.argmax(self.values, axis=1)]

    def to_activity_matrix(self) -> np.ndarray:
        active = np.zeros((self.values.shape[0], self.space.max_speakers), dtype=bool)
        for t, spk_set in enumerate(self.argmax_sets()):
            for s in spk_set:
                active[t, s] = True
        return active


def posteriors_to_activity(post: PowersetPosteriors, frame_rate: float) -> ActivityTrack:
    """Argmax decode into per-speaker intervals at the given frame rate."""
    active = post.to_activity_matrix()
    speakers = [str(s) for s in range(post.space.max_speakers)]
    return frames_to_track(active, speakers, 1.0 / frame_rate)
