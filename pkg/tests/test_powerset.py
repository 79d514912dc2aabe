"""Tests for the powerset class codec."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialdiar.powerset import (
    PowersetPosteriors,
    decode_frame,
    encode_frame,
    enumerate_classes,
    posteriors_to_activity,
)


def test_enumerate_small_spaces():
    s2 = enumerate_classes(2)
    assert [set(c) for c in s2.classes] == [set(), {0}, {1}, {0, 1}]
    assert enumerate_classes(3).num_classes == 7
    assert enumerate_classes(4).num_classes == 11


def test_enumerate_rejects_zero():
    with pytest.raises(ValueError):
        enumerate_classes(0)


def test_class_count_law():
    for s in range(1, 9):
        space = enumerate_classes(s)
        assert space.num_classes == 1 + s + s * (s - 1) // 2


def test_encode_silence_and_single():
    space = enumerate_classes(3)
    assert encode_frame(set(), space) == 0
    assert encode_frame({1}, space) == 2


def test_encode_three_speakers_keeps_two_most_active():
    space = enumerate_classes(3)
    totals = np.array([5.0, 9.0, 7.0])
    got = encode_frame({0, 1, 2}, space, segment_totals=totals)
    # brute-force oracle over all pairs: {1, 2} has the largest summed activity
    best_pair = max(itertools.combinations(range(3), 2),
                    key=lambda p: totals[p[0]] + totals[p[1]])
    assert decode_frame(got, space) == set(best_pair) == {1, 2}


def test_encode_three_speaker_tie_prefers_lower_index():
    space = enumerate_classes(4)
    totals = np.array([4.0, 4.0, 4.0, 1.0])
    got = encode_frame({0, 1, 2}, space, segment_totals=totals)
    assert decode_frame(got, space) == {0, 1}


def test_encode_out_of_range_speaker():
    space = enumerate_classes(2)
    with pytest.raises(ValueError):
        encode_frame({2}, space)


def test_decode_basics():
    space = enumerate_classes(3)
    assert decode_frame(0, space) == set()
    assert decode_frame(5, space) == {0, 2}
    with pytest.raises(ValueError):
        decode_frame(7, space)


def test_round_trip_exhaustive():
    for s in range(1, 9):
        space = enumerate_classes(s)
        sets = [set()] + [{a} for a in range(s)] + \
               [{a, b} for a in range(s) for b in range(a + 1, s)]
        for active in sets:
            assert decode_frame(encode_frame(active, space), space) == active


def test_posteriors_silence_everywhere():
    space = enumerate_classes(2)
    values = np.zeros((10, 4))
    values[:, 0] = 1.0
    track = posteriors_to_activity(PowersetPosteriors(values, space), 50.0)
    assert track.speakers == []


def test_posteriors_constructed_intervals():
    space = enumerate_classes(2)
    values = np.zeros((100, 4))
    values[:50, 1] = 1.0       # {0}
    values[50:, 3] = 1.0       # {0, 1}
    track = posteriors_to_activity(PowersetPosteriors(values, space), 50.0)
    assert track.intervals["0"] == [(0.0, 2.0)]
    assert track.intervals["1"] == [(1.0, 2.0)]


def test_posteriors_uniform_ties_to_silence():
    space = enumerate_classes(2)
    values = np.full((20, 4), 0.25)
    track = posteriors_to_activity(PowersetPosteriors(values, space), 50.0)
    assert track.speakers == []


def test_posterior_validation():
    space = enumerate_classes(2)
    good = PowersetPosteriors(np.full((5, 4), 0.25), space)
    good.validate()
    bad = PowersetPosteriors(np.full((5, 4), 0.3), space)
    with pytest.raises(ValueError):
        bad.validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_argmax_invariant_to_monotone_rescale(seed):
    rng = np.random.default_rng(seed)
    space = enumerate_classes(3)
    values = rng.dirichlet(np.ones(space.num_classes), size=40)
    post = PowersetPosteriors(values, space)
    scale = rng.uniform(0.5, 3.0, size=(40, 1))
    rescaled = PowersetPosteriors(values * scale, space)  # rows no longer sum to 1
    a = posteriors_to_activity(post, 50.0)
    b = posteriors_to_activity(rescaled, 50.0)
    assert a.speakers == b.speakers
    assert a.intervals == b.intervals
