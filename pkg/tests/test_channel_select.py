import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dasrkit.audio import MultichannelWaveform
from dasrkit.augment import RoomSpec, simulate_rir
from dasrkit.channel_select import (EvConfig, envelope_variance_scores, mel_filterbank,
                                    select_channels)


def _modulated(rng, channels=3, n=32000):
    env = np.repeat(rng.uniform(0.05, 1.0, n // 800), 800)
    return env * rng.standard_normal((channels, n))


def test_mel_filterbank_shape_and_coverage():
    fb = mel_filterbank(40, 1024, 16000)
    assert fb.shape == (40, 513)
    assert np.all(fb.max(axis=1) > 0)
    assert np.all(fb >= 0)


def test_identical_channels_score_equal(rng):
    x = _modulated(rng, 1)
    scores = envelope_variance_scores(MultichannelWaveform(np.repeat(x, 3, 0), 16000))
    assert np.ptp(scores) == 0.0


def test_gain_does_not_change_score(rng):
    x = _modulated(rng, 2)
    w = MultichannelWaveform(np.vstack([x, 0.5 * x[:1]]), 16000)
    s = envelope_variance_scores(w)
    assert s[2] == pytest.approx(s[0], rel=1e-9)


def test_silent_channel_scores_zero(rng):
    x = _modulated(rng, 2)
    s = envelope_variance_scores(MultichannelWaveform(np.vstack([x, np.zeros((1, x.shape[1]))]),
                                                      16000))
    assert s[2] == 0.0 and np.all(np.isfinite(s))


def test_clean_speech_beats_reverberant_copy(speech):
    room = RoomSpec(5.0, 6.0, 3.0, (0.9,) * 6, (1.0, 1.5, 1.5), (3.5, 4.0, 1.2))
    rir = simulate_rir(room, 16000, 9600)
    wet = np.convolve(speech.samples, rir.samples)[: len(speech)]
    wet *= np.std(speech.samples) / np.std(wet)
    s = envelope_variance_scores(MultichannelWaveform(np.stack([speech.samples, wet]), 16000))
    assert s[0] > s[1]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(1e-3, 1e3))
def test_scale_invariance_and_permutation(seed, scale):
    r = np.random.default_rng(seed)
    x = _modulated(r, 3, 16000)
    base = envelope_variance_scores(MultichannelWaveform(x, 16000))
    scaled = envelope_variance_scores(MultichannelWaveform(scale * x, 16000))
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-9)
    perm = r.permutation(3)
    np.testing.assert_allclose(envelope_variance_scores(MultichannelWaveform(x[perm], 16000)),
                               base[perm], rtol=1e-12)


def test_selection_counts_and_ties():
    assert len(select_channels(np.arange(10.0), 0.8)) == 8
    assert select_channels([3.0], 0.1) == [0]
    assert select_channels([1.0, 1.0, 1.0, 1.0], 0.8) == [0, 1, 2]
    assert select_channels([0.1, 0.9, 0.5, 0.7], 0.5) == [1, 3]


def test_config_validation():
    with pytest.raises(ValueError):
        EvConfig(keep_fraction=0.0)
    with pytest.raises(ValueError):
        EvConfig(num_subbands=0)
