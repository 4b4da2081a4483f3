import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_model
from wakeguard import evaluation, training
from wakeguard.audio import MelSpectrogram

HOP = 0.01


def onehot_clips(labels):
    """Clips whose features are scaled one-hot labels, so argmax(x) recovers the label."""
    out = []
    for i, y in enumerate(labels):
        x = 5.0 * np.eye(3)[y]
        out.append(training.LabeledClip(MelSpectrogram(x, HOP, 0.025, 3, 1e-10), np.asarray(y), f"c{i}"))
    return out


def identity(x, need_grad=False):
    return x, (lambda up: up) if need_grad else None


def constant(k):
    def f(x, need_grad=False):
        z = np.zeros(x.shape[:-1] + (3,))
        z[..., k] = 1.0
        return z, None
    return f


def _labels(n=20, t=100, seed=0):
    return np.random.default_rng(seed).integers(0, 3, size=(n, t))


def test_perfect_predictor_scores_one():
    clips = onehot_clips(_labels())
    assert evaluation.mask_accuracy(identity, clips) == 1.0
    assert evaluation.mask_accuracy(identity, clips, speech_only=True) == 1.0


def test_constant_predictor_near_third():
    Y = _labels(40, 200)
    clips = onehot_clips(Y)
    for k in range(3):
        acc = evaluation.mask_accuracy(constant(k), clips)
        assert acc == pytest.approx((Y == k).mean(), abs=1e-15)
        assert acc == pytest.approx(1 / 3, abs=0.02)


def test_speech_only_drops_no_speech_frames():
    Y = _labels()
    clips = onehot_clips(Y)
    acc = evaluation.mask_accuracy(constant(training.NO_SPEECH), clips, speech_only=True)
    assert acc == 0.0
    with pytest.raises(ValueError):
        evaluation.mask_accuracy(identity, onehot_clips(np.ones((2, 5), int)), speech_only=True)
    with pytest.raises(ValueError):
        evaluation.mask_accuracy(identity, [])


def test_zero_delta_equals_clean():
    model = toy_model("baseline", 0)
    rng = np.random.default_rng(0)
    clips = [training.LabeledClip(MelSpectrogram(rng.standard_normal((30, 8)), HOP, 0.025, 8, 1e-10),
                                  rng.integers(0, 3, 30), str(i)) for i in range(5)]
    clean = evaluation.mask_accuracy(model, clips)
    offs = evaluation.clip_offsets(5, 7, 0)
    assert evaluation.mask_accuracy(model, clips, np.zeros((7, 8)), offs) == clean


def test_snr_twenty_db():
    clean = np.ones((50, 8))
    assert evaluation.snr_db(clean, 0.1 * np.ones((10, 8))) == pytest.approx(20.0, abs=1e-12)
    assert evaluation.snr_db(clean, np.zeros((10, 8))) == float("inf")
    assert evaluation.format_snr(float("inf")) == "clean"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0))
def test_snr_scaling_law(seed, a):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal((3, 40, 4))
    d = rng.standard_normal((9, 4))
    offs = rng.integers(0, 9, 3)
    s1 = evaluation.snr_db(clean, d, offs)
    assert evaluation.snr_db(clean, a * d, offs) == pytest.approx(s1 - 20 * np.log10(a), abs=1e-9)


def test_tiling_phase():
    d = np.arange(6.0).reshape(3, 2)
    t = evaluation.tile_delta(d, 7, offset=1)
    assert t[:, 0].tolist() == [2, 4, 0, 2, 4, 0, 2]
    with pytest.raises(ValueError):
        evaluation.clip_offsets(3, 0, 0)


def test_events_merge_and_drop():
    m = np.zeros(60, bool)
    m[5:12] = True          # 7 frames
    m[15:20] = True         # gap of 3 -> merged
    m[40:43] = True         # too short alone
    ev = evaluation.frames_to_events(m, min_gap_frames=5, min_len_frames=5, smooth_window=1)
    assert ev == [(5, 20)]
    lab = np.where(m, 2, 0)
    assert evaluation.frames_to_events(lab, 5, 5, 1) == ev


def test_events_median_smoothing_fills_hole():
    m = np.zeros(30, bool)
    m[5:15] = True
    m[9] = False
    assert evaluation.frames_to_events(m, 0, 1, smooth_window=3) == [(5, 15)]
    assert evaluation.frames_to_events(m, 0, 1, smooth_window=1) == [(5, 9), (10, 15)]


def _wake_labels(n=12, t=150, seed=0):
    """Half the clips hold one wake run; the rest are wake-free."""
    rng = np.random.default_rng(seed)
    Y = rng.integers(0, 2, size=(n, t))
    for i in range(0, n, 2):
        a = rng.integers(10, t - 40)
        Y[i, a:a + 30] = 2
    return Y


def test_det_threshold_endpoints():
    Y = _wake_labels()
    scores = np.random.default_rng(1).uniform(0.0, 0.999, Y.shape)
    c = evaluation.det_from_scores(scores, Y, [0.0, 1.0], HOP)
    assert c.miss_rate[0] == 0.0            # every frame fires
    assert c.miss_rate[1] == 1.0 and c.fa_per_hour[1] == 0.0     # nothing fires
    assert c.n_true_events == 6
    assert c.hours == pytest.approx(Y.size * HOP / 3600)


def test_perfect_detector_auc_zero():
    Y = _wake_labels()
    scores = (Y == 2).astype(float)
    c = evaluation.det_from_scores(scores, Y, np.linspace(0, 1, 11), HOP)
    assert (c.miss_rate[1:] == 0).all() and (c.fa_per_hour[1:] == 0).all()
    assert evaluation.det_auc(c) == 0.0


def test_det_monotone_and_auc_range():
    Y = _wake_labels(seed=3)
    rng = np.random.default_rng(2)
    scores = np.clip((Y == 2) * 0.5 + rng.uniform(0, 0.6, Y.shape), 0, 1)
    c = evaluation.det_from_scores(scores, Y, np.linspace(0, 1, 41), HOP)
    assert (np.diff(c.fa_per_hour) <= 0).all()
    assert (np.diff(c.miss_rate) >= 0).all()
    assert (c.fa_per_hour >= c.fa_per_hour_raw).all()
    assert 0.0 <= evaluation.det_auc(c) <= 1.0


def test_det_requires_true_events():
    Y = np.zeros((2, 20), int)
    with pytest.raises(ValueError):
        evaluation.det_from_scores(np.zeros(Y.shape), Y, [0.5], HOP)


def test_auc_identities():
    assert evaluation.det_auc([(0, 1), (10, 1)]) == 1.0
    assert evaluation.det_auc([(0, 0), (5, 0)]) == 0.0
    # linear ramp from 1 to 0 on [0, 10]
    assert evaluation.det_auc([(0, 1), (10, 0)]) == pytest.approx(0.5)
    # beyond the cap is clipped by interpolation; the last value extends to the cap
    assert evaluation.det_auc([(0, 1), (20, 0)]) == pytest.approx(0.75)
    assert evaluation.det_auc([(2, 0.5), (4, 0.5)]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        evaluation.det_auc([(0, 1)])
    with pytest.raises(ValueError):
        evaluation.det_auc([(0, 1), (1, 0)], fa_per_hour_cap=0)


def test_det_curve_model_path():
    Y = _wake_labels(4, 60)
    clips = onehot_clips(Y)
    c = evaluation.det_curve(identity, clips, smooth_window=1)
    assert c.miss_rate[-1] == 1.0
    assert evaluation.det_auc(c) == 0.0
