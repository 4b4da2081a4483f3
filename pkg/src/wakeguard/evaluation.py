"""Frame accuracy, perturbation SNR, event extraction and DET curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from . import network
from .autodiff import Tape

WAKE_CLASS = 2
NO_SPEECH_CLASS = 1


# --- models as differentiable callables ------------------------------------

def model_fn(params: network.ModelParams):
    """Wrap params as ``f(x, need_grad) -> (logits, vjp)`` in eval mode.

    `vjp(upstream)` returns d<logits, upstream>/dx.  Attacks and metrics
    only see this interface, so toy models can stand in for networks.
    """
    def f(x, need_grad=False):
        if not need_grad:
            return network.forward(x, params, "eval"), None
        tape = Tape()
        logits = network.forward(x, params, "eval", tape=tape)
        return logits, lambda upstream: tape.backward(upstream)[1]
    f.params = params
    return f


def as_model(model):
    return model_fn(model) if isinstance(model, network.ModelParams) else model


# --- universal perturbation placement --------------------------------------

def clip_offsets(n_clips, width, seed):
    """Per-clip phase of the tiled perturbation, fixed by `seed`."""
    if width < 1:
        raise ValueError("perturbation width must be >= 1")
    return np.random.default_rng([seed, 7]).integers(0, width, size=n_clips)


def tile_delta(delta, n_frames, offset=0):
    """Repeat a (W, F) perturbation along time so frame t gets delta[(t + offset) % W]."""
    delta = np.asarray(delta)
    idx = (np.arange(n_frames) + offset) % delta.shape[0]
    return delta[idx]


def tiled_batch(delta, n_frames, offsets):
    return np.stack([tile_delta(delta, n_frames, o) for o in offsets])


def untile_grad(g, width, offsets):
    """Adjoint of :func:`tiled_batch`: fold frame gradients back onto delta rows."""
    out = np.zeros((width, g.shape[-1]))
    for gi, o in zip(g, offsets):
        idx = (np.arange(gi.shape[0]) + o) % width
        np.add.at(out, idx, gi)
    return out


def apply_delta(X, delta=None, offsets=None):
    if delta is None:
        return X
    if offsets is None:
        offsets = np.zeros(len(X), dtype=np.int64)
    return X + tiled_batch(delta, X.shape[1], offsets)


# --- metrics ---------------------------------------------------------------

def _stack(clips):
    X = np.stack([c.spec.values for c in clips])
    Y = np.stack([c.labels for c in clips])
    return X, Y


def predictions(model, X, delta=None, offsets=None, batch_size=16):
    f = as_model(model)
    out = []
    for i in range(0, len(X), batch_size):
        o = None if offsets is None else offsets[i:i + batch_size]
        out.append(f(apply_delta(X[i:i + batch_size], delta, o))[0].argmax(axis=-1))
    return np.concatenate(out)


def mask_accuracy(model, clips, delta=None, offsets=None, speech_only=False, batch_size=16):
    """Fraction of frames whose argmax class equals the label.

    With `speech_only` frames labelled no-speech are left out.
    """
    if not clips:
        raise ValueError("mask_accuracy needs at least one clip")
    X, Y = _stack(clips)
    pred = predictions(model, X, delta, offsets, batch_size)
    keep = Y != NO_SPEECH_CLASS if speech_only else np.ones(Y.shape, bool)
    if not keep.any():
        raise ValueError("no frames to score")
    return float((pred == Y)[keep].mean())


def snr_db(clean, delta, offsets=None):
    """10 log10(sum clean^2 / sum delta^2) with delta tiled as applied; +inf for delta = 0."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim == 2:
        clean = clean[None]
    if offsets is None:
        offsets = np.zeros(len(clean), dtype=np.int64)
    noise = float((tiled_batch(delta, clean.shape[1], offsets) ** 2).sum())
    if noise == 0.0:
        return float("inf")
    return float(10.0 * np.log10((clean ** 2).sum() / noise))


def format_snr(value):
    return "clean" if np.isinf(value) else f"{value:.17g}"


# --- events and DET --------------------------------------------------------

def _runs(mask):
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.flatnonzero(np.diff(m.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(d[::2], d[1::2])]


def frames_to_events(frames, min_gap_frames=10, min_len_frames=5, smooth_window=5):
    """Wake events as half-open frame spans [start, end).

    `frames` is a boolean wake mask or a sequence of class indices.  The
    mask is median smoothed, runs closer than `min_gap_frames` are merged
    and runs shorter than `min_len_frames` dropped.
    """
    frames = np.asarray(frames)
    mask = frames if frames.dtype == bool else frames == WAKE_CLASS
    if smooth_window > 1 and mask.size:
        mask = median_filter(mask.astype(np.uint8), size=smooth_window, mode="nearest").astype(bool)
    merged = []
    for a, b in _runs(mask):
        if merged and a - merged[-1][1] < min_gap_frames:
            merged[-1] = (merged[-1][0], b)
        else:
            merged.append((a, b))
    return [(a, b) for a, b in merged if b - a >= min_len_frames]


@dataclass
class DetCurve:
    thresholds: np.ndarray
    miss_rate: np.ndarray
    fa_per_hour: np.ndarray         # nonincreasing envelope over thresholds
    fa_per_hour_raw: np.ndarray
    n_true_events: int
    hours: float

    @property
    def points(self):
        return list(zip(self.fa_per_hour.tolist(), self.miss_rate.tolist()))


def wake_scores(model, X, batch_size=16, smooth_window=5):
    """Median-smoothed wake-class posterior per frame."""
    f = as_model(model)
    out = []
    for i in range(0, len(X), batch_size):
        out.append(network.softmax(f(X[i:i + batch_size])[0])[..., WAKE_CLASS])
    s = np.concatenate(out)
    if smooth_window > 1:
        s = median_filter(s, size=(1, smooth_window), mode="nearest")
    return s


def det_from_scores(scores, labels, thresholds, frame_hop_s, min_gap_frames=10, min_len_frames=5):
    """DET curve from per-frame wake scores (N, T) and class labels (N, T)."""
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    truth = [frames_to_events(y, min_gap_frames, 1, smooth_window=1) for y in labels]
    n_true = sum(len(t) for t in truth)
    if n_true == 0:
        raise ValueError("DET curve needs at least one true wake event")
    hours = labels.size * frame_hop_s / 3600.0
    miss, fa = [], []
    for thr in thresholds:
        hits = false = 0
        for s, events in zip(scores, truth):
            det = frames_to_events(s >= thr, min_gap_frames, min_len_frames, smooth_window=1)
            hits += sum(any(a < d1 and d0 < b for d0, d1 in det) for a, b in events)
            false += sum(not any(a < d1 and d0 < b for a, b in events) for d0, d1 in det)
        miss.append(1.0 - hits / n_true)
        fa.append(false / hours)
    raw = np.array(fa)
    envelope = np.maximum.accumulate(raw[::-1])[::-1]
    return DetCurve(thresholds, np.array(miss), envelope, raw, n_true, hours)


def det_curve(model, clips, thresholds=None, min_gap_frames=10, min_len_frames=5,
              smooth_window=5, delta=None, offsets=None):
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 101)
    X, Y = _stack(clips)
    scores = wake_scores(model, apply_delta(X, delta, offsets), smooth_window=smooth_window)
    return det_from_scores(scores, Y, thresholds, clips[0].spec.frame_hop_s,
                           min_gap_frames, min_len_frames)


def det_auc(curve, fa_per_hour_cap=10.0):
    """Area under miss rate vs FA/hour on [0, cap], divided by cap."""
    if isinstance(curve, DetCurve):
        pts = curve.points
    else:
        pts = [tuple(map(float, p)) for p in curve]
    if len(pts) < 2:
        raise ValueError("det_auc needs at least two points")
    if fa_per_hour_cap <= 0:
        raise ValueError("fa_per_hour_cap must be positive")
    pts = sorted(pts, key=lambda p: (p[0], -p[1]))
    if pts[0][0] > 0:
        pts.insert(0, (0.0, pts[0][1]))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= fa_per_hour_cap:
            break
        if x1 > fa_per_hour_cap:
            y1 = y0 + (y1 - y0) * (fa_per_hour_cap - x0) / (x1 - x0)
            x1 = fa_per_hour_cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    last_x, last_y = pts[-1]
    if last_x < fa_per_hour_cap:
        area += last_y * (fa_per_hour_cap - last_x)
    return area / fa_per_hour_cap
