"""Synthetic wake-word data, manifests, the frame loss and the Adam trainer."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import cortical, network
from .audio import FrontendConfig, MelSpectrogram, Waveform, lfbe, load_wav, quantize16, write_wav

log = logging.getLogger(__name__)

WAKE, NO_SPEECH, OTHER = 2, 1, 0      # class indices


@dataclass
class LabeledClip:
    spec: MelSpectrogram
    labels: np.ndarray              # class indices {0, 1, 2}, one per frame
    source_id: str = ""
    snr_db: float = float("inf")
    loss_mask: np.ndarray = None    # 0 near word boundaries, else 1
    wave: Waveform = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.spec.n_frames:
            raise ValueError(f"{self.source_id}: {len(self.labels)} labels for "
                             f"{self.spec.n_frames} frames")
        if self.loss_mask is None:
            self.loss_mask = np.ones(len(self.labels))


# --- loss ------------------------------------------------------------------

def cross_entropy(logits, labels, weights=None, mask=None):
    """Mean frame cross-entropy and its gradient w.r.t. the logits.

    `weights` is a per-class weight vector; `mask` a per-frame weight
    (e.g. zero at ambiguous word boundaries).  The mean is weighted, so
    unit weights reproduce the plain mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} != logits frames {logits.shape[:-1]}")
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must be class indices in [0, {k - 1}]")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.eye(k)[labels]
    nll = -(logp * onehot).sum(axis=-1)
    w = np.ones(labels.shape)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)[labels]
    if mask is not None:
        w = w * np.asarray(mask, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("all frames carry zero loss weight")
    loss = float((w * nll).sum() / total)
    grad = (np.exp(logp) - onehot) * (w / total)[..., None]
    return loss, grad


# --- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    minutes: float = 20.0
    clip_s: float = 2.0
    positive_rate: float = 0.15     # target fraction of wake-word frames
    snr_min_db: float = 10.0
    snr_max_db: float = 30.0
    noise: bool = True
    template_s: float = 0.5
    pitch_jitter: float = 0.2
    stretch_jitter: float = 0.2
    max_negatives: int = 2
    boundary_frames: int = 2
    word_rms: float = 0.1

    @property
    def n_clips(self):
        return max(1, int(round(self.minutes * 60.0 / self.clip_s)))

    @property
    def positive_clip_prob(self):
        """Chance a clip carries one wake word, matching positive_rate on average."""
        return self.positive_rate * self.clip_s / self.template_s


def _chirp(t, knots_t, knots_f, sr):
    freq = np.interp(t, knots_t, knots_f)
    return np.sin(2 * np.pi * np.cumsum(freq) / sr)


def _syllables(n, bounds):
    env = np.zeros(n)
    for a, b in bounds:
        i0, i1 = int(a * n), max(int(a * n) + 2, int(b * n))
        env[i0:i1] = np.hanning(i1 - i0)
    return env


def wake_word(sr, pitch=1.0, stretch=1.0, template_s=0.5):
    """Two-syllable two-formant up-chirp; pitch scales frequency, stretch duration."""
    n = int(round(template_s * stretch * sr))
    t = np.arange(n)
    knots = [0, 0.45 * n, n]
    sig = 0.6 * _chirp(t, knots, np.array([500, 900, 650]) * pitch, sr)
    sig += 0.4 * _chirp(t, knots, np.array([1400, 2200, 1800]) * pitch, sr)
    return sig * _syllables(n, [(0.0, 0.5), (0.42, 1.0)])


def other_word(sr, rng):
    """A distractor: random chirp, steady two-tone, or time-reversed wake word, in 1-3 syllables."""
    kind = rng.integers(3)
    dur = rng.uniform(0.25, 0.7)
    n = int(round(dur * sr))
    t = np.arange(n)
    if kind == 2:
        return wake_word(sr, rng.uniform(0.8, 1.2), dur / 0.5)[::-1].copy()
    if kind == 0:
        f1 = rng.uniform(300, 1200, size=2)
        f2 = rng.uniform(1200, 3500, size=2)
    else:
        f1 = np.repeat(rng.uniform(300, 1200), 2)
        f2 = np.repeat(rng.uniform(1200, 3500), 2)
    sig = 0.6 * _chirp(t, [0, n], f1, sr) + 0.4 * _chirp(t, [0, n], f2, sr)
    # 1-3 overlapping syllables, like the wake word, so every word is amplitude modulated
    k = int(rng.integers(1, 4))
    edges = np.linspace(0.0, 1.0, k + 1)
    bounds = [(max(0.0, a - 0.04), min(1.0, b + 0.04)) for a, b in zip(edges, edges[1:])]
    return sig * _syllables(n, bounds)


def _frame_labels(spans, n_frames, fcfg: FrontendConfig):
    centers = (np.arange(n_frames) * fcfg.hop_length + fcfg.win_length / 2) / fcfg.sample_rate_hz
    labels = np.full(n_frames, NO_SPEECH, dtype=np.int64)
    for start, end, cls in spans:
        labels[(centers >= start) & (centers < end)] = cls
    return labels


def boundary_mask(labels, width):
    """Zero loss weight within `width` frames of every label change."""
    mask = np.ones(len(labels))
    for i in np.flatnonzero(np.diff(labels) != 0):
        mask[max(0, i + 1 - width):i + 1 + width] = 0.0
    return mask


def synth_clip(index, cfg: SynthConfig, fcfg: FrontendConfig, seed):
    rng = np.random.default_rng([seed, index])
    sr = fcfg.sample_rate_hz
    words = []
    if rng.random() < cfg.positive_clip_prob:
        sig = wake_word(sr, 1 + rng.uniform(-cfg.pitch_jitter, cfg.pitch_jitter),
                        1 + rng.uniform(-cfg.stretch_jitter, cfg.stretch_jitter), cfg.template_s)
        words.append((sig, WAKE))
    for _ in range(rng.integers(cfg.max_negatives + 1)):
        words.append((other_word(sr, rng), OTHER))
    order = rng.permutation(len(words))
    words = [words[i] for i in order]
    margin, min_gap = 0.05, 0.08
    avail = cfg.clip_s - 2 * margin
    while words and sum(len(w) for w, _ in words) / sr + min_gap * (len(words) - 1) > avail:
        drop = max(i for i, (_, c) in enumerate(words) if c == OTHER) \
            if any(c == OTHER for _, c in words) else len(words) - 1
        words.pop(drop)
    n = int(round(cfg.clip_s * sr))
    speech = np.zeros(n)
    spans = []
    if words:
        free = avail - sum(len(w) for w, _ in words) / sr - min_gap * (len(words) - 1)
        gaps = rng.dirichlet(np.ones(len(words) + 1)) * free
        pos = margin + gaps[0]
        for (sig, cls), gap in zip(words, gaps[1:]):
            gain = cfg.word_rms * np.sqrt(2) * 10 ** (rng.uniform(-6, 6) / 20)
            i0 = int(round(pos * sr))
            speech[i0:i0 + len(sig)] += gain * sig
            # label only the audible part; the envelope ramps are near zero
            loud = np.flatnonzero(np.abs(sig) >= 0.01 * np.abs(sig).max())
            spans.append(((i0 + loud[0]) / sr, (i0 + loud[-1] + 1) / sr, cls))
            pos = (i0 + len(sig)) / sr + min_gap + gap
    snr = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db)) if cfg.noise else float("inf")
    audio = speech
    if cfg.noise:
        white = rng.standard_normal(n)
        a = rng.uniform(0.3, 0.95)
        colored = lfilter([1 - a], [1, -a], white)
        colored *= cfg.word_rms * 10 ** (-snr / 20) / np.sqrt(np.mean(colored ** 2))
        audio = speech + colored
    wave_ = Waveform(quantize16(np.clip(audio, -1.0, 1.0)), sr)
    spec = lfbe(wave_, fcfg)
    labels = _frame_labels(spans, spec.n_frames, fcfg)
    return LabeledClip(spec, labels, f"synth-{seed}-{index:05d}", snr,
                       boundary_mask(labels, cfg.boundary_frames), wave_)


def synth_dataset(cfg: SynthConfig = SynthConfig(), seed=0, fcfg: FrontendConfig = FrontendConfig()):
    """Deterministic list of labelled clips; each clip has its own RNG stream."""
    if not 0.0 <= cfg.positive_clip_prob <= 1.0:
        raise ValueError(
            f"positive_rate={cfg.positive_rate} infeasible: at most one {cfg.template_s}s wake word "
            f"per {cfg.clip_s}s clip allows up to {cfg.template_s / cfg.clip_s:.3f}")
    if cfg.clip_s < cfg.template_s * (1 + cfg.stretch_jitter) + 0.1:
        raise ValueError(f"clip_s={cfg.clip_s} too short for a stretched wake word")
    return [synth_clip(i, cfg, fcfg, seed) for i in range(cfg.n_clips)]


def split_dataset(clips, fractions=(0.6, 0.2, 0.2)):
    """Contiguous train/val/test split by clip index."""
    n = len(clips)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return clips[:a], clips[a:b], clips[b:]


# --- manifests -------------------------------------------------------------

def write_manifest(clips, directory, name="manifest.csv"):
    """Write wav + label files for clips with waveforms and a CSV index."""
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for clip in clips:
        if clip.wave is None:
            raise ValueError(f"{clip.source_id}: no waveform to write")
        wav = Path("audio") / f"{clip.source_id}.wav"
        lab = Path("audio") / f"{clip.source_id}.txt"
        write_wav(directory / wav, clip.wave)
        (directory / lab).write_text("".join(f"{int(v) - 1}\n" for v in clip.labels))
        rows.append((wav.as_posix(), lab.as_posix()))
    with open(directory / name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wav_path", "label_path"])
        w.writerows(rows)
    return directory / name


def load_manifest(path, fcfg: FrontendConfig = FrontendConfig(), boundary_frames=2):
    """Clips from a CSV of (wav_path, label_path); paths relative to the CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    clips = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            wav = path.parent / row["wav_path"]
            lab = path.parent / row["label_path"]
            for p in (wav, lab):
                if not p.exists():
                    raise FileNotFoundError(f"{path}: missing file {p}")
            wave_ = load_wav(wav)
            spec = lfbe(wave_, fcfg)
            values = np.array([int(v) for v in lab.read_text().split()], dtype=np.int64)
            if values.size and (values.min() < -1 or values.max() > 1):
                raise ValueError(f"{lab}: labels must be in {{-1, 0, 1}}")
            if values.size != spec.n_frames:
                raise ValueError(f"{lab}: {values.size} labels but {wav} has {spec.n_frames} frames")
            labels = network.label_to_class(values)
            clips.append(LabeledClip(spec, labels, wav.stem, loss_mask=boundary_mask(labels, boundary_frames),
                                     wave=wave_))
    return clips


def stack(clips):
    """(X, Y, M) arrays for equal-length clips."""
    lengths = {c.spec.n_frames for c in clips}
    if len(lengths) != 1:
        raise ValueError(f"clips have differing frame counts {sorted(lengths)}")
    X = np.stack([c.spec.values for c in clips])
    Y = np.stack([c.labels for c in clips])
    M = np.stack([c.loss_mask for c in clips])
    return X, Y, M


# --- training --------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


LR_SCHEDULES = ("constant", "cosine")


def epoch_lr(cfg, epoch):
    """Learning rate used during `epoch` (1-based)."""
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (epoch - 1) / cfg.epochs))
    return cfg.learning_rate


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 16
    seed: int = 0
    class_weights: tuple = (1.0, 1.0, 1.0)
    lr_schedule: str = "constant"   # or "cosine": decays to 0 over the epochs

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned value")


@dataclass
class History:
    rows: list = field(default_factory=list)   # (epoch, split, loss, accuracy)

    def add(self, epoch, split, loss, acc):
        self.rows.append((epoch, split, float(loss), float(acc)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "loss", "accuracy"])
            for e, s, l, a in self.rows:
                w.writerow([e, s, repr(l), repr(a)])


class Adam:
    def __init__(self, params, lr, b1, b2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def input_statistics(X):
    return float(X.mean()), float(X.std())


def feature_cache(X, params, batch_size=8):
    """Cortical features of the normalised inputs, computed once per dataset."""
    z = network.normalise(X, params)
    return np.concatenate([cortical.cortical_features(z[i:i + batch_size], params.bank)
                           for i in range(0, len(z), batch_size)])


def init_model(cfg: network.ModelConfig, train_clips, seed, bank=None, features=None):
    """Initialise weights and fix the data-dependent buffers from the train split."""
    X, _, _ = stack(train_clips)
    params = network.init_params(cfg, np.random.default_rng([seed, 1]), bank, input_statistics(X))
    if cfg.arch == "cortical":
        feats = feature_cache(X, params) if features is None else features
        params.buffers["feat.scale"] = np.sqrt(np.mean(feats ** 2, axis=(0, 1, 2)))
    return params


def evaluate(params, X, Y, M=None, features=None, batch_size=16, weights=None):
    """(mean loss, frame accuracy) in eval mode."""
    losses, correct, total = [], 0, 0
    for i in range(0, len(X), batch_size):
        f = None if features is None else features[i:i + batch_size]
        logits = network.forward(X[i:i + batch_size], params, "eval", features=f)
        m = None if M is None else M[i:i + batch_size]
        losses.append(cross_entropy(logits, Y[i:i + batch_size], weights, m)[0] * len(logits))
        correct += int((logits.argmax(-1) == Y[i:i + batch_size]).sum())
        total += Y[i:i + batch_size].size
    return float(np.sum(losses) / len(X)), correct / total


def train(params: network.ModelParams, train_clips, val_clips, cfg: TrainConfig = TrainConfig(),
          train_features=None, val_features=None):
    """Adam on the masked frame cross-entropy; keeps the best-validation weights.

    Returns (best params, History).  Epoch 0 rows are the initial model.
    """
    if not train_clips:
        raise ValueError("training data is empty")
    params = params.copy()
    X, Y, M = stack(train_clips)
    Xv, Yv, Mv = stack(val_clips) if val_clips else stack(train_clips)
    cortical_arch = params.arch == "cortical"
    if cortical_arch:
        train_features = feature_cache(X, params) if train_features is None else train_features
        val_features = feature_cache(Xv, params) if val_features is None else val_features
    order_rng = np.random.default_rng([cfg.seed, 2])
    drop_rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(params.weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    hist = History()
    loss, acc = evaluate(params, X, Y, M, train_features, weights=cfg.class_weights)
    hist.add(0, "train", loss, acc)
    best_loss, best_acc = evaluate(params, Xv, Yv, Mv, val_features, weights=cfg.class_weights)
    hist.add(0, "val", best_loss, best_acc)
    best = params.copy()
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = epoch_lr(cfg, epoch)
        perm = order_rng.permutation(len(X))
        run_loss, run_correct, run_total = 0.0, 0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[i:i + cfg.batch_size])
            tape = network.Tape()
            feats = train_features[idx] if cortical_arch else None
            logits = network.forward(X[idx], params, "train", drop_rng, tape, features=feats)
            loss, g = cross_entropy(logits, Y[idx], cfg.class_weights, M[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} batch {i // cfg.batch_size}: loss={loss}")
            grads, _ = tape.backward(g)
            opt.step(params.weights, grads)
            run_loss += loss * len(idx)
            run_correct += int((logits.argmax(-1) == Y[idx]).sum())
            run_total += Y[idx].size
        hist.add(epoch, "train", run_loss / len(X), run_correct / run_total)
        vloss, vacc = evaluate(params, Xv, Yv, Mv, val_features, weights=cfg.class_weights)
        if not np.isfinite(vloss):
            raise TrainingDiverged(f"epoch {epoch}: validation loss={vloss}")
        hist.add(epoch, "val", vloss, vacc)
        log.info("epoch %d train loss %.4f acc %.4f | val loss %.4f acc %.4f",
                 epoch, run_loss / len(X), run_correct / run_total, vloss, vacc)
        if vacc > best_acc:
            best_acc, best = vacc, params.copy()
    return best, hist
