"""Universal white-box perturbations of the log-mel input: FGSM, PGD, DeepFool, CW.

One perturbation of shape (window, n_mels) is shared by every clip.  It
is tiled along time with a random phase per clip, so an attack must work
wherever it lands.  Every model is accessed as ``f(x, need_grad) ->
(logits, vjp)`` (see :func:`wakeguard.evaluation.model_fn`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensorio
from .evaluation import apply_delta, as_model, clip_offsets, mask_accuracy, snr_db, untile_grad
from .training import cross_entropy

METHODS = ("fgsm", "pgd", "deepfool", "cw")

# schedule defaults: (iterations, eval_every) and for pgd also examples
SCHEDULES = {
    "fgsm": dict(iterations=4000, eval_every=400),
    "deepfool": dict(iterations=4000, eval_every=400),
    "cw": dict(iterations=4000, eval_every=400),
    "pgd": dict(examples=250, iterations=100, eval_every=25),
}


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 0.015
    target: int = 1
    iterations: int | None = None
    eval_every: int | None = None
    examples: int | None = None     # pgd only
    step_size: float | None = None  # pgd; epsilon / 10 when unset
    c: float = 1.0                  # cw penalty weight
    kappa: float = 0.0              # cw margin confidence
    cw_lr: float = 1.0
    overshoot: float = 0.02         # deepfool
    window: int = 31                # frames of the universal perturbation
    batch_size: int = 1             # clips per update step
    trials: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.target not in (0, 1, 2):
            raise ValueError("target must be a class index in {0, 1, 2}")
        if self.method == "cw" and not self.c > 0:
            raise ValueError("cw needs c > 0")
        if self.window < 1 or self.batch_size < 1 or self.trials < 1:
            raise ValueError("window, batch_size and trials must be >= 1")

    def resolved(self):
        """Copy with schedule defaults and the pgd step size filled in; validated."""
        filled = {k: v for k, v in SCHEDULES[self.method].items() if getattr(self, k) is None}
        if self.method == "pgd" and self.step_size is None:
            filled["step_size"] = self.epsilon / 10.0
        cfg = replace(self, **filled)
        if cfg.iterations < 1:
            raise ValueError("iterations must be >= 1")
        span = cfg.examples if cfg.method == "pgd" else cfg.iterations
        if cfg.method == "pgd" and span < 1:
            raise ValueError("examples must be >= 1")
        if cfg.eval_every < 1 or span % cfg.eval_every:
            raise ValueError(f"eval_every={cfg.eval_every} must divide the schedule length {span}")
        return cfg

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))


@dataclass
class UniversalPerturbation:
    delta: np.ndarray
    epsilon: float
    history: list = field(default_factory=list)     # (step, accuracy, snr_db)
    best_delta: np.ndarray = None
    best_accuracy: float = float("inf")

    def record(self, step, accuracy, snr):
        """Log an evaluation; keeps the first delta reaching the minimum accuracy."""
        self.history.append((step, float(accuracy), float(snr)))
        if accuracy < self.best_accuracy:
            self.best_accuracy = float(accuracy)
            self.best_delta = self.delta.copy()


@dataclass
class AttackResult:
    perturbation: UniversalPerturbation
    clean_accuracy: float
    attacked_accuracy: float        # mean over trials of each trial's best accuracy
    attacked_std: float
    snr_db: float                   # of the returned (lowest accuracy) perturbation
    config: AttackConfig
    trials: list = field(default_factory=list)
    slack: float = 0.0              # best includes step 0, so attacked <= clean exactly


def project_linf(delta, epsilon):
    """Clamp elementwise to [-epsilon, epsilon]."""
    return np.clip(delta, -epsilon, epsilon)


# --- single steps ----------------------------------------------------------

def _targets(target, shape):
    t = np.asarray(target)
    return np.broadcast_to(t, shape) if t.ndim == 0 else t


def loss_grad(model, x, target):
    """Mean cross-entropy toward `target` and its gradient w.r.t. x."""
    f = as_model(model)
    logits, vjp = f(x, True)
    loss, up = cross_entropy(logits, _targets(target, logits.shape[:-1]))
    g = vjp(up)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return loss, g


def fgsm_step(x, target, model, epsilon):
    """x - epsilon * sign(grad of the loss toward `target`)."""
    _, g = loss_grad(model, x, target)
    return x - epsilon * np.sign(g)


def deepfool_direction(f, w, current, candidates, overshoot=0.0):
    """Smallest linearised step from class `current` onto any candidate boundary.

    f: (K,) scores; w: (K, ...) their gradients.  Candidates with a
    degenerate gradient difference are skipped.
    """
    best, best_dist = None, np.inf
    for k in candidates:
        if k == current:
            continue
        dw = w[k] - w[current]
        norm2 = float((dw * dw).sum())
        if norm2 < 1e-24:
            continue
        df = float(f[k] - f[current])
        dist = abs(df) / np.sqrt(norm2)
        if dist < best_dist:
            best_dist = dist
            best = (abs(df) / norm2) * dw
    if best is None:
        raise FloatingPointError("deepfool: every candidate boundary is degenerate")
    return best * (1.0 + overshoot)


def deepfool_step(x, model, label=None, target=None, overshoot=0.0, frames=None, reduce=None):
    """Linearise the frame-mean logits and step to the nearest boundary.

    Targeted (`target` given): only that class is a candidate and the step
    is zero once it is predicted.  Untargeted: all other classes are
    candidates and the step is zero once the prediction differs from
    `label`.  `frames` optionally restricts the mean to a frame mask;
    `reduce` maps input gradients to the space the step lives in.
    """
    f = as_model(model)
    logits, vjp = f(x, True)
    shape = logits.shape[:-1]
    reduce = reduce or (lambda g: g)
    weight = np.ones(shape) if frames is None else np.asarray(frames, dtype=np.float64)
    if weight.sum() == 0:
        return np.zeros_like(reduce(np.zeros_like(x)))
    weight = weight / weight.sum()
    mean = np.tensordot(weight, logits, axes=weight.ndim)
    current = int(np.argmax(mean))
    k = logits.shape[-1]
    if target is not None:
        if current == target:
            return np.zeros_like(reduce(np.zeros_like(x)))
        candidates = [target]
    else:
        if label is not None and current != label:
            return np.zeros_like(reduce(np.zeros_like(x)))
        candidates = [c for c in range(k) if c != current]
    grads = []
    for c in range(k):
        up = np.zeros(logits.shape)
        up[..., c] = weight
        grads.append(reduce(vjp(up)))
    return deepfool_direction(mean, np.stack(grads), current, candidates, overshoot)


def cw_objective(logits, target, kappa=0.0):
    """Mean over frames of max(max_{i != t} Z_i - Z_t, -kappa) and its logit gradient."""
    t = _targets(target, logits.shape[:-1])
    z_t = np.take_along_axis(logits, t[..., None], -1)[..., 0]
    others = logits.copy()
    np.put_along_axis(others, t[..., None], -np.inf, -1)
    j = others.argmax(-1)
    z_o = np.take_along_axis(logits, j[..., None], -1)[..., 0]
    margin = z_o - z_t
    active = margin > -kappa
    n = margin.size
    value = float(np.maximum(margin, -kappa).mean())
    g = np.zeros_like(logits)
    np.put_along_axis(g, j[..., None], (active / n)[..., None], -1)
    np.put_along_axis(g, t[..., None], np.take_along_axis(g, t[..., None], -1) - (active / n)[..., None], -1)
    return value, g


# --- universal loops -------------------------------------------------------

def _stack(clips):
    return (np.stack([c.spec.values for c in clips]), np.stack([c.labels for c in clips]))


class _Trial:
    """Shared state of one universal attack run."""

    def __init__(self, model, train_clips, test_clips, cfg: AttackConfig, trial):
        if not train_clips or not test_clips:
            raise ValueError("attack needs nonempty train and test clip sets")
        self.f = as_model(model)
        self.cfg = cfg
        self.X, self.Y = _stack(train_clips)
        self.test = test_clips
        self.Xtest = np.stack([c.spec.values for c in test_clips])
        self.rng = np.random.default_rng([cfg.seed, trial, 11])
        self.test_offsets = clip_offsets(len(test_clips), cfg.window, cfg.seed)
        n_mels = self.X.shape[-1]
        self.pert = UniversalPerturbation(np.zeros((cfg.window, n_mels)), cfg.epsilon)
        self.objective = []

    def evaluate(self, step):
        d = self.pert.delta
        acc = mask_accuracy(self.f, self.test, d, self.test_offsets)
        self.pert.record(step, acc, snr_db(self.Xtest, d, self.test_offsets))
        return acc

    def batch(self):
        idx = np.sort(self.rng.choice(len(self.X), size=min(self.cfg.batch_size, len(self.X)),
                                      replace=False))
        offsets = self.rng.integers(0, self.cfg.window, size=len(idx))
        return self.X[idx], self.Y[idx], offsets

    def delta_grad(self, X, offsets, upstream_fn):
        x = apply_delta(X, self.pert.delta, offsets)
        logits, vjp = self.f(x, True)
        value, up = upstream_fn(logits)
        g = untile_grad(vjp(up), self.cfg.window, offsets)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite perturbation gradient")
        return value, g

    def set(self, delta):
        self.pert.delta = project_linf(delta, self.cfg.epsilon)


def _ce_toward(target):
    return lambda logits: cross_entropy(logits, np.full(logits.shape[:-1], target))


def _run_fgsm(t: _Trial):
    cfg = t.cfg
    for it in range(1, cfg.iterations + 1):
        X, _, off = t.batch()
        loss, g = t.delta_grad(X, off, _ce_toward(cfg.target))
        t.objective.append(loss)
        t.set(t.pert.delta - cfg.epsilon * np.sign(g))
        if it % cfg.eval_every == 0:
            t.evaluate(it)


def _run_pgd(t: _Trial):
    cfg = t.cfg
    for ex in range(1, cfg.examples + 1):
        X, _, off = t.batch()
        for _ in range(cfg.iterations):
            loss, g = t.delta_grad(X, off, _ce_toward(cfg.target))
            t.objective.append(loss)
            t.set(t.pert.delta - cfg.step_size * np.sign(g))
        if ex % cfg.eval_every == 0:
            t.evaluate(ex)


def _run_deepfool(t: _Trial):
    cfg = t.cfg
    for it in range(1, cfg.iterations + 1):
        X, Y, off = t.batch()
        x = apply_delta(X, t.pert.delta, off)
        # linearise in perturbation space: fold frame gradients onto delta rows
        step = deepfool_step(x, t.f, target=cfg.target, overshoot=cfg.overshoot,
                             frames=Y != cfg.target,
                             reduce=lambda g: untile_grad(g, cfg.window, off))
        t.objective.append(float(np.abs(step).max()))
        t.set(t.pert.delta + step)
        if it % cfg.eval_every == 0:
            t.evaluate(it)


def _run_cw(t: _Trial):
    cfg = t.cfg
    lr, c = cfg.cw_lr, cfg.c
    for it in range(1, cfg.iterations + 1):
        X, _, off = t.batch()
        margin, g = t.delta_grad(X, off, lambda z: cw_objective(z, cfg.target, cfg.kappa))
        t.objective.append(margin + c * float((t.pert.delta ** 2).sum()))
        # gradient step on the margin, exact proximal step on c * ||delta||^2
        t.set((t.pert.delta - lr * g) / (1.0 + 2.0 * lr * c))
        if it % cfg.eval_every == 0:
            t.evaluate(it)


_RUNNERS = {"fgsm": _run_fgsm, "pgd": _run_pgd, "deepfool": _run_deepfool, "cw": _run_cw}


def run_trial(model, train_clips, test_clips, cfg: AttackConfig, trial=0):
    """One universal attack; returns (UniversalPerturbation, clean accuracy, objective trace)."""
    cfg = cfg.resolved()
    t = _Trial(model, train_clips, test_clips, cfg, trial)
    clean = t.evaluate(0)
    _RUNNERS[cfg.method](t)
    return t.pert, clean, t.objective


def universal_wrap(method, model, train_clips, test_clips, cfg: AttackConfig):
    """cfg.trials independent runs of `method`; reports the mean best accuracy."""
    cfg = replace(cfg, method=method).resolved()
    trials, perts, clean = [], [], None
    for k in range(cfg.trials):
        pert, clean, objective = run_trial(model, train_clips, test_clips, cfg, k)
        best_step = next(s for s, a, _ in pert.history if a == pert.best_accuracy)
        trials.append(dict(trial=k, best_accuracy=pert.best_accuracy, best_step=best_step,
                           best_snr_db=dict((s, q) for s, _, q in pert.history)[best_step],
                           final_linf=float(np.abs(pert.delta).max()),
                           objective_finite=bool(np.all(np.isfinite(objective)))))
        perts.append(pert)
    accs = np.array([p.best_accuracy for p in perts])
    best = perts[int(np.argmin(accs))]
    Xtest = np.stack([c.spec.values for c in test_clips])
    offs = clip_offsets(len(test_clips), cfg.window, cfg.seed)
    return AttackResult(best, clean, float(accs.mean()), float(accs.std()),
                        snr_db(Xtest, best.best_delta, offs), cfg, trials, 0.0)


def pgd_universal(model, clips, test_clips, cfg: AttackConfig = AttackConfig()):
    return universal_wrap("pgd", model, clips, test_clips, cfg)


def cw_universal(model, clips, test_clips, cfg: AttackConfig = AttackConfig(method="cw")):
    return universal_wrap("cw", model, clips, test_clips, cfg)


def fgsm_universal(model, clips, test_clips, cfg: AttackConfig = AttackConfig(method="fgsm")):
    return universal_wrap("fgsm", model, clips, test_clips, cfg)


def deepfool_universal(model, clips, test_clips, cfg: AttackConfig = AttackConfig(method="deepfool")):
    return universal_wrap("deepfool", model, clips, test_clips, cfg)


# --- serialization ---------------------------------------------------------

def save_result(result: AttackResult, directory, model_hash="", config_hash=""):
    """delta.ctns, history.csv, trials.csv, config.txt and model_hash.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensorio.save(d / "delta.ctns", result.perturbation.best_delta)
    with open(d / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "accuracy", "snr_db"])
        for s, a, q in result.perturbation.history:
            w.writerow([s, f"{a:.17g}", "clean" if np.isinf(q) else f"{q:.17g}"])
    with open(d / "trials.csv", "w", newline="") as fh:
        keys = list(result.trials[0])
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in result.trials:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row.values()])
    summary = (f"clean_accuracy={result.clean_accuracy!r}\n"
               f"attacked_accuracy={result.attacked_accuracy!r}\n"
               f"attacked_std={result.attacked_std!r}\nsnr_db={result.snr_db!r}\n"
               f"slack={result.slack!r}\nconfig_hash={config_hash}\n")
    (d / "config.txt").write_text(result.config.to_text() + summary)
    (d / "model_hash.txt").write_text(model_hash + "\n")


def load_delta(directory):
    return tensorio.load(Path(directory) / "delta.ctns")
