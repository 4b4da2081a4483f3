"""End-to-end runs: synth -> train both architectures -> universal attacks -> tables.

Used by the ``demo`` command and by the robustness comparison in the
acceptance suite.  Every random choice is derived from the master seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, evaluation, network, report, training
from .config import RunConfig, derive_seed

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: list
    val: list
    attack: list        # test clips the perturbation is fitted on
    test: list          # held-out clips it is scored on


def make_splits(cfg: RunConfig, clips=None):
    if clips is None:
        clips = training.synth_dataset(cfg.data, derive_seed(cfg.seed, "synth"), cfg.frontend)
    tr, va, te = training.split_dataset(clips)
    k = int(round(cfg.run.test_attack_fraction * len(te)))
    return Splits(tr, va, te[:k], te[k:])


@dataclass
class TrainedModel:
    arch: str
    index: int
    params: network.ModelParams
    history: training.History
    val_accuracy: float


def train_model(cfg: RunConfig, splits: Splits, arch, index, bank=None, features=None):
    seed = derive_seed(cfg.seed, "train", arch, index)
    mcfg = cfg.model_config(arch)
    tr_feats, va_feats = features if features is not None else (None, None)
    params = training.init_model(mcfg, splits.train, seed, bank, tr_feats)
    best, hist = training.train(params, splits.train, splits.val, replace(cfg.train, seed=seed),
                                tr_feats, va_feats)
    val_acc = evaluation.mask_accuracy(best, splits.val)
    hist.add("best", "val", float("nan"), val_acc)
    return TrainedModel(arch, index, best, hist, val_acc)


def cached_features(cfg: RunConfig, splits: Splits, bank):
    """Cortical features of train/val inputs; the normalisation only depends on the train split."""
    X, _, _ = training.stack(splits.train)
    Xv, _, _ = training.stack(splits.val)
    probe = network.init_params(cfg.model_config("cortical"), np.random.default_rng(0), bank,
                                training.input_statistics(X))
    return training.feature_cache(X, probe), training.feature_cache(Xv, probe)


def train_all(cfg: RunConfig, splits: Splits, n_networks, archs=("baseline", "cortical"), bank=None):
    models = []
    for arch in archs:
        feats = cached_features(cfg, splits, bank) if arch == "cortical" else None
        for i in range(n_networks):
            t0 = time.perf_counter()
            m = train_model(cfg, splits, arch, i, bank if arch == "cortical" else None, feats)
            log.info("%s #%d val acc %.4f (%.0fs)", arch, i, m.val_accuracy, time.perf_counter() - t0)
            models.append(m)
    return models


@dataclass
class ComparisonRow:
    arch: str
    index: int
    epsilon: float
    mean_accuracy: float
    std_accuracy: float
    clean_accuracy: float
    mean_snr_db: float
    result: attacks.AttackResult = field(repr=False, default=None)


def attack_all(cfg: RunConfig, models, splits: Splits, epsilons, method="pgd"):
    rows = []
    for m in models:
        for eps in epsilons:
            acfg = replace(cfg.attack, method=method, epsilon=float(eps),
                           seed=derive_seed(cfg.seed, "attack", m.arch, m.index, repr(float(eps))))
            if acfg.step_size is not None and method == "pgd":
                acfg = replace(acfg, step_size=None)
            res = attacks.universal_wrap(method, m.params, splits.attack, splits.test, acfg)
            snrs = [t["best_snr_db"] for t in res.trials]
            rows.append(ComparisonRow(m.arch, m.index, float(eps), res.attacked_accuracy,
                                      res.attacked_std, res.clean_accuracy,
                                      float(np.mean(snrs)), res))
            log.info("%s #%d eps %g: clean %.4f attacked %.4f +- %.4f", m.arch, m.index, eps,
                     res.clean_accuracy, res.attacked_accuracy, res.attacked_std)
    return rows


def compare(rows, epsilons, n_networks):
    """Per epsilon: count seed groups where cortical >= baseline accuracy under attack."""
    out = {}
    for eps in epsilons:
        wins = 0
        for i in range(n_networks):
            c = next(r for r in rows if r.arch == "cortical" and r.index == i and r.epsilon == eps)
            b = next(r for r in rows if r.arch == "baseline" and r.index == i and r.epsilon == eps)
            wins += c.mean_accuracy >= b.mean_accuracy
        out[float(eps)] = wins
    return out


def summary_rows(rows, method="pgd"):
    """(method, arch, epsilon, mean, std, mean snr) over networks and their trials."""
    out = []
    for arch in sorted({r.arch for r in rows}):
        for eps in sorted({r.epsilon for r in rows}):
            sel = [r for r in rows if r.arch == arch and r.epsilon == eps]
            accs = [t["best_accuracy"] for r in sel for t in r.result.trials]
            snrs = [t["best_snr_db"] for r in sel for t in r.result.trials]
            out.append((method, arch, eps, float(np.mean(accs)), float(np.std(accs)),
                        float(np.mean(snrs))))
    return out


def direction_rows(rows):
    """Per epsilon and seed group: cortical vs baseline attacked accuracy (mean, std over trials)."""
    out = []
    for eps in sorted({r.epsilon for r in rows}):
        for i in sorted({r.index for r in rows}):
            pair = {r.arch: r for r in rows if r.epsilon == eps and r.index == i}
            if set(pair) != {"baseline", "cortical"}:
                continue
            c, b = pair["cortical"], pair["baseline"]
            gap = c.mean_accuracy - b.mean_accuracy
            out.append((eps, i, c.mean_accuracy, c.std_accuracy, b.mean_accuracy, b.std_accuracy,
                        gap, int(gap >= 0)))
    return out


def write_outputs(out_dir, cfg: RunConfig, models, rows, method="pgd", det_clips=None):
    """Checkpoints, deltas and CSV/SVG report under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    hashes = {}
    for m in models:
        d = out / "models" / f"{m.arch}{m.index}"
        hashes[(m.arch, m.index)] = network.save_checkpoint(
            d, m.params, cfg.model_hash, {"run_hash": cfg.hash(), "val_accuracy": repr(m.val_accuracy)})
        m.history.write_csv(d / "history.csv")
    for r in rows:
        d = out / "attacks" / f"{r.arch}{r.index}_eps{r.epsilon:g}"
        attacks.save_result(r.result, d, hashes[(r.arch, r.index)], cfg.hash())
    report.write_csv(out / "comparison.csv",
                     ["arch", "network", "epsilon", "mean_accuracy", "std_accuracy",
                      "clean_accuracy", "mean_snr_db"],
                     [(r.arch, r.index, r.epsilon, r.mean_accuracy, r.std_accuracy,
                       r.clean_accuracy, r.mean_snr_db) for r in rows])
    report.write_csv(out / "direction.csv",
                     ["epsilon", "network", "cortical_mean", "cortical_std", "baseline_mean",
                      "baseline_std", "gap", "cortical_ge_baseline"], direction_rows(rows))
    inp = report.ReportInput(
        accuracy=summary_rows(rows, method),
        histories={f"{r.arch}{r.index}_eps{r.epsilon:g}": r.result.perturbation.history for r in rows},
        noises={f"{r.arch}{r.index}_eps{r.epsilon:g}": r.result.perturbation.best_delta for r in rows})
    if det_clips:
        ec = cfg.eval
        th = np.linspace(0.0, 1.0, ec.n_thresholds)
        for m in models:
            inp.det[f"{m.arch}{m.index}"] = evaluation.det_curve(
                m.params, det_clips, th, ec.min_gap_frames, ec.min_len_frames, ec.smooth_window)
    return report.emit_report(inp, out / "report")


def run(cfg: RunConfig, out_dir, n_networks=1, epsilons=(0.25,), method="pgd"):
    """The demo pipeline; returns (models, rows, wins per epsilon)."""
    splits = make_splits(cfg)
    bank = cfg.build_bank()
    models = train_all(cfg, splits, n_networks, bank=bank)
    rows = attack_all(cfg, models, splits, epsilons, method)
    write_outputs(out_dir, cfg, models, rows, method, det_clips=splits.test)
    return models, rows, compare(rows, epsilons, n_networks)
