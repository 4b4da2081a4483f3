"""Command line entry point: filters, synth, train, attack, eval, report, demo."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, evaluation, experiment, network, report, tensorio, training
from .config import RunConfig, derive_seed
from .strf import StrfFilterBank

log = logging.getLogger("wakeguard")


class CliError(RuntimeError):
    pass


def out_path(p):
    """Relative output paths land under $WAKEGUARD_OUT when it is set."""
    p = Path(p)
    root = os.environ.get("WAKEGUARD_OUT")
    return p if p.is_absolute() or not root else Path(root) / p


def load_config(path):
    return RunConfig.load(path) if path else RunConfig()


def _bank_for(cfg, checkpoint_dir=None):
    if checkpoint_dir is not None and (Path(checkpoint_dir) / "bank.ctns").exists():
        return StrfFilterBank.load(Path(checkpoint_dir) / "bank.ctns")
    return cfg.build_bank()


def _load_model(cfg, checkpoint, force=False):
    _, header = tensorio.load_bundle(checkpoint)
    if header.get("config_hash") != cfg.model_hash and not force:
        raise CliError(f"checkpoint config hash {header.get('config_hash')} != config model hash "
                       f"{cfg.model_hash}; rerun with --force to override")
    bank = _bank_for(cfg, checkpoint) if header.get("arch") == "cortical" else None
    params, _ = network.load_checkpoint(checkpoint, bank)
    return params


# --- commands --------------------------------------------------------------

def cmd_filters(args):
    cfg = load_config(args.config)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank = cfg.build_bank()
    bank.save(out / "bank.ctns")
    cfg.save(out / "config.txt")
    print(f"wrote {len(bank)} filters {bank.shape} to {out / 'bank.ctns'}")


def cmd_synth(args):
    cfg = load_config(args.config)
    out = out_path(args.out)
    clips = training.synth_dataset(cfg.data, derive_seed(cfg.seed, "synth"), cfg.frontend)
    tr, va, te = training.split_dataset(clips)
    for name, part in (("train", tr), ("val", va), ("test", te)):
        training.write_manifest(part, out, f"{name}.csv")
    cfg.save(out / "config.txt")
    print(f"wrote {len(tr)}/{len(va)}/{len(te)} train/val/test clips to {out}")


def _manifest(data, name, cfg):
    return training.load_manifest(Path(data) / f"{name}.csv", cfg.frontend, cfg.data.boundary_frames)


def cmd_train(args):
    cfg = load_config(args.config)
    out = out_path(args.out)
    splits = experiment.Splits(_manifest(args.data, "train", cfg), _manifest(args.data, "val", cfg), [], [])
    bank = cfg.build_bank() if args.arch == "cortical" else None
    m = experiment.train_model(cfg, splits, args.arch, args.index, bank)
    digest = network.save_checkpoint(out, m.params, cfg.model_hash,
                                      {"run_hash": cfg.hash(), "val_accuracy": repr(m.val_accuracy)})
    if bank is not None:
        bank.save(out / "bank.ctns")
    m.history.write_csv(out / "history.csv")
    cfg.save(out / "config.txt")
    print(f"{args.arch} val accuracy {m.val_accuracy:.4f} checkpoint sha256 {digest}")


def _attack_test_split(cfg, data):
    te = _manifest(data, "test", cfg)
    k = int(round(cfg.run.test_attack_fraction * len(te)))
    return te[:k], te[k:]


def cmd_attack(args):
    cfg = load_config(args.config)
    pool, test = _attack_test_split(cfg, args.data)
    overrides = {"method": args.method}
    if args.eps is not None:
        overrides["epsilon"] = args.eps
    if args.trials is not None:
        overrides["trials"] = args.trials
    acfg = replace(cfg.attack, **overrides)
    base = out_path(args.out)
    for i, ckpt in enumerate(args.checkpoint):
        params = _load_model(cfg, ckpt, args.force)
        res = attacks.universal_wrap(args.method, params, pool, test,
                                     replace(acfg, seed=derive_seed(acfg.seed, "network", i)))
        d = base / f"net{i}" if len(args.checkpoint) > 1 else base
        attacks.save_result(res, d, network.checkpoint_hash(ckpt), cfg.hash())
        print(f"{ckpt}: clean {res.clean_accuracy:.4f} attacked {res.attacked_accuracy:.4f} "
              f"+- {res.attacked_std:.4f} snr {evaluation.format_snr(res.snr_db)} dB")


def cmd_eval(args):
    cfg = load_config(args.config)
    params = _load_model(cfg, args.checkpoint, args.force)
    _, test = _attack_test_split(cfg, args.data)
    delta = attacks.load_delta(args.delta) if args.delta else None
    window = delta.shape[0] if delta is not None else cfg.attack.window
    offsets = evaluation.clip_offsets(len(test), window, cfg.attack.seed) if delta is not None else None
    ec = cfg.eval
    acc = evaluation.mask_accuracy(params, test, delta, offsets, ec.speech_only)
    X = np.stack([c.spec.values for c in test])
    snr = evaluation.snr_db(X, delta, offsets) if delta is not None else float("inf")
    if any((c.labels == training.WAKE).any() for c in test):
        curve = evaluation.det_curve(params, test, np.linspace(0, 1, ec.n_thresholds), ec.min_gap_frames,
                                     ec.min_len_frames, ec.smooth_window, delta, offsets)
        auc = evaluation.det_auc(curve, ec.fa_per_hour_cap)
    else:       # no wake word in the scored clips: DET undefined
        log.warning("no wake events in the test clips; skipping DET")
        curve, auc = None, float("nan")
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv", ["mask_accuracy", "snr_db", "det_auc"],
                     [(acc, evaluation.format_snr(snr), auc)])
    if curve is not None:
        report.emit_report(report.ReportInput(det={"model": curve}), out)
    print(f"mask accuracy {acc:.4f} snr {evaluation.format_snr(snr)} dB DET AUC {auc:.4f}")


def _read_kv(path):
    return dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if "=" in line)


def cmd_report(args):
    inp = report.ReportInput()
    for d in map(Path, args.inputs):
        for cfg_file in sorted(d.rglob("config.txt")):
            run = cfg_file.parent
            if not (run / "delta.ctns").exists():
                continue
            kv = _read_kv(cfg_file)
            name = str(run.relative_to(d)) if run != d else d.name
            trials = [r.split(",") for r in (run / "trials.csv").read_text().splitlines()[1:]]
            snr = float(np.mean([float(t[3]) for t in trials]))
            inp.accuracy.append((kv["method"].strip("'"), name, float(kv["epsilon"]),
                                 float(kv["attacked_accuracy"]), float(kv["attacked_std"]), snr))
            rows = [r.split(",") for r in (run / "history.csv").read_text().splitlines()[1:]]
            inp.histories[name] = [(int(s), float(a), float("inf") if q == "clean" else float(q))
                                   for s, a, q in rows]
            inp.noises[name] = attacks.load_delta(run)
    files = report.emit_report(inp, out_path(args.out))
    print(f"wrote {len(files)} report files to {out_path(args.out)}")


def cmd_demo(args):
    cfg = load_config(args.config)
    if args.quick:
        cfg = quick_config(cfg)
    models, rows, wins = experiment.run(cfg, out_path(args.out), args.networks, tuple(args.eps), "pgd")
    for m in models:
        print(f"{m.arch}{m.index}: val accuracy {m.val_accuracy:.4f}")
    for r in rows:
        print(f"{r.arch}{r.index} eps {r.epsilon:g}: clean {r.clean_accuracy:.4f} "
              f"attacked {r.mean_accuracy:.4f} +- {r.std_accuracy:.4f}")


def quick_config(cfg: RunConfig):
    """A minutes-scale variant for smoke runs."""
    return cfg.with_values(data={"minutes": 2.0}, train={"epochs": 2},
                           attack={"examples": 4, "iterations": 2, "eval_every": 2, "trials": 1})


# --- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="wakeguard", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="sectioned key=value run config (defaults if omitted)")
        sp.add_argument("--out", required=True, help="output directory (relative to $WAKEGUARD_OUT if set)")
        sp.set_defaults(fn=fn)
        return sp

    add("filters", cmd_filters, "build and save the STRF bank")
    add("synth", cmd_synth, "synthesize a dataset with train/val/test manifests")
    sp = add("train", cmd_train, "train one network and write a checkpoint")
    sp.add_argument("--data", required=True, help="directory holding train.csv and val.csv")
    sp.add_argument("--arch", choices=network.ARCHS, required=True)
    sp.add_argument("--index", type=int, default=0, help="network number (selects the seed stream)")
    sp = add("attack", cmd_attack, "universal attack trials against one or more checkpoints")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", action="append", required=True,
                    help="checkpoint directory; repeat to attack several networks")
    sp.add_argument("--method", choices=attacks.METHODS, default="pgd")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--force", action="store_true", help="ignore a config hash mismatch")
    sp = add("eval", cmd_eval, "mask accuracy, SNR and DET for a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--delta", help="attack result directory holding delta.ctns")
    sp.add_argument("--force", action="store_true")
    sp = add("report", cmd_report, "CSV/SVG report from attack result directories")
    sp.add_argument("inputs", nargs="+")
    sp = add("demo", cmd_demo, "synth, train both architectures, attack with PGD, report")
    sp.add_argument("--networks", type=int, default=1)
    sp.add_argument("--eps", type=float, nargs="+", default=[0.25])
    sp.add_argument("--quick", action="store_true", help="tiny data and schedules")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:    # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
