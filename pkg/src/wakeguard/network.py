"""Frame-level wake-word classifiers with exact reverse-mode gradients.

baseline:  norm -> prenet -> 4 highway -> bottleneck + context -> 6 highway -> affine
cortical:  norm -> cortical frontend -> prenet -> (same trunk)

Logits are per frame over three classes; class index k encodes the
frame label k - 1 (other speech, no speech, wake word).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff, cortical, tensorio
from .autodiff import Tape

N_CLASSES = 3
ARCHS = ("baseline", "cortical")


def label_to_class(y):
    """{-1, 0, 1} frame labels -> class indices {0, 1, 2}."""
    return np.asarray(y, dtype=np.int64) + 1


def class_to_label(c):
    return np.asarray(c, dtype=np.int64) - 1


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "baseline"
    n_mels: int = 64
    prenet_hidden: int = 128
    width: int = 64
    bottleneck: int = 20
    context_left: int = 20
    context_right: int = 10
    feature_blocks: int = 4
    classifier_blocks: int = 6
    prenet_dropout: float = 0.1
    gate_bias_init: float = -1.0
    mix_channels: int = 4
    dropout_feature_p: float = 0.1
    dropout_residual_p: float = 0.9

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")

    @property
    def context_width(self):
        return self.context_left + 1 + self.context_right

    @property
    def frontend(self):
        return cortical.FrontendConfig(self.mix_channels, self.dropout_feature_p,
                                       self.dropout_residual_p)


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict           # learnable, name -> array
    buffers: dict           # fixed statistics (input normalisation, feature scale)
    bank: object = None     # StrfFilterBank for the cortical arch; never trained

    @property
    def arch(self):
        return self.config.arch

    def n_params(self):
        return int(sum(w.size for w in self.weights.values()))

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                           {k: np.array(v, copy=True) for k, v in self.buffers.items()}, self.bank)


@dataclass
class GradientBundle:
    params: dict
    input: np.ndarray


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def weight_shapes(cfg: ModelConfig, n_feat_channels=None):
    d, h, b = cfg.width, cfg.prenet_hidden, cfg.bottleneck
    in_dim = cfg.n_mels * (cfg.mix_channels if cfg.arch == "cortical" else 1)
    shapes = {}
    if cfg.arch == "cortical":
        shapes["mix.W"] = (n_feat_channels, cfg.mix_channels)
        shapes["mix.b"] = (cfg.mix_channels,)
    shapes.update({"prenet.0.W": (in_dim, h), "prenet.0.b": (h,),
                   "prenet.1.W": (h, d), "prenet.1.b": (d,)})

    def blocks(stage, count):
        for i in range(count):
            for part in ("h", "t"):
                shapes[f"hw.{stage}.{i}.W{part}"] = (d, d)
                shapes[f"hw.{stage}.{i}.b{part}"] = (d,)

    blocks("feat", cfg.feature_blocks)
    shapes["bottleneck.W"] = (d, b)
    shapes["bottleneck.b"] = (b,)
    shapes["context.W"] = (cfg.context_width * b, d)
    shapes["context.b"] = (d,)
    blocks("cls", cfg.classifier_blocks)
    shapes["out.W"] = (d, N_CLASSES)
    shapes["out.b"] = (N_CLASSES,)
    return shapes


def init_params(cfg: ModelConfig, rng, bank=None, norm=(0.0, 1.0), feat_scale=None) -> ModelParams:
    """Glorot-uniform weights, zero biases, transform-gate biases at gate_bias_init."""
    if cfg.arch == "cortical" and bank is None:
        raise ValueError("cortical architecture needs an STRF bank")
    n_feat = cortical.n_feature_channels(bank) if bank is not None else None
    weights = {}
    for name, shape in weight_shapes(cfg, n_feat).items():
        if len(shape) == 2:
            weights[name] = _glorot(rng, *shape)
        elif name.endswith(".bt"):
            weights[name] = np.full(shape, cfg.gate_bias_init)
        else:
            weights[name] = np.zeros(shape)
    buffers = {"norm.mean": np.float64(norm[0]), "norm.std": np.float64(norm[1])}
    if cfg.arch == "cortical":
        buffers["feat.scale"] = np.ones(n_feat) if feat_scale is None else np.asarray(feat_scale, float)
    return ModelParams(cfg, weights, buffers, bank if cfg.arch == "cortical" else None)


def normalise(x, params):
    return (x - params.buffers["norm.mean"]) / params.buffers["norm.std"]


def forward(x, params: ModelParams, mode="eval", rng=None, tape: Tape | None = None,
            features=None):
    """Logits (N, T, 3) for spectrograms x (N, T, n_mels); 2-D x gives (T, 3).

    In train mode dropout masks are drawn from `rng` in a fixed order, so
    replaying the same stream reproduces the same function.  Passing a
    `tape` records everything needed by :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg, w = params.config, params.weights
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[-1] != cfg.n_mels:
        raise ValueError(f"input has {x.shape[-1]} mel channels (axis -1), model expects {cfg.n_mels}")
    train = mode == "train"
    if tape is not None:
        tape.params = w
        tape.squeeze = squeeze
        std = params.buffers["norm.std"]
        tape.push(lambda g, grads: g / std)
    h = normalise(x, params)
    if cfg.arch == "cortical":
        h = cortical.frontend_forward(tape, h, params.bank, w, params.buffers, cfg.frontend,
                                      train, rng, features=features)
    for i in range(2):
        h = autodiff.affine(tape, h, w, f"prenet.{i}")
        h = autodiff.tanh(tape, h)
        h = autodiff.dropout(tape, h, cfg.prenet_dropout, rng, train)
    for i in range(cfg.feature_blocks):
        h = autodiff.highway(tape, h, w, f"hw.feat.{i}")
    h = autodiff.affine(tape, h, w, "bottleneck")
    h = autodiff.context_stack(tape, h, cfg.context_left, cfg.context_right)
    h = autodiff.affine(tape, h, w, "context")
    for i in range(cfg.classifier_blocks):
        h = autodiff.highway(tape, h, w, f"hw.cls.{i}")
    logits = autodiff.affine(tape, h, w, "out")
    if tape is not None:
        tape.output_shape = logits.shape
    return logits[0] if squeeze else logits


def backward(tape: Tape, upstream) -> GradientBundle:
    """Gradients of <logits, upstream> w.r.t. every weight and the input."""
    grads, gx = tape.backward(upstream)
    return GradientBundle(grads, gx)


def value_and_grad(x, params, upstream_fn, mode="eval", rng=None):
    """Run forward, map logits -> (value, d value / d logits), pull back."""
    tape = Tape()
    logits = forward(x, params, mode, rng, tape)
    value, upstream = upstream_fn(logits)
    return value, backward(tape, upstream)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(x, params, batch_size=16):
    """Eval-mode argmax classes for a stack of spectrograms (N, T, F)."""
    out = [forward(x[i:i + batch_size], params).argmax(axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


# --- checkpoints -----------------------------------------------------------

def bank_digest(bank):
    if bank is None:
        return "none"
    return hashlib.sha256(np.ascontiguousarray(bank.taps).tobytes()).hexdigest()[:16]


def save_checkpoint(directory, params: ModelParams, config_hash="", extra=None) -> str:
    header = {"arch": params.arch, "config_hash": config_hash, "bank": bank_digest(params.bank)}
    header.update({f"model.{k}": v for k, v in asdict(params.config).items()})
    header.update(extra or {})
    tensors = {f"w/{k}": v for k, v in params.weights.items()}
    tensors.update({f"buf/{k}": np.asarray(v, dtype=np.float64) for k, v in params.buffers.items()})
    return tensorio.save_bundle(directory, tensors, header)


def load_checkpoint(directory, bank=None):
    tensors, header = tensorio.load_bundle(directory)
    kw = {}
    for f in fields(ModelConfig):
        raw = header[f"model.{f.name}"]
        kw[f.name] = raw if f.type in ("str", str) else type(f.default)(raw)
    cfg = ModelConfig(**kw)
    if cfg.arch == "cortical":
        if bank is None:
            raise ValueError("cortical checkpoint needs the STRF bank it was trained with")
        if bank_digest(bank) != header["bank"]:
            raise ValueError(f"STRF bank digest {bank_digest(bank)} != checkpoint {header['bank']}")
    weights = {k[2:]: v for k, v in tensors.items() if k.startswith("w/")}
    buffers = {k[4:]: (v if v.ndim else np.float64(v)) for k, v in tensors.items() if k.startswith("buf/")}
    return ModelParams(cfg, weights, buffers, bank if cfg.arch == "cortical" else None), header


def checkpoint_hash(directory):
    return tensorio.file_sha256(Path(directory) / "model.ctns")


def with_config(params, **changes):
    return ModelParams(replace(params.config, **changes), params.weights, params.buffers, params.bank)
