"""Sectioned key=value run configuration with a canonical text form and hash."""

from __future__ import annotations

import configparser
import hashlib
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import strf
from .attacks import AttackConfig
from .audio import FrontendConfig
from .network import ModelConfig
from .training import SynthConfig, TrainConfig


@dataclass(frozen=True)
class StrfConfig:
    scales: tuple = strf.DEFAULT_SCALES
    rates: tuple = strf.DEFAULT_RATES
    phases: tuple = strf.DEFAULT_PHASES
    alpha: float = 3.5
    omega: float = 1.0
    omega1: float = 1.0
    omega2: float = 1.0
    filter_len_t: int = 32
    filter_len_f: int = 32
    channels_per_octave: float | None = None    # None: n_mels / octaves spanned


@dataclass(frozen=True)
class ModelSection:
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


@dataclass(frozen=True)
class EvalConfig:
    min_gap_frames: int = 10
    min_len_frames: int = 5
    smooth_window: int = 5
    n_thresholds: int = 101
    fa_per_hour_cap: float = 10.0
    speech_only: bool = False


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    test_attack_fraction: float = 0.5   # share of the test split used to fit perturbations


SECTIONS = {
    "attack": AttackConfig,
    "data": SynthConfig,
    "eval": EvalConfig,
    "frontend": FrontendConfig,
    "model": ModelSection,
    "run": RunSection,
    "strf": StrfConfig,
    "train": TrainConfig,
}
MODEL_SECTIONS = ("frontend", "model", "strf")


class ConfigError(ValueError):
    pass


def _kind(cls, name):
    for f in fields(cls):
        if f.name == name:
            return f
    raise ConfigError(f"unknown key {name!r} in section of {cls.__name__}")


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text, default, ftype):
    text = text.strip()
    if text.lower() == "none":
        if default is None or "None" in str(ftype):
            return None
        raise ConfigError(f"value may not be none (default {default!r})")
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(float(x)) if kind is int else kind(x) for x in text.split(",") if x.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        t = str(ftype)
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
    return text


@dataclass(frozen=True)
class RunConfig:
    sections: dict = field(default_factory=lambda: {k: cls() for k, cls in SECTIONS.items()})

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @property
    def seed(self):
        return self.sections["run"].seed

    # -- text form --
    def canonical(self):
        out = []
        for name in sorted(self.sections):
            out.append(f"[{name}]")
            obj = self.sections[name]
            for f in sorted(fields(obj), key=lambda f: f.name):
                out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            out.append("")
        return "\n".join(out)

    def hash(self, sections=None):
        names = sorted(sections or self.sections)
        text = RunConfig({k: self.sections[k] for k in names}).canonical()
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def model_hash(self):
        return self.hash(MODEL_SECTIONS)

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        sections = {k: c() for k, c in SECTIONS.items()}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            cls_ = SECTIONS[name]
            changes = {}
            for key, raw in parser.items(name):
                f = _kind(cls_, key)
                default = getattr(sections[name], key)
                try:
                    changes[key] = _parse(raw, default, f.type)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{name}] {key}: {exc}") from exc
            try:
                sections[name] = replace(sections[name], **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(sections)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.canonical())

    def with_values(self, **section_changes):
        """e.g. with_values(train={"epochs": 2})."""
        new = dict(self.sections)
        for name, changes in section_changes.items():
            new[name] = replace(new[name], **changes)
        return RunConfig(new)

    # -- builders --
    def model_config(self, arch):
        if self.model.n_mels != self.frontend.n_mels:
            raise ConfigError(f"model.n_mels={self.model.n_mels} != frontend.n_mels={self.frontend.n_mels}")
        kw = {f.name: getattr(self.model, f.name) for f in fields(self.model)}
        return ModelConfig(arch=arch, **kw)

    def strf_params(self):
        s, fe = self.strf, self.frontend
        cpo = s.channels_per_octave
        if cpo is None:
            cpo = fe.n_mels / np.log2(fe.f_max / fe.f_min)
        return strf.StrfParams(alpha=s.alpha, omega=s.omega, omega1=s.omega1, omega2=s.omega2,
                               filter_len_t=s.filter_len_t, filter_len_f=s.filter_len_f,
                               channels_per_octave=float(cpo), frame_hop_s=fe.frame_hop_s)

    def build_bank(self):
        return strf.build_bank(self.strf.scales, self.strf.rates, self.strf.phases, self.strf_params())


def derive_seed(master, *keys):
    """Independent 64-bit seed for a named sub-task of a run."""
    words = [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence([master, *words]).generate_state(1, np.uint64)[0])
