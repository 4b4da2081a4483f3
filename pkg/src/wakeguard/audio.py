"""Waveform I/O and the log-mel filter bank energy (LFBE) front end."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if s.size and np.max(np.abs(s)) > 1.0:
            raise ValueError("waveform samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    frame_len_s: float = 0.025
    frame_hop_s: float = 0.010
    n_mels: int = 64
    f_min: float = 60.0
    f_max: float = 7600.0
    log_floor: float = 1e-10

    @property
    def win_length(self):
        return int(round(self.frame_len_s * self.sample_rate_hz))

    @property
    def hop_length(self):
        return int(round(self.frame_hop_s * self.sample_rate_hz))

    @property
    def fft_size(self):
        return 1 << (self.win_length - 1).bit_length()


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray          # (frames, n_mels), log energy
    frame_hop_s: float
    frame_len_s: float
    n_mels: int
    log_floor: float

    @property
    def n_frames(self):
        return self.values.shape[0]


def quantize16(x):
    """Round amplitudes to the 16-bit PCM grid (x * 32768, clipped)."""
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767)
    return q / 32768.0


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comptype = w.getcomptype()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: cannot parse WAV ({exc})") from exc
    if comptype != "NONE":
        raise WavFormatError(f"{path}: compression={comptype} unsupported")
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels} unsupported")
    if width != 2:
        raise WavFormatError(f"{path}: sample_width={8 * width} bits unsupported")
    if rate != 16000:
        raise WavFormatError(f"{path}: sample_rate={rate} unsupported")
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate_hz)
        w.writeframes(pcm.tobytes())


def periodic_hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(wave_: Waveform, frame_len_s, frame_hop_s, fft_size=None):
    """Power of the one-sided STFT, shape (frames, fft_size // 2 + 1)."""
    if not frame_len_s >= frame_hop_s > 0:
        raise ValueError("need frame_len_s >= frame_hop_s > 0")
    sr = wave_.sample_rate_hz
    win = int(round(frame_len_s * sr))
    hop = int(round(frame_hop_s * sr))
    if fft_size is None:
        fft_size = 1 << (win - 1).bit_length()
    x = wave_.samples
    if x.size < win:
        raise ValueError(f"input has {x.size} samples; at least {win} needed for one frame")
    n_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * periodic_hann(win)
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_matrix(fft_size, n_mels, sample_rate_hz, f_min, f_max):
    """Triangular mel filters, shape (n_mels, fft_size // 2 + 1)."""
    if not 0 <= f_min < f_max <= sample_rate_hz / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate_hz / 2}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"n_mels={n_mels} too large for fft_size={fft_size}: empty filter(s) {empty.tolist()}")
    return fb


def mel_energies(wave_: Waveform, cfg: FrontendConfig = FrontendConfig()):
    """Pre-log mel energies, (frames, n_mels)."""
    power = stft_power(wave_, cfg.frame_len_s, cfg.frame_hop_s, cfg.fft_size)
    fb = mel_matrix(cfg.fft_size, cfg.n_mels, wave_.sample_rate_hz, cfg.f_min, cfg.f_max)
    return power @ fb.T


def lfbe(wave_: Waveform, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    if wave_.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"waveform rate {wave_.sample_rate_hz} != configured {cfg.sample_rate_hz}")
    values = np.log(mel_energies(wave_, cfg) + cfg.log_floor)
    return MelSpectrogram(values, cfg.frame_hop_s, cfg.frame_len_s, cfg.n_mels, cfg.log_floor)
