"""Complex spectro-temporal receptive field (STRF) filters.

Each filter is the outer product of an analytic rate (temporal) impulse
response and an analytic scale (spectral) impulse response.  The phase
flag selects the rate factor or its complex conjugate, giving the
upward- and downward-sweep selective pair for every (rate, scale).
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import lambertw

from . import tensorio

DEFAULT_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)    # cycles / octave
DEFAULT_RATES = (4.0, 8.0, 16.0, 32.0)              # Hz
DEFAULT_PHASES = (1, -1)

# lower root of x^2 exp(1 - x^2) = 1/2
HALF_MAX_ARG = float(np.sqrt(-lambertw(-0.5 / np.e, 0).real))


@dataclass(frozen=True)
class StrfParams:
    scale_psi: float = 1.0
    rate_omega: float = 4.0
    phase_phi: int = 1
    alpha: float = 3.5
    omega: float = 1.0      # decay normalizer of the rate envelope
    omega1: float = 1.0     # rate-axis unit constant
    omega2: float = 1.0     # scale-axis unit constant
    filter_len_t: int = 32
    filter_len_f: int = 32
    channels_per_octave: float = float(64 / np.log2(7600 / 60))
    frame_hop_s: float = 0.010

    def __post_init__(self):
        if self.scale_psi <= 0 or self.rate_omega <= 0:
            raise ValueError("scale_psi and rate_omega must be positive")
        if self.phase_phi not in (1, -1):
            raise ValueError(f"phase_phi must be +1 or -1, got {self.phase_phi}")
        if self.filter_len_t < 2 or self.filter_len_f < 2:
            raise ValueError("filter sizes must be >= 2 along each axis")


@dataclass(frozen=True, eq=False)
class StrfFilter:
    taps: np.ndarray            # complex, (filter_len_t, filter_len_f)
    params: StrfParams
    rate_factor: np.ndarray = field(repr=False, default=None)
    scale_factor: np.ndarray = field(repr=False, default=None)


def scale_response_fourier(y, psi, omega2=1.0):
    x = omega2 * np.asarray(y, dtype=np.float64) / psi
    return x * x * np.exp(1.0 - x * x)


def max_representable_scale(n_points, channels_per_octave, omega2=1.0):
    """Largest scale whose lower half-maximum still falls on the grid.

    The grid spans 0 .. channels_per_octave / 2 cycles/octave; above this
    bound the sampled tuning curve never rises past half its peak.
    """
    del n_points
    nyquist = channels_per_octave / 2.0
    return omega2 * nyquist / HALF_MAX_ARG


def scale_impulse_response(psi, omega2, n_points, channels_per_octave):
    """Spatial (frequency-axis) impulse response of the scale filter.

    Samples the transfer function on the rfft grid of `n_points` taps,
    inverts it with even symmetry, centres it and removes the mean.
    """
    limit = max_representable_scale(n_points, channels_per_octave, omega2)
    if psi > limit:
        raise ValueError(
            f"scale {psi} cyc/oct not representable with {channels_per_octave:.4g} "
            f"channels/octave; maximum representable scale is {limit:.4g}")
    y = np.arange(n_points // 2 + 1) * channels_per_octave / n_points
    r = np.fft.fftshift(np.fft.irfft(scale_response_fourier(y, psi, omega2), n=n_points))
    r = r - r.mean()
    if not np.any(np.abs(r) > 1e-12):
        raise ValueError(f"scale {psi} cyc/oct below the grid resolution; filter vanishes")
    return r


def rate_impulse_response(omega, omega1, alpha, n_points, frame_hop_s, omega_=None):
    """Temporal impulse response sampled at t = 0, hop, 2 hop, ...

    (t/omega1 * w)^2 * w * exp(-alpha * t/omega_ * w) * sin(2 pi t omega1 w)
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    omega_ = omega1 if omega_ is None else omega_
    t = np.arange(n_points) * frame_hop_s
    u = t / omega1 * omega
    return u * u * omega * np.exp(-alpha * t / omega_ * omega) * np.sin(2 * np.pi * t * omega1 * omega)


def analytic_signal(x):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("analytic_signal needs at least 2 samples")
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[1:(n + 1) // 2] = 2.0
    return np.fft.ifft(np.fft.fft(x, axis=-1) * h, axis=-1)


def build_strf(params: StrfParams) -> StrfFilter:
    rate = analytic_signal(rate_impulse_response(
        params.rate_omega, params.omega1, params.alpha,
        params.filter_len_t, params.frame_hop_s, params.omega))
    scale = analytic_signal(scale_impulse_response(
        params.scale_psi, params.omega2, params.filter_len_f, params.channels_per_octave))
    if params.phase_phi == -1:
        rate = np.conj(rate)
    return StrfFilter(np.outer(rate, scale), params, rate, scale)


@dataclass(frozen=True, eq=False)
class StrfFilterBank:
    filters: tuple
    scales: tuple
    rates: tuple
    phases: tuple

    def __len__(self):
        return len(self.filters)

    @property
    def taps(self):
        return np.stack([f.taps for f in self.filters])

    @property
    def shape(self):
        return self.filters[0].taps.shape

    def index(self, scale_i, rate_i, phase_i):
        return (scale_i * len(self.rates) + rate_i) * len(self.phases) + phase_i

    def header(self):
        p = self.filters[0].params
        lines = [
            f"scales={','.join(repr(float(s)) for s in self.scales)}",
            f"rates={','.join(repr(float(r)) for r in self.rates)}",
            f"phases={','.join(str(int(ph)) for ph in self.phases)}",
            "order=scale,rate,phase",
        ]
        for name in ("alpha", "omega", "omega1", "omega2", "filter_len_t",
                     "filter_len_f", "channels_per_octave", "frame_hop_s"):
            v = getattr(p, name)
            lines.append(f"{name}={v if isinstance(v, int) else repr(float(v))}")
        for i, f in enumerate(self.filters):
            lines.append(f"filter{i}=psi:{f.params.scale_psi!r} omega:{f.params.rate_omega!r} "
                         f"phi:{f.params.phase_phi}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        """Write `path` (CTNS, shape (K, 2, T, F)) and a `.txt` sidecar."""
        path = Path(path)
        tensorio.save(path, tensorio.complex_to_planes(self.taps, axis=1))
        path.with_suffix(".txt").write_text(self.header())

    @classmethod
    def load(cls, path):
        path = Path(path)
        taps = tensorio.planes_to_complex(tensorio.load(path), axis=1)
        meta = dict(line.split("=", 1) for line in path.with_suffix(".txt").read_text().splitlines()
                    if "=" in line and not re.match(r"filter\d+=", line))
        scales = tuple(float(s) for s in meta["scales"].split(","))
        rates = tuple(float(r) for r in meta["rates"].split(","))
        phases = tuple(int(p) for p in meta["phases"].split(","))
        base = StrfParams(
            alpha=float(meta["alpha"]), omega=float(meta["omega"]),
            omega1=float(meta["omega1"]), omega2=float(meta["omega2"]),
            filter_len_t=int(meta["filter_len_t"]), filter_len_f=int(meta["filter_len_f"]),
            channels_per_octave=float(meta["channels_per_octave"]),
            frame_hop_s=float(meta["frame_hop_s"]))
        grid = list(itertools.product(scales, rates, phases))
        if len(grid) != taps.shape[0]:
            raise tensorio.TensorFormatError(
                f"bank header lists {len(grid)} filters, tensor holds {taps.shape[0]}")
        filters = []
        for i, (s, r, ph) in enumerate(grid):
            params = replace(base, scale_psi=s, rate_omega=r, phase_phi=ph)
            rebuilt = build_strf(params)
            # keep the separable factors only when they reproduce the stored taps exactly
            filters.append(rebuilt if np.array_equal(rebuilt.taps, taps[i]) else StrfFilter(taps[i], params))
        return cls(tuple(filters), scales, rates, phases)


def build_bank(scales=DEFAULT_SCALES, rates=DEFAULT_RATES, phases=DEFAULT_PHASES,
               base: StrfParams | None = None) -> StrfFilterBank:
    """Filters ordered scale-major, then rate, then phase."""
    if not scales or not rates or not phases:
        raise ValueError("STRF parameter grid must be non-empty along every axis")
    base = base or StrfParams()
    filters = tuple(
        build_strf(replace(base, scale_psi=float(s), rate_omega=float(r), phase_phi=int(ph)))
        for s, r, ph in itertools.product(scales, rates, phases))
    return StrfFilterBank(filters, tuple(map(float, scales)), tuple(map(float, rates)),
                          tuple(map(int, phases)))
