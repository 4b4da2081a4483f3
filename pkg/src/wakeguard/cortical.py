"""Cortical feature stage: STRF convolution, modulus, rate/scale pooling.

Convolutions are 2-D "same" convolutions (zero padded, scipy
``convolve2d(..., mode="same")`` alignment) over (time, frequency),
computed with FFTs.  Phase pairs are reduced by taking the larger
magnitude, leaving a (rate x scale) grid per time-frequency bin.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from . import autodiff
from .audio import MelSpectrogram
from .strf import StrfFilterBank

# bounds the (batch x filters x padded time x padded freq) complex workspace
_MAX_CHUNK_ELEMS = 6_000_000


@dataclass(frozen=True)
class CorticalTensor:
    values: np.ndarray   # (time, freq, rate, scale), >= 0
    rates: tuple
    scales: tuple

    def rategram(self):
        return rategram(self)

    def scalegram(self):
        return scalegram(self)


def _check_input(x, bank):
    lt, lf = bank.shape
    if x.shape[-2] < lt:
        raise ValueError(f"spectrogram has {x.shape[-2]} frames; STRF needs >= {lt}")
    if x.shape[-1] < lf:
        raise ValueError(f"spectrogram has {x.shape[-1]} channels, narrower than STRF extent {lf}")


@lru_cache(maxsize=8)
def _filter_spectra(bank: StrfFilterBank, p, q):
    return sfft.fft2(bank.taps, s=(p, q))


def _geometry(bank, t, f):
    lt, lf = bank.shape
    p = sfft.next_fast_len(t + lt - 1)
    q = sfft.next_fast_len(f + lf - 1)
    return p, q, (lt - 1) // 2, (lf - 1) // 2


def _chunks(n, k, p, q):
    step = max(1, _MAX_CHUNK_ELEMS // (k * p * q))
    return [slice(i, min(n, i + step)) for i in range(0, n, step)]


def strf_responses(x, bank: StrfFilterBank):
    """Complex filter outputs, (N, K, T, F) for x of shape (N, T, F)."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, bank)
    n, t, f = x.shape
    p, q, ct, cf = _geometry(bank, t, f)
    H = _filter_spectra(bank, p, q)
    out = np.empty((n, len(bank), t, f), dtype=np.complex128)
    for sl in _chunks(n, len(bank), p, q):
        X = sfft.fft2(x[sl], s=(p, q))
        full = sfft.ifft2(X[:, None] * H[None])
        out[sl] = full[..., ct:ct + t, cf:cf + f]
    return out


def _strf_vjp(g_resp, bank, t, f):
    """Gradient w.r.t. the real input of Re<g, conv(x, h)> summed over filters."""
    n = g_resp.shape[0]
    p, q, ct, cf = _geometry(bank, t, f)
    Hc = np.conj(_filter_spectra(bank, p, q))
    gx = np.empty((n, t, f))
    for sl in _chunks(n, len(bank), p, q):
        emb = np.zeros((sl.stop - sl.start, len(bank), p, q), dtype=np.complex128)
        emb[..., ct:ct + t, cf:cf + f] = g_resp[sl]
        acc = (sfft.fft2(emb) * Hc[None]).sum(axis=1)
        gx[sl] = sfft.ifft2(acc).real[:, :t, :f]
    return gx


def _separable_factors(bank):
    """(rate factors (R, Lt), scale factors (S, Lf)) if every filter is
    ``outer(rate^phi, scale)`` with shared factors, else None."""
    f0 = bank.filters
    if any(f.rate_factor is None or f.scale_factor is None for f in f0):
        return None
    if set(bank.phases) - {1, -1}:
        return None
    ip = bank.phases.index(bank.phases[0])
    rates = np.stack([f0[bank.index(0, r, ip)].rate_factor for r in range(len(bank.rates))])
    if bank.phases[0] == -1:
        rates = np.conj(rates)
    scales = np.stack([f0[bank.index(s, 0, ip)].scale_factor for s in range(len(bank.scales))])
    return rates, scales


def _separable_responses(x, bank, factors):
    """Same values as :func:`strf_responses`, shaped (N, S, R, Phi, T, F)."""
    rate_f, scale_f = factors
    n, t, f = x.shape
    p, q, ct, cf = _geometry(bank, t, f)
    a = sfft.ifft(sfft.fft(x, n=p, axis=1)[:, None] * sfft.fft(rate_f, n=p)[None, :, :, None],
                  axis=2)[:, :, ct:ct + t]                           # (N, R, T, F)
    a = np.stack([a if ph == 1 else np.conj(a) for ph in bank.phases], axis=2)
    A = sfft.fft(a, n=q, axis=-1)                                    # (N, R, Phi, T, Q)
    B = sfft.fft(scale_f, n=q)                                       # (S, Q)
    out = np.empty((n, len(bank.scales)) + a.shape[1:], dtype=np.complex128)
    for s in range(len(bank.scales)):
        out[:, s] = sfft.ifft(A * B[s], axis=-1)[..., cf:cf + f]
    return out


def _separable_vjp(g, bank, factors, t, f):
    """Pullback of Re<g, responses> to the real input; g is (N, S, R, Phi, T, F)."""
    rate_f, scale_f = factors
    n = g.shape[0]
    p, q, ct, cf = _geometry(bank, t, f)
    Bc = np.conj(sfft.fft(scale_f, n=q))
    acc = np.zeros((n, len(bank.rates), len(bank.phases), t, q), dtype=np.complex128)
    emb = np.zeros((n,) + g.shape[2:-1] + (q,), dtype=np.complex128)
    for s in range(len(bank.scales)):
        emb[..., cf:cf + f] = g[:, s]
        acc += sfft.fft(emb, axis=-1) * Bc[s]
    ga = sfft.ifft(acc, axis=-1)[..., :f]                            # (N, R, Phi, T, F)
    ga = sum(ga[:, :, i] if ph == 1 else np.conj(ga[:, :, i])
             for i, ph in enumerate(bank.phases))                    # (N, R, T, F)
    embt = np.zeros((n, len(bank.rates), p, f), dtype=np.complex128)
    embt[:, :, ct:ct + t] = ga
    G = (sfft.fft(embt, axis=2) * np.conj(sfft.fft(rate_f, n=p))[None, :, :, None]).sum(axis=1)
    return sfft.ifft(G, axis=1).real[:, :t]


def _running_max(planes):
    """Elementwise max over a list of arrays; ties keep the lowest index."""
    best, idx = planes[0], np.zeros(planes[0].shape, dtype=np.intp)
    for i, p in enumerate(planes[1:], start=1):
        upd = p > best
        best = np.where(upd, p, best)
        idx[upd] = i
    return best, idx


def _pooled(x, bank):
    """Phase-reduced magnitudes (N, S, R, T, F) plus a pullback to x."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, bank)
    n, t, f = x.shape
    ns, nr, nph = len(bank.scales), len(bank.rates), len(bank.phases)
    factors = _separable_factors(bank)
    if factors is not None:
        resp = _separable_responses(x, bank, factors)
    else:
        resp = strf_responses(x, bank).reshape(n, ns, nr, nph, t, f)
    best, phase_idx = _running_max([np.abs(resp[:, :, :, i]) for i in range(nph)])
    win = resp[:, :, :, 0].copy()
    for i in range(1, nph):
        sel = phase_idx == i
        win[sel] = resp[:, :, :, i][sel]
    del resp
    unit = np.zeros_like(win)
    np.divide(win, best, out=unit, where=best > 0)           # modulus subgradient 0 at 0

    def pullback(g_best):
        gb = g_best * unit
        g_resp = np.zeros((n, ns, nr, nph, t, f), dtype=np.complex128)
        for i in range(nph):
            g_resp[:, :, :, i] = np.where(phase_idx == i, gb, 0.0)
        if factors is not None:
            return _separable_vjp(g_resp, bank, factors, t, f)
        return _strf_vjp(g_resp.reshape(n, len(bank), t, f), bank, t, f)
    return best, pullback


def cortical_transform(spec, bank: StrfFilterBank) -> CorticalTensor:
    x = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    values, _ = _pooled(x[None], bank)
    return CorticalTensor(values[0].transpose(2, 3, 1, 0), bank.rates, bank.scales)


def rategram(ct: CorticalTensor):
    """Max over the scale axis: (time, freq, rate)."""
    return ct.values.max(axis=-1)


def scalegram(ct: CorticalTensor):
    """Max over the rate axis: (time, freq, scale)."""
    return ct.values.max(axis=-2)


def n_feature_channels(bank):
    return len(bank.rates) + len(bank.scales)


def cortical_features(x, bank, with_vjp=False):
    """concat(rategram, scalegram) for a batch: (N, T, F, R + S).

    With ``with_vjp`` also returns the pullback to the input spectrogram.
    """
    values, pullback = _pooled(x, bank)                      # (N, S, R, T, F)
    ns, nr = values.shape[1], values.shape[2]
    rate_planes = [_running_max([values[:, s, r] for s in range(ns)]) for r in range(nr)]
    scale_planes = [_running_max([values[:, s, r] for r in range(nr)]) for s in range(ns)]
    feats = np.stack([p for p, _ in rate_planes] + [p for p, _ in scale_planes], axis=-1)
    if not with_vjp:
        return feats

    def vjp(g):
        g_v = np.zeros(values.shape)
        for r, (_, s_idx) in enumerate(rate_planes):
            for s in range(ns):
                g_v[:, s, r] += np.where(s_idx == s, g[..., r], 0.0)
        for s, (_, r_idx) in enumerate(scale_planes):
            for r in range(nr):
                g_v[:, s, r] += np.where(r_idx == r, g[..., nr + s], 0.0)
        return pullback(g_v)
    return feats, vjp


@dataclass(frozen=True)
class FrontendConfig:
    mix_channels: int = 1
    dropout_feature_p: float = 0.1
    dropout_residual_p: float = 0.9


def frontend_forward(tape, z, bank, params, buffers, cfg: FrontendConfig, train, rng,
                     features=None):
    """Cortical features -> dropout -> 1x1 mix -> + dropped-out residual.

    z: normalised spectrogram batch (N, T, F).  Returns (N, T, F * mix_channels).
    `features` may carry precomputed ``cortical_features(z)``; the STRF stage
    has no parameters, so only its input gradient is lost by doing so.
    """
    z = np.asarray(z, dtype=np.float64)
    n, t, f = z.shape
    k = cfg.mix_channels
    W, b = params["mix.W"], params["mix.b"]
    if W.shape[1] != k:
        raise ValueError(f"mix.W has {W.shape[1]} output channels, config says {k}")
    feat_vjp = None
    if features is not None:
        feats = features
    elif tape is not None:
        feats, feat_vjp = cortical_features(z, bank, with_vjp=True)
    else:
        feats = cortical_features(z, bank)
    if feats.shape[:3] != (n, t, f) or feats.shape[3] != W.shape[0]:
        raise ValueError(f"cortical features {feats.shape} do not match input (N,T,F)={z.shape} "
                         f"and mix in_channels={W.shape[0]}")
    scale = buffers["feat.scale"]
    fs = feats / scale
    fmask = autodiff.dropout_mask(rng, fs.shape, cfg.dropout_feature_p) \
        if train and cfg.dropout_feature_p > 0 else None
    fd = fs * fmask if fmask is not None else fs
    mixed = fd @ W + b                                     # (N, T, F, k)
    rmask = autodiff.dropout_mask(rng, z.shape, cfg.dropout_residual_p) \
        if train and cfg.dropout_residual_p > 0 else None
    resid = z * rmask if rmask is not None else z
    out = (mixed + resid[..., None]).reshape(n, t, f * k)
    if tape is not None:
        def back(g, grads):
            g4 = g.reshape(n, t, f, k)
            grads["mix.W"] += fd.reshape(-1, fd.shape[-1]).T @ g4.reshape(-1, k)
            grads["mix.b"] += g4.reshape(-1, k).sum(axis=0)
            g_res = g4.sum(axis=-1)
            gz = g_res * rmask if rmask is not None else g_res
            if feat_vjp is not None:
                gf = g4 @ W.T
                if fmask is not None:
                    gf = gf * fmask
                gz = gz + feat_vjp(gf / scale)
            return gz
        tape.push(back)
    return out

