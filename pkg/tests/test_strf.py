import numpy as np
import pytest
from scipy.signal import hilbert

from wakeguard import strf
from wakeguard.strf import StrfParams


def test_scale_response_points():
    assert strf.scale_response_fourier(0.0, 1.0) == 0.0
    assert strf.scale_response_fourier(2.0, 2.0) == 1.0
    assert strf.scale_response_fourier(2.0, 1.0) == pytest.approx(4 * np.exp(-3), abs=1e-15)


def test_scale_response_peak_bounded():
    y = np.linspace(0, 20, 10001)
    for psi in strf.DEFAULT_SCALES:
        assert strf.scale_response_fourier(y, psi).max() <= 1 + 1e-9


def test_rate_response_origin_and_zero_crossings():
    r = strf.rate_impulse_response(32.0, 1.0, 3.5, 32, 0.01)
    assert r[0] == 0.0 and np.isfinite(r).all()
    # sin(2 pi t w) vanishes at t = k / (2 w): for w = 25 Hz every other 10 ms sample
    r25 = strf.rate_impulse_response(25.0, 1.0, 3.5, 32, 0.01)
    assert np.abs(r25[::2]).max() < 1e-12
    assert np.abs(r25[1::2]).min() > 0


def test_scale_impulse_zero_mean_and_length():
    cpo = StrfParams().channels_per_octave
    for psi in strf.DEFAULT_SCALES:
        r = strf.scale_impulse_response(psi, 1.0, 32, cpo)
        assert r.shape == (32,) and abs(r.mean()) < 1e-9


def _second_moment(r):
    f = np.arange(len(r)) - len(r) // 2
    w = np.abs(r) / np.abs(r).sum()
    return float((w * f ** 2).sum())


def test_low_scale_is_broader():
    cpo = StrfParams().channels_per_octave
    broad = _second_moment(strf.scale_impulse_response(0.25, 1.0, 32, cpo))
    narrow = _second_moment(strf.scale_impulse_response(8.0, 1.0, 32, cpo))
    assert broad > narrow


def test_unrepresentable_scale_names_limit():
    limit = strf.max_representable_scale(32, 4.0)
    with pytest.raises(ValueError, match="maximum representable scale is"):
        strf.scale_impulse_response(limit * 1.01, 1.0, 32, 4.0)
    strf.scale_impulse_response(limit, 1.0, 32, 4.0)


def test_half_max_constant():
    x = strf.HALF_MAX_ARG
    assert x * x * np.exp(1 - x * x) == pytest.approx(0.5, abs=1e-14)
    assert 0 < x < 1


def test_analytic_signal_matches_hilbert_oracle():
    n = np.arange(64)
    x = np.cos(2 * np.pi * 5 * n / 64) + 0.3 * np.sin(2 * np.pi * 11 * n / 64)
    a = strf.analytic_signal(x)
    assert np.allclose(a, hilbert(x), atol=1e-12)
    expected_imag = np.sin(2 * np.pi * 5 * n / 64) - 0.3 * np.cos(2 * np.pi * 11 * n / 64)
    assert np.allclose(a.imag, expected_imag, atol=1e-9)


@pytest.mark.parametrize("n", [2, 7, 32, 33])
def test_analytic_signal_real_part_and_dc(n):
    x = np.random.default_rng(n).standard_normal(n)
    assert np.allclose(strf.analytic_signal(x).real, x, atol=1e-9)
    assert np.allclose(strf.analytic_signal(np.full(n, 2.0)).imag, 0, atol=1e-12)


def test_phase_pair_conjugates_rate_factor():
    a = strf.build_strf(StrfParams(scale_psi=1.0, rate_omega=8.0, phase_phi=1))
    b = strf.build_strf(StrfParams(scale_psi=1.0, rate_omega=8.0, phase_phi=-1))
    assert a.taps.shape == (32, 32)
    assert np.array_equal(b.taps, np.outer(np.conj(a.rate_factor), a.scale_factor))
    assert np.allclose(np.abs(a.taps), np.abs(b.taps), rtol=0, atol=1e-12)
    # opposite temporal phase progression of the rate factor
    da = np.angle(a.rate_factor[5:15][1:] / a.rate_factor[5:15][:-1])
    db = np.angle(b.rate_factor[5:15][1:] / b.rate_factor[5:15][:-1])
    assert np.allclose(da, -db)


def test_bank_default_and_single():
    bank = strf.build_bank()
    assert len(bank) == 48 and bank.taps.shape == (48, 32, 32)
    assert bank.filters[bank.index(2, 1, 1)].params == StrfParams(scale_psi=1.0, rate_omega=8.0, phase_phi=-1)
    assert len(strf.build_bank((1.0,), (4.0,), (1,))) == 1
    with pytest.raises(ValueError):
        strf.build_bank((), (4.0,), (1,))


def test_bank_round_trip(tmp_path):
    bank = strf.build_bank()
    bank.save(tmp_path / "bank.ctns")
    got = strf.StrfFilterBank.load(tmp_path / "bank.ctns")
    assert got.taps.tobytes() == bank.taps.tobytes()
    assert (got.scales, got.rates, got.phases) == (bank.scales, bank.rates, bank.phases)
    assert [f.params for f in got.filters] == [f.params for f in bank.filters]


def test_bank_deterministic():
    assert strf.build_bank().taps.tobytes() == strf.build_bank().taps.tobytes()


def test_params_validation():
    with pytest.raises(ValueError):
        StrfParams(scale_psi=0)
    with pytest.raises(ValueError):
        StrfParams(phase_phi=0)
    with pytest.raises(ValueError):
        StrfParams(filter_len_t=1)
