import numpy as np
import pytest

from wakeguard import network, strf

TOY_CPO = 8 / np.log2(7600 / 60)


def toy_bank():
    base = strf.StrfParams(filter_len_t=8, filter_len_f=8, channels_per_octave=TOY_CPO)
    return strf.build_bank(scales=(0.25, 0.5, 1.0), base=base)


def toy_model(arch, seed, mix_channels=2, jitter=0.3):
    """Small network with perturbed weights so no gate or bias sits at its init value."""
    cfg = network.ModelConfig(arch=arch, n_mels=8, prenet_hidden=16, width=8, bottleneck=4,
                              mix_channels=mix_channels)
    bank = toy_bank() if arch == "cortical" else None
    rng = np.random.default_rng(seed)
    n_feat = 7
    p = network.init_params(cfg, rng, bank=bank, norm=(0.3, 1.7),
                            feat_scale=rng.uniform(0.5, 2.0, size=n_feat))
    for k in p.weights:
        p.weights[k] = p.weights[k] + jitter * rng.standard_normal(p.weights[k].shape)
    return p


def central_difference(fn, x, h=1e-5):
    """d fn / d x for scalar fn by central differences; x is perturbed in place and restored."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """max |a - b| / max |b| (b is the finite-difference reference)."""
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


@pytest.fixture
def bank():
    return toy_bank()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
