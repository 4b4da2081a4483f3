import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_model
from wakeguard import attacks, evaluation, network, training
from wakeguard.attacks import AttackConfig
from wakeguard.audio import MelSpectrogram


def linear_model(W, b):
    """Per-frame affine logits; vjp is exact."""
    def f(x, need_grad=False):
        logits = x @ W + b
        return logits, (lambda up: up @ W.T) if need_grad else None
    return f


def _clips(n, t=40, f=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = MelSpectrogram(rng.standard_normal((t, f)), 0.01, 0.025, f, 1e-10)
        out.append(training.LabeledClip(spec, rng.integers(0, 3, t), f"c{i}"))
    return out


def test_project_linf_examples():
    assert attacks.project_linf(np.array([0.5, -0.2]), 0.3).tolist() == [0.3, -0.2]
    d = np.array([0.1, -0.25])
    assert np.array_equal(attacks.project_linf(d, 0.3), d)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 5.0))
def test_project_idempotent_and_bounded(seed, eps):
    d = np.random.default_rng(seed).standard_normal((7, 4)) * 3
    p = attacks.project_linf(d, eps)
    assert np.array_equal(attacks.project_linf(p, eps), p)
    assert np.abs(p).max() <= eps


def test_fgsm_matches_analytic_sign():
    rng = np.random.default_rng(0)
    W, b = rng.standard_normal((6, 3)), rng.standard_normal(3)
    x = rng.standard_normal((5, 6))
    target = 1
    # oracle: d/dx mean CE = (softmax - onehot) W^T / frames
    p = network.softmax(x @ W + b)
    grad = (p - np.eye(3)[target]) @ W.T / 5
    eps = 0.05
    x2 = attacks.fgsm_step(x, target, linear_model(W, b), eps)
    assert np.array_equal(np.sign(x - x2), np.sign(grad))
    assert set(np.round(np.abs(x2 - x) / eps, 12).ravel().tolist()) <= {0.0, 1.0}
    assert np.array_equal(attacks.fgsm_step(x, target, linear_model(W, b), 0.0), x)


def test_fgsm_rejects_nonfinite_gradient():
    W = np.full((2, 3), np.nan)
    with pytest.raises(FloatingPointError):
        attacks.fgsm_step(np.zeros((1, 2)), 0, linear_model(W, np.zeros(3)), 0.1)


def test_deepfool_crosses_linear_boundary_in_one_step():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4)
    W = np.stack([np.zeros(4), w], axis=1)
    b = np.array([0.0, -0.7])
    f = linear_model(W, b)
    x = rng.standard_normal((1, 4))
    cur = int(np.argmax(f(x)[0][0]))
    step = attacks.deepfool_step(x, f, overshoot=0.0)
    margin = (x + step) @ w - 0.7
    assert abs(margin[0]) < 1e-9
    # closed-form: distance to the hyperplane along its normal
    dist = abs(x @ w - 0.7)[0] / np.linalg.norm(w)
    assert np.linalg.norm(step) == pytest.approx(dist, rel=1e-12)
    assert cur != int(np.argmax(f(x + 1.01 * step)[0][0]))


def test_deepfool_zero_step_when_misclassified_or_at_target():
    W = np.array([[1.0, -1.0, 0.0]])
    f = linear_model(W, np.zeros(3))
    x = np.array([[2.0]])                       # predicts class 0
    assert not attacks.deepfool_step(x, f, label=1).any()
    assert not attacks.deepfool_step(x, f, target=0).any()


def test_deepfool_picks_nearest_candidate():
    f = np.array([3.0, 1.0, 2.5])
    w = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    step = attacks.deepfool_direction(f, w, 0, [1, 2])
    d1 = abs(f[1] - f[0]) / np.linalg.norm(w[1] - w[0])
    d2 = abs(f[2] - f[0]) / np.linalg.norm(w[2] - w[0])
    assert d2 < d1 and np.linalg.norm(step) == pytest.approx(d2)


def test_deepfool_all_degenerate():
    with pytest.raises(FloatingPointError):
        attacks.deepfool_direction(np.zeros(3), np.zeros((3, 2)), 0, [1, 2])


def test_schedule_defaults():
    for m in ("fgsm", "deepfool", "cw"):
        c = AttackConfig(method=m).resolved()
        assert (c.iterations, c.eval_every) == (4000, 400)
    c = AttackConfig(method="pgd", epsilon=0.02).resolved()
    assert (c.examples, c.iterations, c.eval_every) == (250, 100, 25)
    assert c.step_size == pytest.approx(0.002)
    assert AttackConfig().target == 1


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig(method="bim")
    with pytest.raises(ValueError, match="divide"):
        AttackConfig(method="fgsm", iterations=10, eval_every=3).resolved()
    with pytest.raises(ValueError):
        AttackConfig(method="cw", c=0.0)


def _small(method, **kw):
    base = dict(method=method, epsilon=0.3, iterations=6, eval_every=2, examples=4, trials=2,
                window=5, seed=3)
    base.update(kw)
    return AttackConfig(**base)


@pytest.mark.parametrize("method", attacks.METHODS)
def test_universal_bound_bookkeeping_and_clean(method):
    model = toy_model("baseline", 0)
    train, test = _clips(6, seed=1), _clips(4, seed=2)
    res = attacks.universal_wrap(method, model, train, test, _small(method))
    pert = res.perturbation
    assert np.abs(pert.best_delta).max() <= 0.3 and np.abs(pert.delta).max() <= 0.3
    assert pert.history[0][0] == 0
    assert pert.best_accuracy == min(a for _, a, _ in pert.history)
    assert res.clean_accuracy == evaluation.mask_accuracy(model, test)
    assert res.attacked_accuracy <= res.clean_accuracy + res.slack
    assert all(t["objective_finite"] for t in res.trials)
    assert len(res.trials) == 2


def test_every_recorded_delta_in_ball():
    model = toy_model("cortical", 0)
    cfg = _small("pgd", epsilon=0.05).resolved()
    pert, _, _ = attacks.run_trial(model, _clips(3), _clips(2, seed=5), cfg)
    assert np.abs(pert.delta).max() <= 0.05


def test_pgd_against_random_model_not_worse_than_clean():
    model = toy_model("baseline", 4)
    clips = _clips(5, seed=9)
    res = attacks.pgd_universal(model, clips, clips, _small("pgd"))
    assert res.attacked_accuracy <= res.clean_accuracy


def test_attack_deterministic():
    model = toy_model("baseline", 0)
    a = attacks.universal_wrap("fgsm", model, _clips(4), _clips(3, seed=1), _small("fgsm"))
    b = attacks.universal_wrap("fgsm", model, _clips(4), _clips(3, seed=1), _small("fgsm"))
    assert a.perturbation.best_delta.tobytes() == b.perturbation.best_delta.tobytes()
    assert a.perturbation.history == b.perturbation.history


def test_cw_penalty_shrinks_delta():
    model = toy_model("baseline", 1)
    train, test = _clips(4), _clips(2, seed=1)
    norms = []
    for c in (0.01, 1.0, 100.0):
        cfg = _small("cw", c=c, epsilon=5.0, cw_lr=0.05, trials=1).resolved()
        pert, _, objective = attacks.run_trial(model, train, test, cfg)
        assert np.isfinite(objective).all()
        norms.append(np.linalg.norm(pert.delta))
    assert norms[0] > norms[1] > norms[2]


def test_cw_objective_gradient():
    from conftest import central_difference, rel_err
    z = np.random.default_rng(0).standard_normal((6, 3))
    _, g = attacks.cw_objective(z, 1, kappa=0.5)
    fd = central_difference(lambda: attacks.cw_objective(z, 1, kappa=0.5)[0], z)
    assert rel_err(g, fd) < 1e-6


def test_untile_is_adjoint_of_tile():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((5, 3))
    g = rng.standard_normal((2, 17, 3))
    offs = np.array([0, 3])
    lhs = (evaluation.tiled_batch(d, 17, offs) * g).sum()
    rhs = (d * evaluation.untile_grad(g, 5, offs)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_save_result(tmp_path):
    model = toy_model("baseline", 0)
    res = attacks.universal_wrap("fgsm", model, _clips(3), _clips(2, seed=1), _small("fgsm", trials=1))
    attacks.save_result(res, tmp_path, "h" * 8, "cfg")
    assert np.array_equal(attacks.load_delta(tmp_path), res.perturbation.best_delta)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["config.txt", "delta.ctns", "history.csv", "model_hash.txt", "trials.csv"]
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "step,accuracy,snr_db"
    assert "iterations=6" in (tmp_path / "config.txt").read_text()
