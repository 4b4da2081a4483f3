import numpy as np
import pytest

from conftest import central_difference, rel_err
from wakeguard import network, training
from wakeguard.audio import FrontendConfig
from wakeguard.training import SynthConfig, TrainConfig

SMALL = SynthConfig(minutes=10 * 2.0 / 60)     # 10 clips


def test_cross_entropy_uniform_logits():
    loss, _ = training.cross_entropy(np.zeros((7, 3)), np.array([0, 1, 2, 0, 1, 2, 2]))
    assert loss == pytest.approx(np.log(3), abs=1e-15)


def test_cross_entropy_margin_limit():
    labels = np.array([0, 2, 1])
    logits = np.eye(3)[labels] * 50.0
    assert training.cross_entropy(logits, labels)[0] < 1e-20


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 5, 3))
    labels = rng.integers(0, 3, (2, 5))
    w, m = np.array([0.5, 1.0, 2.0]), rng.uniform(0, 1, (2, 5))
    _, g = training.cross_entropy(logits, labels, w, m)
    fd = central_difference(lambda: training.cross_entropy(logits, labels, w, m)[0], logits)
    assert rel_err(g, fd) < 1e-7
    _, g = training.cross_entropy(logits, labels)
    p = network.softmax(logits)
    assert np.allclose(g, (p - np.eye(3)[labels]) / labels.size, atol=1e-15)


def test_cross_entropy_unit_weights_exact():
    rng = np.random.default_rng(1)
    logits, labels = rng.standard_normal((9, 3)), rng.integers(0, 3, 9)
    a = training.cross_entropy(logits, labels)
    b = training.cross_entropy(logits, labels, (1.0, 1.0, 1.0))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="class indices"):
        training.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError, match="shape"):
        training.cross_entropy(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_synth_deterministic():
    a = training.synth_dataset(SMALL, seed=3)
    b = training.synth_dataset(SMALL, seed=3)
    assert len(a) == 10
    for x, y in zip(a, b):
        assert x.spec.values.tobytes() == y.spec.values.tobytes()
        assert np.array_equal(x.labels, y.labels)
    c = training.synth_dataset(SMALL, seed=4)
    assert a[0].spec.values.tobytes() != c[0].spec.values.tobytes()


def test_synth_positive_rate():
    cfg = SynthConfig(minutes=10.0)
    clips = training.synth_dataset(cfg, seed=0)
    frac = np.mean(np.concatenate([c.labels for c in clips]) == training.WAKE)
    assert abs(frac - cfg.positive_rate) <= 0.2 * cfg.positive_rate


def test_synth_infeasible_rate():
    with pytest.raises(ValueError, match="infeasible"):
        training.synth_dataset(SynthConfig(minutes=1.0, positive_rate=0.3), seed=0)


def test_noise_free_silence_is_class_one():
    clips = training.synth_dataset(SynthConfig(minutes=20 * 2.0 / 60, noise=False), seed=1)
    floor = np.log(FrontendConfig().log_floor)
    for c in clips:
        silent = np.all(c.spec.values == floor, axis=1)
        assert silent.any()
        assert (c.labels[silent] == training.NO_SPEECH).all()


def test_boundary_mask():
    labels = np.array([1, 1, 1, 1, 2, 2, 2, 2, 2, 2])
    assert training.boundary_mask(labels, 2).tolist() == [1, 1, 0, 0, 0, 0, 1, 1, 1, 1]


def test_manifest_round_trip(tmp_path):
    clips = training.synth_dataset(SMALL, seed=5)[:3]
    path = training.write_manifest(clips, tmp_path)
    got = training.load_manifest(path)
    for a, b in zip(clips, got):
        assert a.spec.values.tobytes() == b.spec.values.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.loss_mask, b.loss_mask)


def test_manifest_empty_and_mismatch(tmp_path):
    (tmp_path / "m.csv").write_text("wav_path,label_path\n")
    assert training.load_manifest(tmp_path / "m.csv") == []
    clip = training.synth_dataset(SMALL, seed=5)[0]
    path = training.write_manifest([clip], tmp_path, "one.csv")
    lab = tmp_path / "audio" / f"{clip.source_id}.txt"
    lab.write_text(lab.read_text() + "0\n")
    with pytest.raises(ValueError, match="labels but"):
        training.load_manifest(path)
    with pytest.raises(FileNotFoundError):
        training.load_manifest(tmp_path / "missing.csv")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(seed=-1)


def _small_model(arch, clips):
    from conftest import toy_bank
    cfg = network.ModelConfig(arch=arch, prenet_hidden=16, width=8, bottleneck=4, mix_channels=2)
    return training.init_model(cfg, clips, 0, None if arch == "baseline" else _full_bank())


def _full_bank():
    from wakeguard import strf
    return strf.build_bank()


@pytest.mark.parametrize("arch", network.ARCHS)
def test_one_epoch_lowers_training_loss(arch):
    clips = training.synth_dataset(SMALL, seed=0)
    p = _small_model(arch, clips)
    _, hist = training.train(p, clips, clips, TrainConfig(epochs=1, learning_rate=3e-3))
    rows = {(e, s): l for e, s, l, _ in hist.rows}
    X, Y, M = training.stack(clips)
    assert rows[(1, "val")] < rows[(0, "val")]


def test_zero_step_size_keeps_parameters():
    clips = training.synth_dataset(SMALL, seed=0)
    p = _small_model("baseline", clips)
    best, _ = training.train(p, clips, clips, TrainConfig(epochs=1, learning_rate=0.0))
    assert all(np.array_equal(best.weights[k], p.weights[k]) for k in p.weights)


def test_training_deterministic(tmp_path):
    clips = training.synth_dataset(SMALL, seed=0)
    hashes = []
    for i in range(2):
        p = _small_model("baseline", clips)
        best, _ = training.train(p, clips[:6], clips[6:], TrainConfig(epochs=2, seed=11))
        hashes.append(network.save_checkpoint(tmp_path / str(i), best))
    assert hashes[0] == hashes[1]


def test_divergence_aborts():
    clips = training.synth_dataset(SMALL, seed=0)
    p = _small_model("baseline", clips)
    p.weights["out.b"][:] = np.nan
    with pytest.raises(training.TrainingDiverged, match="loss=nan"):
        training.train(p, clips, clips, TrainConfig(epochs=1))


def test_empty_data_rejected():
    with pytest.raises(ValueError, match="empty"):
        training.train(None, [], [], TrainConfig())
