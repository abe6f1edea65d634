import math
import struct

import numpy as np
import pytest

from swinecat import tensor as T
from swinecat import train as tr
from swinecat.errors import CompatibilityError, ConfigurationError, ContractError, FormatError, IngestionError
from swinecat.model import ModelConfig, ModelParams, build, forward
from swinecat.tensor import Tensor, backward, double_precision, no_grad
from swinecat.train import AdamState, EarlyStopping, TrainConfig, TrainLog, cross_entropy

LN9 = 2.1972245773362196  # math.log(9), frozen


def one_param(value):
    return ModelParams(ModelConfig.tiny(), {"x": Tensor(value, requires_grad=True, dtype=np.float64)})


# ----------------------------------------------------------- cross entropy

def test_uniform_logits_give_ln9():
    assert abs(math.log(9) - LN9) < 1e-15
    loss = cross_entropy(Tensor(np.zeros((4, 9))), [0, 3, 8, 5]).item()
    assert abs(loss - LN9) < 1e-6


def test_confident_logits_give_zero_loss():
    logits = np.zeros((2, 9))
    logits[[0, 1], [2, 7]] = 1000.0
    assert cross_entropy(Tensor(logits), [2, 7]).item() < 1e-6


def test_cross_entropy_matches_naive(rng):
    logits, labels = rng.standard_normal((4, 9)) * 3, rng.integers(0, 9, 4)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    naive = -np.mean(np.log(probs[np.arange(4), labels]))
    with double_precision():
        assert abs(cross_entropy(Tensor(logits), labels).item() - naive) < 1e-5


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    with double_precision():
        logits = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        labels = np.array([4, 0, 2])
        backward(cross_entropy(logits, labels))
    probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    probs[np.arange(3), labels] -= 1
    np.testing.assert_allclose(logits.grad, probs / 3, atol=1e-12)


@pytest.mark.parametrize("labels", [[0, 9], [-1, 0], [0]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 9))), labels)


# -------------------------------------------------------------------- adam

@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_first_adam_step_moves_by_lr_times_sign(g):
    p = one_param([1.0])
    p["x"].grad = np.array([g])
    tr.adam_step(p, AdamState(), TrainConfig(learning_rate=1e-2))
    step = p["x"].data[0] - 1.0
    assert abs(step + 1e-2 * np.sign(g)) < 1e-2 * 1e-2


def test_zero_gradient_leaves_params_and_counts_step():
    p, state = one_param([1.0, -2.0]), AdamState()
    p["x"].grad = np.zeros(2)
    tr.adam_step(p, state, TrainConfig())
    assert state.t == 1 and np.array_equal(p["x"].data, [1.0, -2.0])


def test_adam_zeroes_gradients_after_step():
    p = one_param([1.0])
    p["x"].grad = np.array([0.5])
    tr.adam_step(p, AdamState(), TrainConfig())
    assert np.array_equal(p["x"].grad, [0.0])


def test_adam_requires_every_gradient():
    with pytest.raises(ContractError):
        tr.adam_step(one_param([1.0]), AdamState(), TrainConfig())


def test_adam_quadratic_descent_matches_recurrence():
    cfg = TrainConfig(learning_rate=1e-2)
    p, state = one_param([1.0]), AdamState()
    x, m, v = 1.0, 0.0, 0.0
    losses = []
    for t in range(1, 11):
        with double_precision():
            loss = T.sum(p["x"] * p["x"])
        losses.append(loss.item())
        backward(loss)
        tr.adam_step(p, state, cfg)
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p["x"].data[0] - x) < 1e-12
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(patience=0), dict(batch_size=0)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig().learning_rate == 1e-5 and TrainConfig().batch_size == 32


def test_small_step_decreases_batch_loss(rng):
    params = build(ModelConfig.tiny())
    images, labels = Tensor(rng.standard_normal((8, 3, 64, 64))), rng.integers(0, 9, 8)
    before = cross_entropy(forward(params, images, "train"), labels)
    backward(before)
    tr.adam_step(params, AdamState(), TrainConfig(learning_rate=1e-6))
    with no_grad():
        after = cross_entropy(forward(params, images, "train"), labels)
    assert after.item() < before.item()


# ---------------------------------------------------------- early stopping

def run_stopper(losses, patience=3):
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(losses, 1):
        if stopper.update(epoch, loss, lambda e=epoch: e):
            return epoch, stopper.best_state
    return None, stopper.best_state


def test_early_stopping_reference_sequence():
    assert run_stopper([1.0, 0.9, 0.95, 0.94, 0.93]) == (5, 2)


def test_early_stopping_strictly_decreasing_never_stops():
    assert run_stopper([4.0, 3.0, 2.0, 1.0]) == (None, 4)


def test_ties_count_toward_patience():
    assert run_stopper([1.0, 1.0, 1.0, 1.0]) == (4, 1)
    assert run_stopper([1.0, 0.5, 0.5, 0.4, 0.6], patience=2) == (None, 4)


def scripted_fit(monkeypatch, val_losses, **cfg):
    """fit() with the heavy passes replaced: epoch e writes e into head.bias
    and reports the scripted val loss."""
    def fake_epoch(params, state, manifest, train_cfg, epoch, rng):
        params["head.bias"].data[:] = epoch
        return 1.0, 0.5

    def fake_eval(params, manifest, split_name, *a, **k):
        epoch = int(params["head.bias"].data[0])
        return val_losses[epoch - 1], 0.5, None, None

    monkeypatch.setattr(tr, "train_epoch", fake_epoch)
    monkeypatch.setattr(tr, "evaluate", fake_eval)
    from swinecat.data import DatasetManifest, Record
    manifest = DatasetManifest([Record("a", 0, "train"), Record("b", 0, "val")])
    return tr.fit(ModelConfig.tiny(), TrainConfig(**cfg), manifest)


def test_fit_returns_best_snapshot_and_stops(monkeypatch):
    best, log = scripted_fit(monkeypatch, [1.0, 0.9, 0.95, 0.94, 0.93, 0.1])
    assert [r.epoch for r in log.records] == [1, 2, 3, 4, 5]
    assert log.best_epoch == 2 and log.stopped_early
    assert np.all(best["head.bias"].data == 2)


def test_fit_runs_to_max_epochs(monkeypatch):
    best, log = scripted_fit(monkeypatch, [4.0, 3.0, 2.0, 1.0, 0.5], max_epochs=4)
    assert len(log.records) == 4 and log.best_epoch == 4 and not log.stopped_early
    assert np.all(best["head.bias"].data == 4)


def test_fit_requires_train_and_val(synth90):
    with pytest.raises(IngestionError):
        tr.fit(ModelConfig.tiny(), TrainConfig(), synth90.with_records(synth90.select("train")))


def test_fit_is_deterministic_and_snapshot_is_best(synth90):
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, patience=3, batch_size=16)
    best_a, log_a = tr.fit(ModelConfig.tiny(), cfg, synth90)
    best_b, log_b = tr.fit(ModelConfig.tiny(), cfg, synth90)
    strip = lambda log: [(r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc) for r in log.records]
    assert strip(log_a) == strip(log_b)
    assert all(np.array_equal(best_a[n].data, best_b[n].data) for n in best_a)
    val_loss, *_ = tr.evaluate(best_a, synth90, "val", cfg.batch_size)
    assert val_loss == min(r.val_loss for r in log_a.records)


def test_trainlog_csv_round_trip(tmp_path):
    log = TrainLog([tr.EpochRecord(1, 2.0, 0.1, 1.5, 0.2, 0.5), tr.EpochRecord(2, 1.0, 0.6, 1.25, 0.4, 0.5)])
    log.write_csv(tmp_path / "log.csv")
    text = (tmp_path / "log.csv").read_text()
    assert text.splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc,seconds"
    back = TrainLog.read_csv(tmp_path / "log.csv")
    assert back.records == log.records and back.best_epoch == 2


# ------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.bin"
    params = build(ModelConfig.tiny(seed=3))
    tr.save_checkpoint(params, path)
    return params, path


def test_checkpoint_round_trip_is_bit_exact(saved, rng):
    params, path = saved
    loaded = tr.load_checkpoint(path, ModelConfig.tiny(seed=3))
    assert list(loaded) == list(params)
    x = rng.standard_normal((2, 3, 64, 64))
    with no_grad():
        assert np.array_equal(forward(params, x).data, forward(loaded, x).data)


def test_checkpoint_layout(saved):
    params, path = saved
    buf = path.read_bytes()
    assert buf[:4] == b"SECT"
    assert struct.unpack("<II", buf[4:12]) == (1, len(params))
    (n,) = struct.unpack("<I", buf[12:16])
    assert buf[16:16 + n].decode() == "patch_embed.proj.weight"
    expected = 12 + sum(4 + len(k.encode()) + 4 + 4 * p.ndim + 4 * p.size for k, p in params.items())
    assert len(buf) == expected


@pytest.mark.parametrize("mangle", [
    lambda b: b[:-3],
    lambda b: b[:40],
    lambda b: b"XECT" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b + b"\0",
    lambda b: b"",
])
def test_corrupt_checkpoints_are_rejected(saved, tmp_path, mangle):
    _, path = saved
    bad = tmp_path / "bad.bin"
    bad.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(FormatError):
        tr.load_checkpoint(bad, ModelConfig.tiny(seed=3))


def test_eca_checkpoint_rejected_by_baseline_config(saved):
    _, path = saved
    with pytest.raises(CompatibilityError, match=r"unexpected stages\.0\.eca\.kernel"):
        tr.load_checkpoint(path, ModelConfig.tiny(eca_enabled=False))


def test_baseline_checkpoint_rejected_by_eca_config(tmp_path):
    path = tmp_path / "base.bin"
    tr.save_checkpoint(build(ModelConfig.tiny(eca_enabled=False)), path)
    with pytest.raises(CompatibilityError, match=r"missing stages\.0\.eca\.kernel"):
        tr.load_checkpoint(path, ModelConfig.tiny())


def test_shape_mismatch_is_named(saved):
    _, path = saved
    with pytest.raises(CompatibilityError, match="shape mismatch head.weight"):
        tr.load_checkpoint(path, ModelConfig.tiny(num_classes=4))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(FormatError):
        tr.load_checkpoint(tmp_path / "none.bin")
