import math

import numpy as np
import pytest

from pvcnet import losses
from pvcnet.autodiff import Parameter, Tape, Tensor, backward
from pvcnet.dataset import SyntheticConfig, synthesize
from pvcnet.model import NetworkConfig, build
from pvcnet.training import (AdamState, Checkpoint, CheckpointError, TrainConfig, Trainer, TrainingError,
                             adam_step, load, lr_at, predict, save, train)


def small_net(seed=0):
    return NetworkConfig(growth=8, block_layers=[1, 2, 2], stem_filters=8, seed=seed)


@pytest.fixture(scope="module")
def dbs():
    return synthesize(SyntheticConfig(per_class=40, noise=0.0, seed=1))


def scalar_param(value=0.0):
    return Parameter("w", Tensor(np.array([value]), requires_grad=True))


class TestLearningRate:
    @pytest.mark.parametrize("epoch, lr", [(0, 0.001), (99, 0.001), (100, 0.00095), (250, 0.0009025)])
    def test_schedule(self, epoch, lr):
        assert lr_at(epoch) == pytest.approx(lr, rel=1e-15)

    def test_piecewise_constant_non_increasing(self):
        values = [lr_at(e) for e in range(1000)]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert len(set(values)) == 10
        assert all(values[e] == values[e - e % 100] for e in range(1000))

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(-1)


class TestAdam:
    def test_first_step_is_sign(self):
        p = scalar_param()
        st = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
        adam_step([p], {"w": np.array([0.37])}, st, 0.01)
        # m_hat = g, v_hat = g**2
        assert p.data[0] == pytest.approx(-0.01 * 0.37 / (0.37 + 1e-8), rel=1e-14)
        assert st.step == 1

    def test_steady_state_step_size(self):
        p = scalar_param()
        st = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
        prev, deltas = 0.0, []
        for _ in range(300):
            adam_step([p], {"w": np.array([-2.0])}, st, 1e-3)
            deltas.append(p.data[0] - prev)
            prev = p.data[0]
        assert all(d > 0 for d in deltas)
        assert deltas[-1] == pytest.approx(1e-3, rel=1e-6)

    def test_zero_gradient(self):
        p = scalar_param(1.5)
        st = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
        adam_step([p], {"w": np.zeros(1)}, st, 0.1)
        assert p.data[0] == 1.5 and st.step == 1

    def test_non_finite_aborts_before_change(self):
        p = scalar_param(1.0)
        st = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
        with pytest.raises(TrainingError, match="parameter w"):
            adam_step([p], {"w": np.array([np.nan])}, st, 0.1)
        assert p.data[0] == 1.0 and st.step == 0

    def test_accumulators_match_params(self):
        m = build(small_net())
        st = AdamState.for_model(m)
        for p in m.parameters():
            assert st.m[p.name].shape == p.data.shape == st.v[p.name].shape


def test_small_step_decreases_loss(dbs):
    m = build(small_net())
    x = dbs[0].matrix()[:20]
    y = dbs[0].labels()[:20]
    params = m.parameters()

    def value():
        return losses.weighted_bce(m.forward(x, "train", update_stats=False), y).data.item()

    before = value()
    with Tape():
        grads = backward(losses.weighted_bce(m.forward(x, "train", update_stats=False), y), params)
    adam_step(params, grads, AdamState.for_model(m), 1e-5)
    assert value() < before


class TestTrain:
    def test_zero_noise_fits(self, dbs):
        model, history, trainer = train(build(small_net()), dbs,
                                        TrainConfig(epochs_per_round=5, max_epochs=50, batch_size=20))
        assert len(history) == trainer.epoch <= 50
        assert max(h.pooled_val_acc for h in history) >= 0.99
        # all three rates visited
        assert {h.database for h in history} == {"syn360", "syn250", "syn128"}
        # best epoch matches a scan of the history
        best = min(range(len(history)), key=lambda i: (history[i].pooled_val_loss, i))
        assert trainer.best_epoch == history[best].epoch
        acc = np.mean([(predict(model, trainer.val_sets[n]) >= 0.5) == (trainer.val_sets[n].labels() == 1)
                       for n in trainer.val_sets])
        assert acc >= 0.99

    def test_deterministic(self, dbs):
        cfg = TrainConfig(epochs_per_round=2, max_epochs=4, batch_size=20)
        a = Trainer(build(small_net()), dbs, cfg).run()
        b = Trainer(build(small_net()), dbs, cfg).run()
        for x, y in zip(a.model.state_arrays(), b.model.state_arrays()):
            assert x.tobytes() == y.tobytes()

    def test_stall_stops_within_one_round(self, dbs):
        # a vanishing learning rate makes the second round a stall
        cfg = TrainConfig(initial_lr=1e-300, epochs_per_round=3, batch_size=40)
        t = Trainer(build(small_net()), dbs[:1], cfg).run()
        assert t.finished
        assert len(t.history) == 6
        assert t.schedule.done

    def test_non_finite_loss_writes_diagnostic(self, dbs, tmp_path):
        m = build(small_net())
        m.params["head.linear.bias"].tensor.data[:] = np.nan
        with pytest.raises(TrainingError):
            train(m, dbs[:1], TrainConfig(max_epochs=1), diagnostic_path=tmp_path / "diag.ckpt")
        assert Checkpoint.load(tmp_path / "diag.ckpt").adam_step == 0

    def test_inadmissible_database(self, dbs):
        plain = build(NetworkConfig(variant="plain20"))
        with pytest.raises(ValueError, match="fixed training length"):
            Trainer(plain, dbs, TrainConfig())


@pytest.fixture(scope="module")
def trained(dbs):
    return Trainer(build(small_net()), dbs, TrainConfig(epochs_per_round=2, max_epochs=3, batch_size=20)).run()


class TestCheckpoint:
    def test_save_load_save_identical(self, trained, tmp_path):
        save(Checkpoint.from_trainer(trained), tmp_path / "a.ckpt")
        save(load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header(self, trained):
        data = Checkpoint.from_trainer(trained).to_bytes()
        assert data[:4] == b"PVCN" and data[4:8] == (1).to_bytes(4, "little")

    def test_forward_matches_after_load(self, trained, dbs):
        ck = Checkpoint.from_bytes(Checkpoint.from_trainer(trained).to_bytes())
        x = dbs[2].matrix()
        assert ck.model(best=False).predict(x).tobytes() == trained.model.predict(x).tobytes()
        assert ck.model().predict(x).tobytes() == trained.best_model().predict(x).tobytes()

    def test_truncated(self, trained):
        data = Checkpoint.from_trainer(trained).to_bytes()
        with pytest.raises(CheckpointError, match=r"expects \d+ bytes, only \d+ remain"):
            Checkpoint.from_bytes(data[:-10])

    def test_bad_magic_and_version(self, trained):
        data = Checkpoint.from_trainer(trained).to_bytes()
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError, match="version 7"):
            Checkpoint.from_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load(tmp_path / "nope.ckpt")

    def test_resume_matches_unbroken_run(self, dbs):
        cfg = TrainConfig(epochs_per_round=2, max_epochs=5, batch_size=20)
        full = Trainer(build(small_net()), dbs, cfg).run()
        first = Trainer(build(small_net()), dbs, cfg).run(max_epochs=3)
        resumed = Checkpoint.from_bytes(Checkpoint.from_trainer(first).to_bytes()).trainer(dbs).run()
        assert resumed.epoch == full.epoch == 5
        for a, b in zip(full.model.state_arrays(), resumed.model.state_arrays()):
            assert a.tobytes() == b.tobytes()
        assert [h.pooled_val_loss for h in full.history] == [h.pooled_val_loss for h in resumed.history]
        assert Checkpoint.from_trainer(full).to_bytes() == Checkpoint.from_trainer(resumed).to_bytes()
        assert math.isfinite(resumed.best_pooled)
