import gzip
import json
import logging

import numpy as np
import pytest

from pvcnet import dataset as dsm
from pvcnet.dataset import (BeatRecord, DatabaseSet, FormatError, ScheduleState, SyntheticConfig,
                            batches, beat_template, load, save, schedule_step, split, synthesize)


def make_set(n, n_pvc, fs=360.0, name="db"):
    L = dsm.window_length(fs)
    recs = [BeatRecord(f"{name}-{i}", name, fs, int(i < n_pvc), np.full(L, i / max(n, 1)))
            for i in range(n)]
    return DatabaseSet(name, fs, recs)


def line(**over):
    obj = {"id": "a", "db": "x", "fs": 360, "label": 0, "samples": [0.0] * 150}
    obj.update(over)
    return json.dumps(obj)


class TestLoad:
    def test_three_lines(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text("\n".join(line(id=str(i)) for i in range(3)) + "\n")
        ds = load(p)
        assert len(ds) == 3 and ds.name == "x" and ds.fs == 360 and ds.length == 150

    def test_wrong_length_names_expected(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text(line() + "\n" + line(samples=[0.0] * 149) + "\n")
        with pytest.raises(FormatError, match=r"line 2: 149 samples .*expects 150"):
            load(p)

    @pytest.mark.parametrize("bad, msg", [
        ("{not json", "not valid JSON"),
        (json.dumps({"id": "a"}), "expected fields"),
        (line(label=2), "label must be 0 or 1"),
        (line(fs=-1), "fs must be positive"),
        (line(samples=[[0.0]] * 150), "flat list"),
    ])
    def test_malformed(self, tmp_path, bad, msg):
        p = tmp_path / "x.jsonl"
        p.write_text(bad + "\n")
        with pytest.raises(FormatError, match=f"line 1: .*{msg}"):
            load(p)

    def test_mixed_rates(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text(line() + "\n" + line(fs=128, samples=[0.0] * 53) + "\n")
        with pytest.raises(FormatError, match="mixed sampling rates"):
            load(p)

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            ds = load(p)
        assert len(ds) == 0 and "no records" in caplog.text

    def test_round_trip_gz(self, tmp_path):
        ds = synthesize(SyntheticConfig(per_class=5, rates=[250.0], seed=3))[0]
        save(ds, tmp_path / "a.jsonl.gz")
        back = load(tmp_path / "a.jsonl.gz")
        assert back.name == ds.name and [r.id for r in back.records] == [r.id for r in ds.records]
        assert back.matrix().tobytes() == ds.matrix().tobytes()

    def test_plain_text_round_trip_exact(self, tmp_path):
        ds = synthesize(SyntheticConfig(per_class=3, rates=[128.0], seed=4))[0]
        save(ds, tmp_path / "a.jsonl")
        assert load(tmp_path / "a.jsonl").matrix().tobytes() == ds.matrix().tobytes()


class TestSplit:
    def test_stratified_counts(self):
        ds = make_set(100, 20)
        s = split(ds, 0.2, seed=1)
        y = ds.labels()
        assert (len(s.train), int(y[s.train].sum())) == (80, 16)
        assert (len(s.val), int(y[s.val].sum())) == (20, 4)
        assert sorted(s.train + s.val) == list(range(100))

    def test_reproducible(self):
        ds = make_set(50, 10)
        assert split(ds, seed=7) == split(ds, seed=7)
        assert split(ds, seed=7) != split(ds, seed=8)

    def test_single_record(self, caplog):
        with caplog.at_level(logging.WARNING):
            s = split(make_set(1, 0))
        assert s.train == [0] and s.val == [] and "single record" in caplog.text


class TestBatches:
    def test_sizes(self):
        sizes = [len(y) for _, y in batches(make_set(250, 50), 100, seed=0, epoch=0)]
        assert sizes == [100, 100, 50]

    def test_uniform_length(self):
        for x, _ in batches(make_set(30, 5, fs=128.0), 8):
            assert x.shape[1:] == (1, 53)

    def test_epoch_order(self):
        ds = make_set(40, 10)

        def order(epoch):
            return np.concatenate([x[:, 0, 0] for x, _ in batches(ds, 40, seed=2, epoch=epoch)])

        assert not np.array_equal(order(0), order(1))
        assert np.array_equal(order(1), order(1))


class TestSchedule:
    def test_round_robin(self):
        s = ScheduleState(["A", "B"])
        assert [s.next_database() for _ in range(4)] == ["A", "B", "A", "B"]

    def test_discard_stalled(self):
        s = ScheduleState(["A", "B"], tolerance=1e-4)
        seq = [schedule_step(s)]
        seq.append(schedule_step(s, "A", 1.0))
        seq.append(schedule_step(s, "B", 2.0))
        seq.append(schedule_step(s, "A", 0.5))
        # improvement of exactly 1e-4 or less counts as a stall
        seq.append(schedule_step(s, "B", 2.0 - 0.5e-4))
        seq.append(schedule_step(s, "A", 0.4))
        assert seq == ["A", "B", "A", "B", "A", "A"]
        assert s.active == ["A"]

    def test_single_database_terminates(self):
        s = ScheduleState(["A"])
        losses = [1.0, 0.5, 0.45, 0.45]
        name = schedule_step(s)
        for v in losses:
            name = schedule_step(s, name, v)
        assert name is None and s.done and s.progress["A"].rounds == 4

    def test_dict_round_trip(self):
        s = ScheduleState(["A", "B"])
        schedule_step(s, schedule_step(s), 0.3)
        assert ScheduleState.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    def test_empty(self):
        with pytest.raises(ValueError):
            ScheduleState([])


class TestSynthetic:
    def test_lengths_per_rate(self):
        sets = synthesize(SyntheticConfig(per_class=4, seed=0))
        assert [s.name for s in sets] == ["syn360", "syn250", "syn128"]
        assert [s.length for s in sets] == [150, 104, 53]
        for s in sets:
            assert len(s) == 8 and int(s.labels().sum()) == 4
            assert s.matrix().min() == -1 and s.matrix().max() == 1

    def test_imbalance(self):
        s = synthesize(SyntheticConfig(per_class=100, pvc_ratio=0.05, rates=[360.0]))[0]
        assert len(s) == 105 and int(s.labels().sum()) == 5

    def test_zero_noise_is_template(self):
        cfg = SyntheticConfig(per_class=3, rates=[360.0], jitter=0.0, noise=0.0)
        s = synthesize(cfg)[0]
        for r in s.records:
            expected = dsm.normalize(beat_template(360.0, bool(r.label), cfg))
            assert r.samples.tobytes() == expected.tobytes()

    def test_zero_noise_width_separable(self):
        cfg = SyntheticConfig(per_class=50, rates=[250.0], noise=0.0, jitter=0.1, seed=5)
        s = synthesize(cfg)[0]
        width = (s.matrix()[:, 0] > 0).sum(axis=1)
        y = s.labels()
        assert width[y == 1].min() > width[y == 0].max()

    def test_same_seed_bitwise_files(self, tmp_path):
        for d in ("a", "b"):
            for ds in synthesize(SyntheticConfig(per_class=5, seed=9)):
                save(ds, tmp_path / d / f"{ds.name}.jsonl.gz")
        for name in ("syn360", "syn250", "syn128"):
            a = (tmp_path / "a" / f"{name}.jsonl.gz").read_bytes()
            assert a == (tmp_path / "b" / f"{name}.jsonl.gz").read_bytes()
            assert gzip.decompress(a).count(b"\n") == 10

    @pytest.mark.parametrize("bad", [{"rates": [90.0]}, {"pvc_width_factor": 1.5}, {"jitter": 1.0},
                                     {"per_class": 0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            synthesize(SyntheticConfig(**bad))
