import numpy as np
import pytest

from pvcnet.explain import AttentionMap, occlusion_map, occlusion_spans
from pvcnet.model import NetworkConfig, build


class Probe:
    """Output is the sigmoid of one input sample, optionally scaled."""

    def __init__(self, k, scale=1.0):
        self.k, self.scale = k, scale

    def predict(self, x):
        return 1 / (1 + np.exp(-self.scale * np.asarray(x)[:, 0, self.k]))


class Constant:
    def predict(self, x):
        return np.full(np.asarray(x).shape[0], 0.8)


@pytest.fixture(scope="module")
def model():
    m = build(NetworkConfig(growth=4, block_layers=[1, 1, 1], stem_filters=4, seed=2))
    m.forward(np.random.default_rng(0).normal(size=(6, 1, 150)), "train")
    return m


class TestSpans:
    def test_window_five(self):
        assert occlusion_spans(10, 5)[:3] == [(0, 3), (0, 4), (0, 5)]
        assert occlusion_spans(10, 5)[5] == (3, 8)
        assert occlusion_spans(10, 5)[-1] == (7, 10)

    def test_even_window(self):
        # four samples: two before the centre, one after
        assert occlusion_spans(10, 4)[5] == (3, 7)


class TestProbe:
    def test_constant_model_zero_map(self):
        amap = occlusion_map(Constant(), np.linspace(-1, 1, 50))
        assert not amap.intensities.any()

    @pytest.mark.parametrize("k", [0, 7, 49])
    def test_peak_where_window_covers_k(self, k):
        beat = np.full(50, 0.1)
        beat[k] = 1.0
        amap = occlusion_map(Probe(k), beat, window=5)
        covering = [i for i, (lo, hi) in enumerate(occlusion_spans(50, 5)) if lo <= k < hi]
        assert covering == [i for i in range(50) if abs(i - k) <= 2]
        np.testing.assert_array_equal(np.flatnonzero(amap.intensities == 1.0), covering)
        assert amap.intensities.sum() == len(covering)

    def test_doubled_logits_same_argmax(self):
        beat = np.random.default_rng(1).uniform(0.2, 1, size=60)
        a = occlusion_map(Probe(30), beat)
        b = occlusion_map(Probe(30, scale=2.0), beat)
        assert np.argmax(a.intensities) == np.argmax(b.intensities)

    def test_window_too_wide(self):
        with pytest.raises(ValueError, match="shorter than the beat"):
            occlusion_map(Probe(0), np.ones(5), window=5)


class TestNetwork:
    @pytest.mark.parametrize("length", [53, 105, 150])
    def test_length(self, model, length):
        beat = np.random.default_rng(length).uniform(-1, 1, size=length)
        amap = occlusion_map(model, beat)
        assert len(amap) == length
        assert amap.intensities.min() >= 0 and amap.intensities.max() <= 1

    def test_batch_context_invariant(self, model):
        beat = np.random.default_rng(3).uniform(-1, 1, size=60)
        amap = occlusion_map(model, beat)
        p0 = model.predict(beat[None, None, :])[0]
        drops = []
        for lo, hi in occlusion_spans(60, 5):
            occluded = beat.copy()
            occluded[lo:hi] = 0
            drops.append(max(0.0, p0 - model.predict(occluded[None, None, :])[0]))
        drops = np.array(drops)
        expected = drops / drops.max() if drops.max() > 0 else drops
        np.testing.assert_allclose(amap.intensities, expected, rtol=0, atol=1e-9)

    def test_csv(self, model, tmp_path):
        amap = occlusion_map(model, np.linspace(-1, 1, 53), provenance="b1")
        amap.to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "index,sample,intensity" and len(lines) == 54


def test_map_type_length():
    assert len(AttentionMap(np.zeros(7), np.zeros(7), 5)) == 7
