"""Densely connected 1-D CNN with a spatial pyramid pooling head.

Three variants share one builder:

* ``dense-spp``: stem, three dense blocks joined by transition layers,
  multi-level pyramid max pooling, one sigmoid unit.
* ``dense-gmp``: same body, global max pooling head.
* ``plain20``: 19 plain conv layers with interleaved max pooling and a
  flattening dense head, sized to match the dense-spp parameter budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor

VARIANTS = ("dense-spp", "dense-gmp", "plain20")

# plain20 layout: conv counts per stage, a 2/2 max-pool closes each stage
PLAIN_STAGES = (4, 5, 5, 5)


class AdmissibilityError(ValueError):
    """Input length cannot be processed by the model."""


@dataclass
class NetworkConfig:
    variant: str = "dense-spp"
    growth: int = 32
    kernel_width: int = 3
    block_layers: list[int] = field(default_factory=lambda: [3, 6, 9])
    spp_levels: list[int] = field(default_factory=lambda: [1, 4])
    transition_compression: float = 0.5
    stem_filters: int = 32
    seed: int = 0
    # only plain20 depends on it: its flattening head fixes the input length
    input_length: int = 150
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant != "plain20" and len(self.block_layers) != 3:
            raise ValueError("dense variants need exactly 3 block_layers entries")
        lv = self.spp_levels
        if not lv or any(v < 1 for v in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"spp_levels must be nonempty, strictly increasing, >= 1: {lv}")
        if not 0 < self.transition_compression <= 1:
            raise ValueError("transition_compression must lie in (0, 1]")
        if self.growth < 1 or self.kernel_width < 1 or self.stem_filters < 1:
            raise ValueError("growth, kernel_width and stem_filters must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def spp_bins(length: int, levels) -> list[tuple[int, int]]:
    """Floor-partition bins for every pyramid level, level order preserved."""
    bins = []
    for k in levels:
        bins.extend(((i * length) // k, ((i + 1) * length) // k) for i in range(k))
    return bins


def spp_forward(features, levels) -> Tensor:
    """Pyramid max pooling to ``[B, C * sum(levels)]`` whatever the length."""
    features = ad._as_tensor(features)
    L = features.shape[2]
    if L < max(levels):
        raise AdmissibilityError(
            f"pyramid pooling with levels {list(levels)} needs feature length >= {max(levels)}, got {L}"
        )
    # reorder to channel-major: all bins of channel 0, then channel 1, ...
    return ad.bin_max(features, spp_bins(L, levels))


def gmp_forward(features) -> Tensor:
    return spp_forward(features, [1])


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 6.0) -> np.ndarray:
    bound = math.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Instantiated network: parameters, batch-norm state and channel trace."""

    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.channel_trace: list[tuple[str, int]] = []
        rng = np.random.default_rng(config.seed)
        if config.variant == "plain20":
            self._build_plain(rng)
        else:
            self._build_dense(rng)

    # -- construction -------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, Tensor(value, requires_grad=True))

    def _conv(self, rng, name: str, cin: int, cout: int) -> None:
        k = self.config.kernel_width
        self._add(f"{name}.kernel", _uniform(rng, (cout, cin, k), cin * k))
        self._add(f"{name}.bias", np.zeros(cout))

    def _build_dense(self, rng) -> None:
        c = self.config
        self._conv(rng, "stem.conv", 1, c.stem_filters)
        ch = c.stem_filters
        self.channel_trace.append(("stem", ch))
        for b, n in enumerate(c.block_layers, start=1):
            for j in range(1, n + 1):
                self._conv(rng, f"block{b}.layer{j}.conv", ch + (j - 1) * c.growth, c.growth)
            ch += n * c.growth
            self.channel_trace.append((f"block{b}", ch))
            if b < len(c.block_layers):
                out = max(1, int(round(c.transition_compression * ch)))
                self._conv(rng, f"trans{b}.conv", ch, out)
                self._add(f"trans{b}.bn.gamma", np.ones(out))
                self._add(f"trans{b}.bn.beta", np.zeros(out))
                self.bn[f"trans{b}.bn"] = BatchNormState.fresh(out, c.bn_momentum, c.bn_eps)
                ch = out
                self.channel_trace.append((f"trans{b}", ch))
        levels = [1] if c.variant == "dense-gmp" else c.spp_levels
        feat = ch * sum(levels)
        self.channel_trace.append(("head", feat))
        self._add("head.linear.weight", _uniform(rng, (1, feat), feat, gain=1.0))
        self._add("head.linear.bias", np.zeros(1))

    def _build_plain(self, rng) -> None:
        width = plain20_width(self.config)
        ch = 1
        layer = 0
        for s, n in enumerate(PLAIN_STAGES, start=1):
            for _ in range(n):
                layer += 1
                self._conv(rng, f"plain.conv{layer:02d}", ch, width)
                ch = width
            self.channel_trace.append((f"stage{s}", ch))
        feat = ch * _plain_final_length(self.config.input_length)
        self.channel_trace.append(("head", feat))
        self._add("head.linear.weight", _uniform(rng, (1, feat), feat, gain=1.0))
        self._add("head.linear.bias", np.zeros(1))

    # -- introspection ------------------------------------------------

    def parameters(self) -> list[Parameter]:
        """Parameters in lexicographic name order."""
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values() if p.trainable)

    @property
    def min_length(self) -> int:
        return min_input_length(self.config)

    def check_length(self, length: int) -> None:
        c = self.config
        if c.variant == "plain20":
            if length != c.input_length:
                raise AdmissibilityError(
                    f"plain20 model accepts only its fixed training length {c.input_length}, got {length}"
                )
            return
        if not _dense_admissible(c, length):
            raise AdmissibilityError(
                f"input length {length} is too short for this model; minimum admissible length is {self.min_length}"
            )

    # -- forward ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def _conv_fwd(self, x, name: str) -> Tensor:
        return ad.conv1d(x, self._p(f"{name}.kernel"), self._p(f"{name}.bias"), "same", 1)

    def dense_block_forward(self, x, block: int) -> Tensor:
        """Each layer sees the concatenation of block input and all earlier layer outputs."""
        feats = x
        for j in range(1, self.config.block_layers[block - 1] + 1):
            y = ad.relu(self._conv_fwd(feats, f"block{block}.layer{j}.conv"))
            feats = ad.concat_channels(feats, y)
        return feats

    def transition_forward(self, x, idx: int, mode: str, update_stats: bool) -> Tensor:
        # conv -> batch norm -> average pool -> relu
        y = self._conv_fwd(x, f"trans{idx}.conv")
        y = ad.batchnorm1d(y, self._p(f"trans{idx}.bn.gamma"), self._p(f"trans{idx}.bn.beta"),
                           self.bn[f"trans{idx}.bn"], mode, update_stats)
        y = ad.avgpool1d(y, 2, 2)
        return ad.relu(y)

    def features(self, x, mode: str = "infer", update_stats: bool = True) -> Tensor:
        """Feature vector fed to the final linear layer, ``[B, F]``."""
        x = ad._as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise ad.ShapeError(f"expected a [B, 1, L] batch, got {x.shape}")
        self.check_length(x.shape[2])
        c = self.config
        if c.variant == "plain20":
            h = x
            layer = 0
            for n in PLAIN_STAGES:
                for _ in range(n):
                    layer += 1
                    h = ad.relu(self._conv_fwd(h, f"plain.conv{layer:02d}"))
                h = ad.maxpool1d(h, 2, 2)
            return ad.flatten(h)
        h = ad.maxpool1d(ad.relu(self._conv_fwd(x, "stem.conv")), 2, 2)
        nb = len(c.block_layers)
        for b in range(1, nb + 1):
            h = self.dense_block_forward(h, b)
            if b < nb:
                h = self.transition_forward(h, b, mode, update_stats)
        if c.variant == "dense-gmp":
            return gmp_forward(h)
        return spp_forward(h, c.spp_levels)

    def logits(self, x, mode: str = "infer", update_stats: bool = True) -> Tensor:
        f = self.features(x, mode, update_stats)
        return ad.linear(f, self._p("head.linear.weight"), self._p("head.linear.bias"))

    def forward(self, x, mode: str = "infer", update_stats: bool = True) -> Tensor:
        """Probabilities of the PVC class, shape ``[B]``."""
        z = self.logits(x, mode, update_stats)
        p = ad.sigmoid(z)
        return _squeeze(p)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode probabilities for a ``[B, 1, L]`` (or ``[B, L]``) array."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        return self.forward(Tensor(x), "infer").data

    # -- state --------------------------------------------------------

    def state_arrays(self) -> list[np.ndarray]:
        return [p.tensor.data for p in self.parameters()]

    def load_arrays(self, arrays) -> None:
        for p, a in zip(self.parameters(), arrays):
            if a.shape != p.tensor.data.shape:
                raise ValueError(f"shape mismatch for {p.name}: {a.shape} vs {p.tensor.data.shape}")
            p.tensor.data = np.array(a, dtype=np.float64)

    def bn_names(self) -> list[str]:
        return sorted(self.bn)


def _squeeze(t: Tensor) -> Tensor:
    B = t.shape[0]
    return ad._make(t.data.reshape(B), "reshape", (t,), lambda g: (g.reshape(B, 1),))


def build(config: NetworkConfig) -> Model:
    return Model(config)


def param_count(model: Model) -> int:
    return model.param_count()


def _dense_admissible(c: NetworkConfig, length: int) -> bool:
    if length < max(2, c.kernel_width):
        return False
    L = length // 2  # stem pool
    for _ in range(len(c.block_layers) - 1):
        if L < 2:
            return False
        L //= 2
    levels = [1] if c.variant == "dense-gmp" else c.spp_levels
    return L >= max(levels) and L >= 1


def min_input_length(config: NetworkConfig) -> int:
    if config.variant == "plain20":
        return config.input_length
    L = 1
    while not _dense_admissible(config, L):
        L += 1
    return L


def _plain_final_length(length: int) -> int:
    L = length
    for _ in PLAIN_STAGES:
        if L < 2:
            raise AdmissibilityError(f"plain20 input length {length} too short for {len(PLAIN_STAGES)} poolings")
        L //= 2
    return L


def _dense_reference_count(config: NetworkConfig) -> int:
    ref = NetworkConfig(**{**config.to_dict(), "variant": "dense-spp"})
    return _count_dense(ref)


def _count_dense(c: NetworkConfig) -> int:
    k = c.kernel_width
    total = c.stem_filters * k + c.stem_filters
    ch = c.stem_filters
    for b, n in enumerate(c.block_layers, start=1):
        for j in range(n):
            total += (ch + j * c.growth) * c.growth * k + c.growth
        ch += n * c.growth
        if b < len(c.block_layers):
            out = max(1, int(round(c.transition_compression * ch)))
            total += ch * out * k + out + 2 * out
            ch = out
    levels = [1] if c.variant == "dense-gmp" else c.spp_levels
    return total + ch * sum(levels) + 1


def _count_plain(width: int, k: int, length: int) -> int:
    nconv = sum(PLAIN_STAGES)
    total = (k + 1) * width + (nconv - 1) * (width * width * k + width)
    return total + width * _plain_final_length(length) + 1


def plain20_width(config: NetworkConfig) -> int:
    """Uniform conv width whose total parameter count is closest to dense-spp's."""
    target = _dense_reference_count(config)
    best = min(range(1, 1025), key=lambda w: abs(_count_plain(w, config.kernel_width, config.input_length) - target))
    return best
