"""Generator and discriminator built from the A/B/C block vocabulary.

Block A: conv, conv, 2x2 max pool (the pre-pool activation is kept as a skip).
Block B: conv, conv, 2x upsample, merge with the matching Block A skip.
Block C: conv, conv, conv; the last conv is linear and emits one plane.

A generator is 4 x A, 4 x B, 1 x C. Block B number i merges with the skip of
Block A number 5 - i, so resolutions line up without resampling. The
discriminator is 4 x (conv, pool), one more conv, flatten and a dense layer
squashed by a sigmoid.

All convolutions are 3x3, stride 1, same padding.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import PreconditionError, Tensor

KERNEL = 3
DEPTH = 4
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CHANNELS = ("A", "B")


class ShapeError(PreconditionError):
    pass


def check_image_size(size: int) -> None:
    if size < 16 or size % 16:
        raise ShapeError(f"spatial size must be a positive multiple of 16, got {size}")


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 32
    input_channels: int = 2
    output_channels: int = 1
    batchnorm: bool = False
    global_features: int = 0  # 0 = no fusion (makeup mode)
    feature_width: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    image_size: int
    base_width: int = 32
    input_channels: int = 2
    batchnorm: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def generator_layers(spec: GeneratorSpec) -> List[Tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every generator conv, in order."""
    w = spec.base_width
    widths = [w * 2 ** i for i in range(DEPTH)]
    layers = []
    cin = spec.input_channels
    for i, cout in enumerate(widths, 1):
        layers += [(f"enc{i}.conv1", cin, cout), (f"enc{i}.conv2", cout, cout)]
        cin = cout
    cin = widths[-1] + spec.global_features
    for i in range(1, DEPTH + 1):
        cout = widths[DEPTH - i]
        layers += [(f"dec{i}.conv1", cin, cout), (f"dec{i}.conv2", cout, cout)]
        cin = cout + widths[DEPTH - i]  # after merge with the skip of enc(5-i)
    layers += [("out.conv1", cin, w), ("out.conv2", w, w), ("out.conv3", w, spec.output_channels)]
    return layers


def hook_layers(spec: GeneratorSpec) -> List[Tuple[str, int, int]]:
    f = spec.feature_width
    return [("hook.conv1", 1, f), ("hook.conv2", f, 2 * f), ("hook.conv3", 2 * f, 4 * f)]


def discriminator_layers(spec: DiscriminatorSpec) -> List[Tuple[str, int, int]]:
    w = spec.base_width
    layers, cin = [], spec.input_channels
    for i in range(1, DEPTH + 1):
        cout = w * 2 ** (i - 1)
        layers.append((f"blk{i}.conv", cin, cout))
        cin = cout
    layers.append(("final.conv", cin, cin))
    return layers


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # uniform with std sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Net:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, batchnorm: bool):
        self.batchnorm = batchnorm
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _add_conv(self, rng, name: str, cin: int, cout: int, norm: bool) -> None:
        self._add(f"{name}.weight", _uniform(rng, (cout, cin, KERNEL, KERNEL), cin * KERNEL * KERNEL))
        self._add(f"{name}.bias", np.zeros(cout))
        if norm and self.batchnorm:
            self._add(f"{name}.bn.gamma", np.ones(cout))
            self._add(f"{name}.bn.beta", np.zeros(cout))
            self.buffers[f"{name}.bn.running_mean"] = np.zeros(cout, dtype=T.get_dtype())
            self.buffers[f"{name}.bn.running_var"] = np.ones(cout, dtype=T.get_dtype())

    def _add_dense(self, rng, name: str, n_in: int, n_out: int) -> None:
        self._add(f"{name}.weight", _uniform(rng, (n_in, n_out), n_in))
        self._add(f"{name}.bias", np.zeros(n_out))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _conv(self, name: str, x: Tensor, training: bool, activate: bool = True) -> Tensor:
        y = T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        if self.batchnorm and f"{name}.bn.gamma" in self.params:
            y = self._bn(name, y, training)
        return T.relu(y) if activate else y

    def _bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        gamma, beta = self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"]
        rm, rv = self.buffers[f"{name}.bn.running_mean"], self.buffers[f"{name}.bn.running_var"]
        if training:
            y, mu, var = T.batchnorm2d(x, gamma, beta, BN_EPS)
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var
            return y
        # eval mode: fold running statistics and the affine map into constants
        inv = gamma.data / np.sqrt(rv + BN_EPS)
        return T.channel_affine(x, inv, beta.data - rm * inv)


class GlobalFeatureHook:
    """Pluggable image-level feature extractor fused at the generator bottleneck.

    The default extractor is a small trainable CNN (3 conv/pool blocks,
    global average pool, dense + ReLU) that produces ``dim`` features from
    the lightness plane. Any callable mapping a [B, 1, S, S] tensor to
    [B, dim] can stand in via ``extractor``; its parameters are then the
    caller's business.
    """

    def __init__(self, owner: "Generator", dim: int, extractor=None):
        self.owner = owner
        self.dim = dim
        self.extractor = extractor

    def __call__(self, L: Tensor, training: bool = False) -> Tensor:
        if self.extractor is not None:
            return self.extractor(L)
        net = self.owner
        h = L
        for name, _, _ in hook_layers(net.spec):
            h = T.maxpool2(net._conv(name, h, training))
        h = T.global_avg_pool(h)
        return T.relu(T.dense(h, net.params["hook.fc.weight"], net.params["hook.fc.bias"]))


class Generator(_Net):
    def __init__(self, spec: GeneratorSpec, seed: int):
        super().__init__(spec.batchnorm)
        if spec.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {spec.base_width}")
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers = generator_layers(spec)
        for name, cin, cout in layers:
            self._add_conv(rng, name, cin, cout, norm=name != layers[-1][0])
        self.hook: Optional[GlobalFeatureHook] = None
        if spec.global_features:
            for name, cin, cout in hook_layers(spec):
                self._add_conv(rng, name, cin, cout, norm=True)
            self._add_dense(rng, "hook.fc", 4 * spec.feature_width, spec.global_features)
            self.hook = GlobalFeatureHook(self, spec.global_features)

    def forward(
        self,
        L: Tensor,
        z: Tensor,
        global_features: Optional[Tensor] = None,
        training: bool = False,
        use_skips: bool = True,
    ) -> Tensor:
        """Predict one normalised chrominance plane from lightness and noise.

        ``use_skips=False`` replaces every merged skip tensor by zeros; it is
        a diagnostic for checking the merge wiring.
        """
        if L.shape != z.shape:
            raise T.DimensionError(f"L {L.shape} and z {z.shape} differ", "noise")
        if L.ndim != 4 or L.shape[1] != 1:
            raise T.DimensionError(f"L must be [B, 1, S, S], got {L.shape}", "channels")
        if L.shape[2] != L.shape[3]:
            raise ShapeError(f"generator expects square inputs, got {L.shape[2]}x{L.shape[3]}")
        check_image_size(L.shape[2])

        h = T.concat_channels(L, z)
        skips = []
        for i in range(1, DEPTH + 1):
            h = self._conv(f"enc{i}.conv1", h, training)
            h = self._conv(f"enc{i}.conv2", h, training)
            skips.append(h)
            h = T.maxpool2(h)

        if self.spec.global_features:
            feats = global_features if global_features is not None else self.hook(L, training)
            if feats.shape != (L.shape[0], self.spec.global_features):
                raise T.DimensionError(
                    f"global features must be [{L.shape[0]}, {self.spec.global_features}], got {feats.shape}", "features"
                )
            h = T.concat_channels(h, T.broadcast_spatial(feats, h.shape[2], h.shape[3]))

        for i in range(1, DEPTH + 1):
            h = self._conv(f"dec{i}.conv1", h, training)
            h = self._conv(f"dec{i}.conv2", h, training)
            h = T.upsample2(h)
            skip = skips[DEPTH - i]
            if not use_skips:
                skip = Tensor(np.zeros(skip.shape), dtype=skip.dtype)
            h = T.concat_channels(h, skip)

        h = self._conv("out.conv1", h, training)
        h = self._conv("out.conv2", h, training)
        return self._conv("out.conv3", h, training, activate=False)

    __call__ = forward


class Discriminator(_Net):
    def __init__(self, spec: DiscriminatorSpec, seed: int):
        super().__init__(spec.batchnorm)
        if spec.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {spec.base_width}")
        check_image_size(spec.image_size)
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers = discriminator_layers(spec)
        for name, cin, cout in layers:
            self._add_conv(rng, name, cin, cout, norm=True)
        side = spec.image_size // 2 ** DEPTH
        self._add_dense(rng, "fc", layers[-1][2] * side * side, 1)

    def forward(self, L: Tensor, chroma: Tensor, training: bool = False) -> Tensor:
        """Probability in (0, 1) that ``chroma`` is the true plane for ``L``."""
        if L.shape != chroma.shape:
            raise T.DimensionError(f"L {L.shape} and chroma {chroma.shape} differ", "chroma")
        if L.shape[2] != self.spec.image_size or L.shape[3] != self.spec.image_size:
            raise ShapeError(f"discriminator built for {self.spec.image_size}px, got {L.shape[2]}x{L.shape[3]}")
        h = T.concat_channels(L, chroma)
        for i in range(1, DEPTH + 1):
            h = T.maxpool2(self._conv(f"blk{i}.conv", h, training))
        h = self._conv("final.conv", h, training)
        return T.sigmoid(T.dense(T.flatten(h), self.params["fc.weight"], self.params["fc.bias"]))

    __call__ = forward


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    return Generator(spec, seed)


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Discriminator:
    return Discriminator(spec, seed)


def generator_forward(gen: Generator, L: Tensor, z: Tensor, global_features: Optional[Tensor] = None,
                      training: bool = False) -> Tensor:
    return gen.forward(L, z, global_features, training)


def discriminator_forward(disc: Discriminator, L: Tensor, chroma: Tensor, training: bool = False) -> Tensor:
    return disc.forward(L, chroma, training)


@dataclass
class ChannelGAN:
    """Generator/discriminator pair for one chrominance channel."""

    channel: str
    generator: Generator
    discriminator: Discriminator

    def tensors(self) -> Dict[str, Tensor]:
        out = {f"{self.channel}/G/{k}": v for k, v in self.generator.params.items()}
        out.update({f"{self.channel}/D/{k}": v for k, v in self.discriminator.params.items()})
        return out
