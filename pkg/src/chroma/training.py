"""Alternating adversarial training of the A- and B-channel GANs."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import FORMAT_VERSION, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import ExampleSet, Minibatch, batches
from .losses import discriminator_loss, generator_loss
from .network import (
    CHANNELS,
    ChannelGAN,
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    check_image_size,
)
from .optim import SGDMomentum

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "channel", "d_loss", "g_loss"]
MOMENTUM_CONVENTION = "classical: v = mu*v + g; theta -= lr*v"


class ConfigError(ValueError):
    """A configuration value is out of bounds; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(RuntimeError):
    def __init__(self, step: int, channel: str, what: str):
        super().__init__(f"training diverged at step {step} (channel {channel}): {what} is not finite")
        self.step = step
        self.channel = channel


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    w_adv: float = 0.01
    epochs: int = 10
    seed: int = 0
    image_size: int = 64
    mode: str = "makeup"
    base_width: int = 32
    batchnorm: bool = False
    global_features: int = 16

    def validate(self) -> "TrainConfig":
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not (self.w_adv >= 0 and math.isfinite(self.w_adv)):
            raise ConfigError("w_adv", f"must be >= 0, got {self.w_adv}")
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError("image_size", f"must be a positive multiple of 16, got {self.image_size}")
        if self.mode not in ("makeup", "general"):
            raise ConfigError("mode", f"must be 'makeup' or 'general', got {self.mode!r}")
        if self.base_width < 1:
            raise ConfigError("base_width", f"must be >= 1, got {self.base_width}")
        if self.mode == "general" and self.global_features < 1:
            raise ConfigError("global_features", "general mode needs at least one global feature")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            base_width=self.base_width,
            batchnorm=self.batchnorm,
            global_features=self.global_features if self.mode == "general" else 0,
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(image_size=self.image_size, base_width=self.base_width, batchnorm=self.batchnorm)


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, dtype=np.uint64)[0])


class ChannelTrainer:
    """One channel's GAN together with its two optimizers."""

    def __init__(self, gan: ChannelGAN, config: TrainConfig):
        self.gan = gan
        self.config = config
        self.opt_g = SGDMomentum(gan.generator.params, config.learning_rate, config.momentum)
        self.opt_d = SGDMomentum(gan.discriminator.params, config.learning_rate, config.momentum)

    @property
    def channel(self) -> str:
        return self.gan.channel

    def step(self, batch: Minibatch, step: int) -> Tuple[float, float]:
        return train_step(self, batch, self.config, step)


def train_step(trainer: ChannelTrainer, batch: Minibatch, config: TrainConfig, step: int = 0) -> Tuple[float, float]:
    """One discriminator update followed by one generator update.

    Both updates use the same minibatch; the discriminator sees the
    generator's output detached. Returns (d_loss, g_loss) as floats.
    """
    G, D = trainer.gan.generator, trainer.gan.discriminator
    L, z, target = batch.inputs_L, batch.noise_z, batch.target(trainer.channel)

    with T.tape():
        fake = G(L, z, training=True)

        with T.tape():
            D.zero_grad()
            dl = discriminator_loss(D(L, target, training=True), D(L, fake.detach(), training=True))
            d_value = dl.item()
            if not math.isfinite(d_value):
                raise DivergenceError(step, trainer.channel, "d_loss")
            T.backward(dl)
        trainer.opt_d.step()

        G.zero_grad()
        d_fake = D(L, fake, training=True) if config.w_adv else None
        gl = generator_loss(fake, target, d_fake, config.w_adv)
        g_value = gl.item()
        if not math.isfinite(g_value):
            raise DivergenceError(step, trainer.channel, "g_loss")
        T.backward(gl)
        trainer.opt_g.step()
        D.zero_grad()
    return d_value, g_value


class ColorizationModel:
    """Both channel GANs, their optimizers and training progress."""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        check_image_size(config.image_size)
        self.trainers: "OrderedDict[str, ChannelTrainer]" = OrderedDict()
        for ci, ch in enumerate(CHANNELS):
            gan = ChannelGAN(
                ch,
                build_generator(config.generator_spec(), derived_seed(config.seed, ci, 0)),
                build_discriminator(config.discriminator_spec(), derived_seed(config.seed, ci, 1)),
            )
            self.trainers[ch] = ChannelTrainer(gan, config)
        self.epoch = 0
        self.step = 0

    def generator(self, channel: str):
        return self.trainers[channel].gan.generator

    def discriminator(self, channel: str):
        return self.trainers[channel].gan.discriminator

    # -- persistence --------------------------------------------------------

    def _state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for ch, tr in self.trainers.items():
            for role, net, opt in (("G", tr.gan.generator, tr.opt_g), ("D", tr.gan.discriminator, tr.opt_d)):
                for name, p in net.params.items():
                    out[f"{ch}/{role}/param/{name}"] = p.data
                for name, v in opt.velocity.items():
                    out[f"{ch}/{role}/velocity/{name}"] = v
                for name, b in net.buffers.items():
                    out[f"{ch}/{role}/buffer/{name}"] = b
        return out

    def to_checkpoint(self) -> Checkpoint:
        meta = {
            "format": "chroma-gan",
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {"kind": "keyed-pcg64", "seed": self.config.seed, "next_epoch": self.epoch},
            "optimizer": MOMENTUM_CONVENTION,
        }
        return Checkpoint(meta, OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in self._state().items()))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ColorizationModel":
        meta = ckpt.metadata
        if meta.get("format") != "chroma-gan":
            raise CheckpointError("checkpoint does not hold a colorization model")
        model = cls(TrainConfig.from_dict(meta["config"]))
        model.epoch = int(meta["epoch"])
        model.step = int(meta["step"])
        state = model._state()
        missing = set(state) - set(ckpt.tensors)
        extra = set(ckpt.tensors) - set(state)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint tensors do not match the configured model "
                f"(missing {len(missing)}, unexpected {len(extra)})"
            )
        for name, target in state.items():
            src = ckpt.tensors[name]
            if src.shape != target.shape:
                raise CheckpointError(f"{name}: shape {src.shape} != expected {target.shape}")
            target[...] = src
        return model

    def save(self, path) -> Path:
        return save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def load(cls, path) -> "ColorizationModel":
        return cls.from_checkpoint(load_checkpoint(path))


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


def format_loss(x: float) -> str:
    return repr(float(x))


def train(
    config: TrainConfig,
    examples: ExampleSet,
    out_dir,
    model: Optional[ColorizationModel] = None,
    on_step: Optional[Callable[[int, str, float, float], None]] = None,
    checkpoint_every: int = 1,
) -> List[Path]:
    """Train both channel GANs for ``config.epochs`` epochs in total.

    Passing a ``model`` restored from a checkpoint resumes at its recorded
    epoch; step numbering carries on from the checkpoint. Returns the paths
    of the checkpoints written by this call: one every ``checkpoint_every``
    epochs plus the final epoch (0 keeps only the final one). Metrics rows
    are appended to ``out_dir/metrics.csv``.
    """
    config.validate()
    if model is None:
        model = ColorizationModel(config)
    if examples.size != model.config.image_size:
        raise ValueError(f"examples are {examples.size}px but the model trains at {model.config.image_size}px")
    if len(examples) == 0:
        raise ValueError("no training examples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    fresh = not metrics_path.exists() or metrics_path.stat().st_size == 0

    written: List[Path] = []
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        for epoch in range(model.epoch, config.epochs):
            streams = [
                batches(examples, model.config.batch_size, model.config.seed, epoch, stream=ci)
                for ci in range(len(CHANNELS))
            ]
            for per_channel in zip(*streams):
                model.step += 1
                for ch, batch in zip(CHANNELS, per_channel):
                    dl, gl = model.trainers[ch].step(batch, model.step)
                    writer.writerow([model.step, ch, format_loss(dl), format_loss(gl)])
                    if on_step is not None:
                        on_step(model.step, ch, dl, gl)
            fh.flush()
            model.epoch = epoch + 1
            last = model.epoch == config.epochs
            if last or (checkpoint_every and model.epoch % checkpoint_every == 0):
                path = model.save(out / checkpoint_name(model.epoch))
                written.append(path)
                logger.info("epoch %d done (step %d), wrote %s", model.epoch, model.step, path)
    return written


def read_metrics(path) -> List[Tuple[int, str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [(int(s), c, float(d), float(g)) for s, c, d, g in reader]
