"""Regression and adversarial objectives for one chrominance channel.

- ``l2_loss``: per-example mean over pixels of the squared error between the
  predicted and true chrominance plane.
- ``minibatch_loss``: arithmetic mean of per-example losses.
- ``d_loss``: mean over the batch of ``-log D(real) - log(1 - D(fake))``.
- ``g_loss``: ``l2 + w_adv * mean(-log D(fake))`` (non-saturating form).

Logs clamp their argument at ``LOG_FLOOR`` so saturated discriminators give
large but finite losses.
"""

from __future__ import annotations

from typing import Optional

from . import tensor as T
from .tensor import DimensionError, PreconditionError, Tensor

LOG_FLOOR = 1e-12


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-example least-squares loss, shape [B]."""
    if pred.shape != target.shape:
        raise DimensionError(f"l2_loss: pred {pred.shape} vs target {target.shape}", "spatial")
    return T.mean_per_example(T.square(T.sub(pred, target)))


def minibatch_loss(per_example: Tensor) -> Tensor:
    if per_example.size == 0:
        raise PreconditionError("minibatch_loss of an empty batch")
    return T.mean_all(per_example)


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Cross-entropy of real-vs-generated scores, averaged over the batch."""
    per = T.add(T.log_clamped(d_real, LOG_FLOOR), T.log_clamped(1.0 - d_fake, LOG_FLOOR))
    return -T.mean_all(per)


def adversarial_loss(d_fake: Tensor) -> Tensor:
    return -T.mean_all(T.log_clamped(d_fake, LOG_FLOOR))


def generator_loss(pred: Tensor, target: Tensor, d_fake: Optional[Tensor], w_adv: float) -> Tensor:
    regression = minibatch_loss(l2_loss(pred, target))
    if w_adv == 0:
        return regression
    if d_fake is None:
        raise PreconditionError("w_adv > 0 needs discriminator scores for the generated planes")
    return regression + w_adv * adversarial_loss(d_fake)


def d_loss(D, L: Tensor, real_chroma: Tensor, fake_chroma: Tensor, training: bool = False) -> Tensor:
    """Discriminator loss; ``fake_chroma`` is detached from its generator."""
    return discriminator_loss(D(L, real_chroma, training=training), D(L, fake_chroma.detach(), training=training))


def g_loss(G, D, L: Tensor, z: Tensor, target_chroma: Tensor, w_adv: float, training: bool = False) -> Tensor:
    pred = G(L, z, training=training)
    d_fake = D(L, pred, training=training) if w_adv else None
    return generator_loss(pred, target_chroma, d_fake, w_adv)
