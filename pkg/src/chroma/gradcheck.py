"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from .tensor import PreconditionError, Tensor, backward, no_grad

Params = Union[Tensor, Iterable[Tensor], Mapping[str, Tensor]]


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    kinks: int = 0
    worst_param: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def __float__(self) -> float:
        return self.max_rel_err


def _named(params: Params) -> Dict[str, Tensor]:
    if isinstance(params, Tensor):
        return {params.name or "theta": params}
    if isinstance(params, Mapping):
        return dict(params)
    return {p.name or f"param{i}": p for i, p in enumerate(params)}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _central_difference(f, flat: np.ndarray, c: int, eps: float, f0: float, kink_tol: float) -> Optional[float]:
    orig = flat[c]
    try:
        for h in (eps, eps / 10, eps / 100):
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            if relative_error((fp - f0) / h, (f0 - fm) / h) <= kink_tol:
                return (fp - fm) / (2 * h)
        return None
    finally:
        flat[c] = orig


def grad_check(
    f: Callable[[], Tensor],
    params: Params,
    eps: float = 1e-5,
    samples_per_param: Optional[int] = None,
    seed: int = 0,
    grad_scale: float = 1.0,
    kink_tol: float = 1e-5,
) -> GradCheckResult:
    """Compare backward() gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar tensor computed from
    ``params``; it must be deterministic. Each parameter tensor is perturbed
    in place one coordinate at a time. With ``samples_per_param`` set, that
    many coordinates are drawn per tensor (without replacement) instead of
    checking all of them.

    Central differences are only meaningful where ``f`` is smooth on
    ``[x - eps, x + eps]``. When the two one-sided slopes disagree by more
    than ``kink_tol`` (a ReLU or max-pool switch inside the interval) the step
    is shrunk by 10x, twice; coordinates that stay non-smooth are skipped and
    counted in ``kinks``. The test looks at function values only.

    ``grad_scale`` multiplies the analytic gradient before comparison. It
    exists to let tests confirm that a wrong gradient is caught.
    """
    named = _named(params)
    for name, p in named.items():
        if p.dtype != np.float64:
            raise PreconditionError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    for p in named.values():
        p.zero_grad()
    backward(f())
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data)) * grad_scale
        for name, p in named.items()
    }

    rng = np.random.default_rng(seed)
    result = GradCheckResult(max_rel_err=0.0, checked=0)
    with no_grad():
        f0 = f().item()
        for name, p in named.items():
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            if samples_per_param is None or samples_per_param >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=samples_per_param, replace=False))
            for c in coords:
                numeric = _central_difference(f, flat, c, eps, f0, kink_tol)
                if numeric is None:
                    result.kinks += 1
                    continue
                a = float(analytic[name].reshape(-1)[c])
                err = relative_error(a, numeric)
                result.checked += 1
                if err > result.max_rel_err or result.worst_param is None:
                    result.max_rel_err = max(err, result.max_rel_err)
                    result.worst_param = name
                    result.worst_index = tuple(int(i) for i in np.unravel_index(c, p.shape))
                    result.worst_analytic = a
                    result.worst_numeric = numeric
    return result


@dataclass
class GanGradCheck:
    generator: GradCheckResult
    discriminator: GradCheckResult

    @property
    def max_rel_err(self) -> float:
        return max(self.generator.max_rel_err, self.discriminator.max_rel_err)

    @property
    def worst(self) -> GradCheckResult:
        g, d = self.generator, self.discriminator
        return g if g.max_rel_err >= d.max_rel_err else d


def check_gan_gradients(
    size: int = 16,
    width: int = 4,
    seed: int = 0,
    batch: int = 2,
    w_adv: float = 1.0,
    eps: float = 1e-5,
    samples_per_param: Optional[int] = 8,
    batchnorm: bool = False,
    global_features: int = 0,
    grad_scale: float = 1.0,
) -> GanGradCheck:
    """Finite-difference check of the full generator and discriminator losses.

    Builds a tiny generator/discriminator pair in float64 and checks the
    generator loss (regression plus adversarial term) against generator
    parameters and the discriminator loss against discriminator parameters.
    """
    from . import tensor as T
    from .losses import discriminator_loss, generator_loss
    from .network import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator, check_image_size

    check_image_size(size)
    with T.precision("float64"):
        G = build_generator(GeneratorSpec(base_width=width, batchnorm=batchnorm, global_features=global_features), seed)
        D = build_discriminator(DiscriminatorSpec(size, base_width=width, batchnorm=batchnorm), seed + 1)
        rng = np.random.default_rng(seed + 2)
        shape = (batch, 1, size, size)
        L = Tensor(rng.uniform(0.0, 1.0, shape))
        z = Tensor(rng.uniform(-1.0, 1.0, shape))
        target = Tensor(rng.uniform(-0.5, 0.5, shape))

        def g_objective() -> Tensor:
            pred = G(L, z, training=batchnorm)
            return generator_loss(pred, target, D(L, pred, training=batchnorm), w_adv)

        with no_grad():
            fake = G(L, z).detach()

        def d_objective() -> Tensor:
            return discriminator_loss(D(L, target, training=batchnorm), D(L, fake, training=batchnorm))

        # batch-norm running statistics are not part of the objective
        def frozen(fn, *nets):
            def run():
                saved = [{k: v.copy() for k, v in n.buffers.items()} for n in nets]
                out = fn()
                for n, s in zip(nets, saved):
                    for k, v in s.items():
                        n.buffers[k][...] = v
                return out
            return run

        g_res = grad_check(frozen(g_objective, G, D), {f"G/{k}": v for k, v in G.params.items()},
                           eps, samples_per_param, seed, grad_scale)
        d_res = grad_check(frozen(d_objective, D), {f"D/{k}": v for k, v in D.params.items()},
                           eps, samples_per_param, seed, grad_scale)
    return GanGradCheck(g_res, d_res)
