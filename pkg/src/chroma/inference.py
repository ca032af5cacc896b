"""Colorize images with trained generators and score the results."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from . import tensor as T
from .colorspace import AB_SCALE, L_SCALE, LabImage, RgbImage, assemble, rgb_to_lab
from .dataset import fit_to_size, load_rgb
from .tensor import DimensionError, Tensor
from .training import ColorizationModel

PSNR_CAP = 99.0
SEPARATOR = 2


class InferenceError(RuntimeError):
    pass


@dataclass
class ColorizationResult:
    output: RgbImage
    ab_mse: Optional[float] = None
    psnr_rgb: Optional[float] = None


def _as_rgb(image: Union[RgbImage, np.ndarray]) -> RgbImage:
    if isinstance(image, RgbImage):
        return image
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:  # grayscale plane in [0, 1]
        return RgbImage(np.repeat(arr[:, :, None], 3, axis=2))
    return RgbImage(arr)


def sample_noise(z_seed: int, size: int, variant: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Noise planes for the A and B generators; reproducible from the seed."""
    rng = np.random.default_rng([z_seed, variant])
    za = rng.uniform(-1.0, 1.0, size=(1, 1, size, size))
    zb = rng.uniform(-1.0, 1.0, size=(1, 1, size, size))
    return za, zb


def colorize(
    model: ColorizationModel,
    image: Union[RgbImage, np.ndarray],
    z_seed: int = 0,
    variant: int = 0,
    size: Optional[int] = None,
    truth: Optional[RgbImage] = None,
) -> ColorizationResult:
    """Predict chrominance for ``image`` and recombine it with its lightness.

    Colour inputs are reduced to their L plane first. Non-square or
    differently sized inputs are centre-cropped and resized to the trained
    resolution; the output stays at that resolution. When ``truth`` is
    given it is fitted the same way and metrics are attached.
    """
    S = model.config.image_size
    if size is not None and size != S:
        raise InferenceError(f"requested size {size} but the checkpoint was trained at {S}px")
    src = fit_to_size(_as_rgb(image), S)
    lab = rgb_to_lab(src)
    dtype = T.get_dtype()
    L = Tensor(lab.L[None, None] / L_SCALE, dtype=dtype)
    za, zb = sample_noise(z_seed, S, variant)
    with T.no_grad():
        a = model.generator("A")(L, Tensor(za, dtype=dtype))
        b = model.generator("B")(L, Tensor(zb, dtype=dtype))
    out = assemble(L, a, b)
    result = ColorizationResult(out)
    if truth is not None:
        t = fit_to_size(_as_rgb(truth), S)
        result.ab_mse = ab_mse(rgb_to_lab(out), rgb_to_lab(t))
        result.psnr_rgb = psnr_rgb(out, t)
    return result


def ab_mse(pred: LabImage, truth: LabImage) -> float:
    """Mean squared error over the a and b planes, in LAB units."""
    if pred.shape != truth.shape:
        raise DimensionError(f"ab_mse: {pred.shape} vs {truth.shape}", "spatial")
    return float((np.mean((pred.a - truth.a) ** 2) + np.mean((pred.b - truth.b) ** 2)) / 2.0)


def psnr_rgb(pred: RgbImage, truth: RgbImage) -> float:
    """PSNR in dB of unit-interval RGB; exact matches report ``PSNR_CAP``."""
    if pred.pixels.shape != truth.pixels.shape:
        raise DimensionError(f"psnr_rgb: {pred.pixels.shape} vs {truth.pixels.shape}", "spatial")
    mse = float(np.mean((pred.pixels - truth.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# --------------------------------------------------------------------------
# evaluation

Colorizer = Callable[[RgbImage], RgbImage]


@dataclass
class EvalRow:
    path: str
    ab_mse: float
    psnr_db: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    grid_items: List[Tuple[RgbImage, RgbImage, RgbImage]] = field(default_factory=list)

    @property
    def mean_ab_mse(self) -> float:
        return statistics.fmean(r.ab_mse for r in self.rows)

    @property
    def mean_psnr(self) -> float:
        return statistics.fmean(r.psnr_db for r in self.rows)

    @property
    def median_ab_mse(self) -> float:
        return statistics.median(r.ab_mse for r in self.rows)

    @property
    def median_psnr(self) -> float:
        return statistics.median(r.psnr_db for r in self.rows)

    def summary(self) -> str:
        return (
            f"images={len(self.rows)} ab_mse_mean={self.mean_ab_mse:.6g} ab_mse_median={self.median_ab_mse:.6g} "
            f"psnr_mean={self.mean_psnr:.6g} psnr_median={self.median_psnr:.6g}"
        )


def model_colorizer(model: ColorizationModel, z_seed: int = 0) -> Colorizer:
    return lambda img: colorize(model, img, z_seed).output


def evaluate(colorizer: Union[ColorizationModel, Colorizer], files: Sequence, size: int, z_seed: int = 0) -> EvalReport:
    """Colorize every test image and compare it with the original.

    ``colorizer`` is either a trained model or any function from a
    ``size`` x ``size`` RGB image to its colorized version.
    """
    if not files:
        raise InferenceError("empty test set")
    if isinstance(colorizer, ColorizationModel):
        colorizer = model_colorizer(colorizer, z_seed)
    report = EvalReport()
    for f in files:
        truth = fit_to_size(load_rgb(f), size)
        pred = colorizer(truth)
        report.rows.append(EvalRow(str(f), ab_mse(rgb_to_lab(pred), rgb_to_lab(truth)), psnr_rgb(pred, truth)))
        gray = assemble(rgb_to_lab(truth).L / L_SCALE, np.zeros((size, size)), np.zeros((size, size)))
        report.grid_items.append((gray, pred, truth))
    return report


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "ab_mse", "psnr_db"])
        for r in report.rows:
            w.writerow([r.path, repr(r.ab_mse), repr(r.psnr_db)])
        w.writerow(["AGGREGATE", repr(report.mean_ab_mse), repr(report.mean_psnr)])
    return path


# --------------------------------------------------------------------------
# comparison grid


def grid_shape(n_rows: int, n_cols: int, tile: int, sep: int = SEPARATOR) -> Tuple[int, int]:
    """(height, width) of a grid with ``sep``-pixel gaps between tiles only."""
    return n_rows * tile + (n_rows - 1) * sep, n_cols * tile + (n_cols - 1) * sep


def render_grid(items: Sequence[Tuple[RgbImage, ...]], sep: int = SEPARATOR) -> np.ndarray:
    """Lay out ``(input, prediction[, truth])`` rows on a white canvas."""
    if not items:
        raise ValueError("emit_grid needs at least one item")
    tiles = [[t for t in row if t is not None] for row in items]
    tile = tiles[0][0].height
    for row in tiles:
        for t in row:
            if t.height != tile or t.width != tile:
                raise DimensionError(f"grid tiles must all be {tile}x{tile}, got {t.height}x{t.width}", "tile")
    n_cols = max(len(r) for r in tiles)
    h, w = grid_shape(len(tiles), n_cols, tile, sep)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, t in enumerate(row):
            y, x = i * (tile + sep), j * (tile + sep)
            canvas[y:y + tile, x:x + tile] = t.to_uint8()
    return canvas


def emit_grid(items: Sequence[Tuple[RgbImage, ...]], path, sep: int = SEPARATOR) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_grid(items, sep), mode="RGB").save(path, format="PNG")
    return path
