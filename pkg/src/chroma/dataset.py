"""Image files, crop manifests, deterministic splits and minibatches."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .colorspace import AB_SCALE, L_SCALE, RgbImage, rgb_array_to_lab
from .tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
Crop = Tuple[int, int, int, int]


class DatasetError(RuntimeError):
    pass


@dataclass
class ManifestEntry:
    path: str  # relative, forward slashes
    crop: Optional[Crop] = None


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    target_size: int = 256
    split_seed: int = 0
    train_fraction: float = 0.9
    skipped: int = 0

    def __post_init__(self):
        if self.target_size < 16 or self.target_size % 16:
            raise ValueError(f"target_size must be a positive multiple of 16, got {self.target_size}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    def __len__(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------
# file I/O


def load_rgb(path) -> RgbImage:
    """Decode an image file to unit-interval sRGB; alpha is dropped."""
    with Image.open(path) as im:
        return RgbImage.from_uint8(np.asarray(im.convert("RGB")))


def save_rgb(img: RgbImage, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.to_uint8(), mode="RGB").save(path, format="PNG")


def center_crop_square(img: RgbImage) -> RgbImage:
    h, w = img.height, img.width
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return RgbImage(img.pixels[top:top + s, left:left + s])


def resize_rgb(img: RgbImage, size: int) -> RgbImage:
    """Bilinear resize to ``size`` x ``size`` without 8-bit quantisation."""
    if img.height == size and img.width == size:
        return img
    planes = [
        np.asarray(Image.fromarray(img.pixels[:, :, c].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for c in range(3)
    ]
    return RgbImage(np.stack(planes, axis=-1))


def fit_to_size(img: RgbImage, size: int) -> RgbImage:
    return resize_rgb(center_crop_square(img), size)


# --------------------------------------------------------------------------
# manifests


def read_manifest(path) -> Dict[str, Optional[Crop]]:
    """Parse ``path [x y w h]`` lines; ``#`` starts a comment."""
    crops: Dict[str, Optional[Crop]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) >= 5 and all(t.lstrip("-").isdigit() for t in tokens[-4:]):
                name = " ".join(tokens[:-4])
                x, y, w, h = (int(t) for t in tokens[-4:])
                if x < 0 or y < 0 or w <= 0 or h <= 0:
                    raise DatasetError(f"{path}:{lineno}: invalid crop rectangle {x} {y} {w} {h}")
                crops[name] = (x, y, w, h)
            elif len(tokens) == 1 or not any(t.lstrip("-").isdigit() for t in tokens[1:]):
                crops[" ".join(tokens)] = None
            else:
                raise DatasetError(f"{path}:{lineno}: expected 'path' or 'path x y w h'")
    return crops


def scan(
    root_dir,
    manifest=None,
    target_size: int = 256,
    split_seed: int = 0,
    train_fraction: float = 0.9,
) -> DatasetManifest:
    """Collect images under ``root_dir`` in sorted relative-path order.

    Crop rectangles come from the optional manifest file. Files with other
    extensions are skipped and counted.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    crops = read_manifest(manifest) if manifest is not None else {}
    entries, skipped = [], 0
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        if p.suffix.lower() in IMAGE_SUFFIXES:
            entries.append(ManifestEntry(rel, crops.get(rel)))
        else:
            skipped += 1
    entries.sort(key=lambda e: e.path)
    if skipped:
        logger.warning("skipped %d unsupported file(s) under %s", skipped, root)
    unknown = set(crops) - {e.path for e in entries}
    if unknown:
        logger.warning("manifest lists %d file(s) not found: %s", len(unknown), ", ".join(sorted(unknown)))
    if not entries:
        raise DatasetError(f"no images found in {root}")
    return DatasetManifest(root, entries, target_size, split_seed, train_fraction, skipped)


def split(manifest: DatasetManifest) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """Seeded shuffle, then cut at round(train_fraction * N).

    The cut is clamped so that both halves keep at least one entry.
    """
    n = len(manifest.entries)
    if n < 2:
        raise DatasetError(f"need at least 2 images to split, got {n}")
    order = np.random.default_rng(manifest.split_seed).permutation(n)
    n_train = min(max(int(math.floor(manifest.train_fraction * n + 0.5)), 1), n - 1)
    train = [manifest.entries[i] for i in order[:n_train]]
    test = [manifest.entries[i] for i in order[n_train:]]
    return train, test


# --------------------------------------------------------------------------
# preparation


@dataclass
class PrepareReport:
    processed: int = 0
    skipped: int = 0
    failed: int = 0
    errors: List[str] = field(default_factory=list)
    outputs: List[Path] = field(default_factory=list)

    def summary(self) -> str:
        return f"prepared={self.processed} skipped={self.skipped} failed={self.failed}"


def output_name(rel_path: str) -> str:
    stem = rel_path.rsplit(".", 1)[0]
    return stem.replace("/", "__") + ".png"


def prepare_image(src: Path, crop: Optional[Crop], size: int) -> Image.Image:
    with Image.open(src) as im:
        im = im.convert("RGB")
        if crop is not None:
            x, y, w, h = crop
            if x + w > im.width or y + h > im.height:
                raise DatasetError(f"crop {crop} exceeds image bounds {im.width}x{im.height}")
            im = im.crop((x, y, x + w, y + h))
        return im.resize((size, size), Image.BILINEAR)


def prepare(manifest: DatasetManifest, out_dir, use_split: bool = True) -> PrepareReport:
    """Crop, resize and write every manifest entry as an 8-bit RGB PNG.

    With ``use_split`` the outputs go to ``out_dir/train`` and
    ``out_dir/test``; otherwise everything lands directly in ``out_dir``.
    Failures are recorded per file and do not stop the run.
    """
    out = Path(out_dir)
    report = PrepareReport(skipped=manifest.skipped)
    if use_split and len(manifest) >= 2:
        train, test = split(manifest)
        plan = [(e, out / "train") for e in train] + [(e, out / "test") for e in test]
        plan.sort(key=lambda item: item[0].path)
    else:
        if use_split:
            logger.warning("only one image; writing it to the train split")
            plan = [(e, out / "train") for e in manifest.entries]
        else:
            plan = [(e, out) for e in manifest.entries]

    for entry, dest in plan:
        try:
            im = prepare_image(manifest.root / entry.path, entry.crop, manifest.target_size)
        except (OSError, UnidentifiedImageError, DatasetError, ValueError) as exc:
            report.failed += 1
            report.errors.append(f"{entry.path}: {exc}")
            logger.error("failed to prepare %s: %s", entry.path, exc)
            continue
        dest.mkdir(parents=True, exist_ok=True)
        target = dest / output_name(entry.path)
        im.save(target, format="PNG")
        report.processed += 1
        report.outputs.append(target)
    return report


# --------------------------------------------------------------------------
# training data


def corpus_files(data_dir, split_name: Optional[str] = None) -> List[Path]:
    """Image files of a prepared corpus, sorted by path.

    When ``split_name`` is given and ``data_dir/split_name`` exists, that
    subdirectory is used instead.
    """
    root = Path(data_dir)
    if split_name is not None and (root / split_name).is_dir():
        root = root / split_name
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images found in {root}")
    return files


@dataclass
class ExampleSet:
    """Normalised planes of a corpus, each shaped [N, 1, S, S] (float64)."""

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray
    paths: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.L.shape[0]

    @property
    def size(self) -> int:
        return self.L.shape[-1]


def examples_from_images(images: Sequence[RgbImage], size: int, paths: Sequence[str] = ()) -> ExampleSet:
    labs = np.stack([rgb_array_to_lab(fit_to_size(img, size).pixels) for img in images])
    return ExampleSet(
        L=labs[:, None, :, :, 0] / L_SCALE,
        a=labs[:, None, :, :, 1] / AB_SCALE,
        b=labs[:, None, :, :, 2] / AB_SCALE,
        paths=list(paths),
    )


def load_examples(files: Sequence[os.PathLike], size: int) -> ExampleSet:
    return examples_from_images([load_rgb(f) for f in files], size, [str(f) for f in files])


@dataclass
class Minibatch:
    inputs_L: Tensor
    targets_a: Tensor
    targets_b: Tensor
    noise_z: Tensor
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def target(self, channel: str) -> Tensor:
        return self.targets_a if channel == "A" else self.targets_b


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(examples: ExampleSet, batch_size: int, seed: int, epoch: int, stream: int = 0) -> Iterator[Minibatch]:
    """Yield the minibatches of one epoch.

    The example order depends on (seed, epoch) only; the noise planes come
    from a separate generator keyed by (seed, epoch, stream) so each channel
    GAN can draw its own noise while seeing the same examples.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(examples)
    order = epoch_order(n, seed, epoch)
    noise_rng = np.random.default_rng([seed, epoch, 1000 + stream])
    dtype = get_dtype()
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        z = noise_rng.uniform(-1.0, 1.0, size=(len(idx), 1, examples.size, examples.size))
        yield Minibatch(
            inputs_L=Tensor(examples.L[idx], dtype=dtype),
            targets_a=Tensor(examples.a[idx], dtype=dtype),
            targets_b=Tensor(examples.b[idx], dtype=dtype),
            noise_z=Tensor(z, dtype=dtype),
            indices=idx,
        )


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
