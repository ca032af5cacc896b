"""sRGB <-> CIELAB (D65, 2 degree observer) and network-space scaling.

Images live in two containers: :class:`RgbImage` holds an ``(H, W, 3)``
array of unit-interval sRGB values, :class:`LabImage` holds separate L, a
and b planes. The networks see L/100 and a/110, b/110.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor

L_SCALE = 100.0
AB_SCALE = 110.0

# sRGB primaries -> XYZ, D65 (Lindbloom)
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_EPSILON = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


@dataclass
class RgbImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DimensionError(f"RgbImage needs (H, W, 3) pixels, got {px.shape}", "channels")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "RgbImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)


@dataclass
class LabImage:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (self.L.shape == self.a.shape == self.b.shape):
            raise DimensionError(f"LabImage planes differ: {self.L.shape}, {self.a.shape}, {self.b.shape}", "plane")

    @property
    def shape(self):
        return self.L.shape


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(np.maximum(c, 0.0031308), 1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _EPSILON, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)


def _f_inv(ft):
    t3 = ft ** 3
    return np.where(t3 > _EPSILON, t3, (116.0 * ft - 16.0) / _KAPPA)


def rgb_array_to_lab(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) sRGB in [0, 1] -> (..., 3) L*a*b*."""
    xyz = srgb_to_linear(np.clip(rgb, 0.0, 1.0)) @ _RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / D65_WHITE), -1, 0)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_array_to_rgb(lab: np.ndarray) -> np.ndarray:
    """(..., 3) L*a*b* -> (..., 3) sRGB clamped to [0, 1]."""
    L, a, b = np.moveaxis(np.asarray(lab, dtype=np.float64), -1, 0)
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    # Y uses the exact L* inverse so L <= 8 maps linearly
    y = np.where(L > _KAPPA * _EPSILON, fy ** 3, L / _KAPPA)
    xyz = np.stack([_f_inv(fx), y, _f_inv(fz)], axis=-1) * D65_WHITE
    return np.clip(linear_to_srgb(xyz @ _XYZ_TO_RGB.T), 0.0, 1.0)


def rgb_to_lab(img: RgbImage) -> LabImage:
    lab = rgb_array_to_lab(img.pixels)
    return LabImage(lab[..., 0], lab[..., 1], lab[..., 2])


def lab_to_rgb(img: LabImage) -> RgbImage:
    return RgbImage(lab_array_to_rgb(np.stack([img.L, img.a, img.b], axis=-1)))


def _plane(x: np.ndarray, dtype=None) -> Tensor:
    return Tensor(np.asarray(x)[None, None, :, :], dtype=dtype)


def extract_grayscale(img: RgbImage) -> Tensor:
    """Lightness plane scaled to [0, 1] as a [1, 1, H, W] tensor."""
    return _plane(rgb_to_lab(img).L / L_SCALE)


@dataclass
class NetImagePair:
    input_L: Tensor
    target_a: Tensor
    target_b: Tensor


def normalize(lab: LabImage) -> NetImagePair:
    return NetImagePair(_plane(lab.L / L_SCALE), _plane(lab.a / AB_SCALE), _plane(lab.b / AB_SCALE))


def denormalize(pair: NetImagePair) -> LabImage:
    return LabImage(
        pair.input_L.data[0, 0].astype(np.float64) * L_SCALE,
        pair.target_a.data[0, 0].astype(np.float64) * AB_SCALE,
        pair.target_b.data[0, 0].astype(np.float64) * AB_SCALE,
    )


def _as_plane(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    while arr.ndim > 2:
        if arr.shape[0] != 1:
            raise DimensionError(f"expected a single image plane, got shape {arr.shape}", "batch")
        arr = arr[0]
    return arr


def assemble(L_norm, a_norm, b_norm) -> RgbImage:
    """Combine normalised L, a, b planes into a clamped sRGB image."""
    L, a, b = _as_plane(L_norm), _as_plane(a_norm), _as_plane(b_norm)
    if not (L.shape == a.shape == b.shape):
        raise DimensionError(f"assemble: plane shapes {L.shape}, {a.shape}, {b.shape} differ", "spatial")
    return lab_to_rgb(LabImage(L * L_SCALE, a * AB_SCALE, b * AB_SCALE))
