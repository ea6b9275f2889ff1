"""Colour-space transforms: RGB <-> optical density and sRGB <-> CIELAB.

Images are numpy arrays with a trailing channel axis of length 3. The
stain-separation code works on optical density as a ``(channels, pixels)``
matrix; :func:`to_matrix` and :func:`from_matrix` convert between the two
layouts.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInput

# sRGB primaries, D65. The reference white is taken as the row sums so that
# neutral greys map to a = b = 0 up to rounding.
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _check_pixels(arr, name):
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise InvalidInput(f"{name} must have a trailing channel axis of length 3")
    if arr.size == 0:
        raise InvalidInput(f"{name} is empty")
    return arr


def rgb_to_od(img, i0=255):
    """Beer-Lambert transform ``od = -ln((v + 1) / (i0 + 1))``.

    The +1 guard keeps black pixels finite and gives exactly zero at
    ``v == i0``. Values brighter than ``i0`` are clipped to zero density.
    """
    arr = _check_pixels(img, "image")
    if not 1 <= i0 <= 255:
        raise InvalidInput(f"i0 must lie in [1, 255], got {i0}")
    od = -np.log((arr.astype(float) + 1.0) / (i0 + 1.0))
    return np.maximum(od, 0.0)


def od_to_rgb(od, i0=255):
    """Inverse of :func:`rgb_to_od`, rounded and clamped to 8 bits."""
    od = _check_pixels(od, "od")
    if not 1 <= i0 <= 255:
        raise InvalidInput(f"i0 must lie in [1, 255], got {i0}")
    v = np.rint((i0 + 1.0) * np.exp(-np.asarray(od, dtype=float)) - 1.0)
    return np.clip(v, 0, 255).astype(np.uint8)


def to_matrix(arr):
    """(..., 3) array -> (3, n) matrix with pixels in row-major order."""
    arr = np.asarray(arr)
    return arr.reshape(-1, arr.shape[-1]).T


def from_matrix(mat, shape):
    """Inverse of :func:`to_matrix`; ``shape`` is the spatial shape."""
    mat = np.asarray(mat)
    return mat.T.reshape(*shape, mat.shape[0])


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _finv(f):
    return np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))


def rgb_to_lab(img):
    """8-bit sRGB -> CIELAB (D65), float array of the same shape."""
    arr = _check_pixels(img, "image")
    lin = _srgb_to_linear(arr.astype(float) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = (_f(xyz[..., k]) for k in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab):
    """CIELAB (D65) -> 8-bit sRGB, clamped and rounded."""
    lab = _check_pixels(lab, "lab")
    lab = np.asarray(lab, dtype=float)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_finv(fx), _finv(fy), _finv(fz)], axis=-1) * _WHITE
    srgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(np.rint(srgb * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(img):
    """Population mean and standard deviation of each channel."""
    arr = np.asarray(img, dtype=float)
    if arr.ndim < 1 or arr.size == 0:
        raise InvalidInput("channel_stats needs at least one pixel")
    flat = arr.reshape(-1, arr.shape[-1])
    return ChannelStats(mean=flat.mean(axis=0), std=flat.std(axis=0))
