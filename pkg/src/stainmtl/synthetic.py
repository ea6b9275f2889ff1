"""Synthetic stained patches with known stain matrix and densities."""

import numpy as np

from ._random import check_random_state
from .color import from_matrix, od_to_rgb
from .stainsep import reference_stains


def random_stain_matrix(random_state=None, n_stains=2, jitter=0.15):
    """Reference H&E matrix with each entry scaled by ``exp(U(-jitter, jitter))``."""
    rng = check_random_state(random_state)
    W = reference_stains(n_stains) * np.exp(rng.uniform(-jitter, jitter, size=(3, n_stains)))
    return W / np.linalg.norm(W, axis=0)


def blob_field(shape, rng, n_blobs=6, radius=(2.0, 6.0)):
    """Sum of Gaussian blobs, scaled to a maximum of 1."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    field = np.zeros(shape)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        s = rng.uniform(*radius)
        field += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return field / field.max()


def make_density(shape, random_state=None, n_stains=2, max_density=1.5, cutoff=0.25):
    """Blob densities of shape ``(n_stains, h*w)``; values below ``cutoff`` are zeroed
    so that each stain also occurs on its own."""
    rng = check_random_state(random_state)
    rows = []
    for _ in range(n_stains):
        f = blob_field(shape, rng)
        f = np.where(f > cutoff, (f - cutoff) / (1 - cutoff), 0.0)
        rows.append(max_density * f.ravel())
    return np.stack(rows)


def make_patch(shape=(32, 32), random_state=None, n_stains=2, stains=None, max_density=1.5):
    """Return ``(rgb, W, H)`` for a synthetic patch ``rgb = od_to_rgb(W @ H)``."""
    rng = check_random_state(random_state)
    W = random_stain_matrix(rng, n_stains) if stains is None else np.asarray(stains, float)
    H = make_density(shape, rng, W.shape[1], max_density)
    rgb = od_to_rgb(from_matrix(W @ H, shape))
    return rgb, W, H


def toy_task(shape=(32, 32), random_state=None, threshold=0.5, window=0):
    """Separable pixel task: label = hematoxylin density above ``threshold``."""
    from .mtl import pixel_batch

    rng = check_random_state(random_state)
    rgb, W, H = make_patch(shape, rng)
    mask = (H[0] > threshold).reshape(shape)
    return pixel_batch(rgb, mask, window)
