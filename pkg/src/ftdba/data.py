"""Synthetic image-classification task used in place of a real benchmark."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True, eq=False)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def side(self) -> int:
        return self.x_train.shape[-1]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))


def class_bump(c: int, classes: int, side: int, amplitude: float = 0.6) -> np.ndarray:
    """Gaussian bump on a ring around the centre, one angular slot per class."""
    angle = 2 * np.pi * c / classes
    cy = side / 2 - 0.5 + 0.28 * side * np.sin(angle)
    cx = side / 2 - 0.5 + 0.28 * side * np.cos(angle)
    rr, cc = np.mgrid[0:side, 0:side]
    width = 0.12 * side
    return amplitude * np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * width**2))


def texture(rng: np.random.Generator, n: int, side: int, std: float = 0.1,
            correlation: float = 1.5) -> np.ndarray:
    """Spatially smooth Gaussian noise rescaled to a per-pixel ``std``."""
    raw = rng.standard_normal((n, side, side))
    smooth = gaussian_filter(raw, sigma=(0, correlation, correlation), mode="wrap")
    return std * smooth / smooth.std(axis=(1, 2), keepdims=True)


def make_synthetic_dataset(classes: int = 10, per_class: int = 600, side: int = 32,
                           seed: int = 0, background: float = 0.2, noise_std: float = 0.1,
                           noise_floor: float = 0.1, pixel_noise: float = 0.01,
                           test_frac: float = 0.2) -> Dataset:
    """Class-conditional bump images with texture noise, split train/test.

    The texture is modulated by the bump envelope: its std is ``noise_std``
    at the bump peak and ``noise_floor * noise_std`` on the flat background.
    Independent per-pixel ``pixel_noise`` stands in for sensor noise and
    gives every image a flat high-frequency floor.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if side < 16:
        raise ValueError("side must be >= 16")
    rng = np.random.default_rng(seed)
    bumps = np.stack([class_bump(c, classes, side) for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    amp = bumps.max()
    x = background + bumps[y] + (bumps[y] / amp + noise_floor) * texture(rng, len(y), side, noise_std)
    x = x + rng.normal(0.0, pixel_noise, x.shape)
    x = np.clip(x, 0.0, 1.0)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_test = int(round(test_frac * len(y)))
    n_train = len(y) - n_test
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], classes)
