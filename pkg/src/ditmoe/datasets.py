"""Named synthetic datasets, deterministic in (name, n, seed).

``labels`` is an integer array ``[n, n_attributes]`` for conditional sets and
``None`` otherwise. ``cardinalities`` gives the number of values per
attribute; the index equal to the cardinality is reserved for the null
(dropped) condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng

GMM_RADIUS = 4.0
GMM_STD = 0.5
GMM_COMPONENTS = 8
SCENE_BACKGROUNDS = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
SCENE_STD = 0.4


@dataclass
class ToyData:
    name: str
    x: np.ndarray  # [n, D]
    labels: np.ndarray | None = None  # [n, n_attr]
    cardinalities: tuple[int, ...] = ()

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def conditional(self) -> bool:
        return self.labels is not None


def gmm8_means(n_components: int = GMM_COMPONENTS, radius: float = GMM_RADIUS) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n_components) / n_components
    return radius * np.stack([np.cos(ang), np.sin(ang)], 1)


def scene_means(labels: np.ndarray) -> np.ndarray:
    """4-D target mean for ``(object, background)`` label pairs."""
    labels = np.asarray(labels).reshape(-1, 2)
    return np.concatenate([gmm8_means()[labels[:, 0]], SCENE_BACKGROUNDS[labels[:, 1]]], 1)


def target_means(name: str, labels: np.ndarray) -> np.ndarray:
    if name in ("conditional_gmm", "gmm8"):
        return gmm8_means()[np.asarray(labels).reshape(len(labels), -1)[:, 0]]
    if name == "scene":
        return scene_means(labels)
    raise ValueError(f"dataset {name!r} has no per-label target")


def make_dataset(name: str, n: int, seed: int) -> ToyData:
    rng = make_rng(seed, 0xDA7A)
    if name == "gmm8":
        comp = rng.integers(0, GMM_COMPONENTS, n)
        x = gmm8_means()[comp] + GMM_STD * rng.standard_normal((n, 2))
        return ToyData(name, x)
    if name == "conditional_gmm":
        comp = rng.integers(0, GMM_COMPONENTS, n)
        x = gmm8_means()[comp] + GMM_STD * rng.standard_normal((n, 2))
        return ToyData(name, x, comp[:, None], (GMM_COMPONENTS,))
    if name == "checkerboard":
        # side-2 squares on the dark cells of a 4x4 board over [-4, 4]^2
        cell = rng.integers(0, 8, n)
        row = cell // 2
        col = 2 * (cell % 2) + (row % 2)
        u = rng.uniform(0, 2, (n, 2))
        x = np.stack([-4 + 2 * col + u[:, 0], -4 + 2 * row + u[:, 1]], 1)
        return ToyData(name, x)
    if name == "scene":
        obj = rng.integers(0, GMM_COMPONENTS, n)
        bg = rng.integers(0, len(SCENE_BACKGROUNDS), n)
        labels = np.stack([obj, bg], 1)
        x = scene_means(labels) + SCENE_STD * rng.standard_normal((n, 4))
        return ToyData(name, x, labels, (GMM_COMPONENTS, len(SCENE_BACKGROUNDS)))
    raise ValueError(f"unknown dataset {name!r}")


DATASETS = ("gmm8", "checkerboard", "conditional_gmm", "scene")
