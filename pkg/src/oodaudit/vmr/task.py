"""Synthetic noisy-label tasks with built-in near/far OOD routes.

ID classes are Gaussian blobs with means on a circle in the first two input
coordinates. Near-OOD blobs sit at midpoints between adjacent class means
(semantic neighbors); far-OOD blobs sit at four times the class radius and
are displaced into coordinates orthogonal to the ID plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NOISE_KINDS = ("symmetric", "asymmetric")


class TaskError(Exception):
    pass


def inject_label_noise(
    labels: np.ndarray,
    kind: str,
    rate: float,
    seed: int,
    n_classes: int | None = None,
) -> np.ndarray:
    """Flip labels independently with probability ``rate``.

    symmetric: a flipped label moves uniformly to one of the other K-1
    classes; asymmetric: to the cyclic next class (y+1) mod K.
    """
    labels = np.asarray(labels)
    if not 0.0 <= rate < 1.0:
        raise TaskError("noise rate must be in [0, 1)")
    if kind not in NOISE_KINDS:
        raise TaskError(f"unknown noise kind {kind!r}")
    k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if k < 2:
        raise TaskError("need at least 2 classes to inject noise")

    rng = np.random.default_rng(seed)
    n = len(labels)
    flip = rng.random(n) < rate
    if kind == "symmetric":
        offsets = rng.integers(1, k, size=n)
    else:
        offsets = np.ones(n, dtype=np.int64)
    noisy = labels.copy()
    noisy[flip] = (labels[flip] + offsets[flip]) % k
    return noisy


@dataclass(frozen=True)
class TaskConfig:
    k_classes: int = 4
    input_dim: int = 8
    n_per_class: int = 1000
    noise_kind: str = "symmetric"
    noise_rate: float = 0.5
    radius: float = 4.0
    sigma: float = 1.0
    n_test_per_class: int = 250
    n_ood_per_blob: int = 250

    def to_json_obj(self) -> dict:
        return {
            "k_classes": self.k_classes,
            "input_dim": self.input_dim,
            "n_per_class": self.n_per_class,
            "noise_kind": self.noise_kind,
            "noise_rate": self.noise_rate,
            "radius": self.radius,
            "sigma": self.sigma,
            "n_test_per_class": self.n_test_per_class,
            "n_ood_per_blob": self.n_ood_per_blob,
        }


@dataclass(frozen=True)
class SyntheticTask:
    train_inputs: np.ndarray
    train_labels_noisy: np.ndarray
    train_labels_clean: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    near_inputs: np.ndarray
    far_inputs: np.ndarray
    k_classes: int
    input_dim: int
    noise_kind: str
    noise_rate: float
    seed: int
    config: TaskConfig = field(repr=False, default=TaskConfig())


def _class_means(k: int, d: int, radius: float) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = radius * np.cos(theta)
    means[:, 1] = radius * np.sin(theta)
    return means


def _blobs(rng: np.random.Generator, means: np.ndarray, n_each: int, sigma: float, d: int):
    k = means.shape[0]
    labels = np.repeat(np.arange(k), n_each)
    x = means[labels] + sigma * rng.standard_normal((k * n_each, d))
    return x, labels


def gen_synthetic_task(
    k_classes: int = 4,
    input_dim: int = 8,
    n_per_class: int = 1000,
    noise_kind: str = "symmetric",
    noise_rate: float = 0.5,
    seed: int = 0,
    *,
    radius: float = 4.0,
    sigma: float = 1.0,
    n_test_per_class: int = 250,
    n_ood_per_blob: int = 250,
) -> SyntheticTask:
    """Deterministic blob task with ID train/test, near-OOD, and far-OOD splits."""
    if k_classes < 3:
        raise TaskError("need at least 3 classes")
    if not 0.0 <= noise_rate <= 0.95:
        raise TaskError("noise_rate must be in [0, 0.95]")
    if input_dim < 4:
        raise TaskError("need input_dim >= 4 to place far-OOD in orthogonal coordinates")
    if radius <= 2.0 * sigma:
        raise TaskError("classes not separable by construction (radius <= 2*sigma)")

    rng = np.random.default_rng(seed)
    means = _class_means(k_classes, input_dim, radius)

    train_x, train_clean = _blobs(rng, means, n_per_class, sigma, input_dim)
    noise_seed = int(rng.integers(2**63))
    train_noisy = inject_label_noise(
        train_clean, noise_kind, noise_rate, noise_seed, n_classes=k_classes
    )

    test_x, test_y = _blobs(rng, means, n_test_per_class, sigma, input_dim)

    near_means = (means + np.roll(means, -1, axis=0)) / 2.0
    near_x, _ = _blobs(rng, near_means, n_ood_per_blob, sigma, input_dim)

    # far blobs: radius 4R circle placed in the orthogonal coordinate pair (2, 3)
    theta = 2.0 * np.pi * np.arange(k_classes) / k_classes
    far_means = np.zeros((k_classes, input_dim))
    far_means[:, 2] = 4.0 * radius * np.cos(theta)
    far_means[:, 3] = 4.0 * radius * np.sin(theta)
    far_x, _ = _blobs(rng, far_means, n_ood_per_blob, sigma, input_dim)

    return SyntheticTask(
        train_inputs=train_x,
        train_labels_noisy=train_noisy,
        train_labels_clean=train_clean,
        test_inputs=test_x,
        test_labels=test_y,
        near_inputs=near_x,
        far_inputs=far_x,
        k_classes=k_classes,
        input_dim=input_dim,
        noise_kind=noise_kind,
        noise_rate=noise_rate,
        seed=seed,
        config=TaskConfig(
            k_classes=k_classes,
            input_dim=input_dim,
            n_per_class=n_per_class,
            noise_kind=noise_kind,
            noise_rate=noise_rate,
            radius=radius,
            sigma=sigma,
            n_test_per_class=n_test_per_class,
            n_ood_per_blob=n_ood_per_blob,
        ),
    )


def task_from_config(cfg: TaskConfig, seed: int) -> SyntheticTask:
    return gen_synthetic_task(
        k_classes=cfg.k_classes,
        input_dim=cfg.input_dim,
        n_per_class=cfg.n_per_class,
        noise_kind=cfg.noise_kind,
        noise_rate=cfg.noise_rate,
        seed=seed,
        radius=cfg.radius,
        sigma=cfg.sigma,
        n_test_per_class=cfg.n_test_per_class,
        n_ood_per_blob=cfg.n_ood_per_blob,
    )
