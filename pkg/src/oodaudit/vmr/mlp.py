"""Small rectifier network with explicit forward caching for manual backprop.

Layout: input -> hidden -> hidden -> K logits; the second hidden activation
is the penultimate feature vector exported to dumps. No autograd framework:
gradients are assembled by the training module and validated against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class ForwardCache:
    x: np.ndarray
    s1: np.ndarray
    a1: np.ndarray
    s2: np.ndarray
    a2: np.ndarray  # penultimate features
    logits: np.ndarray


class MlpModel:
    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.w3 = np.asarray(w3, dtype=np.float64)
        self.b3 = np.asarray(b3, dtype=np.float64)

    @classmethod
    def init(cls, input_dim: int, hidden: int, k_classes: int, rng: np.random.Generator):
        """He-style initialization for rectifier layers."""
        w1 = rng.standard_normal((hidden, input_dim)) * np.sqrt(2.0 / input_dim)
        w2 = rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden)
        w3 = rng.standard_normal((k_classes, hidden)) * np.sqrt(2.0 / hidden)
        return cls(w1, np.zeros(hidden), w2, np.zeros(hidden), w3, np.zeros(k_classes))

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def k_classes(self) -> int:
        return self.w3.shape[0]

    def forward_cache(self, x: np.ndarray) -> ForwardCache:
        x = np.asarray(x, dtype=np.float64)
        s1 = x @ self.w1.T + self.b1
        a1 = np.maximum(s1, 0.0)
        s2 = a1 @ self.w2.T + self.b2
        a2 = np.maximum(s2, 0.0)
        logits = a2 @ self.w3.T + self.b3
        return ForwardCache(x, s1, a1, s2, a2, logits)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(logits, penultimate features)."""
        cache = self.forward_cache(x)
        return cache.logits, cache.a2

    def head_only(self, phi: np.ndarray) -> np.ndarray:
        """Logits of raw penultimate features (virtual-outlier path)."""
        return np.asarray(phi, dtype=np.float64) @ self.w3.T + self.b3

    def backprop(self, cache: ForwardCache, g_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient at the logits."""
        grads = {}
        grads["w3"] = g_logits.T @ cache.a2
        grads["b3"] = g_logits.sum(axis=0)
        ga2 = g_logits @ self.w3
        gs2 = ga2 * (cache.s2 > 0)
        grads["w2"] = gs2.T @ cache.a1
        grads["b2"] = gs2.sum(axis=0)
        ga1 = gs2 @ self.w2
        gs1 = ga1 * (cache.s1 > 0)
        grads["w1"] = gs1.T @ cache.x
        grads["b1"] = gs1.sum(axis=0)
        return grads

    # parameter plumbing (SGD state, finite-difference checks, copies)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "MlpModel":
        return MlpModel(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for n in PARAM_NAMES:
            arr = getattr(self, n)
            size = arr.size
            setattr(self, n, flat[i : i + size].reshape(arr.shape).copy())
            i += size
        if i != len(flat):
            raise ValueError("flat parameter vector has wrong length")

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in PARAM_NAMES)
