"""Post-hoc OOD scores computed from frozen-checkpoint dumps.

Every score is a pure function of logits and/or penultimate features. Each
carries a direction flag; :func:`orient_ood_larger` normalizes all scores to
the common OOD-larger convention expected by the metric layer.

Detector-style scores (Mahalanobis, k-NN, ReAct, ViM) are fitted on an ID
fit dump only; no OOD data enters fitting, consistent with the frozen
post-hoc contract.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from oodaudit._num import fix_column_signs, logsumexp, softmax
from oodaudit.dump import EvalDump


class ScoreError(Exception):
    """Scoring precondition failure (bad inputs, unusable fit data)."""


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample scalar scores with an explicit direction flag."""

    values: np.ndarray
    score_name: str
    direction: str  # "ood_larger" | "id_larger"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(vals).all():
            raise ScoreError(f"{self.score_name}: non-finite score values")
        if self.direction not in ("ood_larger", "id_larger"):
            raise ScoreError(f"unknown direction {self.direction!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.shape[0])


def _check_logits(logits: np.ndarray, min_classes: int = 2) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < min_classes:
        raise ScoreError(f"logits must be (n, K) with K >= {min_classes}, got {z.shape}")
    if not np.isfinite(z).all():
        raise ScoreError("non-finite logits")
    return z


def orient_ood_larger(sv: ScoreVector) -> ScoreVector:
    """Return the score in the common OOD-larger direction (idempotent)."""
    if sv.direction == "ood_larger":
        return sv
    return ScoreVector(-sv.values, sv.score_name, "ood_larger")


# --- logit-only scores ------------------------------------------------------


def msp(logits: np.ndarray) -> ScoreVector:
    """Maximum softmax probability; the classifier's top-class confidence."""
    z = _check_logits(logits)
    return ScoreVector(softmax(z).max(axis=1), "msp", "id_larger")


def energy(logits: np.ndarray, temperature: float = 1.0) -> ScoreVector:
    """Free-energy score E = -T * logsumexp(z / T); larger means more OOD-like."""
    if temperature <= 0:
        raise ScoreError("temperature must be positive")
    z = _check_logits(logits)
    vals = -temperature * logsumexp(z / temperature, axis=1)
    return ScoreVector(vals, "energy", "ood_larger")


def maxlogit(logits: np.ndarray) -> ScoreVector:
    z = _check_logits(logits)
    return ScoreVector(z.max(axis=1), "maxlogit", "id_larger")


def margin(logits: np.ndarray) -> ScoreVector:
    """Top-1 minus top-2 logit gap."""
    z = _check_logits(logits)
    part = np.partition(z, -2, axis=1)
    return ScoreVector(part[:, -1] - part[:, -2], "margin", "id_larger")


def shannon_entropy(logits: np.ndarray) -> ScoreVector:
    """Softmax entropy in nats, in [0, ln K]."""
    z = _check_logits(logits)
    p = softmax(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    vals = np.maximum(-plogp.sum(axis=1), 0.0)
    return ScoreVector(vals, "entropy", "ood_larger")


def odin_t(logits: np.ndarray, temperature: float = 1000.0) -> ScoreVector:
    """Temperature-scaled MSP (the perturbation-free ODIN variant).

    Input-gradient perturbation needs a live network, which the dump contract
    deliberately excludes.
    """
    if temperature <= 0:
        raise ScoreError("temperature must be positive")
    z = _check_logits(logits)
    return ScoreVector(softmax(z / temperature).max(axis=1), "odin_t", "id_larger")


# --- Mahalanobis ------------------------------------------------------------


@dataclass(frozen=True)
class MahalanobisModel:
    """Class-conditional Gaussian detector with shared shrunk precision."""

    class_means: np.ndarray  # (K, D)
    shared_precision: np.ndarray  # (D, D), symmetric positive-definite
    shrinkage: float

    def __post_init__(self):
        p = self.shared_precision
        if np.abs(p - p.T).max() > 1e-10:
            raise ScoreError("precision not symmetric")
        if np.linalg.eigvalsh(p).min() <= 0:
            raise ScoreError("precision not positive-definite")


def _require_fit_labels(fit: EvalDump) -> np.ndarray:
    if fit.role not in ("fit", "id_test") or fit.labels is None:
        raise ScoreError("fit dump must have role fit/id_test with labels")
    return fit.labels


def fit_mahalanobis(fit: EvalDump, shrinkage: float | None = None) -> MahalanobisModel:
    """Fit class means and a shared within-class covariance from an ID dump.

    shrinkage=None uses the default 1e-3 * trace(cov) / D added to the
    diagonal; pass 0 to disable (raises if the covariance is singular).
    """
    labels = _require_fit_labels(fit)
    return fit_mahalanobis_features(fit.features, labels, fit.n_classes, shrinkage)


def fit_mahalanobis_features(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    shrinkage: float | None = None,
) -> MahalanobisModel:
    """Array-level fit, for in-memory feature pipelines that bypass the dump container."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    k, d = n_classes, x.shape[1]

    means = np.empty((k, d))
    centered = np.empty_like(x)
    for c in range(k):
        mask = labels == c
        if mask.sum() < 2:
            raise ScoreError(f"class {c} has fewer than 2 fit samples")
        means[c] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[c]
    cov = centered.T @ centered / x.shape[0]

    if shrinkage is None:
        shrinkage = 1e-3 * np.trace(cov) / d
    if shrinkage < 0:
        raise ScoreError("shrinkage must be nonnegative")
    shrunk = cov + shrinkage * np.eye(d)
    try:
        np.linalg.cholesky(shrunk)
    except np.linalg.LinAlgError:
        raise ScoreError("singular covariance; refit with shrinkage > 0") from None
    precision = np.linalg.inv(shrunk)
    precision = (precision + precision.T) / 2.0
    return MahalanobisModel(means, precision, float(shrinkage))


def score_mahalanobis(model: MahalanobisModel, features: np.ndarray) -> ScoreVector:
    """Min-over-classes squared Mahalanobis distance under the shared precision."""
    x = np.asarray(features, dtype=np.float64)
    dists = np.empty((x.shape[0], model.class_means.shape[0]))
    for c, mu in enumerate(model.class_means):
        diff = x - mu
        dists[:, c] = np.einsum("ij,jk,ik->i", diff, model.shared_precision, diff)
    return ScoreVector(dists.min(axis=1), "mahalanobis", "ood_larger")


# --- k-NN -------------------------------------------------------------------


@dataclass(frozen=True)
class KnnModel:
    """Bank of unit-normalized fit features plus a neighbor index."""

    fit_bank: np.ndarray  # (n, D), rows unit L2 norm
    k: int

    def __post_init__(self):
        norms = np.linalg.norm(self.fit_bank, axis=1)
        if self.fit_bank.shape[0] and np.abs(norms - 1.0).max() > 1e-6:
            raise ScoreError("bank rows must be unit norm")
        if not (1 <= self.k <= self.fit_bank.shape[0]):
            raise ScoreError(f"k={self.k} outside [1, {self.fit_bank.shape[0]}]")


def _unit_rows(features: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        i = int(np.flatnonzero(norms.ravel() == 0)[0])
        raise ScoreError(f"cannot normalize zero-norm {what} row {i}")
    return x / norms


def fit_knn(fit: EvalDump, k: int | None = None) -> KnnModel:
    """Normalize the fit features into a bank; default k = 1% of bank size."""
    if fit.n_samples == 0:
        raise ScoreError("empty bank")
    bank = _unit_rows(fit.features, "bank feature")
    if k is None:
        k = max(1, round(0.01 * bank.shape[0]))
    return KnnModel(bank, int(k))


def score_knn(model: KnnModel, features: np.ndarray) -> ScoreVector:
    """Distance from the normalized query to its k-th nearest bank row."""
    q = _unit_rows(features, "query feature")
    # unit rows: ||q - b||^2 = 2 - 2 q.b
    sq = np.maximum(2.0 - 2.0 * (q @ model.fit_bank.T), 0.0)
    kth = np.partition(sq, model.k - 1, axis=1)[:, model.k - 1]
    return ScoreVector(np.sqrt(kth), "knn", "ood_larger")


# --- ReAct ------------------------------------------------------------------


def react_energy(dump: EvalDump, fit: EvalDump, clip_percentile: float = 90.0) -> ScoreVector:
    """Energy after clipping activations at a fit-set percentile.

    The threshold is the global percentile (linear interpolation) over all
    fit feature entries; logits are recomputed through the stored head.
    clip_percentile=100 is a bit-exact no-op clip.
    """
    if dump.head_w is None:
        raise ScoreError("react requires classifier head")
    if not 0.0 < clip_percentile <= 100.0:
        raise ScoreError("clip_percentile must be in (0, 100]")
    if clip_percentile == 100.0:
        clipped = dump.features
    else:
        thresh = np.percentile(fit.features.ravel(), clip_percentile, method="linear")
        clipped = np.minimum(dump.features, thresh)
    logits = clipped @ dump.head_w.T + dump.head_b
    vals = -logsumexp(logits, axis=1)
    return ScoreVector(vals, "react", "ood_larger")


# --- ViM --------------------------------------------------------------------


@dataclass(frozen=True)
class VimModel:
    """Principal subspace + scale for the virtual-logit-style residual score."""

    origin: np.ndarray  # (D,)
    principal_basis: np.ndarray  # (D, D') orthonormal columns
    alpha: float

    def __post_init__(self):
        b = self.principal_basis
        if np.abs(b.T @ b - np.eye(b.shape[1])).max() > 1e-8:
            raise ScoreError("basis columns not orthonormal")
        if self.alpha <= 0:
            raise ScoreError("alpha must be positive")


def fit_vim(fit: EvalDump, subspace_dim: int | None = None) -> VimModel:
    """Fit the principal subspace of head-origin-centered fit features.

    origin = -pinv(W) b; basis = top-D' eigenvectors of the centered scatter
    (descending eigenvalues, sign-fixed); alpha = mean fit maxlogit over mean
    fit residual norm.
    """
    if fit.head_w is None:
        raise ScoreError("vim requires classifier head")
    d = fit.feat_dim
    if subspace_dim is None:
        subspace_dim = int(min(d / 2, 64))
    if not 1 <= subspace_dim < d:
        raise ScoreError(f"subspace_dim must be in [1, {d - 1}], got {subspace_dim}")

    origin = -np.linalg.pinv(fit.head_w) @ fit.head_b
    centered = fit.features - origin
    scatter = centered.T @ centered / max(fit.n_samples, 1)
    eigvals, eigvecs = np.linalg.eigh(scatter)
    order = np.argsort(eigvals)[::-1][:subspace_dim]
    basis = fix_column_signs(eigvecs[:, order])

    resid = centered - (centered @ basis) @ basis.T
    resid_norms = np.linalg.norm(resid, axis=1)
    mean_resid = resid_norms.mean() if resid_norms.size else 0.0
    if mean_resid <= 0:
        raise ScoreError("degenerate residuals: all fit features inside the subspace")
    alpha = fit.logits.max(axis=1).mean() / mean_resid
    if alpha <= 0:
        raise ScoreError("nonpositive alpha (mean fit maxlogit <= 0)")
    return VimModel(origin, basis, float(alpha))


def score_vim(model: VimModel, dump: EvalDump) -> ScoreVector:
    """alpha * ||residual off the principal subspace|| - logsumexp(logits)."""
    centered = dump.features - model.origin
    resid = centered - (centered @ model.principal_basis) @ model.principal_basis.T
    vals = model.alpha * np.linalg.norm(resid, axis=1) - logsumexp(dump.logits, axis=1)
    return ScoreVector(vals, "vim", "ood_larger")


# --- registry for the CLI and experiment drivers ----------------------------


@dataclass(frozen=True)
class ScoreOptions:
    temperature: float = 1.0
    odin_temperature: float = 1000.0
    knn_k: int | None = None
    clip_percentile: float = 90.0
    vim_dim: int | None = None
    mahalanobis_shrinkage: float | None = None


SCORES_NEEDING_FIT = ("mahalanobis", "knn", "react", "vim")
SCORE_NAMES = ("msp", "energy", "maxlogit", "margin", "entropy", "odin_t") + SCORES_NEEDING_FIT


def compute_score(
    name: str,
    dump: EvalDump,
    fit: EvalDump | None = None,
    options: ScoreOptions = ScoreOptions(),
    _fit_cache: dict | None = None,
) -> ScoreVector:
    """Compute a named score on a dump, fitting detector state on demand.

    ``_fit_cache`` lets a driver reuse fitted detectors across dumps.
    """
    if name in SCORES_NEEDING_FIT and fit is None:
        raise ScoreError(f"{name} requires fit dump")
    cache = _fit_cache if _fit_cache is not None else {}
    if name == "msp":
        return msp(dump.logits)
    if name == "energy":
        return energy(dump.logits, options.temperature)
    if name == "maxlogit":
        return maxlogit(dump.logits)
    if name == "margin":
        return margin(dump.logits)
    if name == "entropy":
        return shannon_entropy(dump.logits)
    if name == "odin_t":
        return odin_t(dump.logits, options.odin_temperature)
    if name == "mahalanobis":
        if "mahalanobis" not in cache:
            cache["mahalanobis"] = fit_mahalanobis(fit, options.mahalanobis_shrinkage)
        return score_mahalanobis(cache["mahalanobis"], dump.features)
    if name == "knn":
        if "knn" not in cache:
            cache["knn"] = fit_knn(fit, options.knn_k)
        return score_knn(cache["knn"], dump.features)
    if name == "react":
        return react_energy(dump, fit, options.clip_percentile)
    if name == "vim":
        if "vim" not in cache:
            cache["vim"] = fit_vim(fit, options.vim_dim)
        return score_vim(cache["vim"], dump)
    raise ScoreError(f"unknown score {name!r}")


# --- export -----------------------------------------------------------------


def score_to_json_obj(sv: ScoreVector) -> dict:
    return {
        "score_name": sv.score_name,
        "direction": sv.direction,
        "values": [float(v) for v in sv.values],
    }


def save_score_binary(sv: ScoreVector, path) -> None:
    """Raw float32 LE values plus a sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(sv.values.astype("<f4").tobytes())
    sidecar = {
        "score_name": sv.score_name,
        "direction": sv.direction,
        "n": len(sv),
        "dtype": "float32_le",
    }
    path.with_suffix(path.suffix + ".manifest.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
