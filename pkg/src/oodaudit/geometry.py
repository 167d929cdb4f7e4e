"""Representation-geometry probes over penultimate features.

Estimates effective dimensionality (participation ratio), manifold dimension
(nearest-neighbor maximum-likelihood), and the angular alignment between the
ID-wrong and OOD drift fields around the ID-correct class centroids. The
drift construction is an artifact definition and is labeled as such in every
report it appears in.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from oodaudit._num import fix_column_signs
from oodaudit.dump import EvalDump

DRIFT_ALIGNMENT_LABEL = "drift-alignment (artifact definition)"


class GeometryError(Exception):
    pass


def participation_ratio(features: np.ndarray) -> float:
    """(sum lambda)^2 / sum lambda^2 over covariance eigenvalues.

    Invariant under rotation and uniform scaling; between 1 and min(n-1, D).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise GeometryError("participation ratio needs at least 2 samples")
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    eig = np.maximum(np.linalg.eigvalsh(cov), 0.0)
    total = eig.sum()
    if total <= 0:
        raise GeometryError("degenerate population: zero total variance")
    return float(total * total / np.square(eig).sum())


def intrinsic_dim_mle(features: np.ndarray, k_min: int = 10, k_max: int = 20) -> float:
    """Nearest-neighbor maximum-likelihood intrinsic dimension.

    Per point, the k-level estimate inverts the mean log distance ratio to the
    k-th neighbor; estimates are averaged over points, then over k in
    [k_min, k_max]. Exact duplicate rows are collapsed first (zero neighbor
    distances would blow up the log ratios).
    """
    x = np.asarray(features, dtype=np.float64)
    if not 2 <= k_min <= k_max:
        raise GeometryError("need 2 <= k_min <= k_max")
    unique = np.unique(x, axis=0)
    if unique.shape[0] < x.shape[0]:
        warnings.warn(
            f"collapsed {x.shape[0] - unique.shape[0]} duplicate points before MLE estimate",
            stacklevel=2,
        )
        x = unique
    n = x.shape[0]
    if n <= k_max:
        raise GeometryError(f"need more than k_max={k_max} distinct points, got {n}")

    tree = cKDTree(x)
    dists, _ = tree.query(x, k=k_max + 1)  # column 0 is the point itself
    log_d = np.log(dists[:, 1:])  # (n, k_max)

    per_k = []
    with np.errstate(divide="ignore"):
        for k in range(k_min, k_max + 1):
            # mean over j < k of log(T_k / T_j), per point
            s = log_d[:, k - 1][:, None] - log_d[:, : k - 1]
            inv = s.mean(axis=1)
            m_hat = 1.0 / inv
            per_k.append(m_hat.mean())
    out = float(np.mean(per_k))
    if not np.isfinite(out) or out <= 0:
        raise GeometryError("degenerate neighbor structure: estimate is not finite-positive")
    return out


def _nearest_centroid_drifts(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Unit vectors from each point's nearest centroid to the point."""
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    nearest = centroids[np.argmin(d2, axis=1)]
    diff = x - nearest
    norms = np.linalg.norm(diff, axis=1)
    keep = norms > 0
    return diff[keep] / norms[keep, None]


def drift_alignment(
    correct_features: np.ndarray,
    correct_preds: np.ndarray,
    wrong_features: np.ndarray,
    ood_features: np.ndarray,
) -> float:
    """Cosine between the mean drift of ID-wrong and the mean drift of OOD.

    Class centroids come from ID-correct features grouped by predicted class;
    each sample's drift is the unit vector away from its nearest centroid.
    """
    xc = np.asarray(correct_features, dtype=np.float64)
    xw = np.asarray(wrong_features, dtype=np.float64)
    xo = np.asarray(ood_features, dtype=np.float64)
    if xc.shape[0] == 0:
        raise GeometryError("empty ID-correct set")
    if xw.shape[0] == 0 or xo.shape[0] == 0:
        raise GeometryError("empty ID-wrong or OOD set")

    preds = np.asarray(correct_preds)
    classes = np.unique(preds)
    centroids = np.stack([xc[preds == c].mean(axis=0) for c in classes])

    mean_wrong = _nearest_centroid_drifts(xw, centroids).mean(axis=0)
    mean_ood = _nearest_centroid_drifts(xo, centroids).mean(axis=0)
    denom = np.linalg.norm(mean_wrong) * np.linalg.norm(mean_ood)
    if denom == 0:
        raise GeometryError("degenerate mean drift")
    return float(np.clip(mean_wrong @ mean_ood / denom, -1.0, 1.0))


def pca_project_2d(populations: list[np.ndarray]) -> list[np.ndarray]:
    """Deterministic 2-D projection of several populations onto shared axes.

    Axes are the top-2 principal directions of the pooled data (descending
    eigenvalue, sign-fixed). A deterministic stand-in for stochastic embeddings.
    """
    pops = [np.asarray(p, dtype=np.float64) for p in populations]
    pooled = np.vstack(pops)
    if pooled.shape[0] < 3:
        raise GeometryError("pooled population needs at least 3 points")
    center = pooled.mean(axis=0)
    cov = np.cov(pooled - center, rowvar=False, ddof=1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    top = eigvals[order]
    if top[1] <= 0 or top[1] < 1e-12 * max(top[0], 1e-300):
        raise GeometryError("rank-deficient pooled data: no 2-D structure to project")
    basis = fix_column_signs(eigvecs[:, order])
    return [(p - center) @ basis for p in pops]


def projections_to_csv(named_populations: list[tuple[str, np.ndarray]]) -> str:
    """(population, x, y) rows for external plotting tools."""
    lines = ["population,x,y"]
    for name, coords in named_populations:
        for row in coords:
            lines.append(f"{name},{row[0]!r},{row[1]!r}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PopulationGeometry:
    n: int
    participation_ratio: float | None
    intrinsic_dim_mle: float | None


@dataclass(frozen=True)
class GeometryReport:
    populations: dict[str, PopulationGeometry]  # id_correct / id_wrong / ood
    drift_alignment_cos: float | None
    drift_alignment_label: str
    centroid_table: np.ndarray  # (K, D), NaN rows for classes without correct samples
    pr_per_class: dict[int, float] | None = None

    def to_json_obj(self) -> dict:
        return {
            "populations": {
                name: {
                    "n": g.n,
                    "participation_ratio": g.participation_ratio,
                    "intrinsic_dim_mle": g.intrinsic_dim_mle,
                }
                for name, g in self.populations.items()
            },
            "drift_alignment_cos": self.drift_alignment_cos,
            "drift_alignment_label": self.drift_alignment_label,
            "centroid_table": [[float(v) for v in row] for row in self.centroid_table],
            "pr_per_class": (
                None
                if self.pr_per_class is None
                else {str(k): v for k, v in self.pr_per_class.items()}
            ),
        }


def _safe_pr(x: np.ndarray) -> float | None:
    try:
        return participation_ratio(x)
    except GeometryError:
        return None


def _safe_mle(x: np.ndarray, k_min: int, k_max: int) -> float | None:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return intrinsic_dim_mle(x, k_min, k_max)
    except GeometryError:
        return None


def geometry_report(
    id_dump: EvalDump,
    ood_dumps: list[EvalDump],
    *,
    k_min: int = 10,
    k_max: int = 20,
    per_class_pr: bool = False,
) -> GeometryReport:
    """Geometry probes for the ID-correct / ID-wrong / pooled-OOD populations."""
    if id_dump.labels is None:
        raise GeometryError("geometry requires a labeled id_test dump")
    if not ood_dumps:
        raise GeometryError("geometry requires at least one OOD dump")

    preds = np.argmax(id_dump.logits, axis=1)
    correct_mask = preds == id_dump.labels
    xc = id_dump.features[correct_mask]
    xw = id_dump.features[~correct_mask]
    xo = np.vstack([d.features for d in ood_dumps])

    populations = {
        "id_correct": PopulationGeometry(len(xc), _safe_pr(xc), _safe_mle(xc, k_min, k_max)),
        "id_wrong": PopulationGeometry(len(xw), _safe_pr(xw), _safe_mle(xw, k_min, k_max)),
        "ood": PopulationGeometry(len(xo), _safe_pr(xo), _safe_mle(xo, k_min, k_max)),
    }

    try:
        cos = drift_alignment(xc, preds[correct_mask], xw, xo)
    except GeometryError:
        cos = None

    k = id_dump.n_classes
    centroids = np.full((k, id_dump.feat_dim), np.nan)
    for c in range(k):
        mask = correct_mask & (preds == c)
        if mask.any():
            centroids[c] = id_dump.features[mask].mean(axis=0)

    per_class = None
    if per_class_pr:
        per_class = {}
        for c in range(k):
            mask = correct_mask & (preds == c)
            if mask.sum() >= 2:
                pr = _safe_pr(id_dump.features[mask])
                if pr is not None:
                    per_class[c] = pr

    return GeometryReport(
        populations=populations,
        drift_alignment_cos=cos,
        drift_alignment_label=DRIFT_ALIGNMENT_LABEL,
        centroid_table=centroids,
        pr_per_class=per_class,
    )
