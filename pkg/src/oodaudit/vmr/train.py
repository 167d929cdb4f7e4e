"""Host objective, virtual-outlier synthesis, and the training loop.

The host is cross-entropy over per-class small-loss trusted batches. The
repair term draws candidate features from class-conditional Gaussians fitted
on trusted features, keeps the lowest-likelihood candidates, and trains a
two-parameter logistic on the energy axis to push virtual outliers to high
energy and trusted ID samples to low energy. Test-time scoring stays the
plain energy score on exported dumps; the logistic is discarded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from oodaudit._num import logsumexp, softmax
from oodaudit.dump import EvalDump
from oodaudit.metrics import _auroc_values
from oodaudit.vmr.mlp import MlpModel, PARAM_NAMES
from oodaudit.vmr.task import SyntheticTask


class TrainError(Exception):
    pass


class TrainingDiverged(TrainError):
    pass


def select_trusted(
    per_sample_losses: np.ndarray, labels: np.ndarray, keep_fraction: float
) -> np.ndarray:
    """Per class, the floor(keep_fraction * n_class) lowest-loss indices.

    Ties break by original index (stable sort); the returned index set is
    sorted ascending.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise TrainError("keep_fraction must be in (0, 1]")
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    labels = np.asarray(labels)
    kept = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise TrainError(f"empty class {c}")
        n_keep = int(np.floor(keep_fraction * idx.size))
        order = np.argsort(losses[idx], kind="stable")
        kept.append(idx[order[:n_keep]])
    return np.sort(np.concatenate(kept)) if kept else np.array([], dtype=int)


@dataclass(frozen=True)
class GaussianBank:
    """Per-class means with a shared shrunk covariance."""

    means: np.ndarray  # (K, D)
    cov: np.ndarray  # (D, D), includes the shrinkage term
    shrinkage: float

    def __post_init__(self):
        if np.abs(self.cov - self.cov.T).max() > 1e-10:
            raise TrainError("covariance not symmetric")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise TrainError("covariance not positive-definite") from None

    def log_density(self, x: np.ndarray, class_index: int) -> np.ndarray:
        """Gaussian log density of rows of x under the given class."""
        d = self.cov.shape[0]
        diff = np.asarray(x, dtype=np.float64) - self.means[class_index]
        sol = np.linalg.solve(self.cov, diff.T).T
        maha = np.einsum("ij,ij->i", diff, sol)
        sign, logdet = np.linalg.slogdet(self.cov)
        return -0.5 * (maha + logdet + d * np.log(2.0 * np.pi))


def fit_class_gaussians(
    features: np.ndarray, labels: np.ndarray, shrinkage: float = 1e-3
) -> GaussianBank:
    """Class means plus pooled within-class covariance with a diagonal shrink."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    d = x.shape[1]
    k = int(labels.max()) + 1

    means = np.zeros((k, d))
    centered = np.empty_like(x)
    for c in range(k):
        mask = labels == c
        if mask.sum() < 2:
            raise TrainError(f"class {c} needs at least 2 samples")
        means[c] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[c]
    cov = centered.T @ centered / x.shape[0] + shrinkage * np.eye(d)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise TrainError(
            "singular pooled covariance; refit with shrinkage epsilon > 0"
        ) from None
    return GaussianBank(means, cov, float(shrinkage))


def sample_virtual_outliers(
    bank: GaussianBank, per_class: int, pool: int, seed: int
) -> np.ndarray:
    """Draw ``pool`` candidates per class, keep the ``per_class`` least likely.

    Returns (per_class * K, D) features, grouped by class in class order and
    in draw order within each class; deterministic given the seed.
    """
    if per_class > pool:
        raise TrainError("per_class keep count must be <= pool size")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(bank.cov)
    k, d = bank.means.shape
    out = []
    for c in range(k):
        draws = bank.means[c] + rng.standard_normal((pool, d)) @ chol.T
        ll = bank.log_density(draws, c)
        order = np.argsort(ll, kind="stable")[:per_class]
        out.append(draws[np.sort(order)])
    return np.vstack(out)


@dataclass(frozen=True)
class VosLossResult:
    loss: float
    d_a: float
    d_c: float
    d_id_energies: np.ndarray
    d_virtual_energies: np.ndarray


def vos_loss(
    id_energies: np.ndarray, virtual_energies: np.ndarray, a: float, c: float
) -> VosLossResult:
    """Binary energy-separation loss with its analytic gradients.

    With u = a*(-E) + c: mean BCE(sigmoid(u), 1) over ID energies plus mean
    BCE(sigmoid(u), 0) over virtual energies. Gradients are returned for the
    logistic parameters and for each energy, so callers can chain through the
    network that produced the energies.
    """
    e_id = np.asarray(id_energies, dtype=np.float64)
    e_v = np.asarray(virtual_energies, dtype=np.float64)
    if e_id.size == 0 or e_v.size == 0:
        raise TrainError("both energy sets must be nonempty")
    if not (np.isfinite(e_id).all() and np.isfinite(e_v).all()):
        raise TrainError("non-finite energies")

    u_id = a * (-e_id) + c
    u_v = a * (-e_v) + c
    # softplus(-u) = BCE(sigmoid(u), 1); softplus(u) = BCE(sigmoid(u), 0)
    loss = np.logaddexp(0.0, -u_id).mean() + np.logaddexp(0.0, u_v).mean()

    du_id = -expit(-u_id) / e_id.size
    du_v = expit(u_v) / e_v.size
    d_a = float(du_id @ (-e_id) + du_v @ (-e_v))
    d_c = float(du_id.sum() + du_v.sum())
    return VosLossResult(float(loss), d_a, d_c, du_id * (-a), du_v * (-a))


def _ce_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]


def batch_loss_and_grads(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    virt_phi: np.ndarray | None = None,
    a: float = 1.0,
    c: float = 0.0,
    lambda_vos: float = 0.0,
) -> tuple[float, float, dict[str, np.ndarray | float]]:
    """Loss components and gradients of CE + lambda * VOS on one batch.

    Returns (loss_host, loss_vos, grads); grads carries every network
    parameter plus scalars "a" and "c" (zero when the repair term is off).
    """
    cache = model.forward_cache(x)
    n = len(y)

    probs = softmax(cache.logits)
    loss_host = float(_ce_per_sample(cache.logits, y).mean())
    g_logits = probs.copy()
    g_logits[np.arange(n), y] -= 1.0
    g_logits /= n

    loss_vos = 0.0
    g_a = 0.0
    g_c = 0.0
    head_extra_w = None
    head_extra_b = None
    if lambda_vos > 0.0 and virt_phi is not None:
        e_id = -logsumexp(cache.logits, axis=1)
        z_v = model.head_only(virt_phi)
        e_v = -logsumexp(z_v, axis=1)
        res = vos_loss(e_id, e_v, a, c)
        loss_vos = res.loss
        # dE/dz = -softmax(z); ID gradients ride the full backprop below
        g_logits = g_logits + lambda_vos * res.d_id_energies[:, None] * (-probs)
        g_zv = lambda_vos * res.d_virtual_energies[:, None] * (-softmax(z_v))
        head_extra_w = g_zv.T @ virt_phi
        head_extra_b = g_zv.sum(axis=0)
        g_a = lambda_vos * res.d_a
        g_c = lambda_vos * res.d_c

    grads: dict[str, np.ndarray | float] = model.backprop(cache, g_logits)
    if head_extra_w is not None:
        grads["w3"] = grads["w3"] + head_extra_w
        grads["b3"] = grads["b3"] + head_extra_b
    grads["a"] = g_a
    grads["c"] = g_c
    return loss_host, loss_vos, grads


@dataclass
class EpochRecord:
    epoch: int
    loss_host: float
    loss_vos: float
    acc: float
    far_auroc: float
    param_hash: str = ""  # end-of-epoch parameter digest for determinism checks


def history_to_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,loss_host,loss_vos,acc,far_auroc"]
    for r in history:
        lines.append(f"{r.epoch},{r.loss_host!r},{r.loss_vos!r},{r.acc!r},{r.far_auroc!r}")
    return "\n".join(lines) + "\n"


def train(task: SyntheticTask, config) -> tuple[MlpModel, list[EpochRecord]]:
    """SGD-with-momentum training of the host, with the repair term after warmup.

    Warmup epochs run plain CE over all samples. Afterwards every epoch
    recomputes per-sample losses, reselects the trusted set, refits the
    Gaussian bank on trusted features (repair arm only), resamples virtual
    outliers, and optimizes CE-on-trusted + lambda * VOS. lambda_vos = 0
    reproduces the pure host bit-for-bit.
    """
    from oodaudit.vmr.experiment import VmrConfig  # config dataclass lives there

    if not isinstance(config, VmrConfig):
        raise TrainError("config must be a VmrConfig")
    if config.warmup_epochs >= config.epochs:
        raise TrainError("warmup_epochs must be < epochs")

    rng = np.random.default_rng(config.seed)
    model = MlpModel.init(task.input_dim, config.hidden, task.k_classes, rng)

    keep_fraction = config.trusted_keep_fraction
    if keep_fraction is None:
        keep_fraction = min(1.0, max(0.05, 1.0 - task.noise_rate))

    velocity = {n: np.zeros_like(getattr(model, n)) for n in PARAM_NAMES}
    velocity["a"] = 0.0
    velocity["c"] = 0.0
    a, c = 1.0, 0.0

    x_train = task.train_inputs
    y_train = task.train_labels_noisy
    n_train = len(y_train)

    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        vos_active = (not warm) and config.lambda_vos > 0.0

        if warm:
            active = np.arange(n_train)
            virt_phi = None
        else:
            logits_all, phi_all = model.forward(x_train)
            losses = _ce_per_sample(logits_all, y_train)
            active = select_trusted(losses, y_train, keep_fraction)
            virt_phi = None
            if vos_active:
                bank = fit_class_gaussians(
                    phi_all[active], y_train[active], config.shrinkage
                )
                virt_phi = sample_virtual_outliers(
                    bank,
                    config.keep_count,
                    config.pool_size,
                    seed=int(rng.integers(2**63)),
                )

        order = rng.permutation(len(active))
        host_losses = []
        vos_losses = []
        for start in range(0, len(active), config.batch_size):
            batch = active[order[start : start + config.batch_size]]
            if batch.size == 0:
                continue
            loss_host, loss_vos, grads = batch_loss_and_grads(
                model,
                x_train[batch],
                y_train[batch],
                virt_phi=virt_phi,
                a=a,
                c=c,
                lambda_vos=config.lambda_vos if vos_active else 0.0,
            )
            host_losses.append(loss_host)
            vos_losses.append(loss_vos)
            for name in PARAM_NAMES:
                velocity[name] = config.momentum * velocity[name] - config.step_size * grads[name]
                setattr(model, name, getattr(model, name) + velocity[name])
            if vos_active:
                velocity["a"] = config.momentum * velocity["a"] - config.step_size * grads["a"]
                velocity["c"] = config.momentum * velocity["c"] - config.step_size * grads["c"]
                a += velocity["a"]
                c += velocity["c"]

        mean_host = float(np.mean(host_losses)) if host_losses else 0.0
        mean_vos = float(np.mean(vos_losses)) if vos_losses else 0.0
        if not (np.isfinite(mean_host) and np.isfinite(mean_vos) and model.all_finite()):
            raise TrainingDiverged(f"loss diverged at epoch {epoch}")

        test_logits, _ = model.forward(task.test_inputs)
        acc = float(100.0 * np.mean(np.argmax(test_logits, axis=1) == task.test_labels))
        far_logits, _ = model.forward(task.far_inputs)
        far_auroc = _auroc_values(
            -logsumexp(test_logits, axis=1), -logsumexp(far_logits, axis=1)
        )
        digest = hashlib.sha256(model.flat_params().tobytes()).hexdigest()[:16]
        history.append(EpochRecord(epoch, mean_host, mean_vos, acc, far_auroc, digest))

    return model, history


def export_evaldump(model: MlpModel, task: SyntheticTask, meta: dict | None = None) -> dict[str, EvalDump]:
    """Freeze the model into the four pipeline dumps (fit/id_test/near/far).

    Logits are recomputed from float32-rounded features and head so the
    stored arrays satisfy the dump head-consistency contract exactly.
    """
    meta = dict(meta or {})
    meta.setdefault("noise_kind", task.noise_kind)
    meta.setdefault("noise_rate", str(task.noise_rate))
    meta.setdefault("seed", str(task.seed))

    w32 = model.w3.astype(np.float32).astype(np.float64)
    b32 = model.b3.astype(np.float32).astype(np.float64)

    def build(inputs, labels, role, name):
        _, phi = model.forward(inputs)
        phi32 = phi.astype(np.float32).astype(np.float64)
        logits = phi32 @ w32.T + b32
        return EvalDump(
            logits=logits,
            features=phi32,
            role=role,
            name=name,
            labels=labels,
            head_w=w32,
            head_b=b32,
            meta=meta,
        )

    return {
        "fit": build(task.train_inputs, task.train_labels_noisy, "fit", "toy_train"),
        "id_test": build(task.test_inputs, task.test_labels, "id_test", "toy_test"),
        "near_ood": build(task.near_inputs, None, "ood", "toy_near"),
        "far_ood": build(task.far_inputs, None, "ood", "toy_far"),
    }
