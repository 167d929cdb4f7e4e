from __future__ import annotations

import numpy as np

from oodaudit.dump import EvalDump


def make_dump(
    n: int,
    k: int,
    d: int,
    role: str = "id_test",
    seed: int = 0,
    with_head: bool = False,
    name: str = "toy",
) -> EvalDump:
    """Random but self-consistent dump: logits derived from features when a head is present."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, d))
    labels = rng.integers(0, k, size=n) if role != "ood" else None
    if with_head:
        head_w = rng.normal(size=(k, d)) / np.sqrt(d)
        head_b = rng.normal(size=k) * 0.1
        # round the inputs to float32 first so stored logits satisfy the head check
        logits = (
            features.astype(np.float32).astype(np.float64)
            @ head_w.astype(np.float32).astype(np.float64).T
            + head_b.astype(np.float32).astype(np.float64)
        )
        return EvalDump(
            logits=logits,
            features=features,
            role=role,
            name=name,
            labels=labels,
            head_w=head_w,
            head_b=head_b,
        )
    logits = rng.normal(size=(n, k))
    return EvalDump(logits=logits, features=features, role=role, name=name, labels=labels)
