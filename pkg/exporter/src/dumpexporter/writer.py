"""Dump-directory writer implementing the portable wire format.

manifest.json (UTF-8, sorted keys) plus raw little-endian binaries:
labels.bin int32, logits.bin/features.bin/head_w.bin/head_b.bin float32,
row-major. Wall-clock metadata goes to a separate export_meta.json so two
exports of the same spec are bit-identical everywhere else.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"


def write_dump_dir(
    path: str | Path,
    *,
    logits: np.ndarray,
    features: np.ndarray,
    role: str,
    name: str,
    labels: np.ndarray | None = None,
    head_w: np.ndarray | None = None,
    head_b: np.ndarray | None = None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    logits = np.ascontiguousarray(logits, dtype="<f4")
    features = np.ascontiguousarray(features, dtype="<f4")
    n, k = logits.shape

    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": int(n),
        "n_classes": int(k),
        "feat_dim": int(features.shape[1]),
        "role": role,
        "name": name,
        "has_labels": labels is not None,
        "has_head": head_w is not None,
        "meta": {str(a): str(b) for a, b in (meta or {}).items()},
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (path / "logits.bin").write_bytes(logits.tobytes())
    (path / "features.bin").write_bytes(features.tobytes())
    if labels is not None:
        (path / "labels.bin").write_bytes(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    if head_w is not None:
        (path / "head_w.bin").write_bytes(np.ascontiguousarray(head_w, dtype="<f4").tobytes())
        (path / "head_b.bin").write_bytes(np.ascontiguousarray(head_b, dtype="<f4").tobytes())
    (path / "export_meta.json").write_text(
        json.dumps({"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}) + "\n", encoding="utf-8"
    )
    return path
