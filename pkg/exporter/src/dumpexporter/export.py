"""Batched inference plus feature capture, into a dump directory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from dumpexporter.archs import load_model
from dumpexporter.data import open_source
from dumpexporter.spec import ExportError, ExportSpec
from dumpexporter.writer import write_dump_dir


@dataclass(frozen=True)
class ExportResult:
    path: Path
    n_samples: int
    n_classes: int
    feat_dim: int
    runtime_energy: np.ndarray  # -logsumexp(logits), computed on the inference side


def export(spec: ExportSpec) -> ExportResult:
    """Run eval-mode inference and write the dump directory.

    The penultimate features are the inputs of the final linear layer,
    captured by a forward hook; the layer's weight/bias become the dump head.
    The checkpoint is read-only and sample order follows the source order.
    """
    model, head = load_model(spec.arch, spec.checkpoint, spec.device)
    source = open_source(spec)

    want_labels = spec.with_labels if spec.with_labels is not None else spec.role != "ood"
    if want_labels and spec.role == "ood":
        raise ExportError("label/role contradiction: labels requested for an OOD dump")
    if not want_labels and spec.role != "ood":
        raise ExportError(f"label/role contradiction: role={spec.role} requires labels")
    if want_labels and not source.has_labels:
        raise ExportError(f"role={spec.role} requires a labeled source")

    captured: list[torch.Tensor] = []

    def hook(_module, inputs, _output):
        if not inputs or not isinstance(inputs[0], torch.Tensor):
            raise ExportError("feature-hook failure: head layer received no tensor input")
        captured.append(inputs[0].detach().cpu())

    handle = head.register_forward_hook(hook)
    logits_parts = []
    try:
        with torch.no_grad():
            for batch in source.batches(spec.batch_size):
                captured.clear()
                out = model(batch.to(spec.device))
                if len(captured) != 1:
                    raise ExportError(
                        f"feature-hook failure: expected one head call per batch, got {len(captured)}"
                    )
                logits_parts.append((out.detach().cpu(), captured[0]))
    finally:
        handle.remove()

    logits = torch.cat([p[0] for p in logits_parts]).to(torch.float32)
    features = torch.cat([p[1] for p in logits_parts]).to(torch.float32)
    if features.ndim != 2:
        raise ExportError("feature-hook failure: penultimate activations are not 2-D")
    runtime_energy = (-torch.logsumexp(logits, dim=1)).numpy()

    labels = np.asarray(source.labels, dtype=np.int32) if want_labels else None
    meta = dict(spec.meta)
    meta.setdefault("arch", spec.arch)
    meta.setdefault("source", spec.source)

    path = write_dump_dir(
        spec.output,
        logits=logits.numpy(),
        features=features.numpy(),
        role=spec.role,
        name=spec.name or Path(spec.source).name,
        labels=labels,
        head_w=head.weight.detach().cpu().to(torch.float32).numpy(),
        head_b=(
            head.bias.detach().cpu().to(torch.float32).numpy()
            if head.bias is not None
            else np.zeros(logits.shape[1], dtype=np.float32)
        ),
        meta=meta,
    )
    return ExportResult(
        path=path,
        n_samples=logits.shape[0],
        n_classes=logits.shape[1],
        feat_dim=features.shape[1],
        runtime_energy=runtime_energy,
    )
