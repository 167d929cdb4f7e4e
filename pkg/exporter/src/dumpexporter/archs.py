"""Architecture registry: constructors, head discovery, penultimate hooks.

Every registered architecture names its final linear layer; the exporter
hooks that layer's input as the penultimate feature vector and copies its
weight/bias into the dump head. Class count is inferred from the checkpoint's
head weight shape before the model is built.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torchvision

from dumpexporter.spec import ExportError


class SmallConv(nn.Module):
    """Tiny reference CNN for smoke tests and toy exports."""

    def __init__(self, num_classes: int, feat_dim: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.neck = nn.Sequential(nn.Flatten(), nn.Linear(32 * 16, feat_dim), nn.ReLU())
        self.head = nn.Linear(feat_dim, num_classes)

    def forward(self, x):
        return self.head(self.neck(self.features(x)))


def _smallconv(num_classes: int, state_dict) -> nn.Module:
    feat_dim = state_dict["head.weight"].shape[1]
    return SmallConv(num_classes, feat_dim)


_REGISTRY = {
    # tag: (constructor(num_classes, state_dict) -> module, head attribute path)
    "smallconv": (_smallconv, "head"),
    "resnet18": (lambda k, sd: torchvision.models.resnet18(num_classes=k), "fc"),
    "resnet34": (lambda k, sd: torchvision.models.resnet34(num_classes=k), "fc"),
    "resnet50": (lambda k, sd: torchvision.models.resnet50(num_classes=k), "fc"),
}


def registered_archs() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def _get_submodule(model: nn.Module, path: str) -> nn.Module:
    mod = model
    for part in path.split("."):
        mod = getattr(mod, part)
    return mod


def load_model(arch: str, checkpoint_path: str, device: str) -> tuple[nn.Module, nn.Linear]:
    """Build the architecture around a checkpoint and return (model, head layer).

    The checkpoint may be a raw state dict or a {"state_dict": ...} wrapper.
    """
    if arch not in _REGISTRY:
        raise ExportError(f"unknown architecture tag {arch!r} (known: {registered_archs()})")
    constructor, head_path = _REGISTRY[arch]

    state = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    head_key = f"{head_path}.weight"
    if head_key not in state:
        raise ExportError(f"checkpoint lacks head weights {head_key!r}")
    num_classes = state[head_key].shape[0]

    model = constructor(num_classes, state)
    missing, unexpected = model.load_state_dict(state, strict=True), ()
    del missing, unexpected
    model.to(device)
    model.eval()

    head = _get_submodule(model, head_path)
    if not isinstance(head, nn.Linear):
        raise ExportError(f"head layer {head_path!r} is not linear; cannot extract features")
    return model, head
