"""Inference-only bridge from torch classifier checkpoints to evaluation dumps.

Loads a checkpoint for a registered architecture, runs eval-mode batched
inference over an image folder or a named dataset split, captures penultimate
features through a forward hook on the final linear layer, and writes the
portable dump directory format (manifest.json plus little-endian binaries).
No gradient steps, no threshold fitting, no OOD data enters any fit.
"""

from dumpexporter.export import ExportResult, export
from dumpexporter.spec import ExportSpec

__all__ = ["ExportResult", "ExportSpec", "export"]

__version__ = "0.1.0"
