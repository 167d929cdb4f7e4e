"""Open-world reliability auditing for frozen classifier checkpoints.

The package works on portable evaluation dumps (labels, logits, penultimate
features) and provides post-hoc OOD scoring, rank-based detection metrics,
uncertainty-collapse taxonomy, representation-geometry probes, and a
desk-scale virtual-margin-regularization training lab.
"""

from oodaudit.dump import EvalDump, ValidationReport, load_dump, validate_dump, write_dump
from oodaudit.scores import ScoreVector, energy, msp, orient_ood_larger

__all__ = [
    "EvalDump",
    "ValidationReport",
    "ScoreVector",
    "energy",
    "load_dump",
    "msp",
    "orient_ood_larger",
    "validate_dump",
    "write_dump",
]

__version__ = "0.1.0"
