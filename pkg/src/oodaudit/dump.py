"""Portable evaluation-dump container.

A dump is one frozen-checkpoint evaluation split: logits, penultimate
features, optional clean labels and classifier head. On disk it lives in a
directory holding ``manifest.json`` plus raw little-endian binaries, so any
dump producer (training code, an exporter, another language) can interoperate
with the analysis side without sharing code.

Numbers are float32 on disk and float64 in memory; arrays are normalized
through a float32 round on construction, which makes write/load round-trips
bit-exact for every valid dump.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"
ROLES = ("fit", "id_test", "ood")

HEAD_LOGIT_TOL = 1e-3  # per-entry tolerance of the warn-only head/logits check


class DumpError(Exception):
    """Base class for dump validation and I/O failures."""


class DumpValidationError(DumpError):
    """An in-memory dump violates a structural invariant."""


class DumpFormatError(DumpError):
    """An on-disk dump directory is missing, truncated, or inconsistent."""


def _f32_exact(a, name: str) -> np.ndarray:
    """Normalize an array to float64 values that are exactly float32-representable."""
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float32)).astype(np.float64)
    if arr.ndim != 2:
        raise DumpValidationError(f"{name} must be a 2-D array, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class EvalDump:
    """One evaluation split of a frozen checkpoint.

    logits: (n, K) raw classifier outputs.
    features: (n, D) penultimate activations.
    labels: (n,) clean class indices; required for fit/id_test, forbidden for ood.
    head_w/head_b: optional final linear layer, (K, D) and (K,).
    """

    logits: np.ndarray
    features: np.ndarray
    role: str
    name: str = ""
    labels: np.ndarray | None = None
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.logits = _f32_exact(self.logits, "logits")
        self.features = _f32_exact(self.features, "features")
        if self.labels is not None:
            lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
            lab.setflags(write=False)
            self.labels = lab
        if (self.head_w is None) != (self.head_b is None):
            raise DumpValidationError("head weights and bias must be given together")
        if self.head_w is not None:
            hw = np.ascontiguousarray(np.asarray(self.head_w, dtype=np.float32)).astype(np.float64)
            hb = np.ascontiguousarray(np.asarray(self.head_b, dtype=np.float32).reshape(-1)).astype(np.float64)
            hw.setflags(write=False)
            hb.setflags(write=False)
            self.head_w = hw
            self.head_b = hb
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    @property
    def n_samples(self) -> int:
        return int(self.logits.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.logits.shape[1])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def has_head(self) -> bool:
        return self.head_w is not None

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalDump):
            return NotImplemented

        def same(a, b):
            if (a is None) != (b is None):
                return False
            return a is None or (a.shape == b.shape and np.array_equal(a, b))

        return (
            self.role == other.role
            and self.name == other.name
            and self.meta == other.meta
            and same(self.logits, other.logits)
            and same(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self.head_w, other.head_w)
            and same(self.head_b, other.head_b)
        )


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    location: str
    severity: str  # "error" | "warning"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not any(v.severity == "error" for v in self.violations)

    @property
    def errors(self) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.severity == "error")

    @property
    def warnings(self) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.severity == "warning")


def _first_nonfinite(arr: np.ndarray, name: str) -> Violation | None:
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size == 0:
        return None
    idx = ",".join(str(int(i)) for i in bad[0])
    loc = f"{name}[{idx}]"
    return Violation("non_finite", f"non-finite value at {loc}", loc, "error")


def validate_dump(dump: EvalDump) -> ValidationReport:
    """Check every structural invariant; never mutates the dump.

    Returns a deterministic report; head/logits inconsistency is the only
    warning-severity entry (nonstandard final layers are legal).
    """
    out: list[Violation] = []
    n = dump.n_samples

    if dump.role not in ROLES:
        out.append(Violation("bad_role", f"unknown role {dump.role!r}", "role", "error"))
    if dump.features.shape[0] != n:
        out.append(
            Violation(
                "shape_mismatch",
                f"features rows {dump.features.shape[0]} != n_samples {n}",
                "features",
                "error",
            )
        )
    for arr, name in ((dump.logits, "logits"), (dump.features, "features")):
        v = _first_nonfinite(arr, name)
        if v is not None:
            out.append(v)

    if dump.role == "ood":
        if dump.labels is not None:
            out.append(
                Violation("labels_forbidden", "OOD dump must not carry labels", "labels", "error")
            )
    elif dump.role in ("fit", "id_test"):
        if dump.labels is None:
            out.append(
                Violation("labels_missing", f"role={dump.role} requires labels", "labels", "error")
            )
    if dump.labels is not None:
        if dump.labels.shape != (n,):
            out.append(
                Violation(
                    "shape_mismatch",
                    f"labels shape {dump.labels.shape} != ({n},)",
                    "labels",
                    "error",
                )
            )
        else:
            bad = np.flatnonzero((dump.labels < 0) | (dump.labels >= dump.n_classes))
            if bad.size:
                i = int(bad[0])
                out.append(
                    Violation(
                        "label_range",
                        f"label out of range: labels[{i}]={int(dump.labels[i])} with K={dump.n_classes}",
                        f"labels[{i}]",
                        "error",
                    )
                )

    if dump.has_head:
        k, d = dump.n_classes, dump.feat_dim
        if dump.head_w.shape != (k, d) or dump.head_b.shape != (k,):
            out.append(
                Violation(
                    "head_shape",
                    f"head shapes {dump.head_w.shape}/{dump.head_b.shape} != ({k},{d})/({k},)",
                    "head",
                    "error",
                )
            )
        else:
            for arr, name in ((dump.head_w, "head_w"), (dump.head_b, "head_b")):
                v = _first_nonfinite(arr, name)
                if v is not None:
                    out.append(v)
            if n > 0 and all(
                np.isfinite(a).all()
                for a in (dump.logits, dump.features, dump.head_w, dump.head_b)
            ):
                recon = dump.features @ dump.head_w.T + dump.head_b
                dev = np.abs(recon - dump.logits)
                worst = float(dev.max()) if dev.size else 0.0
                if worst > HEAD_LOGIT_TOL:
                    i, j = np.unravel_index(int(np.argmax(dev)), dev.shape)
                    out.append(
                        Violation(
                            "head_inconsistent",
                            f"head/logits inconsistency: max deviation {worst:.3e} at logits[{i},{j}]",
                            f"logits[{i},{j}]",
                            "warning",
                        )
                    )

    return ValidationReport(tuple(out))


# --- on-disk layout ---------------------------------------------------------

_BINARIES = {
    "labels": ("labels.bin", "<i4"),
    "logits": ("logits.bin", "<f4"),
    "features": ("features.bin", "<f4"),
    "head_w": ("head_w.bin", "<f4"),
    "head_b": ("head_b.bin", "<f4"),
}


def write_dump(dump: EvalDump, path: str | Path) -> None:
    """Write a dump directory (manifest.json + raw binaries).

    Aborts with the first validation error; warnings do not block writing.
    """
    report = validate_dump(dump)
    if not report.ok:
        first = report.errors[0]
        raise DumpValidationError(first.message)

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": dump.n_samples,
        "n_classes": dump.n_classes,
        "feat_dim": dump.feat_dim,
        "role": dump.role,
        "name": dump.name,
        "has_labels": dump.labels is not None,
        "has_head": dump.has_head,
        "meta": dump.meta,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (path / "logits.bin").write_bytes(dump.logits.astype("<f4").tobytes())
    (path / "features.bin").write_bytes(dump.features.astype("<f4").tobytes())
    if dump.labels is not None:
        (path / "labels.bin").write_bytes(dump.labels.astype("<i4").tobytes())
    if dump.has_head:
        (path / "head_w.bin").write_bytes(dump.head_w.astype("<f4").tobytes())
        (path / "head_b.bin").write_bytes(dump.head_b.astype("<f4").tobytes())


def _read_binary(path: Path, name: str, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    fname, _ = _BINARIES[name]
    fpath = path / fname
    if not fpath.is_file():
        raise DumpFormatError(f"missing file: {fpath}")
    raw = fpath.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DumpFormatError(f"{name} length mismatch: expected {expected}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_dump(path: str | Path) -> EvalDump:
    """Load and validate a dump directory written by :func:`write_dump`.

    Byte lengths of every binary are checked against the manifest dimensions
    before any array is interpreted.
    """
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DumpFormatError(f"missing file: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DumpFormatError(f"unknown format version: {version!r}")
    required = ("n_samples", "n_classes", "feat_dim", "role", "name", "has_labels", "has_head")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DumpFormatError(f"manifest missing keys: {missing}")

    n = int(manifest["n_samples"])
    k = int(manifest["n_classes"])
    d = int(manifest["feat_dim"])
    role = manifest["role"]

    if role == "ood" and ((path / "labels.bin").exists() or manifest["has_labels"]):
        raise DumpFormatError("OOD dump must not carry labels")

    logits = _read_binary(path, "logits", "<f4", (n, k))
    features = _read_binary(path, "features", "<f4", (n, d))
    labels = _read_binary(path, "labels", "<i4", (n,)) if manifest["has_labels"] else None
    head_w = head_b = None
    if manifest["has_head"]:
        head_w = _read_binary(path, "head_w", "<f4", (k, d))
        head_b = _read_binary(path, "head_b", "<f4", (k,))

    dump = EvalDump(
        logits=logits,
        features=features,
        role=role,
        name=str(manifest["name"]),
        labels=labels,
        head_w=head_w,
        head_b=head_b,
        meta=dict(manifest.get("meta", {})),
    )
    report = validate_dump(dump)
    if not report.ok:
        raise DumpValidationError(report.errors[0].message)
    return dump
