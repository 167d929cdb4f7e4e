"""Export job description."""

from __future__ import annotations

from dataclasses import dataclass, field

ROLES = ("fit", "id_test", "ood")


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class ExportSpec:
    """One checkpoint + one data source -> one dump directory.

    source is either a folder path (class subfolders supply labels) or a
    named split like "cifar10:test" rooted at ``data_root``. Labels are
    emitted iff role != ood: a labeled source exported as OOD simply drops
    its labels (cross-dataset OOD routing), while explicitly requesting
    labels with role=ood is a contradiction error. with_labels=None means
    "whatever the role implies".
    """

    checkpoint: str
    arch: str
    source: str
    role: str
    output: str
    name: str = ""
    batch_size: int = 64
    device: str = "cpu"
    image_size: int = 32
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    data_root: str = "."
    with_labels: bool | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ExportError(f"unknown role {self.role!r}")
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")
        if (self.mean is None) != (self.std is None):
            raise ExportError("mean and std must be given together")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExportSpec":
        kwargs = dict(obj)
        for key in ("mean", "std"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)
