"""
Subject records and the JSON-lines cohort manifest.

Paths inside a manifest are relative to the manifest's own directory, so a
cohort directory can be moved as a whole.
"""

import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

PathLike = Union[str, Path]

AGE_MIN = 46
AGE_MAX = 81
SEXES = ("F", "M")
BMI_GROUPS = ("healthy", "overweight", "obese")
SPLITS = ("train", "val", "test")

Sex = Literal["F", "M"]
BmiGroup = Literal["healthy", "overweight", "obese"]
Split = Literal["train", "val", "test"]

_PATH_FIELDS = ("image_path", "cam_path", "field_path", "affine_path", "projection_path")


class SubjectRecord(BaseModel):
    """One subject of the cohort and the artifacts produced for it."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int = Field(..., ge=0)
    age: int = Field(..., ge=AGE_MIN, le=AGE_MAX, description="Chronological age in years")
    sex: Sex
    bmi_group: BmiGroup
    split: Split
    image_path: str
    cam_path: Optional[str] = None
    field_path: Optional[str] = None
    affine_path: Optional[str] = None
    projection_path: Optional[str] = None
    registration_target: Optional[int] = Field(None, description="Id of the group target subject")
    predicted_age: Optional[float] = Field(None, description="Raw network prediction")
    corrected_age: Optional[float] = Field(None, description="Bias-corrected prediction")
    predicted_age_25d: Optional[float] = None
    corrected_age_25d: Optional[float] = None
    cam_provenance: Optional[Dict[str, Any]] = None

    @property
    def cell(self) -> Tuple[str, str]:
        """The (sex, BMI group) cell of the subject."""
        return (self.sex, self.bmi_group)

    def updated(self, **changes) -> "SubjectRecord":
        return self.model_copy(update=changes)


class Manifest:
    """
    Ordered, immutable collection of :class:`SubjectRecord` with a base directory.

    Args:
        records: Subject records; ids must be unique.
        base_dir: Directory relative artifact paths are resolved against.
    """

    def __init__(self, records: Sequence[SubjectRecord], base_dir: PathLike = "."):
        self.records: Tuple[SubjectRecord, ...] = tuple(records)
        self.base_dir = Path(base_dir)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject ids in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SubjectRecord:
        return self.records[index]

    def resolve(self, relative: str) -> Path:
        """Absolute location of a path stored in a record."""
        return self.base_dir / relative

    def by_id(self) -> Dict[int, SubjectRecord]:
        return {r.id: r for r in self.records}

    def filter(self, predicate: Callable[[SubjectRecord], bool]) -> "Manifest":
        return Manifest([r for r in self.records if predicate(r)], self.base_dir)

    def with_records(self, records: Sequence[SubjectRecord]) -> "Manifest":
        return Manifest(records, self.base_dir)

    def merge(self, updates: Sequence[SubjectRecord]) -> "Manifest":
        """Replace records by id with ``updates``, keeping order."""
        replacement = {r.id: r for r in updates}
        return Manifest([replacement.get(r.id, r) for r in self.records], self.base_dir)

    def relocate(self, record: SubjectRecord, new_dir: Path) -> SubjectRecord:
        changes = {}
        for name in _PATH_FIELDS:
            value = getattr(record, name)
            if value is not None:
                moved = os.path.relpath(self.base_dir / value, new_dir)
                changes[name] = Path(moved).as_posix()
        return record.updated(**changes) if changes else record

    def save(self, path: PathLike) -> Path:
        """Write JSON lines; paths are rewritten relative to the new location."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new_dir = path.parent
        same_dir = os.path.abspath(new_dir) == os.path.abspath(self.base_dir)
        lines: List[str] = []
        for record in self.records:
            if not same_dir:
                record = self.relocate(record, new_dir)
            lines.append(record.model_dump_json(exclude_none=True))
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "Manifest":
        path = Path(path)
        records = [
            SubjectRecord.model_validate_json(line)
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        return cls(records, path.parent)


def split_filter(manifest: Manifest, predicate: Callable[[SubjectRecord], bool]) -> Manifest:
    """Stable-order subset of ``manifest``; the source is left untouched."""
    return manifest.filter(predicate)
