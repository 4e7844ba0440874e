"""
Group stratification, group atlases and population importance maps.

Every member of a group is registered (affine, then deformable) to one target
subject of the group. The same transform pair warps the member's image and
its Grad-CAM map; the voxel-wise means are the anatomical atlas and the
importance atlas. Sub-atlases (age bands, gap bands) reuse the transforms
persisted for the enclosing sex x BMI group.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Dict,
    Iterable,
    List,
    Literal,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import AgeAtlasError, MissingArtifactError, RegistrationError
from .manifest import BMI_GROUPS, SEXES, Manifest, SubjectRecord
from .registration import (
    AffineTransform,
    DisplacementField,
    RegConfig,
    register_pair,
    warp,
    write_trace,
)
from .volume import (
    PLANE_AXES,
    Volume3,
    overlay_image,
    overlay_slice,
    read_vol,
    write_panel_grid,
    write_vol,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

AGE_BANDS = ("lt60", "60to70", "ge70")
GAP_BANDS = ("aligned", "accelerated", "decelerated")
SCHEMES = ("cell", "age", "gap", "cell+age", "cell+gap")

TargetRule = Literal["median_age", "mean_age", "lowest_id"]
TARGET_RULES = ("median_age", "mean_age", "lowest_id")


class GroupKey(NamedTuple):
    """Group label; unset parts are not stratified on."""

    sex: Optional[str] = None
    bmi_group: Optional[str] = None
    age_band: Optional[str] = None
    gap_band: Optional[str] = None

    @property
    def label(self) -> str:
        parts = [p for p in (self.sex, self.bmi_group, self.age_band, self.gap_band) if p]
        return "_".join(parts) if parts else "all"

    @property
    def cell(self) -> "GroupKey":
        return GroupKey(self.sex, self.bmi_group)

    def to_dict(self) -> Dict[str, Optional[str]]:
        return self._asdict()


class AtlasConfig(BaseModel):
    """Atlas construction and report layout."""

    model_config = ConfigDict(extra="forbid")

    target_rule: TargetRule = Field("median_age", description="Registration target per group")
    age_bounds: Tuple[int, int] = (60, 70)
    min_success_fraction: float = Field(0.8, gt=0, le=1)
    slices: Dict[str, List[int]] = Field(
        default_factory=lambda: {
            "axial": [29, 40, 48],
            "coronal": [10, 16, 18],
            "sagittal": [12, 16, 19],
        },
        description="Slice indices per plane for the overlay report",
    )
    alpha: float = Field(0.5, ge=0, le=1)
    top_k: int = Field(3, ge=1, description="Gap examples per band")
    example_group: str = "F_healthy"

    @field_validator("slices")
    @classmethod
    def _planes(cls, v):
        unknown = set(v) - set(PLANE_AXES)
        if unknown:
            raise ValueError(f"unknown planes {sorted(unknown)}; use {sorted(PLANE_AXES)}")
        return v

    @field_validator("age_bounds")
    @classmethod
    def _bounds(cls, v):
        if v[0] >= v[1]:
            raise ValueError("age_bounds must be increasing")
        return v


def age_band(age: float, bounds: Tuple[int, int] = (60, 70)) -> str:
    if age < bounds[0]:
        return AGE_BANDS[0]
    if age < bounds[1]:
        return AGE_BANDS[1]
    return AGE_BANDS[2]


def gap_band(delta: float, aligned: float = 0.5, accelerated: float = 4.0) -> Optional[str]:
    """aligned when |delta| < aligned, accelerated/decelerated beyond +/-accelerated, else None."""
    if abs(delta) < aligned:
        return "aligned"
    if delta > accelerated:
        return "accelerated"
    if delta < -accelerated:
        return "decelerated"
    return None


def age_gap(record: SubjectRecord) -> float:
    if record.corrected_age is None:
        raise MissingArtifactError(
            "atlas", f"corrected_age of subject {record.id}", "run the predict and bias stages"
        )
    return record.corrected_age - record.age


def stratify(
    records: Iterable[SubjectRecord],
    scheme: str = "cell",
    age_bounds: Tuple[int, int] = (60, 70),
    aligned: float = 0.5,
    accelerated: float = 4.0,
) -> Dict[GroupKey, List[SubjectRecord]]:
    """
    Partition records into groups; members are sorted by id.

    Args:
        scheme: ``cell`` (sex x BMI), ``age``, ``gap``, or ``cell+age`` / ``cell+gap``.

    Raises:
        MissingArtifactError: For gap schemes when a record has no corrected age.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}'; use one of {SCHEMES}")
    with_cell = scheme.startswith("cell")
    groups: Dict[GroupKey, List[SubjectRecord]] = {}
    for record in sorted(records, key=lambda r: r.id):
        sex, bmi = (record.sex, record.bmi_group) if with_cell else (None, None)
        band_age = band_gap = None
        if scheme.endswith("age"):
            band_age = age_band(record.age, age_bounds)
        elif scheme.endswith("gap"):
            band_gap = gap_band(age_gap(record), aligned, accelerated)
            if band_gap is None:
                continue
        groups.setdefault(GroupKey(sex, bmi, band_age, band_gap), []).append(record)
    return dict(sorted(groups.items(), key=lambda item: _key_order(item[0])))


def _key_order(key: GroupKey) -> Tuple[int, ...]:
    def rank(value, domain):
        return domain.index(value) if value in domain else -1

    return (
        rank(key.bmi_group, BMI_GROUPS),
        rank(key.sex, SEXES),
        rank(key.age_band, AGE_BANDS),
        rank(key.gap_band, GAP_BANDS),
    )


def select_target(records: Sequence[SubjectRecord], rule: TargetRule = "median_age") -> int:
    """
    Id of the registration target of a group.

    ``median_age`` and ``mean_age`` pick the member whose age is closest to the
    group median or mean; ``lowest_id`` picks the first member. Ties go to the
    lowest id.
    """
    if not records:
        raise ValueError("cannot select a target from an empty group")
    if rule == "lowest_id":
        return min(r.id for r in records)
    if rule == "median_age":
        center = float(np.median([r.age for r in records]))
    elif rule == "mean_age":
        center = float(np.mean([r.age for r in records]))
    else:
        raise ValueError(f"unknown target rule '{rule}'; use one of {TARGET_RULES}")
    return min(records, key=lambda r: (abs(r.age - center), r.id)).id


@dataclass
class ImportanceAtlas:
    mean_image: Volume3
    mean_cam: Volume3
    n_contributors: int
    key: GroupKey
    target_id: int
    contributor_ids: List[int] = field(default_factory=list)
    failures: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_contributors < 1:
            raise ValueError("an atlas needs at least one contributor")
        if self.mean_image.dims != self.mean_cam.dims:
            raise ValueError("mean_image and mean_cam must share dims")

    def save(self, out_dir: PathLike) -> Path:
        """Write ``mean_image.vol``, ``mean_cam.vol`` and ``group.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_vol(self.mean_image, out_dir / "mean_image.vol")
        write_vol(self.mean_cam, out_dir / "mean_cam.vol")
        info = {
            "key": self.key.to_dict(),
            "label": self.key.label,
            "target_id": self.target_id,
            "n_contributors": self.n_contributors,
            "contributor_ids": self.contributor_ids,
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
        }
        (out_dir / "group.json").write_text(json.dumps(info, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def load(cls, out_dir: PathLike) -> "ImportanceAtlas":
        out_dir = Path(out_dir)
        info = json.loads((out_dir / "group.json").read_text(encoding="utf-8"))
        return cls(
            mean_image=read_vol(out_dir / "mean_image.vol"),
            mean_cam=read_vol(out_dir / "mean_cam.vol"),
            n_contributors=info["n_contributors"],
            key=GroupKey(**info["key"]),
            target_id=info["target_id"],
            contributor_ids=info["contributor_ids"],
            failures={int(k): v for k, v in info["failures"].items()},
        )


def _require(manifest: Manifest, record: SubjectRecord, attr: str, hint: str) -> Path:
    value = getattr(record, attr)
    if value is None:
        raise MissingArtifactError("atlas", f"{attr} of subject {record.id}", hint)
    path = manifest.resolve(value)
    if not path.exists():
        raise MissingArtifactError("atlas", str(path), hint)
    return path


def _relative(manifest: Manifest, path: Path) -> str:
    return Path(os.path.relpath(path, manifest.base_dir)).as_posix()


def register_group(
    manifest: Manifest,
    records: Sequence[SubjectRecord],
    config: Optional[RegConfig] = None,
    transforms_dir: PathLike = "transforms",
    jobs: int = 1,
    target_rule: TargetRule = "median_age",
) -> Tuple[List[SubjectRecord], Dict[int, str]]:
    """
    Register every member to the group target and persist the transforms.

    The target is chosen by ``select_target`` with ``target_rule``.

    Returns:
        Records updated with ``registration_target``, ``affine_path`` and
        ``field_path`` (the target gets the identity), and failures by id.
    """
    config = config or RegConfig()
    records = sorted(records, key=lambda r: r.id)
    for r in records:
        _require(manifest, r, "cam_path", "run the cam stage")
    target_id = select_target(records, target_rule)
    target = next(r for r in records if r.id == target_id)
    target_image = read_vol(_require(manifest, target, "image_path", "run the phantom stage"))
    transforms_dir = Path(transforms_dir)
    transforms_dir.mkdir(parents=True, exist_ok=True)
    failures: Dict[int, str] = {}

    def run(record: SubjectRecord) -> SubjectRecord:
        affine_file = transforms_dir / f"subject_{record.id:05d}_affine.json"
        field_file = transforms_dir / f"subject_{record.id:05d}.dfield"
        try:
            if record.id == target_id:
                affine = AffineTransform.identity()
                dfield = DisplacementField.zeros(target_image.dims)
            else:
                moving = read_vol(_require(manifest, record, "image_path", "run the phantom stage"))
                result = register_pair(target_image, moving, config)
                affine, dfield = result.affine, result.field
                if config.trace:
                    write_trace(result.trace, transforms_dir / f"subject_{record.id:05d}_trace.csv")
            affine.save(affine_file)
            dfield.save(field_file)
        except (AgeAtlasError, ValueError, OSError, ArithmeticError) as e:
            logger.error("Registration of subject %d to %d failed: %s", record.id, target_id, e)
            failures[record.id] = str(e)
            return record.updated(registration_target=target_id, affine_path=None, field_path=None)
        return record.updated(
            registration_target=target_id,
            affine_path=_relative(manifest, affine_file),
            field_path=_relative(manifest, field_file),
        )

    logger.info("Registering %d subjects to target %d", len(records), target_id)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        updated = list(pool.map(run, records))
    return updated, failures


def aggregate(
    manifest: Manifest,
    records: Sequence[SubjectRecord],
    key: GroupKey,
    target_id: int,
    failures: Optional[Mapping[int, str]] = None,
    min_success_fraction: float = 0.8,
    jobs: int = 1,
) -> ImportanceAtlas:
    """
    Voxel-wise means of the members' warped images and CAMs in the target's space.

    Members are summed in id order. Members without persisted transforms count
    as failures.

    Raises:
        RegistrationError: If fewer than ``min_success_fraction`` of the members
            can be warped.
    """
    records = sorted(records, key=lambda r: r.id)
    if not records:
        raise ValueError(f"group {key.label} is empty")
    failures = dict(failures or {})
    usable = []
    for r in records:
        if r.id in failures:
            continue
        if r.registration_target != target_id or r.affine_path is None or r.field_path is None:
            failures.setdefault(r.id, f"no transform to target {target_id}")
            continue
        usable.append(r)

    if len(usable) < min_success_fraction * len(records) or not usable:
        raise RegistrationError(
            f"too few registrations succeeded for group {key.label}",
            succeeded=len(usable),
            total=len(records),
        )

    def load_warped(record: SubjectRecord) -> Tuple[np.ndarray, np.ndarray]:
        image = read_vol(_require(manifest, record, "image_path", "run the phantom stage"))
        cam = read_vol(_require(manifest, record, "cam_path", "run the cam stage"))
        if record.id == target_id:
            return image.data.astype(np.float64), cam.data.astype(np.float64)
        affine = AffineTransform.load(manifest.resolve(record.affine_path))
        dfield = DisplacementField.load(manifest.resolve(record.field_path))
        return (
            warp(image, affine, dfield).data.astype(np.float64),
            warp(cam, affine, dfield).data.astype(np.float64),
        )

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        warped = list(pool.map(load_warped, usable))
    image_sum = np.zeros_like(warped[0][0])
    cam_sum = np.zeros_like(warped[0][1])
    for image, cam in warped:
        image_sum += image
        cam_sum += cam
    n = len(warped)
    spacing = read_vol(manifest.resolve(usable[0].image_path)).spacing
    return ImportanceAtlas(
        mean_image=Volume3(image_sum / n, spacing),
        mean_cam=Volume3(np.clip(cam_sum / n, 0.0, None), spacing),
        n_contributors=n,
        key=key,
        target_id=target_id,
        contributor_ids=[r.id for r in usable],
        failures=failures,
    )


def build_group(
    manifest: Manifest,
    records: Sequence[SubjectRecord],
    key: GroupKey,
    config: Optional[RegConfig] = None,
    out_dir: Optional[PathLike] = None,
    transforms_dir: Optional[PathLike] = None,
    min_success_fraction: float = 0.8,
    jobs: int = 1,
    target_rule: TargetRule = "median_age",
) -> Tuple[ImportanceAtlas, List[SubjectRecord]]:
    """
    Register a group to its target and average images and CAMs.

    The target contributes with the identity transform, so ``n_contributors``
    equals the group size when every registration succeeds.

    Returns:
        The atlas (also saved to ``out_dir`` when given) and the member records
        carrying their transform paths.
    """
    if transforms_dir is None:
        transforms_dir = Path(out_dir or ".") / "transforms"
    updated, failures = register_group(
        manifest, records, config, transforms_dir, jobs, target_rule
    )
    target_id = updated[0].registration_target
    atlas = aggregate(manifest, updated, key, target_id, failures, min_success_fraction, jobs)
    logger.info(
        "Atlas %s: %d contributors, target %d, %d failures",
        key.label, atlas.n_contributors, target_id, len(atlas.failures),
    )
    if out_dir is not None:
        atlas.save(out_dir)
    return atlas, updated


def render_atlas_report(
    atlas: ImportanceAtlas,
    slices: Mapping[str, Sequence[int]],
    out_dir: PathLike,
    alpha: float = 0.5,
) -> List[Path]:
    """
    CAM-over-atlas overlays: one PPM per configured plane and slice index, then
    a grid sheet ``<label>_grid.ppm`` with one row per plane.

    Returns:
        The panel paths in plane order, followed by the grid sheet.

    Raises:
        IndexError: If a slice index is outside the atlas.
    """
    out_dir = Path(out_dir)
    panels, rows = [], []
    for plane, indices in slices.items():
        axis = PLANE_AXES[plane]
        row = []
        for index in indices:
            path = out_dir / f"{atlas.key.label}_{plane}_{index:03d}.ppm"
            panels.append(overlay_slice(atlas.mean_image, atlas.mean_cam, axis, index, path, alpha))
            row.append(overlay_image(atlas.mean_image, atlas.mean_cam, axis, index, alpha))
        if row:
            rows.append(row)
    if rows:
        panels.append(write_panel_grid(rows, out_dir / f"{atlas.key.label}_grid.ppm"))
    return panels
