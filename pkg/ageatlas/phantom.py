"""
Synthetic whole-body phantoms whose anatomy encodes age, sex and BMI group.

Geometry is laid out on a 32x64x24 reference grid (x left-right, y feet to
neck, z front to back) and scaled to the configured dims. Three regions carry
the age signal: the spine disks darken, the heart grows and the back muscles
darken with age.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage

from .manifest import AGE_MAX, AGE_MIN, BMI_GROUPS, SEXES, Manifest, SubjectRecord
from .volume import Volume3, write_vol

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REFERENCE_DIMS = (32, 64, 24)
FULL_COHORT = (1536, 384, 1200)
DESK_COHORT = (240, 60, 120)

TORSO_CENTER = (16.0, 40.0, 12.0)
TORSO_SEMI_AXES = {"healthy": 10, "overweight": 12, "obese": 14}
FAT_SHELL = {"healthy": 1, "overweight": 2, "obese": 3}
HEART_CENTER = (13.0, 48.0, 10.0)
SPINE_XZ = (16.0, 16.0)
SPINE_DISK_Y = tuple(26 + 3 * k for k in range(9))


class PhantomParams(BaseModel):
    """Generator settings; the aging-law coefficients are fields so they can be inspected."""

    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int] = REFERENCE_DIMS
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = Field(0.02, ge=0)
    tissue_intensity: float = 0.5
    fat_intensity: float = 0.9
    spine_intercept: float = 0.95
    spine_slope: float = 0.006
    muscle_intercept: float = 0.85
    muscle_slope: float = 0.004
    heart_radius_intercept: float = 3.0
    heart_radius_slope: float = 0.04
    heart_intensity: float = 0.8
    translation_jitter: int = Field(2, ge=0)
    axis_jitter: int = Field(1, ge=0)
    gain_range: Tuple[float, float] = (0.95, 1.05)
    nuisance: bool = True
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, value):
        if min(value) < 1:
            raise ValueError(f"dims must be positive, got {value}")
        return value

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, value):
        if min(value) <= 0:
            raise ValueError(f"spacing must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _gain_range(self):
        lo, hi = self.gain_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"gain_range must be positive and ordered, got {self.gain_range}")
        return self


@dataclass(frozen=True)
class GroundTruth:
    """Binary masks aligned with one subject's image."""

    aging_mask: Volume3
    body_mask: Volume3
    spine_mask: Volume3
    heart_mask: Volume3
    muscle_mask: Volume3

    def __post_init__(self):
        aging = self.aging_mask.data > 0.5
        body = self.body_mask.data > 0.5
        if np.any(aging & ~body):
            raise ValueError("aging_mask must lie inside body_mask")

    @property
    def aging_fraction(self) -> float:
        return float((self.aging_mask.data > 0.5).sum() / max((self.body_mask.data > 0.5).sum(), 1))


def aging_laws(params: PhantomParams, age: float) -> Dict[str, float]:
    """Pre-noise intensities and heart radius at ``age``."""
    years = age - AGE_MIN
    return {
        "spine_intensity": params.spine_intercept - params.spine_slope * years,
        "muscle_intensity": params.muscle_intercept - params.muscle_slope * years,
        "heart_radius": params.heart_radius_intercept + params.heart_radius_slope * years,
    }


def _check_covariates(age: int, sex: str, bmi_group: str) -> None:
    if not AGE_MIN <= age <= AGE_MAX:
        raise ValueError(f"age must be in [{AGE_MIN}, {AGE_MAX}], got {age}")
    if sex not in SEXES:
        raise ValueError(f"sex must be one of {SEXES}, got {sex!r}")
    if bmi_group not in BMI_GROUPS:
        raise ValueError(f"bmi_group must be one of {BMI_GROUPS}, got {bmi_group!r}")


def _reference_coordinates(dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.arange(n) * (ref / n) for n, ref in zip(dims, REFERENCE_DIMS)]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def _translate(arr: np.ndarray, shift: Sequence[int]) -> np.ndarray:
    if not any(shift):
        return arr
    return ndimage.shift(arr, shift, order=0, mode="constant", cval=0.0)


def _anatomy(
    params: PhantomParams,
    sex: str,
    bmi_group: str,
    axis_delta: Tuple[int, int],
) -> Dict[str, np.ndarray]:
    """Boolean region masks on the subject grid before jitter."""
    X, Y, Z = _reference_coordinates(params.dims)
    cx, cy, cz = TORSO_CENTER
    semi_x = np.full(X.shape, float(TORSO_SEMI_AXES[bmi_group] + axis_delta[0]))
    if sex == "M":
        semi_x[Y >= 46] += 2.0
    semi_z = 8.0 + axis_delta[1]
    torso = ((X - cx) / semi_x) ** 2 + ((Y - cy) / 18.0) ** 2 + ((Z - cz) / semi_z) ** 2 <= 1.0

    inner = ndimage.binary_erosion(torso, iterations=FAT_SHELL[bmi_group])
    fat = torso & ~inner

    legs = np.zeros_like(torso)
    for leg_x in (cx - 5.0, cx + 5.0):
        legs |= ((X - leg_x) ** 2 + (Z - cz) ** 2 <= 9.0) & (Y <= cy)
    neck = ((X - cx) ** 2 + (Z - cz) ** 2 <= 4.0) & (Y >= cy)
    body = torso | legs | neck

    sx, sz = SPINE_XZ
    disk_section = (X - sx) ** 2 + (Z - sz) ** 2 <= 4.0
    spine = np.zeros_like(torso)
    for y0 in SPINE_DISK_Y:
        spine |= disk_section & (Y >= y0 - 0.5) & (Y < y0 + 1.5)

    side = np.abs(X - sx)
    muscle = (side >= 2.5) & (side < 4.5) & (Y >= 35.5) & (Y < 45.5) & (Z >= 17.5) & (Z < 19.5)

    hx, hy, hz = HEART_CENTER
    heart_d2 = (X - hx) ** 2 + (Y - hy) ** 2 + (Z - hz) ** 2
    return {
        "torso": torso,
        "fat": fat,
        "body": body,
        "spine": spine & body,
        "muscle": muscle & body,
        "heart_d2": heart_d2,
    }


def generate_subject(
    params: PhantomParams,
    subject_id: int,
    age: int,
    sex: str,
    bmi_group: str,
) -> Tuple[Volume3, GroundTruth]:
    """
    Build one phantom and its ground-truth masks.

    Deterministic in ``(params.seed, subject_id)``: every random draw comes
    from a generator keyed on that pair, in a fixed order.

    Raises:
        ValueError: If a covariate is outside its domain.
    """
    _check_covariates(age, sex, bmi_group)
    rng = np.random.default_rng([params.seed, subject_id])
    if params.nuisance:
        gain = rng.uniform(*params.gain_range)
        tj, aj = params.translation_jitter, params.axis_jitter
        shift = tuple(int(s) for s in rng.integers(-tj, tj + 1, size=3))
        axis_delta = tuple(int(d) for d in rng.integers(-aj, aj + 1, size=2))
    else:
        gain, shift, axis_delta = 1.0, (0, 0, 0), (0, 0)

    regions = _anatomy(params, sex, bmi_group, axis_delta)
    laws = aging_laws(params, age)
    body = regions["body"]
    heart = (regions["heart_d2"] <= laws["heart_radius"] ** 2) & body
    heart_max = (regions["heart_d2"] <= aging_laws(params, AGE_MAX)["heart_radius"] ** 2) & body

    image = np.zeros(params.dims, dtype=np.float64)
    image[body] = params.tissue_intensity
    image[regions["fat"]] = params.fat_intensity
    image[regions["muscle"]] = laws["muscle_intensity"]
    image[regions["spine"]] = laws["spine_intensity"]
    image[heart] = params.heart_intensity
    image = _translate(image * gain, shift)

    if params.nuisance and params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.2)

    def mask(region: np.ndarray) -> Volume3:
        return Volume3(_translate(region.astype(np.float64), shift), params.spacing)

    aging = regions["spine"] | regions["muscle"] | heart_max
    truth = GroundTruth(
        aging_mask=mask(aging),
        body_mask=mask(body),
        spine_mask=mask(regions["spine"]),
        heart_mask=mask(heart_max),
        muscle_mask=mask(regions["muscle"]),
    )
    return Volume3(image, params.spacing), truth


def canonical_ground_truth(params: PhantomParams, sex: str, bmi_group: str) -> GroundTruth:
    """Masks of a (sex, BMI) configuration without any nuisance."""
    quiet = params.model_copy(update={"nuisance": False})
    return generate_subject(quiet, 0, AGE_MAX, sex, bmi_group)[1]


def subject_ground_truth(params: PhantomParams, record: SubjectRecord) -> GroundTruth:
    """Masks aligned with the stored image of ``record`` (regenerated, not read)."""
    return generate_subject(params, record.id, record.age, record.sex, record.bmi_group)[1]


def stratified_ages(n: int) -> List[int]:
    """``n`` integer ages spread uniformly over [46, 81] by stratification."""
    span = AGE_MAX - AGE_MIN + 1
    return [AGE_MIN + int((k + 0.5) * span / n) for k in range(n)]


def plan_cohort(n_train: int, n_val: int, n_test: int) -> List[SubjectRecord]:
    """Balanced subject records without any files written."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    cells = [(sex, bmi) for bmi in BMI_GROUPS for sex in SEXES]
    for split, n in counts.items():
        if n < 0 or n % len(cells):
            raise ValueError(
                f"{split} count must be a non-negative multiple of {len(cells)}, got {n}"
            )

    records = []
    next_id = 0
    for split, n in counts.items():
        ages = stratified_ages(n // len(cells)) if n else []
        for sex, bmi in cells:
            for age in ages:
                records.append(
                    SubjectRecord(
                        id=next_id,
                        age=age,
                        sex=sex,
                        bmi_group=bmi,
                        split=split,
                        image_path=f"images/subject_{next_id:05d}.vol",
                    )
                )
                next_id += 1
    return records


def ground_truth_paths(sex: str, bmi_group: str) -> Dict[str, str]:
    stem = f"gt/{sex}_{bmi_group}"
    return {"aging": f"{stem}_aging.vol", "body": f"{stem}_body.vol"}


def generate_cohort(
    params: PhantomParams,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir: PathLike,
    jobs: int = 1,
) -> Manifest:
    """
    Write a balanced phantom cohort and its ``manifest.jsonl``.

    Each split has equal counts per sex x BMI cell with stratified ages.
    Output bytes do not depend on ``jobs``.

    Raises:
        ValueError: If a count is not divisible by 6.
    """
    out_dir = Path(out_dir)
    records = plan_cohort(n_train, n_val, n_test)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(record: SubjectRecord) -> None:
        image, _ = generate_subject(params, record.id, record.age, record.sex, record.bmi_group)
        write_vol(image, out_dir / record.image_path)

    logger.info("Generating %d phantoms in %s (jobs=%d)", len(records), out_dir, jobs)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(build, records))

    for sex in SEXES:
        for bmi in BMI_GROUPS:
            truth = canonical_ground_truth(params, sex, bmi)
            paths = ground_truth_paths(sex, bmi)
            write_vol(truth.aging_mask, out_dir / paths["aging"])
            write_vol(truth.body_mask, out_dir / paths["body"])

    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
