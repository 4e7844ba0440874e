"""
Bias correction, Table-1 style metrics, age-gap bands and localization scores.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sklearn.linear_model import LinearRegression

from .atlas import age_gap, gap_band
from .errors import DegenerateInputError, MissingArtifactError, ShapeError
from .manifest import BMI_GROUPS, SEXES, SubjectRecord
from .phantom import GroundTruth
from .volume import Volume3

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
BiasVariant = Literal["inverse", "residual"]

TABLE_CELLS: List[Tuple[str, str]] = [(bmi, sex) for bmi in BMI_GROUPS for sex in SEXES]
SCORE_FLOOR = 1e-9


class AnalysisConfig(BaseModel):
    """Gap thresholds and the bias-correction form."""

    model_config = ConfigDict(extra="forbid")

    aligned: float = Field(0.5, gt=0, description="|gap| below this is aligned")
    accelerated: float = Field(
        4.0, gt=0, description="gap beyond +/- this is accelerated/decelerated"
    )
    bias_variant: BiasVariant = "inverse"


@dataclass(frozen=True)
class BiasModel:
    """
    Linear fit ``pred = slope * age + intercept`` on validation subjects.

    ``inverse`` corrects with ``(raw - intercept) / slope``; ``residual`` with
    ``raw - (slope * age + intercept) + age`` and needs the chronological age.
    """

    slope: float
    intercept: float
    variant: BiasVariant = "inverse"

    def __post_init__(self):
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("bias model coefficients must be finite")
        if abs(self.slope) <= 1e-6:
            raise DegenerateInputError(f"bias slope {self.slope} is too close to zero")
        if self.variant not in ("inverse", "residual"):
            raise ValueError(f"unknown bias variant '{self.variant}'")

    def to_dict(self) -> Dict[str, object]:
        return {"slope": self.slope, "intercept": self.intercept, "variant": self.variant}


def ols_slope(x: Sequence[float], y: Sequence[float]) -> float:
    features = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    reg = LinearRegression().fit(features, np.asarray(y, dtype=np.float64))
    return float(reg.coef_[0])


def fit_bias(
    ages: Sequence[float], predictions: Sequence[float], variant: BiasVariant = "inverse"
) -> BiasModel:
    """
    Ordinary least squares of raw prediction on chronological age.

    Raises:
        DegenerateInputError: With fewer than 3 points or constant ages.
    """
    x = np.asarray(ages, dtype=np.float64)
    y = np.asarray(predictions, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise DegenerateInputError("bias fit needs at least 3 paired ages and predictions")
    if np.ptp(x) == 0:
        raise DegenerateInputError("bias fit needs distinct ages (zero age variance)")
    reg = LinearRegression().fit(x.reshape(-1, 1), y)
    return BiasModel(float(reg.coef_[0]), float(reg.intercept_), variant)


def fit_bias_records(
    records: Iterable[SubjectRecord], variant: BiasVariant = "inverse"
) -> BiasModel:
    """Fit on records that carry ``predicted_age`` (the validation split)."""
    records = list(records)
    missing = [r.id for r in records if r.predicted_age is None]
    if missing:
        raise MissingArtifactError(
            "bias", f"predicted_age of subjects {missing[:5]}", "run the predict stage"
        )
    return fit_bias([r.age for r in records], [r.predicted_age for r in records], variant)


def apply_bias(model: BiasModel, raw_pred, age=None):
    """Bias-corrected prediction(s); ``age`` is required by the residual variant."""
    raw = np.asarray(raw_pred, dtype=np.float64)
    if model.variant == "inverse":
        corrected = (raw - model.intercept) / model.slope
    else:
        if age is None:
            raise ValueError("the residual bias variant needs chronological ages")
        age = np.asarray(age, dtype=np.float64)
        corrected = raw - (model.slope * age + model.intercept) + age
    return float(corrected) if corrected.ndim == 0 else corrected


def correct_records(
    model: BiasModel,
    records: Iterable[SubjectRecord],
    raw_field: str = "predicted_age",
    out_field: str = "corrected_age",
) -> List[SubjectRecord]:
    out = []
    for r in records:
        raw = getattr(r, raw_field)
        if raw is None:
            out.append(r)
            continue
        out.append(r.updated(**{out_field: apply_bias(model, raw, r.age)}))
    return out


@dataclass
class MetricsTable:
    """
    Per-cell and overall MAE, in Table-1 row order.

    ``frame`` columns: category, sex, n, mean_pred, model and optionally
    model_25d; NaN marks an empty cell.
    """

    frame: pd.DataFrame
    training_samples: Dict[str, Optional[int]] = field(default_factory=dict)

    def to_csv(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format="%.6f", na_rep="")
        return path

    def overall(self, column: str = "model") -> float:
        return float(self.frame.loc[self.frame["category"] == "Overall", column].iloc[0])

    def render(self) -> str:
        """Aligned-text table with Mean Pred., optional 2.5D and model columns."""
        columns = [("mean_pred", "Mean Pred.")]
        if "model_25d" in self.frame.columns:
            columns.append(("model_25d", "2.5D"))
        columns.append(("model", "Ours"))
        titles = "".join(f"{title:>13}" for _, title in columns)
        header = f"{'Category':<12}{'Sex':<5}{'N':>6}" + titles
        lines = [header, "-" * len(header)]
        for row in self.frame.itertuples(index=False):
            cells = "".join(
                f"{'':>13}" if pd.isna(getattr(row, col)) else f"{getattr(row, col):>13.3f}"
                for col, _ in columns
            )
            lines.append(f"{row.category:<12}{row.sex:<5}{int(row.n):>6}" + cells)
        if self.training_samples:
            lines.append("-" * len(header))
            samples = "".join(
                f"{_count(self.training_samples.get(col)):>13}" for col, _ in columns
            )
            lines.append(f"{'Nr. training samples':<23}" + samples)
        return "\n".join(lines)


def _count(value: Optional[int]) -> str:
    return "N/A" if value is None else f"{value:,}"


def _require_field(records: Sequence[SubjectRecord], name: str) -> None:
    missing = [r.id for r in records if getattr(r, name) is None]
    if missing:
        raise MissingArtifactError(
            "report", f"{name} of subjects {missing[:5]}", "run the bias stage"
        )


def _mae(values: Sequence[float]) -> float:
    return float(np.mean(np.abs(values))) if len(values) else float("nan")


def metrics(
    records: Sequence[SubjectRecord],
    train_records: Sequence[SubjectRecord],
    field_name: str = "corrected_age",
    field_25d: Optional[str] = None,
) -> MetricsTable:
    """
    MAE per sex x BMI cell and overall for the model, the mean-prediction
    baseline (training-split cell means) and optionally the 2.5D model.
    """
    records = sorted(records, key=lambda r: r.id)
    _require_field(records, field_name)
    if field_25d is not None:
        _require_field(records, field_25d)
    train_ages = {
        cell: [r.age for r in train_records if (r.bmi_group, r.sex) == cell]
        for cell in TABLE_CELLS
    }
    fallback = float(np.mean([r.age for r in train_records])) if train_records else float("nan")
    baseline = {cell: float(np.mean(a)) if a else fallback for cell, a in train_ages.items()}

    def row(category: str, sex: str, members: Sequence[SubjectRecord]) -> Dict[str, object]:
        out = {
            "category": category,
            "sex": sex,
            "n": len(members),
            "mean_pred": _mae([baseline[(r.bmi_group, r.sex)] - r.age for r in members]),
            "model": _mae([getattr(r, field_name) - r.age for r in members]),
        }
        if field_25d is not None:
            out["model_25d"] = _mae([getattr(r, field_25d) - r.age for r in members])
        return out

    rows = [
        row(bmi.capitalize(), sex, [r for r in records if (r.bmi_group, r.sex) == (bmi, sex)])
        for bmi, sex in TABLE_CELLS
    ]
    rows.append(row("Overall", "M+F", records))
    columns = ["category", "sex", "n", "mean_pred"]
    columns += (["model_25d"] if field_25d else []) + ["model"]
    return MetricsTable(pd.DataFrame(rows, columns=columns))


def gap_table(
    records: Iterable[SubjectRecord], aligned: float = 0.5, accelerated: float = 4.0
) -> pd.DataFrame:
    """Per-subject age gap (corrected - age) and its band, in id order."""
    rows = []
    for r in sorted(records, key=lambda rec: rec.id):
        delta = age_gap(r)
        rows.append(
            {
                "id": r.id,
                "age": r.age,
                "raw": r.predicted_age,
                "corrected": r.corrected_age,
                "delta": delta,
                "band": gap_band(delta, aligned, accelerated) or "unassigned",
                "sex": r.sex,
                "bmi_group": r.bmi_group,
            }
        )
    return pd.DataFrame(
        rows, columns=["id", "age", "raw", "corrected", "delta", "band", "sex", "bmi_group"]
    )


def scatter_export(
    records: Iterable[SubjectRecord], path: PathLike, aligned: float = 0.5, accelerated: float = 4.0
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gap_table(records, aligned, accelerated).to_csv(path, index=False, float_format="%.6f")
    return path


def top_gap_examples(
    records: Iterable[SubjectRecord], k: int = 3
) -> Dict[str, List[SubjectRecord]]:
    """The ``k`` most accelerated, most decelerated and best aligned subjects."""
    records = sorted(records, key=lambda r: r.id)
    return {
        "accelerated": sorted(records, key=lambda r: (-age_gap(r), r.id))[:k],
        "decelerated": sorted(records, key=lambda r: (age_gap(r), r.id))[:k],
        "aligned": sorted(records, key=lambda r: (abs(age_gap(r)), r.id))[:k],
    }


def _as_array(v: Union[Volume3, np.ndarray]) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume3) else v, dtype=np.float64)


def mask_mean(v: Union[Volume3, np.ndarray], mask: Union[Volume3, np.ndarray]) -> float:
    values, m = _as_array(v), _as_array(mask) > 0.5
    if values.shape != m.shape:
        raise ShapeError(f"volume {values.shape} and mask {m.shape} differ")
    if not m.any():
        raise ValueError("mask is empty")
    return float(values[m].mean())


def localization_score(cam_or_atlas: Union[Volume3, np.ndarray], gt: GroundTruth) -> float:
    """
    Mean importance inside the aging mask over mean importance in the rest of the body.

    Returns ``inf`` when the outside mean is below the floor and the inside
    mean is positive, and 0.0 when both are zero.

    Raises:
        ShapeError: If dims differ.
        ValueError: If either region is empty.
    """
    values = _as_array(cam_or_atlas)
    aging = _as_array(gt.aging_mask) > 0.5
    body = _as_array(gt.body_mask) > 0.5
    if values.shape != aging.shape:
        raise ShapeError(f"volume {values.shape} and masks {aging.shape} differ")
    outside = body & ~aging
    if not aging.any() or not outside.any():
        raise ValueError("localization needs non-empty aging and remaining-body regions")
    inside_mean = float(values[aging].mean())
    outside_mean = float(values[outside].mean())
    if outside_mean < SCORE_FLOOR:
        return math.inf if inside_mean > 0 else 0.0
    return inside_mean / outside_mean


def localization_row(label: str, atlas_cam: Volume3, gt: GroundTruth, **extra) -> Dict[str, object]:
    """One row of the localization table, with per-component means."""
    row = {"atlas": label, **extra}
    row["score"] = localization_score(atlas_cam, gt)
    row["aging_fraction"] = gt.aging_fraction
    for name in ("spine", "heart", "muscle"):
        row[f"{name}_mean"] = mask_mean(atlas_cam, getattr(gt, f"{name}_mask"))
    return row


def predictions_frame(records: Iterable[SubjectRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records])
