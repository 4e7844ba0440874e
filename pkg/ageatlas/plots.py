"""Report figures (PNG) drawn with matplotlib's non-interactive backend."""

from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .agenet import EpochRecord  # noqa: E402
from .analysis import TABLE_CELLS  # noqa: E402
from .atlas import ImportanceAtlas  # noqa: E402
from .manifest import SubjectRecord  # noqa: E402
from .volume import PLANE_AXES, Volume3, overlay_image  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _identity_line(ax, lo: float, hi: float) -> None:
    ax.plot([lo, hi], [lo, hi], color="red", linewidth=1, label="identity")


def bias_correction_figure(records: Sequence[SubjectRecord], path: PathLike) -> Path:
    """Predicted vs chronological age before and after bias correction."""
    ages = np.array([r.age for r in records], dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5), sharey=True)
    lo, hi = ages.min() - 5, ages.max() + 5
    for ax, attr, title in zip(axes, ("predicted_age", "corrected_age"), ("Raw", "Bias-corrected")):
        values = np.array([getattr(r, attr) for r in records], dtype=float)
        ax.scatter(ages, values, s=8, alpha=0.7)
        _identity_line(ax, lo, hi)
        ax.set_xlim(lo, hi)
        ax.set_title(title)
        ax.set_xlabel("Chronological age")
        ax.grid(True)
    axes[0].set_ylabel("Predicted age")
    return _save(fig, path)


def group_scatter_figure(records: Sequence[SubjectRecord], path: PathLike) -> Path:
    """One panel per sex x BMI cell of corrected prediction vs age."""
    fig, axes = plt.subplots(3, 2, figsize=(8, 10), sharex=True, sharey=True)
    ages = [r.age for r in records]
    lo, hi = min(ages) - 5, max(ages) + 5
    for ax, (bmi, sex) in zip(axes.ravel(), TABLE_CELLS):
        members = [r for r in records if (r.bmi_group, r.sex) == (bmi, sex)]
        ax.scatter([r.age for r in members], [r.corrected_age for r in members], s=8)
        _identity_line(ax, lo, hi)
        ax.set_title(f"{bmi} {sex} (n={len(members)})")
        ax.grid(True)
    fig.supxlabel("Chronological age")
    fig.supylabel("Corrected predicted age")
    return _save(fig, path)


def training_curve(history: Sequence[EpochRecord], path: PathLike) -> Path:
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.train_loss for h in history], label="train MAE")
    ax.plot(epochs, [h.val_mae for h in history], label="val MAE")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("MAE (years)")
    ax.legend()
    ax.grid(True)
    return _save(fig, path)


def atlas_sheet(
    atlases: Sequence[ImportanceAtlas],
    slices: Mapping[str, Sequence[int]],
    path: PathLike,
    alpha: float = 0.5,
) -> Path:
    """All groups (rows) across the configured planes and slices (columns)."""
    panels: List[Tuple[str, int]] = [(plane, i) for plane, idx in slices.items() for i in idx]
    fig, axes = plt.subplots(
        len(atlases), len(panels), figsize=(1.6 * len(panels), 2.4 * len(atlases)), squeeze=False
    )
    for row, atlas in zip(axes, atlases):
        for ax, (plane, index) in zip(row, panels):
            axis = PLANE_AXES[plane]
            ax.imshow(overlay_image(atlas.mean_image, atlas.mean_cam, axis, index, alpha))
            ax.set_xticks([])
            ax.set_yticks([])
        row[0].set_ylabel(atlas.key.label, fontsize=8)
    for ax, (plane, index) in zip(axes[0], panels):
        ax.set_title(f"{plane} {index}", fontsize=8)
    return _save(fig, path)


def gap_examples_figure(
    atlases: Mapping[str, ImportanceAtlas],
    examples: Mapping[str, Sequence[Tuple[SubjectRecord, Volume3, Volume3]]],
    plane: str,
    index: int,
    path: PathLike,
    alpha: float = 0.5,
) -> Path:
    """
    Per gap band: the band's aggregated atlas followed by individual examples
    (record, warped image, warped CAM).
    """
    bands = [b for b in ("aligned", "accelerated", "decelerated") if b in atlases or b in examples]
    width = 1 + max((len(examples.get(b, ())) for b in bands), default=0)
    fig, axes = plt.subplots(
        len(bands), width, figsize=(2.0 * width, 3.0 * len(bands)), squeeze=False
    )
    axis = PLANE_AXES[plane]
    for row, band in zip(axes, bands):
        for ax in row:
            ax.axis("off")
        if band in atlases:
            atlas = atlases[band]
            row[0].imshow(overlay_image(atlas.mean_image, atlas.mean_cam, axis, index, alpha))
            row[0].set_title(f"{band} (n={atlas.n_contributors})", fontsize=8)
        for ax, (record, image, cam) in zip(row[1:], examples.get(band, ())):
            ax.imshow(overlay_image(image, cam, axis, index, alpha))
            delta = float("nan")
            if record.corrected_age is not None:
                delta = record.corrected_age - record.age
            ax.set_title(f"id {record.id}, gap {delta:+.1f}", fontsize=8)
    return _save(fig, path)


def spine_trend_figure(values: Dict[str, float], path: PathLike) -> Path:
    """Spine-mask importance per age band."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(list(values), list(values.values()))
    ax.set_ylabel("Mean spine importance")
    ax.grid(True, axis="y")
    return _save(fig, path)
