"""
2.5D projection baseline.

Every volume collapses to two mean-intensity projections laid out with the
longitudinal axis second:

    coronal  = mean over z, shape (nx, ny)
    sagittal = mean over x, transposed to (nz, ny)

Both channels are zero-padded along the first axis to max(nx, nz). A 2D
instance of :class:`~ageatlas.agenet.AgeNet` with two input channels is
trained on them with the same optimizer contract as the 3D model.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .agenet import AgeNet, EpochRecord, NetConfig, TrainConfig, fit, load_image, predict_manifest
from .errors import MissingArtifactError
from .gradcam import Normalization, grad_cam
from .manifest import Manifest, SubjectRecord
from .volume import Volume3, read_vol, write_vol

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Baseline25DConfig(BaseModel):
    """Network and schedule of the projection baseline."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    epochs: int = Field(30, ge=1)
    channels: Tuple[int, int, int] = (8, 16, 32)
    hidden: int = Field(256, ge=1)
    seed: int = 0


@dataclass(frozen=True)
class Projection2D:
    """Two-channel projection image of shape (2, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"projection must have shape (2, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or float(arr.min()) < 0:
            raise ValueError("projection values must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def coronal(self) -> np.ndarray:
        return self.data[0]

    @property
    def sagittal(self) -> np.ndarray:
        return self.data[1]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def to_volume(self) -> Volume3:
        """Stored as a volume whose third axis (nz = 2) holds the channels."""
        return Volume3(np.moveaxis(self.data, 0, -1))

    @classmethod
    def from_volume(cls, v: Volume3) -> "Projection2D":
        if v.dims[2] != 2:
            raise ValueError(f"projection volumes have nz = 2, got dims {v.dims}")
        return cls(np.moveaxis(v.data, -1, 0))


def projection_dims(dims: Sequence[int]) -> Tuple[int, int]:
    nx, ny, nz = dims
    return max(nx, nz), ny


def project(v: Volume3) -> Projection2D:
    """Mean-intensity coronal and sagittal projections of ``v``."""
    nx, ny, nz = v.dims
    width, _ = projection_dims(v.dims)
    data = v.data.astype(np.float64)
    out = np.zeros((2, width, ny))
    out[0, :nx] = data.mean(axis=2)
    out[1, :nz] = data.mean(axis=0).T
    return Projection2D(out)


def projection_filename(subject_id: int) -> str:
    return f"projections/subject_{subject_id:05d}.vol"


def project_cohort(manifest: Manifest, jobs: int = 1) -> Manifest:
    """Write each subject's projection beside the cohort and record ``projection_path``."""

    def run(record: SubjectRecord) -> SubjectRecord:
        projection = project(load_image(manifest, record, "baseline25d"))
        path = write_vol(projection.to_volume(), manifest.resolve(projection_filename(record.id)))
        relative = Path(os.path.relpath(path, manifest.base_dir)).as_posix()
        return record.updated(projection_path=relative)

    manifest.resolve("projections").mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        updated = list(pool.map(run, manifest))
    return manifest.merge(updated)


def load_projection(manifest: Manifest, record: SubjectRecord) -> np.ndarray:
    if record.projection_path is None:
        raise MissingArtifactError(
            "baseline25d", f"projection_path of subject {record.id}", "project the cohort first"
        )
    path = manifest.resolve(record.projection_path)
    if not path.exists():
        raise MissingArtifactError("baseline25d", str(path), "project the cohort first")
    return Projection2D.from_volume(read_vol(path)).data


def net25d_config(
    image_dims: Sequence[int], config: Optional[Baseline25DConfig] = None
) -> NetConfig:
    config = config or Baseline25DConfig()
    return NetConfig(
        channels=config.channels,
        hidden=config.hidden,
        input_dims=projection_dims(image_dims),
        in_channels=2,
        seed=config.seed,
    )


def train25d(
    manifest: Manifest,
    config: Optional[Baseline25DConfig] = None,
    train_config: Optional[TrainConfig] = None,
    image_dims: Sequence[int] = (32, 64, 24),
    jobs: int = 1,
) -> Tuple[AgeNet, List[EpochRecord]]:
    """
    Train the projection network on the ``train`` split of a projected cohort.

    The fc2 bias starts at the training-set mean age, as for the 3D model.
    """
    config = config or Baseline25DConfig()
    splits = {}
    for split in ("train", "val"):
        records = [r for r in manifest if r.split == split]
        splits[split] = [(load_projection(manifest, r), float(r.age)) for r in records]
    mean_age = float(np.mean([age for _, age in splits["train"]])) if splits["train"] else 0.0
    net = AgeNet(net25d_config(image_dims, config), mean_age=mean_age)
    logger.info("Training 2.5D baseline on %d projections", len(splits["train"]))
    history = fit(net, splits["train"], splits["val"], train_config, config.epochs, jobs)
    return net, history


def predict25d(net: AgeNet, manifest: Manifest, jobs: int = 1) -> Manifest:
    """Raw 2.5D predictions stored in ``predicted_age_25d``."""
    return predict_manifest(net, manifest, jobs, loader=load_projection, field="predicted_age_25d")


def cam25d(
    net: AgeNet, projection: Union[Projection2D, np.ndarray], normalize: Normalization = "max"
) -> np.ndarray:
    """2D Grad-CAM map of shape (H, W) on the third 2D stage."""
    data = projection.data if isinstance(projection, Projection2D) else projection
    return grad_cam(net, data, normalize)
